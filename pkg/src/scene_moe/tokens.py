"""Modality-tagged tokens, adapters, and unified-sequence assembly.

Tokens are fused in a fixed canonical order: text first, then the five
scene modalities. Text features are already at the shared width and pass
through unchanged; every other modality goes through its own two-layer
projection head.

Line-delimited JSON formats (one object per line, UTF-8, LF endings):

* unified sequence: ``{"modality": "pc", "values": [f, ...]}`` per token
* raw feature blocks: ``{"modality": "pc", "values": [[f, ...], ...]}`` per block
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numkit as nk
from .errors import ConfigError, DimensionError

MODALITIES = ("text", "rgb", "rgbd", "bev", "pc", "voxel")
SCENE_MODALITIES = MODALITIES[1:]

# Structure per modality: rgbd has no output normalisation.
NORMALIZED = frozenset({"rgb", "bev", "pc", "voxel"})

# Production widths of the adapters (input -> shared width 4096); reference only.
REFERENCE_ADAPTER_DIMS = {"rgb": 12288, "rgbd": 1024, "bev": 1536, "pc": 256}
REFERENCE_TEXT_DIM = 4096


def check_modality(tag: str) -> str:
    if tag not in MODALITIES:
        raise ConfigError(f"unknown modality {tag!r}; expected one of {MODALITIES}")
    return tag


@dataclass
class RawFeatureBlock:
    modality: str
    features: np.ndarray

    def __post_init__(self):
        check_modality(self.modality)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DimensionError(f"{self.modality} block must be 2-D, got {self.features.shape}")

    @property
    def count(self) -> int:
        return self.features.shape[0]


class Adapter:
    """Linear -> activation -> Linear [-> LayerNorm], applied row-wise."""

    def __init__(self, modality, in_dim, hidden, out_dim, rng=None, norm=None,
                 activation="gelu", eps=1e-5):
        self.modality = check_modality(modality)
        rng = np.random.default_rng(0) if rng is None else rng
        self.activation = activation
        self.eps = eps
        self.in_dim = in_dim
        self.out_dim = out_dim
        use_norm = modality in NORMALIZED if norm is None else norm
        self.w1 = nk.Param(rng.standard_normal((in_dim, hidden)) / np.sqrt(in_dim))
        self.b1 = nk.Param(np.zeros(hidden))
        self.w2 = nk.Param(rng.standard_normal((hidden, out_dim)) / np.sqrt(hidden))
        self.b2 = nk.Param(np.zeros(out_dim))
        if use_norm:
            self.ln_gain = nk.Param(np.ones(out_dim))
            self.ln_bias = nk.Param(np.zeros(out_dim))
        else:
            self.ln_gain = self.ln_bias = None

    @property
    def has_norm(self) -> bool:
        return self.ln_gain is not None

    def params(self) -> dict[str, nk.Param]:
        out = {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}
        if self.has_norm:
            out["ln_gain"] = self.ln_gain
            out["ln_bias"] = self.ln_bias
        return out

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ConfigError(
                f"{self.modality} adapter expects width {self.in_dim}, got shape {x.shape}")
        pre = nk.matmul(x, self.w1.value) + self.b1.value
        act = nk.activation(self.activation, pre)
        y = nk.matmul(act, self.w2.value) + self.b2.value
        ln_cache = None
        if self.has_norm:
            y, ln_cache = nk.layernorm_rows(y, self.ln_gain.value, self.ln_bias.value, self.eps)
        return y, (x, pre, act, ln_cache)

    def backward(self, cache, dy):
        """Accumulate parameter gradients; return the gradient w.r.t. the input."""
        x, pre, act, ln_cache = cache
        if ln_cache is not None:
            dy, dg, db = nk.layernorm_backward(ln_cache, dy)
            self.ln_gain.grad += dg
            self.ln_bias.grad += db
        self.w2.grad += nk.matmul(act.T, dy)
        self.b2.grad += dy.sum(axis=0)
        dpre = nk.matmul(dy, self.w2.value.T) * nk.activation_grad(self.activation, pre)
        self.w1.grad += nk.matmul(x.T, dpre)
        self.b1.grad += dpre.sum(axis=0)
        return nk.matmul(dpre, self.w1.value.T)


def adapt(adapter: Adapter, block: RawFeatureBlock) -> np.ndarray:
    """Project a raw block into the shared token width (``N_m x D_txt``)."""
    if block.modality != adapter.modality:
        raise ConfigError(f"block modality {block.modality!r} fed to {adapter.modality!r} adapter")
    if block.features.shape[1] != adapter.in_dim:
        raise ConfigError(
            f"{block.modality}: block width {block.features.shape[1]} != adapter input {adapter.in_dim}")
    return adapter.forward(block.features)[0]


@dataclass
class UnifiedSequence:
    tags: tuple
    values: np.ndarray

    def __post_init__(self):
        self.tags = tuple(check_modality(t) for t in self.tags)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(len(self.tags), -1)

    @property
    def n_uni(self) -> int:
        return len(self.tags)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def counts(self) -> dict[str, int]:
        c = Counter(self.tags)
        return {m: c.get(m, 0) for m in MODALITIES}

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"modality": t, "values": v.tolist()}) + "\n"
            for t, v in zip(self.tags, self.values))

    @classmethod
    def from_jsonl(cls, text: str, width: int | None = None) -> "UnifiedSequence":
        tags, rows = [], []
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            tags.append(rec["modality"])
            rows.append(rec["values"])
        if not rows:
            return cls((), np.zeros((0, width or 0)))
        return cls(tuple(tags), np.array(rows, dtype=np.float64))


def assemble_unified(text, aligned) -> UnifiedSequence:
    """Concatenate text tokens and adapted modality tokens in canonical order."""
    text = np.asarray(text, dtype=np.float64)
    text = text.reshape(0, text.shape[-1] if text.ndim == 2 else 0) if text.size == 0 else nk.as_matrix(text)
    width = None
    blocks = [("text", text)] + [(m, aligned[m]) for m in SCENE_MODALITIES if m in aligned]
    unknown = set(aligned) - set(SCENE_MODALITIES)
    if unknown:
        raise ConfigError(f"unexpected modalities in aligned map: {sorted(unknown)}")
    tags, parts = [], []
    for m, mat in blocks:
        mat = np.asarray(mat, dtype=np.float64)
        if mat.shape[0] == 0:
            continue
        if width is None:
            width = mat.shape[1]
        elif mat.shape[1] != width:
            raise DimensionError(f"{m} tokens have width {mat.shape[1]}, expected {width}")
        tags += [m] * mat.shape[0]
        parts.append(mat)
    if not parts:
        return UnifiedSequence((), np.zeros((0, 0)))
    return UnifiedSequence(tuple(tags), np.concatenate(parts, axis=0))


def blocks_to_jsonl(blocks) -> str:
    return "".join(
        json.dumps({"modality": b.modality, "values": b.features.tolist()}) + "\n" for b in blocks)


def blocks_from_jsonl(text: str) -> list[RawFeatureBlock]:
    out = []
    for line in text.splitlines():
        if line.strip():
            rec = json.loads(line)
            vals = np.array(rec["values"], dtype=np.float64)
            if vals.size == 0:
                vals = vals.reshape(0, 0)
            out.append(RawFeatureBlock(rec["modality"], vals))
    return out


DEFAULT_COUNTS = {"text": 2, "rgb": 3, "rgbd": 2, "bev": 2, "pc": 4, "voxel": 3}
DEFAULT_DIMS = {"text": 32, "rgb": 24, "rgbd": 16, "bev": 20, "pc": 8, "voxel": 12}


@dataclass
class FeatureSpec:
    """Token counts and raw widths per modality for one synthetic scene."""

    counts: dict = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    dims: dict = field(default_factory=lambda: dict(DEFAULT_DIMS))

    def __post_init__(self):
        for name, table in (("counts", self.counts), ("dims", self.dims)):
            extra = set(table) - set(MODALITIES)
            if extra:
                raise ConfigError(f"unknown modalities in {name}: {sorted(extra)}")
        self.counts = {m: int(self.counts.get(m, 0)) for m in MODALITIES}
        self.dims = {m: int(self.dims.get(m, DEFAULT_DIMS[m])) for m in MODALITIES}
        if any(c < 0 for c in self.counts.values()):
            raise ConfigError("token counts must be >= 0")
        if any(d < 1 for d in self.dims.values()):
            raise ConfigError("feature dims must be >= 1")


@dataclass
class SyntheticTaskSpec:
    """Gaussian-cluster task: the answer is the cluster id shared by the
    tokens of ``label_modalities``; other modalities draw clusters at random.
    """

    n_samples: int = 128
    n_classes: int = 4
    label_modalities: tuple = ("pc",)
    separation: float = 4.0
    noise: float = 1.0
    text_scale: float = 0.25

    def __post_init__(self):
        self.label_modalities = tuple(check_modality(m) for m in self.label_modalities)
        if self.n_classes < 2 or self.n_samples < 0:
            raise ConfigError("need n_classes >= 2 and n_samples >= 0")


def synth_features(seed, spec: FeatureSpec | None = None, task: SyntheticTaskSpec | None = None):
    """Draw ``task.n_samples`` scenes. Returns ``(samples, labels)``.

    Each sample maps modality -> RawFeatureBlock. Centroids are drawn per
    modality from N(0, separation^2 I); tokens add N(0, noise^2 I).
    Text tokens are additionally scaled by ``text_scale`` since they skip
    the adapters and enter the residual stream directly.
    """
    spec = spec or FeatureSpec()
    task = task or SyntheticTaskSpec()
    rng = np.random.default_rng(seed)
    centroids = {m: task.separation * rng.standard_normal((task.n_classes, spec.dims[m]))
                 for m in MODALITIES}
    labels = rng.integers(task.n_classes, size=task.n_samples)
    samples = []
    for y in labels:
        sample = {}
        for m in MODALITIES:
            n = spec.counts[m]
            if m in task.label_modalities:
                ids = np.full(n, y)
            else:
                ids = rng.integers(task.n_classes, size=n)
            feats = centroids[m][ids] + task.noise * rng.standard_normal((n, spec.dims[m]))
            if m == "text":
                feats = feats * task.text_scale
            sample[m] = RawFeatureBlock(m, feats.reshape(n, spec.dims[m]))
        samples.append(sample)
    return samples, labels.astype(np.int64)


def read_sequence(path) -> UnifiedSequence:
    return UnifiedSequence.from_jsonl(Path(path).read_text())
