"""The full differentiable graph: adapters, unified sequence, block stack, losses.

A batch is a list of scenes. Each scene contributes its tokens in the
canonical modality order and every token is scored against the scene's
answer id, so the cross-entropy is a per-position sum as in next-token
training. The balancing loss is taken over all tokens of the batch.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numkit as nk
from .errors import ConfigError
from .moe import DEFAULT_MOE_LAYERS, MoELayer, ModelStack, RoutingTrace, init_experts_from_ffn
from .objective import (balance_from_probs, balance_grad, cross_entropy, cross_entropy_grad,
                        total_loss)
from .tokens import (DEFAULT_DIMS, MODALITIES, SCENE_MODALITIES, Adapter, UnifiedSequence,
                     adapt, assemble_unified)


@dataclass
class ModelConfig:
    d_txt: int = 32
    adapter_hidden: int = 64
    ffn_hidden: int = 64
    vocab: int = 4
    n_layers: int = 4
    moe_layers: tuple = DEFAULT_MOE_LAYERS
    dims: dict = field(default_factory=lambda: dict(DEFAULT_DIMS))
    activation: str = "gelu"
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.moe_layers = tuple(int(i) for i in self.moe_layers)
        self.dims = {m: int(self.dims.get(m, DEFAULT_DIMS[m])) for m in MODALITIES}
        if self.dims["text"] != self.d_txt:
            raise ConfigError(f"text width {self.dims['text']} must equal d_txt {self.d_txt}")
        bad = [i for i in self.moe_layers if not 0 <= i < self.n_layers]
        if bad:
            raise ConfigError(f"MoE positions {bad} outside [0, {self.n_layers})")

    def to_dict(self):
        d = asdict(self)
        d["moe_layers"] = list(self.moe_layers)
        return d


class FusionModel:
    def __init__(self, config: ModelConfig, adapters, stack: ModelStack):
        self.config = config
        self.adapters = dict(adapters)
        self.stack = stack

    @classmethod
    def build(cls, config: ModelConfig, seed=0):
        """Fresh dense (stage-one) model."""
        rng = np.random.default_rng([seed, 0])
        adapters = {m: Adapter(m, config.dims[m], config.adapter_hidden, config.d_txt, rng,
                               activation=config.activation, eps=config.ln_eps)
                    for m in SCENE_MODALITIES}
        stack = ModelStack.dense(config.d_txt, config.ffn_hidden, config.vocab,
                                 config.n_layers, rng)
        return cls(config, adapters, stack)

    def convert_to_moe(self, n_experts, k, jitter=0.0, seed=0):
        """Replace the dense blocks at ``config.moe_layers`` by replicated experts."""
        for li in self.config.moe_layers:
            blk = self.stack.layers[li]
            if isinstance(blk, MoELayer):
                raise ConfigError(f"layer {li} is already a MoE layer")
            rng = np.random.default_rng([seed, 2, li])
            self.stack.layers[li] = init_experts_from_ffn(blk, n_experts, jitter, k, rng)

    def named_params(self) -> dict[str, nk.Param]:
        out = {}
        for m in SCENE_MODALITIES:
            for name, p in self.adapters[m].params().items():
                out[f"adapters.{m}.{name}"] = p
        out.update(self.stack.params())
        return out

    def zero_grads(self):
        nk.zero_grads(self.named_params().values())

    # -- forward -----------------------------------------------------------

    def unified(self, sample) -> UnifiedSequence:
        """Library-level path: adapt each block and assemble one sequence."""
        aligned = {m: adapt(self.adapters[m], sample[m]) for m in SCENE_MODALITIES if m in sample}
        text = sample["text"].features if "text" in sample else np.zeros((0, self.config.d_txt))
        return assemble_unified(text, aligned)

    def _encode(self, samples):
        placement = {m: [] for m in MODALITIES}
        stacked = {m: [] for m in MODALITIES}
        tags, owner = [], []
        pos = 0
        for s, sample in enumerate(samples):
            for m in MODALITIES:
                if m not in sample:
                    continue
                n = sample[m].count
                placement[m].extend(range(pos, pos + n))
                stacked[m].append(sample[m].features)
                tags += [m] * n
                owner += [s] * n
                pos += n
        x = np.zeros((pos, self.config.d_txt))
        caches = {}
        for m in MODALITIES:
            dest = np.array(placement[m], dtype=np.int64)
            if dest.size == 0:
                continue
            feats = np.concatenate(stacked[m], axis=0)
            if m == "text":
                if feats.shape[1] != self.config.d_txt:
                    raise ConfigError(f"text width {feats.shape[1]} != d_txt {self.config.d_txt}")
                x[dest] = feats
            else:
                y, c = self.adapters[m].forward(feats)
                x[dest] = y
                caches[m] = (dest, c)
        return x, tuple(tags), np.array(owner, dtype=np.int64), caches

    def logits(self, samples):
        x, tags, owner, _ = self._encode(samples)
        return self.stack.forward(x)[0]

    def trace(self, samples, offset=0) -> RoutingTrace:
        x, tags, _, _ = self._encode(samples)
        _, cache = self.stack.forward(x)
        return self.stack.trace_from_cache(cache, tags, offset)

    def loss(self, samples, labels, lam, balance_only=False):
        return self.loss_and_grads(samples, labels, lam, backward=False,
                                   balance_only=balance_only)[0]

    def loss_and_grads(self, samples, labels, lam, backward=True, balance_only=False):
        """Total loss of a batch; with ``backward`` the grads are overwritten.

        Returns ``(report, extras)`` where extras carries the per-layer
        LoadStats and the routing trace of the batch.
        """
        x, tags, owner, enc = self._encode(samples)
        targets = np.asarray(labels, dtype=np.int64)[owner]
        logits, cache = self.stack.forward(x)
        ce = cross_entropy(logits, targets)
        n = targets.size
        moe = self.stack.moe_layer_indices
        per_layer, stats, dprobs = [], {}, {}
        for li in moe:
            val, st = balance_from_probs(cache["blocks"][li]["probs"], li)
            per_layer.append(val)
            stats[li] = st
            if backward and lam > 0:
                dprobs[li] = (lam / len(moe)) * balance_grad(st, n)
        l_ce = 0.0 if balance_only else ce.mean
        report = total_loss(l_ce, per_layer, lam)
        if backward:
            self.zero_grads()
            scale = 0.0 if balance_only else 1.0 / n
            dlogits = cross_entropy_grad(logits, targets, scale)
            dx = self.stack.backward(cache, dlogits, dprobs)
            for m, (dest, c) in enc.items():
                self.adapters[m].backward(c, dx[dest])
        return report, {"stats": stats, "ce": ce, "cache": cache, "tags": tags}

    def routing_margin(self, samples) -> float:
        """Smallest probability gap at a top-1 or top-k boundary over all MoE layers.

        The balance loss and the dispatch are piecewise smooth: a finite
        difference step larger than this gap can cross a kink.
        """
        x, _, _, _ = self._encode(samples)
        _, cache = self.stack.forward(x)
        gaps = [np.inf]
        for li in self.stack.moe_layer_indices:
            p = -np.sort(-cache["blocks"][li]["probs"], axis=1)
            gaps.append(float(np.min(p[:, 0] - p[:, 1])))
            k = self.stack.layers[li].k
            if k < p.shape[1]:
                gaps.append(float(np.min(p[:, k - 1] - p[:, k])))
        return min(gaps)
