"""Sparse mixture-of-experts layer and the residual block stack.

Routing follows a literal top-k rule: a token's output is the sum of the
selected experts' outputs weighted by the *unrenormalised* softmax
probabilities, so the weights of a top-k mixture sum to less than one
unless ``k == E``. Ties in top-k selection and argmax are broken towards
the lower expert index. The selection itself is treated as a constant
mask in the backward pass; gradients flow through the probabilities and
the selected experts only.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .errors import ConfigError, DimensionError, DomainError

# Layer positions of the MoE blocks in the 32-block production backbone.
REFERENCE_MOE_LAYERS = (8, 12, 16, 20, 24, 28)
DEFAULT_MOE_LAYERS = (1, 3)


class Expert:
    """Gated MLP: ``down(silu(x @ gate) * (x @ up))``, no biases."""

    def __init__(self, gate, up, down):
        self.gate = nk.Param(gate)
        self.up = nk.Param(up)
        self.down = nk.Param(down)
        d, h = self.gate.shape
        if self.up.shape != (d, h) or self.down.shape != (h, d):
            raise DimensionError(
                f"inconsistent expert shapes gate={self.gate.shape} up={self.up.shape} "
                f"down={self.down.shape}")

    @classmethod
    def random(cls, d, hidden, rng, out_scale=0.1):
        """Fan-in scaled init; ``out_scale`` damps the residual branch."""
        return cls(rng.standard_normal((d, hidden)) / np.sqrt(d),
                   rng.standard_normal((d, hidden)) / np.sqrt(d),
                   out_scale * rng.standard_normal((hidden, d)) / np.sqrt(hidden))

    @property
    def dim(self) -> int:
        return self.gate.shape[0]

    def params(self) -> dict[str, nk.Param]:
        return {"gate": self.gate, "up": self.up, "down": self.down}

    def copy(self, cls=None):
        cls = cls or type(self)
        return cls(self.gate.value.copy(), self.up.value.copy(), self.down.value.copy())

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionError(f"expert expects width {self.dim}, got shape {x.shape}")
        hg = nk.matmul(x, self.gate.value)
        hu = nk.matmul(x, self.up.value)
        a = nk.silu(hg)
        m = a * hu
        return nk.matmul(m, self.down.value), (x, hg, hu, a, m)

    def backward(self, cache, dy):
        x, hg, hu, a, m = cache
        self.down.grad += nk.matmul(m.T, dy)
        dm = nk.matmul(dy, self.down.value.T)
        dhg = dm * hu * nk.silu_grad(hg)
        dhu = dm * a
        self.gate.grad += nk.matmul(x.T, dhg)
        self.up.grad += nk.matmul(x.T, dhu)
        return nk.matmul(dhg, self.gate.value.T) + nk.matmul(dhu, self.up.value.T)


class DenseFFN(Expert):
    """The dense feed-forward block that experts are replicated from."""


class Router:
    def __init__(self, weights):
        self.weights = nk.Param(weights)
        if self.weights.value.ndim != 2 or self.weights.shape[0] < 2:
            raise ConfigError(f"router needs at least 2 expert rows, got {self.weights.shape}")

    @property
    def n_experts(self) -> int:
        return self.weights.shape[0]

    def params(self):
        return {"router": self.weights}


def route(router: Router, token):
    """Return ``(scores, probs)`` for one token."""
    token = np.asarray(token, dtype=np.float64).reshape(-1)
    if token.size != router.weights.shape[1]:
        raise DimensionError(
            f"token width {token.size} != router width {router.weights.shape[1]}")
    scores = nk.matmul(token.reshape(1, -1), router.weights.value.T)[0]
    return scores, nk.softmax(scores)


def select_topk(probs, k: int) -> tuple:
    """Indices of the k largest probabilities, descending, lower index on ties."""
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    if not 1 <= k <= probs.size:
        raise DomainError(f"k={k} outside [1, {probs.size}]")
    return tuple(int(i) for i in np.argsort(-probs, kind="stable")[:k])


def _topk_rows(p, k):
    return np.argsort(-p, axis=1, kind="stable")[:, :k]


def expert_forward(expert: Expert, token):
    return expert.forward(np.asarray(token, dtype=np.float64).reshape(1, -1))[0][0]


@dataclass
class RoutingRecord:
    token_index: int
    modality: str
    layer_index: int
    probs: tuple
    selected: tuple
    top1: int

    def to_dict(self):
        return {"token_index": self.token_index, "modality": self.modality,
                "layer_index": self.layer_index, "probs": list(self.probs),
                "selected": list(self.selected), "top1": self.top1}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["token_index"]), str(d["modality"]), int(d["layer_index"]),
                   tuple(float(p) for p in d["probs"]), tuple(int(s) for s in d["selected"]),
                   int(d["top1"]))


class MoELayer:
    def __init__(self, router: Router, experts, k: int):
        self.router = router
        self.experts = list(experts)
        self.k = int(k)
        if len(self.experts) != router.n_experts:
            raise ConfigError(
                f"{len(self.experts)} experts but router has {router.n_experts} rows")
        if not 1 <= self.k <= len(self.experts):
            raise ConfigError(f"k={self.k} outside [1, {len(self.experts)}]")

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def dim(self) -> int:
        return self.router.weights.shape[1]

    def params(self) -> dict[str, nk.Param]:
        out = dict(self.router.params())
        for e, ex in enumerate(self.experts):
            for name, p in ex.params().items():
                out[f"experts.{e}.{name}"] = p
        return out

    def forward(self, x):
        """Batched forward over token rows. Returns ``(y, cache)``.

        ``cache["probs"]`` and ``cache["selected"]`` hold the routing of
        every row.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionError(f"MoE layer expects width {self.dim}, got shape {x.shape}")
        scores = nk.matmul(x, self.router.weights.value.T)
        probs = nk.softmax_rows(scores) if x.shape[0] else np.zeros((0, self.n_experts))
        selected = _topk_rows(probs, self.k)
        y = np.zeros_like(x)
        dispatch = []
        for e, expert in enumerate(self.experts):
            rows = np.nonzero((selected == e).any(axis=1))[0]
            if rows.size == 0:
                dispatch.append(None)
                continue
            out, c = expert.forward(x[rows])
            y[rows] += probs[rows, e, None] * out
            dispatch.append((rows, out, c))
        return y, {"x": x, "scores": scores, "probs": probs, "selected": selected,
                   "dispatch": dispatch}

    def backward(self, cache, dy, dprobs=None):
        """``dprobs`` adds any loss gradient taken directly w.r.t. the probabilities."""
        x, probs = cache["x"], cache["probs"]
        dp = np.zeros_like(probs) if dprobs is None else np.array(dprobs, dtype=np.float64)
        dx = np.zeros_like(x)
        for e, item in enumerate(cache["dispatch"]):
            if item is None:
                continue
            rows, out, c = item
            dp[rows, e] += np.sum(dy[rows] * out, axis=1)
            dx[rows] += self.experts[e].backward(c, probs[rows, e, None] * dy[rows])
        ds = nk.softmax_backward(probs, dp)
        self.router.weights.grad += nk.matmul(ds.T, x)
        dx += nk.matmul(ds, self.router.weights.value)
        return dx


def moe_forward(layer: MoELayer, token, token_index=0, modality="text", layer_index=0):
    """Route one token and aggregate its top-k expert outputs."""
    y, cache = layer.forward(np.asarray(token, dtype=np.float64).reshape(1, -1))
    probs = cache["probs"][0]
    sel = tuple(int(s) for s in cache["selected"][0])
    rec = RoutingRecord(token_index, modality, layer_index, tuple(probs.tolist()), sel,
                        int(np.argmax(probs)))
    return y[0], rec


def init_experts_from_ffn(ffn: DenseFFN, n_experts: int, jitter: float = 0.0, k: int = 2,
                          rng=None, router_scale: float = 0.02) -> MoELayer:
    """Replicate a dense FFN into ``n_experts`` experts behind a fresh router."""
    if n_experts < 2:
        raise ConfigError("need at least 2 experts")
    if jitter < 0:
        raise ConfigError("jitter must be >= 0")
    rng = np.random.default_rng(0) if rng is None else rng
    router = Router(router_scale * rng.standard_normal((n_experts, ffn.dim)))
    experts = []
    for _ in range(n_experts):
        ex = ffn.copy(Expert)
        if jitter > 0:
            for p in ex.params().values():
                p.value += jitter * rng.standard_normal(p.shape)
        experts.append(ex)
    return MoELayer(router, experts, k)


@dataclass
class RoutingTrace:
    records: list = field(default_factory=list)
    moe_layers: tuple = ()
    n_experts: int = 0
    k: int = 0

    def to_json(self) -> str:
        doc = {"E": self.n_experts, "k": self.k, "moe_layers": list(self.moe_layers),
               "records": [r.to_dict() for r in self.records]}
        return json.dumps(doc, indent=None) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RoutingTrace":
        doc = json.loads(text)
        return cls([RoutingRecord.from_dict(r) for r in doc["records"]],
                   tuple(int(i) for i in doc["moe_layers"]), int(doc["E"]), int(doc["k"]))


class ModelStack:
    """Residual blocks ``x <- x + block(x)`` followed by a linear head."""

    def __init__(self, layers, head):
        self.layers = list(layers)
        self.head = nk.Param(head)
        dims = {blk.dim for blk in self.layers}
        if len(dims) > 1:
            raise ConfigError(f"blocks disagree on width: {sorted(dims)}")
        if dims and self.head.shape[0] != dims.pop():
            raise ConfigError(f"head shape {self.head.shape} does not match block width")

    @classmethod
    def dense(cls, d, hidden, vocab, n_layers, rng):
        layers = [DenseFFN.random(d, hidden, rng) for _ in range(n_layers)]
        return cls(layers, rng.standard_normal((d, vocab)) / np.sqrt(d))

    @property
    def dim(self) -> int:
        return self.head.shape[0]

    @property
    def moe_layer_indices(self) -> tuple:
        return tuple(i for i, blk in enumerate(self.layers) if isinstance(blk, MoELayer))

    def params(self) -> dict[str, nk.Param]:
        out = {}
        for i, blk in enumerate(self.layers):
            for name, p in blk.params().items():
                out[f"layers.{i}.{name}"] = p
        out["head"] = self.head
        return out

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionError(f"stack expects width {self.dim}, got shape {x.shape}")
        caches = []
        for blk in self.layers:
            y, c = blk.forward(x)
            caches.append(c)
            x = x + y
        return nk.matmul(x, self.head.value), {"blocks": caches, "final": x}

    def backward(self, cache, dlogits, dprobs=None):
        """``dprobs`` maps MoE layer index -> gradient w.r.t. that layer's probs."""
        dprobs = dprobs or {}
        self.head.grad += nk.matmul(cache["final"].T, dlogits)
        dx = nk.matmul(dlogits, self.head.value.T)
        for i in reversed(range(len(self.layers))):
            blk, c = self.layers[i], cache["blocks"][i]
            if isinstance(blk, MoELayer):
                dx = dx + blk.backward(c, dx, dprobs.get(i))
            else:
                dx = dx + blk.backward(c, dx)
        return dx

    def trace_from_cache(self, cache, tags, offset=0) -> RoutingTrace:
        moe = self.moe_layer_indices
        records = []
        for t, tag in enumerate(tags):
            for li in moe:
                c = cache["blocks"][li]
                p = c["probs"][t]
                records.append(RoutingRecord(offset + t, tag, li, tuple(p.tolist()),
                                             tuple(int(s) for s in c["selected"][t]),
                                             int(np.argmax(p))))
        first = self.layers[moe[0]] if moe else None
        return RoutingTrace(records, moe, first.n_experts if first else 0,
                            first.k if first else 0)


def forward_stack(model: ModelStack, seq):
    """Run every token of a unified sequence through the stack.

    Returns ``(logits, trace)`` with one logit row per token.
    """
    logits, cache = model.forward(seq.values)
    return logits, model.trace_from_cache(cache, seq.tags)
