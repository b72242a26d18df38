"""Training objectives: token cross-entropy and the expert balancing loss."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

DEFAULT_LAMBDA = 0.01


@dataclass(frozen=True)
class CrossEntropy:
    total: float
    mean: float
    per_token: np.ndarray


def _log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_targets(logits, targets):
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.size:
        raise DomainError(f"{logits.shape[0]} logit rows but {targets.size} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise DomainError(f"target ids must lie in [0, {logits.shape[1]})")
    return logits, targets


def cross_entropy(logits, targets) -> CrossEntropy:
    """Summed negative log-likelihood of ``targets``, plus its per-token mean."""
    logits, targets = _check_targets(logits, targets)
    per = -_log_softmax(logits)[np.arange(targets.size), targets] if targets.size else np.zeros(0)
    total = float(per.sum())
    return CrossEntropy(total, total / targets.size if targets.size else 0.0, per)


def cross_entropy_grad(logits, targets, scale: float = 1.0):
    """Gradient of ``scale * sum_t CE_t`` w.r.t. the logits."""
    logits, targets = _check_targets(logits, targets)
    g = np.exp(_log_softmax(logits))
    g[np.arange(targets.size), targets] -= 1.0
    return scale * g


@dataclass
class LoadStats:
    layer_index: int
    p_hat: np.ndarray
    pi_bar: np.ndarray


def balance_from_probs(probs, layer_index=0):
    """Balancing loss ``E * sum_e p_hat_e * pi_bar_e`` from a ``N x E`` matrix."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise DomainError("balance loss needs at least one routed token")
    n, e = probs.shape
    top1 = np.argmax(probs, axis=1)
    p_hat = np.bincount(top1, minlength=e) / n
    pi_bar = probs.mean(axis=0)
    return float(e * np.dot(p_hat, pi_bar)), LoadStats(layer_index, p_hat, pi_bar)


def balance_grad(stats: LoadStats, n_tokens: int):
    """Gradient w.r.t. each token's probabilities.

    The argmax fractions are piecewise constant, so only the mean
    probabilities carry gradient: ``dL/dpi_ie = E * p_hat_e / N``.
    """
    e = stats.p_hat.size
    return np.tile(e * stats.p_hat / n_tokens, (n_tokens, 1))


def balance_loss(records, n_experts: int):
    """Balancing loss over the RoutingRecords of one MoE layer."""
    records = list(records)
    if not records:
        raise DomainError("balance loss needs at least one routing record")
    layers = {r.layer_index for r in records}
    if len(layers) != 1:
        raise DomainError(f"records span several layers: {sorted(layers)}")
    probs = np.array([r.probs for r in records], dtype=np.float64)
    if probs.shape[1] != n_experts:
        raise DomainError(f"records carry {probs.shape[1]} experts, expected {n_experts}")
    return balance_from_probs(probs, layers.pop())


@dataclass
class LossReport:
    l_ce: float
    l_moe: float
    total: float
    lam: float
    per_layer_moe: tuple = ()

    def log_record(self, step, stage, lr) -> str:
        return json.dumps({"step": step, "stage": stage, "l_ce": self.l_ce,
                           "l_moe": self.l_moe, "total": self.total, "lr": lr})


def total_loss(l_ce: float, per_layer_moe, lam: float = DEFAULT_LAMBDA) -> LossReport:
    """Cross-entropy plus ``lam`` times the balancing loss averaged over MoE layers."""
    if lam < 0:
        raise DomainError("lambda must be >= 0")
    per = tuple(float(v) for v in per_layer_moe)
    l_moe = float(np.mean(per)) if per else 0.0
    return LossReport(float(l_ce), l_moe, float(l_ce) + lam * l_moe, float(lam), per)
