"""Two-stage training: dense alignment, then sparse expert tuning.

Stage one trains the adapters, the dense blocks and the head on
cross-entropy alone. Stage two replicates the dense blocks at the
configured positions into experts, freezes everything except routers and
experts, and adds the balancing loss. Optimizer state is reset between
stages.

Checkpoint schema (one JSON document)::

    {"config": {"model": {...}, "train": {...}},
     "config_digest": "<sha256 of the canonical config JSON>",
     "stage": 1 | 2, "step": int, "seed": int,
     "rng_state": {...numpy PCG64 state...},
     "params": {name: {"shape": [..], "trainable": bool, "values": [f64, ...]}}}

Parameter names are dotted paths such as ``adapters.pc.w1``,
``layers.1.router``, ``layers.1.experts.3.gate`` or ``head``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError, TrainingDivergence
from .model import FusionModel, ModelConfig
from .moe import Expert, MoELayer, Router
from .objective import DEFAULT_LAMBDA

log = logging.getLogger(__name__)

# Published optimisation settings; the desk defaults below differ in lr.
REFERENCE_LR = 2e-5
REFERENCE_WARMUP_RATIO = 0.03

SCHEDULES = ("constant", "warmup_cosine")
_ALIASES = {"lambda": "lam", "E": "n_experts"}


@dataclass
class TrainConfig:
    stage: int = 1
    lr: float = 1e-2
    warmup_ratio: float = REFERENCE_WARMUP_RATIO
    schedule: str = "warmup_cosine"
    epochs: int = 2
    batch_size: int = 8
    lam: float = DEFAULT_LAMBDA
    seed: int = 0
    n_experts: int = 8
    k: int = 2
    jitter: float = 0.0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if not 0 <= self.warmup_ratio < 1:
            raise ConfigError("warmup_ratio must lie in [0, 1)")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("need epochs >= 0 and batch_size >= 1")
        if self.lam < 0 or self.jitter < 0:
            raise ConfigError("lambda and jitter must be >= 0")
        if self.n_experts < 2 or not 1 <= self.k <= self.n_experts:
            raise ConfigError(f"need E >= 2 and 1 <= k <= E (E={self.n_experts}, k={self.k})")

    @classmethod
    def from_dict(cls, d, **overrides):
        names = {f.name for f in fields(cls)}
        kw = {}
        for key, val in {**d, **overrides}.items():
            key = _ALIASES.get(key, key)
            if key not in names:
                raise ConfigError(f"unknown training option {key!r}")
            kw[key] = val
        return cls(**kw)

    def to_dict(self):
        return asdict(self)


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8,
              weight_decay=0.0):
    """One AdamW update of every trainable Param, using its stored grad.

    Weight decay is decoupled: ``p <- p * (1 - lr * wd)`` precedes the
    bias-corrected Adam step.
    """
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        if not p.trainable:
            continue
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p.value *= 1.0 - lr * weight_decay
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def lr_at(step, total_steps, config: TrainConfig) -> float:
    if config.schedule == "constant":
        return config.lr
    warm = math.ceil(config.warmup_ratio * total_steps)
    if step < warm:
        return config.lr * step / warm
    if total_steps <= warm:
        return config.lr
    progress = (step - warm) / (total_steps - warm)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def config_digest(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


@dataclass
class Checkpoint:
    stage: int
    step: int
    seed: int
    config: dict
    params: dict
    trainable: dict
    rng_state: dict

    @classmethod
    def from_model(cls, model, stage, step, train_config, rng_state):
        ps = model.named_params()
        return cls(stage, step, train_config.seed,
                   {"model": model.config.to_dict(), "train": train_config.to_dict()},
                   {k: p.value.copy() for k, p in ps.items()},
                   {k: bool(p.trainable) for k, p in ps.items()}, rng_state)

    def to_json(self) -> str:
        doc = {
            "config": self.config,
            "config_digest": config_digest(self.config),
            "stage": self.stage,
            "step": self.step,
            "seed": self.seed,
            "rng_state": self.rng_state,
            "params": {k: {"shape": list(v.shape), "trainable": self.trainable[k],
                           "values": v.reshape(-1).tolist()} for k, v in self.params.items()},
        }
        return json.dumps(doc) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Checkpoint":
        doc = json.loads(text)
        if doc.get("config_digest") != config_digest(doc["config"]):
            raise ConfigError("checkpoint config digest does not match its config")
        params = {k: np.array(e["values"], dtype=np.float64).reshape(e["shape"])
                  for k, e in doc["params"].items()}
        trainable = {k: bool(e["trainable"]) for k, e in doc["params"].items()}
        return cls(int(doc["stage"]), int(doc["step"]), int(doc["seed"]), doc["config"],
                   params, trainable, doc["rng_state"])

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def to_model(self) -> FusionModel:
        """Rebuild the model structure implied by the parameter names."""
        mcfg = ModelConfig(**self.config["model"])
        model = FusionModel.build(mcfg, seed=self.seed)
        k = int(self.config["train"]["k"])
        for li in range(mcfg.n_layers):
            key = f"layers.{li}.router"
            if key in self.params:
                e = self.params[key].shape[0]
                experts = [Expert(self.params[f"layers.{li}.experts.{i}.gate"],
                                  self.params[f"layers.{li}.experts.{i}.up"],
                                  self.params[f"layers.{li}.experts.{i}.down"]) for i in range(e)]
                model.stack.layers[li] = MoELayer(Router(self.params[key]), experts, k)
        ps = model.named_params()
        if set(ps) != set(self.params):
            raise ConfigError("checkpoint parameters do not match the model structure")
        for name, p in ps.items():
            p.value[...] = self.params[name]
            p.trainable = self.trainable[name]
        return model


def _run(model, samples, labels, config: TrainConfig, lam, log_sink=None):
    rng = np.random.default_rng([config.seed, config.stage])
    n = len(samples)
    per_epoch = math.ceil(n / config.batch_size) if n else 0
    total = per_epoch * config.epochs
    params = model.named_params()
    state = AdamState()
    step = 0
    labels = np.asarray(labels)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for b in range(per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            # Overflow shows up as a non-finite loss, which is checked below.
            with np.errstate(over="ignore", invalid="ignore"):
                report, _ = model.loss_and_grads([samples[i] for i in idx], labels[idx], lam)
            lr = lr_at(step, total, config)
            line = report.log_record(step, config.stage, lr)
            if not math.isfinite(report.total):
                raise TrainingDivergence(f"non-finite loss at stage {config.stage} step {step}",
                                         json.loads(line))
            if log_sink is not None:
                log_sink(line)
            adam_step(params, state, lr, config.beta1, config.beta2, config.eps,
                      config.weight_decay)
            step += 1
    log.debug("stage %d finished after %d steps", config.stage, step)
    return step, rng.bit_generator.state


def stage1_train(model: FusionModel, samples, labels, config: TrainConfig,
                 log_sink=None) -> Checkpoint:
    """Train adapters, dense blocks and head on cross-entropy."""
    if config.stage != 1:
        raise ConfigError("stage1_train needs a stage-1 config")
    if model.stack.moe_layer_indices:
        raise ConfigError("stage one expects a dense model")
    for p in model.named_params().values():
        p.trainable = True
    steps, rng_state = _run(model, samples, labels, config, 0.0, log_sink)
    return Checkpoint.from_model(model, 1, steps, config, rng_state)


def stage2_model(checkpoint: Checkpoint, config: TrainConfig) -> FusionModel:
    """Stage-one model with replicated experts and the stage-two freeze applied."""
    if checkpoint.stage != 1:
        raise ConfigError(f"stage two starts from a stage-1 checkpoint, got stage {checkpoint.stage}")
    model = checkpoint.to_model()
    model.convert_to_moe(config.n_experts, config.k, config.jitter, config.seed)
    for name, p in model.named_params().items():
        p.trainable = ".router" in name or ".experts." in name
    return model


def stage2_train(checkpoint: Checkpoint, samples, labels, config: TrainConfig,
                 log_sink=None):
    """Train routers and experts on cross-entropy plus the balancing loss.

    Returns ``(checkpoint, model)``.
    """
    if config.stage != 2:
        raise ConfigError("stage2_train needs a stage-2 config")
    model = stage2_model(checkpoint, config)
    steps, rng_state = _run(model, samples, labels, config, config.lam, log_sink)
    ckpt = Checkpoint.from_model(model, 2, steps, config, rng_state)
    ckpt.config["model"] = checkpoint.config["model"]
    return ckpt, model
