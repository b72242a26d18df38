"""Command-line entry point.

Exit codes: 0 success, 1 configuration or input error, 2 numeric
divergence during training, 3 failed gradient verification.

Run config (JSON; unknown keys are rejected)::

    {"seed": 0, "output_dir": "runs/default", "log_level": "WARNING",
     "model": {ModelConfig fields},
     "data": {"counts": {...}, "n_samples": .., "n_classes": .., "label_modalities": [..],
              "separation": .., "noise": .., "text_scale": ..},
     "stage1": {TrainConfig fields}, "stage2": {TrainConfig fields},
     "gradcheck": {"n_samples": .., "counts": {...}, "h": .., "max_coords": ..,
                   "tolerance": .., "seed": ..}}
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import analytics, mvcs
from . import numkit as nk
from .errors import ConfigError, SceneMoEError, TrainingDivergence
from .model import FusionModel, ModelConfig
from .moe import RoutingTrace
from .tokens import FeatureSpec, SyntheticTaskSpec, blocks_to_jsonl, synth_features
from .trainer import Checkpoint, TrainConfig, stage1_train, stage2_train

log = logging.getLogger("scene_moe")

THREADS_ENV = "UNI3D_MOE_THREADS"

# Set by tests to corrupt analytic gradients before verification.
_GRAD_HOOK = None

_TOP_KEYS = {"seed", "output_dir", "log_level", "model", "data", "stage1", "stage2", "gradcheck"}
_DATA_KEYS = {"counts", "n_samples", "n_classes", "label_modalities", "separation", "noise",
              "text_scale"}


@dataclass
class GradcheckOptions:
    n_samples: int = 1
    counts: dict = field(default_factory=lambda: {m: 1 for m in
                                                  ("text", "rgb", "rgbd", "bev", "pc", "voxel")})
    h: float = 1e-5
    max_coords: int | None = 24
    tolerance: float = 1e-4
    seed: int = 0


_MIN_MARGIN = 2e-4
_MAX_DRAWS = 100


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    log_level: str = "WARNING"
    model: ModelConfig = field(default_factory=ModelConfig)
    features: FeatureSpec = field(default_factory=FeatureSpec)
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    stage1: TrainConfig = field(default_factory=lambda: TrainConfig(stage=1, epochs=2))
    stage2: TrainConfig = field(default_factory=lambda: TrainConfig(stage=2, epochs=1))
    gradcheck: GradcheckOptions = field(default_factory=GradcheckOptions)

    @classmethod
    def from_dict(cls, doc, seed=None):
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        seed = int(doc.get("seed", 0) if seed is None else seed)
        try:
            model = ModelConfig(**doc.get("model", {}))
        except TypeError as exc:
            raise ConfigError(f"model: {exc}") from None
        data = dict(doc.get("data", {}))
        bad = set(data) - _DATA_KEYS
        if bad:
            raise ConfigError(f"unknown data keys: {sorted(bad)}")
        features = FeatureSpec(data.pop("counts", FeatureSpec().counts), model.dims)
        task = SyntheticTaskSpec(**data)
        if model.vocab < task.n_classes:
            raise ConfigError(f"vocab {model.vocab} smaller than n_classes {task.n_classes}")
        s1 = TrainConfig.from_dict({"epochs": 2, **doc.get("stage1", {})}, stage=1, seed=seed)
        s2 = TrainConfig.from_dict({"epochs": 1, **doc.get("stage2", {})}, stage=2, seed=seed)
        gc = doc.get("gradcheck", {})
        names = {f.name for f in fields(GradcheckOptions)}
        if set(gc) - names:
            raise ConfigError(f"unknown gradcheck keys: {sorted(set(gc) - names)}")
        return cls(seed, str(doc.get("output_dir", "runs/default")),
                   str(doc.get("log_level", "WARNING")), model, features, task, s1, s2,
                   GradcheckOptions(**{"seed": seed, **gc}))


def load_config(path, seed=None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return RunConfig.from_dict(doc, seed)


def dataset(cfg: RunConfig):
    return synth_features(cfg.seed, cfg.features, cfg.task)


def train(cfg: RunConfig, out_dir, stages=(1, 2)):
    """Library form of ``train``: writes checkpoints, logs and the routing trace."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples, labels = dataset(cfg)
    model = FusionModel.build(cfg.model, cfg.seed)
    with open(out / "stage1.log.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        ckpt = stage1_train(model, samples, labels, cfg.stage1, lambda s: fh.write(s + "\n"))
    ckpt.save(out / "stage1.ckpt.json")
    if 2 in stages:
        with open(out / "stage2.log.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            ckpt, model = stage2_train(ckpt, samples, labels, cfg.stage2,
                                       lambda s: fh.write(s + "\n"))
        ckpt.save(out / "stage2.ckpt.json")
        (out / "trace.json").write_text(model.trace(samples).to_json())
    return ckpt, model


def _group(name):
    if name.startswith("adapters."):
        return "adapters"
    if name == "head":
        return "head"
    if ".router" in name:
        return "router"
    if ".experts." in name:
        return "experts"
    return "dense"


def gradcheck(cfg: RunConfig, hook=None):
    """Finite-difference audit of the stage-two loss. Returns ``(report, worst_param)``.

    ``report`` maps group -> max relative error (``None`` when skipped).
    """
    opts = cfg.gradcheck
    model = FusionModel.build(cfg.model, opts.seed)
    jitter = cfg.stage2.jitter or 0.01
    model.convert_to_moe(cfg.stage2.n_experts, cfg.stage2.k, jitter, opts.seed)
    spec = FeatureSpec(opts.counts, cfg.model.dims)
    task = SyntheticTaskSpec(n_samples=opts.n_samples, n_classes=cfg.task.n_classes,
                             label_modalities=cfg.task.label_modalities)
    # Redraw the batch until no routing decision sits within reach of the
    # finite-difference step; the loss has kinks where the top-k set changes.
    for attempt in range(_MAX_DRAWS):
        samples, labels = synth_features([opts.seed, 7, attempt], spec, task)
        if model.routing_margin(samples) >= _MIN_MARGIN:
            break
    else:
        raise ConfigError(f"no batch with routing margin >= {_MIN_MARGIN} in {_MAX_DRAWS} draws")
    params = model.named_params()
    values = {k: p.value for k, p in params.items()}
    rng = np.random.default_rng([opts.seed, 11])
    coords = None
    if opts.max_coords:
        coords = {k: rng.choice(v.size, min(v.size, opts.max_coords), replace=False)
                  for k, v in values.items()}
    lam = cfg.stage2.lam
    report, per_param = {}, {}

    def run(label, balance_only):
        model.loss_and_grads(samples, labels, 1.0 if balance_only else lam,
                             balance_only=balance_only)
        grads = {k: p.grad.copy() for k, p in params.items()}
        if hook is not None:
            hook(grads)
        res = nk.grad_check_report(
            lambda: model.loss(samples, labels, 1.0 if balance_only else lam,
                               balance_only).total,
            values, grads, opts.h, coords)
        for k, v in res.items():
            key = label if label == "balance" else _group(k)
            report[key] = max(report.get(key, 0.0), v)
            per_param[(key, k)] = v

    run("total", False)
    if lam > 0:
        run("balance", True)
    else:
        report["balance"] = None
    failing = [(v, k) for (g, k), v in per_param.items() if v > opts.tolerance]
    worst = max(failing)[1] if failing else None
    return report, worst


def _cmd_train(args):
    cfg = load_config(args.config, args.seed)
    log.setLevel(cfg.log_level.upper())
    out = Path(args.out or cfg.output_dir)
    stages = (1,) if args.stage == 1 else (1, 2)
    ckpt, _ = train(cfg, out, stages)
    print(f"stage {ckpt.stage} checkpoint: {out / f'stage{ckpt.stage}.ckpt.json'}")
    print(f"digest: {ckpt.digest}")
    return 0


def _cmd_sample_frames(args, threads):
    scene = mvcs.load_scene(args.scene)
    result = mvcs.sample_frames(scene, args.k, args.d_max, args.window, args.keep_structural,
                                threads)
    if len(result.selected_indices) < args.k:
        print(f"warning: only {len(result.selected_indices)} of {args.k} frames add coverage; "
              "stopped early", file=sys.stderr)
    doc = json.dumps(result.to_dict(scene.views), indent=2) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "selection.json").write_text(doc)
    else:
        sys.stdout.write(doc)
    n_pruned = len(mvcs.prune_voxels(scene.voxels, args.keep_structural))
    sys.stdout.write(mvcs.coverage_table(result, scene.views, n_pruned))
    return 0


def load_trace(path) -> RoutingTrace:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"trace file not found: {path}")
    try:
        trace = RoutingTrace.from_json(path.read_text())
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed trace ({exc})") from None
    if not trace.records:
        raise ConfigError(f"{path}: trace has no records")
    return trace


def _cmd_analyze(args):
    names = []
    for r in args.report or ["all"]:
        names += list(analytics.REPORTS) if r == "all" else [r]
    bad = [n for n in names if n not in analytics.REPORTS]
    if bad:
        raise ConfigError(f"unknown report {bad[0]!r}; valid: {', '.join(analytics.REPORTS)}, all")
    trace = load_trace(args.trace)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    layers = [args.layer] if args.layer is not None else list(trace.moe_layers)
    for name in names:
        if name == "pathways":
            rep = analytics.build_report(trace, name, top=args.top)
            path = analytics.export(rep, args.format, out / f"{name}.{args.format}")
            print(path)
            continue
        for layer in layers:
            rep = analytics.build_report(trace, name, layer=layer)
            path = analytics.export(rep, args.format, out / f"{name}.layer{layer}.{args.format}")
            print(path)
    return 0


def _cmd_gradcheck(args):
    cfg = load_config(args.config, args.seed)
    report, worst = gradcheck(cfg, _GRAD_HOOK)
    for group in ("router", "experts", "adapters", "dense", "head", "balance"):
        if group not in report:
            continue
        v = report[group]
        print(f"{group:<9} {'n/a' if v is None else f'{v:.3e}'}")
    if worst is not None:
        print(f"gradient check failed at {worst}", file=sys.stderr)
        return 3
    return 0


def _cmd_synth(args):
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    seed = 0 if args.seed is None else args.seed
    if args.kind == "scene":
        scene = mvcs.random_scene(seed, n_views=args.n_views, n_voxels=args.n_voxels)
        mvcs.save_scene(scene, out / "scene.json")
        print(out / "scene.json")
    else:
        cfg = load_config(args.config, seed) if args.config else RunConfig(seed=seed)
        samples, labels = dataset(cfg)
        with open(out / "blocks.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for sample in samples:
                fh.write(blocks_to_jsonl(sample.values()))
        (out / "labels.json").write_text(json.dumps(labels.tolist()) + "\n")
        model = FusionModel.build(cfg.model, seed)
        (out / "sequence.jsonl").write_text(model.unified(samples[0]).to_jsonl())
        print(out / "blocks.jsonl")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="scene-moe",
        description="Sparse expert training, keyframe sampling and routing analysis.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run stage one and (by default) stage two")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--stage", type=int, choices=(1, 2), default=2,
                   help="last stage to run (default 2)")

    s = sub.add_parser("sample-frames", help="select keyframes by voxel coverage")
    s.add_argument("--scene", required=True)
    s.add_argument("--k", type=int, default=mvcs.DEFAULT_K)
    s.add_argument("--d-max", type=float, default=mvcs.DEFAULT_D_MAX)
    s.add_argument("--window", type=int, default=mvcs.DEFAULT_WINDOW)
    s.add_argument("--keep-structural", action="store_true",
                   help="keep only floor/ceiling/wall voxels instead of dropping them")
    s.add_argument("--out")

    a = sub.add_parser("analyze", help="routing statistics from a trace file")
    a.add_argument("--trace", required=True)
    a.add_argument("--report", action="append",
                   help=f"one of {', '.join(analytics.REPORTS)}, or all (repeatable)")
    a.add_argument("--format", choices=("json", "csv"), default="json")
    a.add_argument("--layer", type=int)
    a.add_argument("--top", type=int, default=10)
    a.add_argument("--out")

    g = sub.add_parser("gradcheck", help="finite-difference audit of analytic gradients")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int)

    y = sub.add_parser("synth", help="write synthetic scene or token fixtures")
    y.add_argument("--kind", choices=("scene", "tokens"), default="scene")
    y.add_argument("--config")
    y.add_argument("--seed", type=int)
    y.add_argument("--out")
    y.add_argument("--n-views", type=int, default=24)
    y.add_argument("--n-voxels", type=int, default=200)
    return p


def _threads():
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = _threads()
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "sample-frames":
            return _cmd_sample_frames(args, threads)
        if args.command == "analyze":
            return _cmd_analyze(args)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        return _cmd_synth(args)
    except TrainingDivergence as exc:
        print(f"error: {exc}; last record: {json.dumps(exc.record)}", file=sys.stderr)
        return 2
    except (SceneMoEError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
