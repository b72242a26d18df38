import numpy as np
import pytest

from scene_moe.model import FusionModel, ModelConfig
from scene_moe.tokens import FeatureSpec, SyntheticTaskSpec, synth_features
from scene_moe.trainer import TrainConfig, stage1_train, stage2_train

TINY_DIMS = {"text": 6, "rgb": 4, "rgbd": 3, "bev": 4, "pc": 3, "voxel": 4}
TINY_COUNTS = {"text": 1, "rgb": 1, "rgbd": 1, "bev": 1, "pc": 1, "voxel": 1}


def tiny_config(**kw):
    base = dict(d_txt=6, adapter_hidden=5, ffn_hidden=5, vocab=3, n_layers=4,
                moe_layers=(1, 3), dims=TINY_DIMS)
    base.update(kw)
    return ModelConfig(**base)


def tiny_batch(seed, n_samples=1, counts=None, n_classes=3):
    spec = FeatureSpec(counts or TINY_COUNTS, TINY_DIMS)
    return synth_features(seed, spec, SyntheticTaskSpec(n_samples=n_samples, n_classes=n_classes))


def tiny_moe_model(seed=0, n_experts=4, k=2, jitter=0.05):
    model = FusionModel.build(tiny_config(), seed)
    model.convert_to_moe(n_experts, k, jitter, seed)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_run():
    """Default desk-scale two-stage run on the pc-labelled task (seed 0)."""
    samples, labels = synth_features(0, FeatureSpec(), SyntheticTaskSpec())
    model = FusionModel.build(ModelConfig(), 0)
    log1, log2 = [], []
    ckpt1 = stage1_train(model, samples, labels, TrainConfig(stage=1, epochs=2), log1.append)
    ckpt2, model2 = stage2_train(ckpt1, samples, labels, TrainConfig(stage=2, epochs=1),
                                 log2.append)
    return {"samples": samples, "labels": labels, "ckpt1": ckpt1, "ckpt2": ckpt2,
            "model": model2, "log1": log1, "log2": log2}


MIN_MARGIN = 2e-4


def smooth_batch(model, seed, n_samples=2, margin=MIN_MARGIN):
    """First batch drawn from ``seed`` whose routing is clear of any kink.

    A central difference straddling a top-1 or top-k flip measures a jump,
    not a derivative, so gradient checks only use points where the loss is
    smooth within the step.
    """
    for attempt in range(200):
        samples, labels = tiny_batch([seed, attempt], n_samples=n_samples)
        if model.routing_margin(samples) >= margin:
            return samples, labels
    raise RuntimeError(f"no smooth batch for seed {seed}")


def strip_view(index, x0, image=None):
    """Camera at (x0, 0, -1) looking along +z; sees world x in [x0-1.25, x0+1.25) at z=0."""
    from scene_moe.mvcs import CameraView
    pose = np.eye(4)
    pose[:3, 3] = [x0, 0.0, -1.0]
    return CameraView(index, pose, 40.0, 40.0, 50.0, 50.0, 100, 100, image)


def abc_scene(with_floor=True):
    """Views A, B, C covering {1,2,3}, {3,4}, {4,5} of five object voxels on a line."""
    from scene_moe.mvcs import SceneModel, Voxel
    voxels = [Voxel(i + 1, [float(i), 0.0, 0.0], "object:box") for i in range(5)]
    if with_floor:
        voxels.append(Voxel(99, [3.5, 0.0, 0.0], "floor"))
    views = [strip_view(0, 1.0), strip_view(1, 2.5), strip_view(2, 3.5)]
    return SceneModel(voxels, views)


def random_trace(seed, n_tokens=40, n_experts=4, k=2, moe_layers=(1, 3), scale=1.0):
    """Trace of softmax-of-Gaussian routing with modalities drawn at random."""
    from scene_moe.moe import RoutingRecord, RoutingTrace
    from scene_moe.tokens import MODALITIES
    r = np.random.default_rng(seed)
    tags = [MODALITIES[i] for i in r.integers(len(MODALITIES), size=n_tokens)]
    records = []
    for t in range(n_tokens):
        for li in moe_layers:
            s = scale * r.standard_normal(n_experts)
            p = np.exp(s - s.max())
            p /= p.sum()
            sel = tuple(int(e) for e in np.argsort(-p, kind="stable")[:k])
            records.append(RoutingRecord(t, tags[t], li, tuple(p.tolist()), sel, sel[0]))
    return RoutingTrace(records, tuple(moe_layers), n_experts, k)
