import math

import numpy as np
import pytest

from scene_moe import numkit as nk
from scene_moe.errors import ConfigError, DimensionError
from scene_moe.tokens import (MODALITIES, SCENE_MODALITIES, Adapter, FeatureSpec, RawFeatureBlock,
                              SyntheticTaskSpec, UnifiedSequence, adapt, assemble_unified,
                              blocks_from_jsonl, blocks_to_jsonl, synth_features)


def _gelu_ref(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def test_adapter_structure_per_modality(rng):
    for m in SCENE_MODALITIES:
        a = Adapter(m, 5, 7, 6, rng)
        assert a.has_norm == (m != "rgbd")
        out = adapt(a, RawFeatureBlock(m, rng.standard_normal((3, 5))))
        assert out.shape == (3, 6)


def test_adapt_zero_input_gives_zero(rng):
    a = Adapter("rgb", 4, 8, 6, rng)
    out = adapt(a, RawFeatureBlock("rgb", np.zeros((2, 4))))
    assert np.array_equal(out, np.zeros((2, 6)))


def test_adapt_empty_block(rng):
    a = Adapter("pc", 4, 8, 6, rng)
    assert adapt(a, RawFeatureBlock("pc", np.zeros((0, 4)))).shape == (0, 6)


def test_adapt_matches_independent_forward():
    r = np.random.default_rng(42)
    a = Adapter("bev", 4, 8, 6, r)
    a.b1.value[:] = r.standard_normal(8)
    a.b2.value[:] = r.standard_normal(6)
    a.ln_gain.value[:] = r.standard_normal(6)
    a.ln_bias.value[:] = r.standard_normal(6)
    x = r.standard_normal((2, 4))
    h = _gelu_ref(x @ a.w1.value + a.b1.value) @ a.w2.value + a.b2.value
    mu = h.mean(axis=1, keepdims=True)
    var = ((h - mu) ** 2).mean(axis=1, keepdims=True)
    expected = (h - mu) / np.sqrt(var + 1e-5) * a.ln_gain.value + a.ln_bias.value
    assert np.allclose(adapt(a, RawFeatureBlock("bev", x)), expected, atol=1e-12)


def test_adapt_dimension_mismatch_names_modality(rng):
    a = Adapter("voxel", 4, 8, 6, rng)
    with pytest.raises(ConfigError, match="voxel"):
        adapt(a, RawFeatureBlock("voxel", np.zeros((1, 5))))


@pytest.mark.parametrize("modality", SCENE_MODALITIES)
def test_adapter_gradients(modality):
    r = np.random.default_rng(7)
    a = Adapter(modality, 4, 5, 6, r)
    x = r.standard_normal((3, 4))
    c = r.standard_normal((3, 6))
    nk.zero_grads(a.params().values())
    y, cache = a.forward(x)
    dx = a.backward(cache, c)
    params = {k: p.value for k, p in a.params().items()}
    grads = {k: p.grad.copy() for k, p in a.params().items()}
    assert nk.grad_check(lambda: float(np.sum(c * a.forward(x)[0])), params, grads) <= 1e-4
    assert nk.grad_check(lambda: float(np.sum(c * a.forward(x)[0])), {"x": x}, {"x": dx}) <= 1e-4


def test_assemble_counts_and_order(rng):
    counts = {"text": 3, "rgb": 4, "rgbd": 2, "bev": 1, "pc": 5, "voxel": 2}
    aligned = {m: rng.standard_normal((counts[m], 6)) for m in SCENE_MODALITIES}
    seq = assemble_unified(rng.standard_normal((3, 6)), aligned)
    assert seq.n_uni == 17
    assert seq.counts() == counts
    expected_tags = [m for m in MODALITIES for _ in range(counts[m])]
    assert list(seq.tags) == expected_tags


def test_assemble_text_only(rng):
    text = rng.standard_normal((2, 6))
    seq = assemble_unified(text, {m: np.zeros((0, 6)) for m in SCENE_MODALITIES})
    assert seq.tags == ("text", "text")
    assert np.array_equal(seq.values, text)


def test_assemble_width_mismatch(rng):
    with pytest.raises(DimensionError):
        assemble_unified(rng.standard_normal((2, 6)), {"pc": rng.standard_normal((1, 5))})


def test_sequence_jsonl_round_trip(rng):
    seq = assemble_unified(rng.standard_normal((2, 4)), {"pc": rng.standard_normal((3, 4))})
    back = UnifiedSequence.from_jsonl(seq.to_jsonl())
    assert back.tags == seq.tags
    assert back.values.tobytes() == seq.values.tobytes()
    assert back.to_jsonl() == seq.to_jsonl()


def test_blocks_jsonl_round_trip(rng):
    blocks = [RawFeatureBlock("rgb", rng.standard_normal((2, 3))), RawFeatureBlock("pc", np.zeros((0, 2)))]
    text = blocks_to_jsonl(blocks)
    back = blocks_from_jsonl(text)
    assert [b.modality for b in back] == ["rgb", "pc"]
    assert back[0].features.tobytes() == blocks[0].features.tobytes()
    assert back[1].count == 0


def test_synth_is_deterministic():
    a, la = synth_features(3)
    b, lb = synth_features(3)
    assert np.array_equal(la, lb)
    for sa, sb in zip(a, b):
        for m in MODALITIES:
            assert sa[m].features.tobytes() == sb[m].features.tobytes()


def test_synth_zero_count_is_empty():
    spec = FeatureSpec(counts={"text": 1, "pc": 2, "rgb": 0})
    samples, _ = synth_features(0, spec, SyntheticTaskSpec(n_samples=3))
    assert all(s["rgb"].count == 0 for s in samples)
    assert all(s["pc"].count == 2 for s in samples)


def test_nearest_centroid_oracle_recovers_pc_labels():
    samples, labels = synth_features(0, FeatureSpec(), SyntheticTaskSpec(n_samples=200))
    feats = np.concatenate([s["pc"].features for s in samples])
    tok_labels = np.repeat(labels, samples[0]["pc"].count)
    centroids = np.array([feats[tok_labels == c].mean(axis=0) for c in range(4)])
    d = ((feats[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    assert np.array_equal(d.argmin(axis=1), tok_labels)


def test_unknown_modality_rejected():
    with pytest.raises(ConfigError):
        RawFeatureBlock("depth", np.zeros((1, 2)))
