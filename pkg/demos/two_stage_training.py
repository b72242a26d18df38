"""
Two-stage training on a synthetic scene task
============================================

Every scene carries tokens from six modalities but only the point-cloud
tokens know the answer. Stage one trains adapters, dense blocks and the
head. Stage two copies two dense blocks into eight experts each, freezes
everything else and trains the routers and experts with the balancing
loss added.
"""
import json

import numpy as np

from scene_moe.analytics import modality_expert_distribution
from scene_moe.model import FusionModel, ModelConfig
from scene_moe.tokens import FeatureSpec, SyntheticTaskSpec, synth_features
from scene_moe.trainer import TrainConfig, stage1_train, stage2_train

samples, labels = synth_features(0, FeatureSpec(), SyntheticTaskSpec())
print(f"{len(samples)} scenes, {sum(b.count for b in samples[0].values())} tokens each")

model = FusionModel.build(ModelConfig(), seed=0)
log1, log2 = [], []
ckpt1 = stage1_train(model, samples, labels, TrainConfig(stage=1, epochs=2), log1.append)
print("stage 1 loss:", json.loads(log1[0])["total"], "->", json.loads(log1[-1])["total"])

ckpt2, moe_model = stage2_train(ckpt1, samples, labels, TrainConfig(stage=2, epochs=1),
                                log2.append)
last = json.loads(log2[-1])
print(f"stage 2 last step: ce {last['l_ce']:.4f}, balance {last['l_moe']:.4f}")

frozen = [n for n in ckpt2.params if not ckpt2.trainable[n]]
unchanged = all(np.array_equal(ckpt1.params[n], ckpt2.params[n]) for n in frozen)
print(f"{len(frozen)} frozen tensors unchanged by stage 2: {unchanged}")

# Which experts do point-cloud tokens prefer?
trace = moe_model.trace(samples)
for layer in trace.moe_layers:
    dist = modality_expert_distribution(trace, layer)
    row = dist.values[dist.rows.index("pc")]
    print(f"layer {layer} pc preferences:", np.round(row, 2))
