"""
Reading a routing trace
=======================

A trace stores, for every token and MoE layer, the routing probabilities,
the selected experts and the top-1 expert. The reports below summarise
which modalities each expert serves and which expert sequences are common.
"""
import numpy as np

from scene_moe import analytics
from scene_moe.model import FusionModel, ModelConfig
from scene_moe.tokens import FeatureSpec, SyntheticTaskSpec, synth_features

samples, _ = synth_features(1, FeatureSpec(), SyntheticTaskSpec(n_samples=16))
model = FusionModel.build(ModelConfig(), seed=1)
model.convert_to_moe(n_experts=8, k=2, jitter=0.05, seed=1)
trace = model.trace(samples)
print(f"{len(trace.records)} records over layers {trace.moe_layers}")

dist = analytics.expert_modality_distribution(trace, 1)
print("modality mix of each expert at layer 1 (columns:", dist.cols, ")")
print(np.round(dist.values, 2))

print("load at layer 3:", np.round(analytics.load_balance(trace, 3), 3))

for p in analytics.top_pathways(trace, 2):
    print(f"{p.modality:>5}: path {p.path} x{p.count}")

# Any per-token grouping works, for example a question type per scene.
groups = {t: ("counting" if t // 16 % 2 else "spatial") for t in range(16 * 16)}
by_type = analytics.modality_expert_distribution(trace, 1, groups)
for name, row in zip(by_type.rows, by_type.values):
    print(f"{name}: favourite expert {int(row.argmax())} ({row.max():.2f})")
print(analytics.report_to_csv(analytics.build_report(trace, "load_balance", layer=1)), end="")
