"""
Top-k routing in one MoE layer
==============================

A router scores a token against every expert, the softmax turns the scores
into probabilities, and only the k most probable experts run. Their outputs
are mixed with the raw probabilities, so the weights of a top-2 mixture sum
to less than one.
"""
import numpy as np

from scene_moe.moe import Expert, MoELayer, Router, moe_forward, route

rng = np.random.default_rng(0)
d, n_experts = 8, 4
experts = [Expert.random(d, 16, rng, out_scale=1.0) for _ in range(n_experts)]
router = Router(rng.standard_normal((n_experts, d)))
token = rng.standard_normal(d)

scores, probs = route(router, token)
print("routing probabilities:", np.round(probs, 3))

layer = MoELayer(router, experts, k=2)
out, record = moe_forward(layer, token, modality="pc", layer_index=0)
print("selected experts:", record.selected, "top-1:", record.top1)
print("mass on the selected experts:", round(sum(probs[e] for e in record.selected), 3))

# With k equal to the number of experts the layer is the dense mixture.
dense = MoELayer(router, experts, k=n_experts)
full, _ = moe_forward(dense, token)
mixture = sum(probs[e] * experts[e].forward(token[None])[0][0] for e in range(n_experts))
print("k=E matches the dense mixture:", np.allclose(full, mixture, atol=1e-12))

# The top-2 output only changes when a selected expert changes.
unused = next(e for e in range(n_experts) if e not in record.selected)
experts[unused].gate.value += 5.0
again, _ = moe_forward(layer, token)
print("unselected expert has no effect:", np.array_equal(out, again))
