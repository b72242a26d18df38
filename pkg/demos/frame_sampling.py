"""
Choosing keyframes by voxel coverage
====================================

Each camera covers the voxels in front of it, inside its image and within
d_max metres. Greedy selection adds the frame with the largest number of
new voxels, then each pick may be swapped for a sharper neighbouring frame.
"""
import numpy as np

from scene_moe import mvcs

scene = mvcs.random_scene(3, n_views=16, n_voxels=80)
voxels = mvcs.prune_voxels(scene.voxels)
print(f"{len(scene.voxels)} voxels, {len(voxels)} left after dropping floor/ceiling/wall")

sets = mvcs.coverage_sets(scene.views, voxels, d_max=3.0)
print("voxels seen per frame:", [len(s) for s in sets])

picked = mvcs.greedy_cover(sets, K=4)
print("greedy picks:", picked.selected_indices, "gains:", picked.per_pick_gain)
print("exhaustive optimum for K=4:", mvcs.brute_force_cover(sets, 4),
      "greedy:", len(picked.covered_voxel_ids))

# Sharpness is the variance of the Laplacian response.
scores = [mvcs.laplacian_variance(v.image) for v in scene.views]
print("sharpness:", np.round(scores, 1))
refined = mvcs.refine_views(picked, scene.views, window=2)
print("after refinement:", refined.selected_indices)
for orig, new, score in refined.refinement_replacements:
    print(f"  frame {orig} -> {new} (sharpness {score:.1f})")
print(mvcs.coverage_table(refined, scene.views, len(voxels)), end="")
