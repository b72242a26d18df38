"""Maximum voxel coverage sampling of keyframes.

Pipeline: drop structural voxels, compute each view's covered voxels from
its pose alone (no depth test), greedily pick views by marginal coverage,
then swap each pick for the sharpest frame among its temporal neighbours.

Poses are camera-to-world 4x4 rigid transforms; a world point ``X`` maps
to camera coordinates ``R.T @ (X - t)``. The camera looks down +z with
+x right and +y down, so a voxel is covered when ``z > 0``, its pixel
``(fx*x/z + cx, fy*y/z + cy)`` lies in ``[0, W) x [0, H)`` and it is within
``d_max`` metres of the camera centre.

Worked example: a camera at the world origin with identity rotation,
``fx = fy = 40``, ``cx = cy = 50`` and a 100 x 100 image sees the voxel at
``(0.5, -0.25, 2.0)`` at camera coordinates ``(0.5, -0.25, 2.0)``, pixel
``(40 * 0.25 + 50, 40 * -0.125 + 50) = (60, 45)``, distance 2.077 m: covered
when ``d_max >= 2.077``.

Scene file (JSON)::

    {"voxels": [{"id": 0, "xyz": [x, y, z], "type": "object:chair"}, ...],
     "views": [{"index": 0, "pose": [16 row-major floats],
                "intrinsics": {"fx": .., "fy": .., "cx": .., "cy": ..},
                "size": [W, H], "image_path": "frames/000.pgm"}, ...]}

``image_path`` is optional and relative to the scene file; images are
8-bit binary PGM (P5).
"""
from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import BudgetExceeded, ConfigError, DomainError

STRUCTURAL_TYPES = frozenset({"floor", "ceiling", "wall"})
DEFAULT_D_MAX = 3.0
DEFAULT_K = 24
DEFAULT_WINDOW = 2
BRUTE_FORCE_BUDGET = 10**6


@dataclass
class Voxel:
    id: int
    position: np.ndarray
    type: str

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.position)):
            raise ConfigError(f"voxel {self.id} has a non-finite position")
        if not self.type:
            raise ConfigError(f"voxel {self.id} has an empty type")


@dataclass
class CameraView:
    index: int
    pose: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    image: np.ndarray | None = None

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        rot = self.pose[:3, :3]
        if (not np.all(np.isfinite(self.pose))
                or not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6)
                or not np.allclose(self.pose[3], [0, 0, 0, 1], atol=1e-12)):
            raise ConfigError(f"view {self.index}: pose is not a rigid transform")
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError(f"view {self.index}: focal lengths must be positive")
        if self.image is not None:
            self.image = np.asarray(self.image, dtype=np.float64)

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3]


@dataclass
class SceneModel:
    voxels: list
    views: list

    def __post_init__(self):
        idx = [v.index for v in self.views]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ConfigError("view indices must be strictly increasing")


@dataclass
class SelectionResult:
    """Positions refer to the scene's ordered view list."""

    selected_indices: list
    covered_voxel_ids: frozenset
    per_pick_gain: list
    refinement_replacements: list = field(default_factory=list)
    early_stop: bool = False

    def to_dict(self, views=None):
        d = {"selected_indices": list(self.selected_indices),
             "covered_voxel_ids": sorted(self.covered_voxel_ids),
             "per_pick_gain": list(self.per_pick_gain),
             "refinement_replacements": [list(r) for r in self.refinement_replacements],
             "early_stop": self.early_stop}
        if views is not None:
            d["selected_frames"] = [views[i].index for i in self.selected_indices]
        return d


def prune_voxels(voxels, keep_structural=False):
    """Drop floor/ceiling/wall voxels (or keep only them, for auditing)."""
    if keep_structural:
        return [v for v in voxels if v.type in STRUCTURAL_TYPES]
    return [v for v in voxels if v.type not in STRUCTURAL_TYPES]


def visible_set(view: CameraView, voxels, d_max=DEFAULT_D_MAX) -> frozenset:
    if d_max <= 0:
        raise DomainError("d_max must be positive")
    if not voxels:
        return frozenset()
    pts = np.array([v.position for v in voxels])
    rel = pts - view.center
    cam = rel @ view.pose[:3, :3]
    z = cam[:, 2]
    front = z > 0
    zs = np.where(front, z, 1.0)
    u = view.fx * cam[:, 0] / zs + view.cx
    w = view.fy * cam[:, 1] / zs + view.cy
    inside = front & (u >= 0) & (u < view.width) & (w >= 0) & (w < view.height)
    near = np.sqrt(np.sum(rel * rel, axis=1)) <= d_max
    return frozenset(v.id for v, ok in zip(voxels, inside & near) if ok)


def coverage_sets(views, voxels, d_max=DEFAULT_D_MAX, threads=1):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda v: visible_set(v, voxels, d_max), views))
    return [visible_set(v, voxels, d_max) for v in views]


def greedy_cover(sets, K) -> SelectionResult:
    """Greedy max coverage over precomputed sets; ties go to the lower position.

    Stops early once no remaining set adds a new element.
    """
    if K < 1:
        raise DomainError("budget K must be >= 1")
    if not sets:
        raise DomainError("no views to select from")
    covered = set()
    picks, gains = [], []
    early = False
    while len(picks) < min(K, len(sets)):
        best, best_gain = None, 0
        for k, s in enumerate(sets):
            if k in picks:
                continue
            g = len(s - covered)
            if g > best_gain:
                best, best_gain = k, g
        if best is None:
            early = True
            break
        picks.append(best)
        gains.append(best_gain)
        covered |= sets[best]
    return SelectionResult(picks, frozenset(covered), gains, [], early or len(picks) < K)


def greedy_select(views, pruned_voxels, K=DEFAULT_K, d_max=DEFAULT_D_MAX, threads=1):
    return greedy_cover(coverage_sets(views, pruned_voxels, d_max, threads), K)


def brute_force_cover(sets, K) -> int:
    """Exact maximum of ``|union|`` over all K-subsets."""
    n = len(sets)
    r = min(K, n)
    total = math.comb(n, r)
    if total > BRUTE_FORCE_BUDGET:
        raise BudgetExceeded(f"{n} choose {r} = {total} subsets exceeds {BRUTE_FORCE_BUDGET}")
    best = 0
    for combo in itertools.combinations(sets, r):
        best = max(best, len(frozenset().union(*combo)))
    return best


def brute_force_select(views, voxels, K, d_max=DEFAULT_D_MAX) -> int:
    return brute_force_cover(coverage_sets(views, voxels, d_max), K)


def laplacian_variance(image) -> float:
    """Population variance of the 4-neighbour Laplacian over interior pixels."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 3:
        raise DomainError(f"image must be at least 3x3, got shape {img.shape}")
    lap = (img[:-2, 1:-1] + img[2:, 1:-1] + img[1:-1, :-2] + img[1:-1, 2:]
           - 4.0 * img[1:-1, 1:-1])
    return float(lap.var())


def _sharpness(view):
    return -math.inf if view.image is None else laplacian_variance(view.image)


def refine_views(selected: SelectionResult, views, window=DEFAULT_WINDOW) -> SelectionResult:
    """Swap each pick for the sharpest frame within ``window`` positions.

    Equal sharpness keeps the original frame, and a replacement that is
    already among the picks is skipped.
    """
    picks = list(selected.selected_indices)
    n = len(views)
    scores = {}

    def score(j):
        if j not in scores:
            scores[j] = _sharpness(views[j])
        return scores[j]

    replacements = []
    for slot, i in enumerate(picks):
        best = i
        for j in range(max(0, i - window), min(i + window, n - 1) + 1):
            if score(j) > score(best):
                best = j
        if best != i and best not in picks:
            picks[slot] = best
            replacements.append((i, best, score(best)))
    return SelectionResult(picks, selected.covered_voxel_ids, list(selected.per_pick_gain),
                           replacements, selected.early_stop)


def sample_frames(scene: SceneModel, K=DEFAULT_K, d_max=DEFAULT_D_MAX, window=DEFAULT_WINDOW,
                  keep_structural=False, threads=1) -> SelectionResult:
    voxels = prune_voxels(scene.voxels, keep_structural)
    picked = greedy_select(scene.views, voxels, K, d_max, threads)
    return refine_views(picked, scene.views, window)


def coverage_table(result: SelectionResult, views, n_voxels=None) -> str:
    lines = [f"{'pick':>4}  {'frame':>6}  {'gain':>5}  {'covered':>7}"]
    running = 0
    for r, (pos, g) in enumerate(zip(result.selected_indices, result.per_pick_gain)):
        running += g
        lines.append(f"{r:>4}  {views[pos].index:>6}  {g:>5}  {running:>7}")
    tail = f"total covered: {len(result.covered_voxel_ids)}"
    if n_voxels is not None:
        tail += f" of {n_voxels} pruned voxels"
    lines.append(tail)
    return "\n".join(lines) + "\n"


# -- scene files ---------------------------------------------------------------

def read_pgm(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64)


def write_pgm(path, image):
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64)), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PPM")


def _field(obj, key, where):
    try:
        return obj[key]
    except (KeyError, TypeError, IndexError):
        raise ConfigError(f"{where}: missing field {key!r}") from None


def scene_from_dict(doc, base_dir=None) -> SceneModel:
    base = Path(base_dir) if base_dir is not None else Path(".")
    voxels, views = [], []
    for i, v in enumerate(_field(doc, "voxels", "scene")):
        where = f"voxels[{i}]"
        try:
            voxels.append(Voxel(int(_field(v, "id", where)), _field(v, "xyz", where),
                                str(_field(v, "type", where))))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{where}: {exc}") from None
    for i, v in enumerate(_field(doc, "views", "scene")):
        where = f"views[{i}]"
        intr = _field(v, "intrinsics", where)
        size = _field(v, "size", where)
        image = None
        if v.get("image_path"):
            image = read_pgm(base / v["image_path"])
        try:
            views.append(CameraView(int(_field(v, "index", where)),
                                    np.array(_field(v, "pose", where), dtype=np.float64),
                                    float(_field(intr, "fx", where + ".intrinsics")),
                                    float(_field(intr, "fy", where + ".intrinsics")),
                                    float(_field(intr, "cx", where + ".intrinsics")),
                                    float(_field(intr, "cy", where + ".intrinsics")),
                                    int(size[0]), int(size[1]), image))
        except (ValueError, TypeError, IndexError) as exc:
            raise ConfigError(f"{where}: {exc}") from None
    return SceneModel(voxels, views)


def load_scene(path) -> SceneModel:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return scene_from_dict(doc, path.parent)


def save_scene(scene: SceneModel, path, image_dir="frames"):
    path = Path(path)
    out_views = []
    for v in scene.views:
        rec = {"index": v.index, "pose": v.pose.reshape(-1).tolist(),
               "intrinsics": {"fx": v.fx, "fy": v.fy, "cx": v.cx, "cy": v.cy},
               "size": [v.width, v.height]}
        if v.image is not None:
            rel = Path(image_dir) / f"{v.index:05d}.pgm"
            (path.parent / rel).parent.mkdir(parents=True, exist_ok=True)
            write_pgm(path.parent / rel, v.image)
            rec["image_path"] = rel.as_posix()
        out_views.append(rec)
    doc = {"voxels": [{"id": v.id, "xyz": v.position.tolist(), "type": v.type}
                      for v in scene.voxels], "views": out_views}
    path.write_text(json.dumps(doc, indent=1) + "\n")


# -- synthetic scenes ----------------------------------------------------------

def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose at ``eye`` looking at ``target`` (+z forward, +y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, [1.0, 0.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, down, fwd, eye
    return pose


def _box_blur(img, radius):
    if radius <= 0:
        return img
    out = img.copy()
    for axis in (0, 1):
        pad = np.pad(out, [(radius, radius) if a == axis else (0, 0) for a in (0, 1)], mode="edge")
        c = np.cumsum(pad, axis=axis)
        c = np.concatenate([np.zeros_like(np.take(c, [0], axis=axis)), c], axis=axis)
        size = 2 * radius + 1
        out = (np.take(c, range(size, c.shape[axis]), axis=axis)
               - np.take(c, range(0, c.shape[axis] - size), axis=axis)) / size
    return out


def random_scene(seed, n_views=12, n_voxels=40, room=(6.0, 5.0, 3.0), image_size=(32, 24),
                 with_images=True, structural_fraction=0.3) -> SceneModel:
    """A box-shaped room with structural and object voxels and a camera loop."""
    rng = np.random.default_rng(seed)
    lx, ly, lz = room
    voxels = []
    for i in range(n_voxels):
        if rng.random() < structural_fraction:
            kind = ("floor", "ceiling", "wall")[rng.integers(3)]
            p = rng.uniform([0, 0, 0], room)
            if kind == "floor":
                p[2] = 0.0
            elif kind == "ceiling":
                p[2] = lz
            else:
                p[rng.integers(2)] = 0.0
        else:
            kind = f"object:{rng.integers(5)}"
            p = rng.uniform([0.3, 0.3, 0.0], [lx - 0.3, ly - 0.3, 1.5])
        voxels.append(Voxel(i, p, kind))
    w, h = image_size
    base = rng.uniform(0, 255, (h, w))
    views = []
    for j in range(n_views):
        ang = 2 * math.pi * j / max(n_views, 1) + rng.normal(0, 0.2)
        eye = np.array([lx / 2 + 0.35 * lx * math.cos(ang), ly / 2 + 0.35 * ly * math.sin(ang),
                        1.4 + rng.normal(0, 0.1)])
        target = rng.uniform([0.5, 0.5, 0.0], [lx - 0.5, ly - 0.5, 1.2])
        image = None
        if with_images:
            image = np.clip(_box_blur(np.roll(base, j, axis=1), int(rng.integers(0, 4))), 0, 255)
            image = np.rint(image)
        views.append(CameraView(j, look_at(eye, target), 0.8 * w, 0.8 * w, w / 2, h / 2,
                                w, h, image))
    return SceneModel(voxels, views)
