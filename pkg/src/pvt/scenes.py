"""Procedural BEV scenes with known boxes, target rasterization and toy AP.

Scenes are built so that per-pillar pooling is lossy: object pillars hold a
mixture of dim and bright returns whose proportion, not extremes, tells the
classes apart, and a few "rim" returns at the top of each object separate
objects from look-alike clutter. A single max (or mean) loses one of the two
cues; attention over the points can keep both.

Random numbers come from numpy's PCG64 bit generator seeded with the scene
seed, so a (config, seed) pair fixes every byte of the output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .voxelizer import PointCloud

VEHICLE, PEDESTRIAN = 0, 1
CLASS_NAMES = ("vehicle", "pedestrian")


def wrap_angle(a):
    """Wrap to [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


@dataclass(frozen=True)
class Box2D:
    cx: float
    cy: float
    w: float
    l: float
    heading: float = 0.0
    class_id: int = VEHICLE

    def __post_init__(self):
        if self.w <= 0 or self.l <= 0:
            raise ValueError("box sizes must be positive")
        object.__setattr__(self, "heading", float(wrap_angle(self.heading)))

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.heading), math.sin(self.heading)
        local = np.array([[1, 1], [1, -1], [-1, -1], [-1, 1]]) * [self.l / 2, self.w / 2]
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + [self.cx, self.cy]

    def contains(self, xy: np.ndarray) -> np.ndarray:
        """Which of the points ``xy`` (n x 2) lie inside the oriented box."""
        d = np.asarray(xy) - [self.cx, self.cy]
        c, s = math.cos(self.heading), math.sin(self.heading)
        along = d[:, 0] * c + d[:, 1] * s
        across = -d[:, 0] * s + d[:, 1] * c
        return (np.abs(along) <= self.l / 2) & (np.abs(across) <= self.w / 2)


@dataclass(frozen=True)
class SceneGenConfig:
    extent: float = 8.0                        # square scene side, centred on origin
    objects_per_scene: tuple[int, int] = (1, 4)
    points_per_object: tuple[int, int] = (10, 120)
    background_points: int = 200
    clutter_per_scene: tuple[int, int] = (0, 0)
    noise_std: float = 0.02
    vehicle_size: tuple[tuple[float, float], tuple[float, float]] = ((0.8, 1.2), (1.4, 2.2))
    pedestrian_size: tuple[tuple[float, float], tuple[float, float]] = ((0.4, 0.7), (0.4, 0.7))
    bright_fraction: tuple[float, float] = (0.75, 0.25)   # vehicle, pedestrian
    height: tuple[float, float] = (1.5, 1.7)
    seed: int = 0

    def __post_init__(self):
        for lo, hi in (self.objects_per_scene, self.points_per_object, self.clutter_per_scene):
            if lo > hi or lo < 0:
                raise ValueError("empty or negative range in SceneGenConfig")


@dataclass
class Scene:
    cloud: PointCloud
    boxes: list[Box2D]
    owner: np.ndarray     # per point: box index, -1 background, -2 clutter


def _place(rng, cfg: SceneGenConfig, sizes, placed, margin: float) -> tuple[float, float] | None:
    half = cfg.extent / 2
    w, l = sizes
    r = 0.5 * math.hypot(w, l)
    if half - r - margin <= -half + r + margin:
        return None     # scene too small for this object
    for _ in range(200):
        cx, cy = rng.uniform(-half + r + margin, half - r - margin, 2)
        if all(math.hypot(cx - px, cy - py) >= r + pr + margin for px, py, pr in placed):
            placed.append((cx, cy, r))
            return float(cx), float(cy)
    return None


def _object_points(rng, box: Box2D, n: int, bright_frac: float, height: float, noise: float,
                   rim: bool) -> np.ndarray:
    u = rng.uniform(-0.5, 0.5, (n, 2)) * [box.l, box.w]
    c, s = math.cos(box.heading), math.sin(box.heading)
    xy = u @ np.array([[c, s], [-s, c]]) + [box.cx, box.cy]
    xy += rng.normal(0.0, noise, xy.shape)
    bright = rng.random(n) < bright_frac
    # dim/bright levels plus a gentle ramp along the heading axis
    ramp = 0.1 * (u[:, 0] / box.l)
    intensity = np.where(bright, 0.7, 0.3) + ramp + rng.normal(0.0, 0.03, n)
    z = rng.uniform(0.0, 0.55 * height, n)
    if rim:
        top = rng.random(n) < 0.08
        z = np.where(top, height + rng.normal(0.0, 0.05, n), z)
    return np.column_stack([xy, z, np.clip(intensity, 0.0, 1.0)])


def generate_scene(config: SceneGenConfig, seed: int | None = None) -> Scene:
    """Deterministic scene for ``(config, seed)``; ``seed`` defaults to ``config.seed``."""
    rng = np.random.Generator(np.random.PCG64(config.seed if seed is None else seed))
    half = config.extent / 2
    n_obj = int(rng.integers(config.objects_per_scene[0], config.objects_per_scene[1] + 1))
    n_clutter = int(rng.integers(config.clutter_per_scene[0], config.clutter_per_scene[1] + 1))
    placed: list = []
    boxes: list[Box2D] = []
    chunks, owners = [], []
    for _ in range(n_obj):
        cls = int(rng.integers(0, 2))
        (wl, wh), (ll, lh) = config.vehicle_size if cls == VEHICLE else config.pedestrian_size
        w, l = float(rng.uniform(wl, wh)), float(rng.uniform(ll, lh))
        heading = float(rng.uniform(-np.pi, np.pi))
        spot = _place(rng, config, (w, l), placed, margin=0.4)
        if spot is None:
            continue
        box = Box2D(spot[0], spot[1], w, l, heading, cls)
        n = int(rng.integers(config.points_per_object[0], config.points_per_object[1] + 1))
        chunks.append(_object_points(rng, box, n, config.bright_fraction[cls], config.height[cls],
                                     config.noise_std, rim=True))
        owners.append(np.full(n, len(boxes)))
        boxes.append(box)
    for _ in range(n_clutter):
        cls = int(rng.integers(0, 2))
        (wl, wh), (ll, lh) = config.vehicle_size if cls == VEHICLE else config.pedestrian_size
        w, l = float(rng.uniform(wl, wh)), float(rng.uniform(ll, lh))
        spot = _place(rng, config, (w, l), placed, margin=0.4)
        if spot is None:
            continue
        fake = Box2D(spot[0], spot[1], w, l, float(rng.uniform(-np.pi, np.pi)), cls)
        n = int(rng.integers(config.points_per_object[0], config.points_per_object[1] + 1))
        chunks.append(_object_points(rng, fake, n, config.bright_fraction[cls], config.height[cls],
                                     config.noise_std, rim=False))
        owners.append(np.full(n, -2))
    bg = np.column_stack([rng.uniform(-half, half, (config.background_points, 2)),
                          rng.normal(0.0, 0.05, config.background_points),
                          rng.uniform(0.0, 1.0, config.background_points)])
    chunks.append(bg)
    owners.append(np.full(config.background_points, -1))
    pts = np.concatenate(chunks, axis=0)
    owner = np.concatenate(owners).astype(np.int64)
    perm = rng.permutation(len(pts))
    return Scene(PointCloud(pts[perm]), boxes, owner[perm])


# ----------------------------------------------------------------------------
# targets


@dataclass(frozen=True)
class TargetGrid:
    origin_xy: tuple[float, float]
    cell_size: float
    shape: tuple[int, int]

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return (int(math.floor((x - self.origin_xy[0]) / self.cell_size)),
                int(math.floor((y - self.origin_xy[1]) / self.cell_size)))

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        xs = self.origin_xy[0] + (np.arange(self.shape[0]) + 0.5) * self.cell_size
        ys = self.origin_xy[1] + (np.arange(self.shape[1]) + 0.5) * self.cell_size
        return np.meshgrid(xs, ys, indexing="ij")


@dataclass
class SceneTargets:
    heatmap: np.ndarray     # H x W in [0, 1]
    box: np.ndarray         # H x W x 5: dx, dy (cells), log w, log l, heading
    box_mask: np.ndarray    # H x W, 1 at object-centre cells
    foreground: np.ndarray  # H x W


def rasterize_targets(boxes: list[Box2D], grid: TargetGrid) -> SceneTargets:
    """Gaussian centre heatmap, centre-cell regression targets and foreground mask."""
    h, w = grid.shape
    heat = np.zeros((h, w))
    box = np.zeros((h, w, 5))
    box_mask = np.zeros((h, w))
    fg = np.zeros((h, w))
    gx, gy = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cx_grid, cy_grid = grid.cell_centers()
    centers = np.column_stack([cx_grid.ravel(), cy_grid.ravel()])
    for b in boxes:
        ix, iy = grid.cell_of(b.cx, b.cy)
        if not (0 <= ix < h and 0 <= iy < w):
            raise ValueError(f"box centre ({b.cx}, {b.cy}) outside the target grid")
        sigma = max(1.0, min(b.w, b.l) / (3.0 * grid.cell_size))
        g = np.exp(-((gx - ix) ** 2 + (gy - iy) ** 2) / (2.0 * sigma ** 2))
        heat = np.maximum(heat, g)
        ccx = grid.origin_xy[0] + (ix + 0.5) * grid.cell_size
        ccy = grid.origin_xy[1] + (iy + 0.5) * grid.cell_size
        box[ix, iy] = [(b.cx - ccx) / grid.cell_size, (b.cy - ccy) / grid.cell_size,
                       math.log(b.w), math.log(b.l), b.heading]
        box_mask[ix, iy] = 1.0
        fg = np.maximum(fg, b.contains(centers).reshape(h, w))
    return SceneTargets(heat, box, box_mask, fg)


# ----------------------------------------------------------------------------
# evaluation


def iou_axis_aligned(a: Box2D, b: Box2D) -> float:
    """IoU of the boxes' (cx, cy, w, l) footprints taken as axis aligned (w along x)."""
    ix = max(0.0, min(a.cx + a.w / 2, b.cx + b.w / 2) - max(a.cx - a.w / 2, b.cx - b.w / 2))
    iy = max(0.0, min(a.cy + a.l / 2, b.cy + b.l / 2) - max(a.cy - a.l / 2, b.cy - b.l / 2))
    inter = ix * iy
    union = a.w * a.l + b.w * b.l - inter
    return inter / union if union > 0 else 0.0


def match_detections(preds: list[tuple[Box2D, float]], truths: list[Box2D], iou_threshold: float):
    """Greedy score-ordered matching; returns (is_tp per sorted pred, matched pairs)."""
    order = sorted(range(len(preds)), key=lambda i: -preds[i][1])
    used = [False] * len(truths)
    tp, pairs = [], []
    for i in order:
        box = preds[i][0]
        best, best_j = iou_threshold, -1
        for j, t in enumerate(truths):
            if used[j]:
                continue
            iou = iou_axis_aligned(box, t)
            if iou >= best:
                best, best_j = iou, j
        if best_j >= 0:
            used[best_j] = True
            pairs.append((box, truths[best_j]))
        tp.append(best_j >= 0)
    return tp, pairs


def _ap11(tp: np.ndarray, n_truth: int) -> float:
    """11-point interpolated AP of score-sorted TP flags."""
    ctp = np.cumsum(tp)
    recall = ctp / n_truth
    precision = ctp / np.arange(1, len(tp) + 1)
    total = 0.0
    for k in range(11):
        # tolerance so that e.g. recall 3/5 counts for the 0.6 level
        hit = recall >= k / 10 - 1e-12
        total += precision[hit].max() if hit.any() else 0.0
    return float(total / 11)


def evaluate_ap(preds: list[tuple[Box2D, float]], truths: list[Box2D], iou_threshold: float = 0.5) -> float:
    """11-point interpolated average precision."""
    if not truths:
        return float("nan")
    if not preds:
        return 0.0
    tp, _ = match_detections(preds, truths, iou_threshold)
    return _ap11(np.array(tp, dtype=float), len(truths))


def evaluate_ap_multi(scenes_preds: list[list[tuple[Box2D, float]]], scenes_truths: list[list[Box2D]],
                      iou_threshold: float = 0.5) -> float:
    """AP pooled over several scenes (matching stays within a scene)."""
    flags, scores = [], []
    n_truth = sum(len(t) for t in scenes_truths)
    if n_truth == 0:
        return float("nan")
    for preds, truths in zip(scenes_preds, scenes_truths):
        tp, _ = match_detections(preds, truths, iou_threshold)
        flags.extend(tp)
        scores.extend(sorted((s for _, s in preds), reverse=True))
    if not flags:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="stable")
    return _ap11(np.asarray(flags, dtype=float)[order], n_truth)


def heading_mae(pairs: list[tuple[Box2D, Box2D]]) -> float:
    if not pairs:
        return float("nan")
    return float(np.mean([abs(wrap_angle(p.heading - t.heading)) for p, t in pairs]))
