"""Fixed vs dynamic voxelization benchmark for a depth-two PointNet.

Both paths run the same network (f -> 128 -> 128, ReLU, per-voxel max) in
raw numpy so the timings measure layout, not autodiff overhead:

* dynamic: FC layers on the m in-range points, an index gather into voxel
  order and a segment max; the backward scatters voxel gradients back to the
  points with an index-add.
* fixed: FC layers on the padded N x P x f tensor, a masked max over the P
  axis; the backward is dense.

The fixed path is processed in voxel chunks so its padded activations fit in
memory; chunking does not change the arithmetic. Before any timing is
reported the two paths are checked to give the same voxel features in
float64.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .voxelizer import PillarGridConfig, PointCloud, dynamic_voxelize, fixed_voxelize

# latency in ms on TPU, batch -> (forward dynamic, forward fixed, backward dynamic, backward fixed)
REFERENCE_MS = {1: (13.7, 6.5, 16.6, 7.8), 2: (24.3, 12.1, 33.1, 15.7), 4: (48.3, 23.4, 66.0, 31.3)}
EQUIV_TOL = 1e-9


@dataclass(frozen=True)
class BenchPreset:
    name: str
    m: int                 # points per scene
    n_voxels: int          # occupied pillars per scene
    f: int = 4
    cap: int = 32
    width: int = 128
    grid: int = 512        # cells per side
    repeats: int = 3
    chunk: int = 4096      # voxels per fixed-path chunk


PRESETS = {
    "tiny": BenchPreset("tiny", m=2000, n_voxels=500, grid=64, repeats=5),
    "waymo-shape": BenchPreset("waymo-shape", m=199_600, n_voxels=52_000, grid=512, repeats=3),
}


def synthetic_cloud(preset: BenchPreset, seed: int) -> tuple[PointCloud, PillarGridConfig]:
    """Exactly ``n_voxels`` distinct pillars holding ``m`` points, none above the cap."""
    if preset.m < preset.n_voxels or preset.m > preset.n_voxels * preset.cap:
        raise ValueError("m must lie in [N, N * cap] for a no-drop cloud")
    rng = np.random.Generator(np.random.PCG64(seed))
    cells = rng.choice(preset.grid * preset.grid, preset.n_voxels, replace=False)
    counts = 1 + rng.multinomial(preset.m - preset.n_voxels, np.full(preset.n_voxels, 1.0 / preset.n_voxels))
    while (counts > preset.cap).any():
        excess = int(np.clip(counts - preset.cap, 0, None).sum())
        counts = np.minimum(counts, preset.cap)
        room = np.flatnonzero(counts < preset.cap)
        np.add.at(counts, rng.choice(room, excess), 1)
    cell_of_point = np.repeat(cells, counts)
    ix, iy = cell_of_point // preset.grid, cell_of_point % preset.grid
    size = 0.32
    u = rng.uniform(0.05, 0.95, (preset.m, 2))
    xy = (np.column_stack([ix, iy]) + u) * size
    pts = np.column_stack([xy, rng.uniform(0.0, 2.0, preset.m), rng.uniform(0.0, 1.0, preset.m)])
    if preset.f > 4:
        pts = np.column_stack([pts, rng.normal(size=(preset.m, preset.f - 4))])
    pts = pts[rng.permutation(preset.m), :preset.f]
    grid = PillarGridConfig((0.0, 0.0), size, (preset.grid, preset.grid), preset.cap, preset.n_voxels)
    return PointCloud(pts), grid


def init_weights(rng, f: int, width: int, dtype) -> list[np.ndarray]:
    w1 = rng.normal(0, 1 / np.sqrt(f), (f, width))
    w2 = rng.normal(0, 1 / np.sqrt(width), (width, width))
    b1 = rng.normal(0, 0.1, width)
    b2 = rng.normal(0, 0.1, width)
    return [a.astype(dtype) for a in (w1, b1, w2, b2)]


# ----------------------------------------------------------------------------
# dynamic path


@dataclass
class DynamicInput:
    points: np.ndarray      # m x f
    order: np.ndarray       # permutation grouping points by voxel
    starts: np.ndarray      # segment starts in sorted order
    seg: np.ndarray         # voxel id per sorted point
    n_occ: int


def dynamic_input(flat: np.ndarray, voxel_id: np.ndarray, n_occ: int, dtype) -> DynamicInput:
    order = np.argsort(voxel_id, kind="stable")
    seg = voxel_id[order]
    starts = np.flatnonzero(np.r_[True, seg[1:] != seg[:-1]])
    return DynamicInput(flat.astype(dtype), order, starts, seg, n_occ)


def dynamic_forward(inp: DynamicInput, w):
    w1, b1, w2, b2 = w
    h1 = np.maximum(inp.points @ w1 + b1, 0)
    h2 = np.maximum(h1 @ w2 + b2, 0)
    gathered = h2[inp.order]
    vox = np.maximum.reduceat(gathered, inp.starts, axis=0)
    return vox, (h1, h2, gathered, vox)


def dynamic_backward(inp: DynamicInput, w, cache, g_vox):
    w1, b1, w2, b2 = w
    h1, h2, gathered, vox = cache
    # gradient to every point equal to its voxel's max (ReLU zeros carry none)
    hit = gathered == vox[inp.seg]
    g_sorted = np.where(hit, g_vox[inp.seg], 0)
    g_h2 = np.zeros_like(h2)
    np.add.at(g_h2, inp.order, g_sorted)
    g_h2 *= h2 > 0
    gw2 = h1.T @ g_h2
    gb2 = g_h2.sum(0)
    g_h1 = (g_h2 @ w2.T) * (h1 > 0)
    gw1 = inp.points.T @ g_h1
    gb1 = g_h1.sum(0)
    return [gw1, gb1, gw2, gb2]


# ----------------------------------------------------------------------------
# fixed path


def fixed_forward_chunk(x: np.ndarray, mask: np.ndarray, w):
    w1, b1, w2, b2 = w
    n, p, f = x.shape
    h1 = np.maximum(x.reshape(n * p, f) @ w1 + b1, 0)
    h2 = np.maximum(h1 @ w2 + b2, 0).reshape(n, p, -1)
    masked = np.where(mask[..., None], h2, -np.inf)
    arg = masked.argmax(axis=1)
    vox = np.take_along_axis(masked, arg[:, None, :], axis=1)[:, 0]
    return vox, (x, h1, h2, arg)


def fixed_backward_chunk(w, cache, g_vox):
    w1, b1, w2, b2 = w
    x, h1, h2, arg = cache
    n, p, f = x.shape
    g_h2 = np.zeros_like(h2)
    np.put_along_axis(g_h2, arg[:, None, :], g_vox[:, None, :], axis=1)
    g_h2 = g_h2.reshape(n * p, -1) * (h2.reshape(n * p, -1) > 0)
    gw2 = h1.T @ g_h2
    gb2 = g_h2.sum(0)
    g_h1 = (g_h2 @ w2.T) * (h1 > 0)
    gw1 = x.reshape(n * p, f).T @ g_h1
    gb1 = g_h1.sum(0)
    return [gw1, gb1, gw2, gb2]


def fixed_pass(features, mask, w, chunk: int, g_vox=None, timings=None):
    """Forward (and backward when ``g_vox`` is given) over voxel chunks."""
    outs = []
    grads = None
    t_fwd = t_bwd = 0.0
    for s in range(0, len(features), chunk):
        x = features[s:s + chunk]
        t0 = time.perf_counter()
        vox, cache = fixed_forward_chunk(x, mask[s:s + chunk], w)
        t1 = time.perf_counter()
        t_fwd += t1 - t0
        outs.append(vox)
        if g_vox is not None:
            t2 = time.perf_counter()
            g = fixed_backward_chunk(w, cache, g_vox[s:s + chunk])
            t_bwd += time.perf_counter() - t2
            grads = g if grads is None else [a + b for a, b in zip(grads, g)]
        del cache
    if timings is not None:
        timings["fwd"], timings["bwd"] = t_fwd, t_bwd
    return np.concatenate(outs), grads


# ----------------------------------------------------------------------------
# driver


@dataclass
class PreparedBatch:
    fixed_features: np.ndarray
    fixed_mask: np.ndarray
    dynamic: DynamicInput
    fixed_coords: np.ndarray       # (scene, ix, iy) per fixed row
    dynamic_coords: np.ndarray     # (scene, ix, iy) per dynamic voxel id
    voxelize_ms: dict
    drops: int


def prepare_batch(preset: BenchPreset, batch: int, seed: int, dtype) -> PreparedBatch:
    feats, masks, fcoords = [], [], []
    flat, vid, dcoords = [], [], []
    off = 0
    t_fixed = t_dyn = 0.0
    drops = 0
    for b in range(batch):
        cloud, grid = synthetic_cloud(preset, seed + b)
        t0 = time.perf_counter()
        fb = fixed_voxelize(cloud, grid)
        t1 = time.perf_counter()
        db = dynamic_voxelize(cloud, grid)
        t2 = time.perf_counter()
        t_fixed += t1 - t0
        t_dyn += t2 - t1
        drops += fb.drop_stats.cap + fb.drop_stats.voxel + fb.drop_stats.out_of_range
        n = fb.num_voxels
        feats.append(fb.features[:n].astype(dtype))
        masks.append(fb.mask[:n].astype(bool))
        fcoords.append(np.column_stack([np.full(n, b), fb.coords[:n]]))
        flat.append(db.flat_features)
        vid.append(db.voxel_id + off)
        dcoords.append(np.column_stack([np.full(db.n_occ, b), db.coords]))
        off += db.n_occ
    dyn = dynamic_input(np.concatenate(flat), np.concatenate(vid), off, dtype)
    return PreparedBatch(np.concatenate(feats), np.concatenate(masks), dyn, np.concatenate(fcoords),
                         np.concatenate(dcoords),
                         {"fixed": 1e3 * t_fixed, "dynamic": 1e3 * t_dyn}, drops)


def check_equivalence(preset: BenchPreset, seed: int = 0) -> float:
    """Max |fixed - dynamic| voxel feature difference in float64 (no-drop input)."""
    pb = prepare_batch(preset, 1, seed, np.float64)
    if pb.drops:
        raise AssertionError(f"benchmark input dropped {pb.drops} points")
    w = init_weights(np.random.Generator(np.random.PCG64(seed)), preset.f, preset.width, np.float64)
    vox_fixed, _ = fixed_pass(pb.fixed_features, pb.fixed_mask, w, preset.chunk)
    vox_dyn, _ = dynamic_forward(pb.dynamic, w)
    # align rows by (scene, ix, iy)
    key = lambda c: (c[:, 0] * preset.grid + c[:, 1]) * preset.grid + c[:, 2]
    fo, do = np.argsort(key(pb.fixed_coords)), np.argsort(key(pb.dynamic_coords))
    if not np.array_equal(pb.fixed_coords[fo], pb.dynamic_coords[do]):
        raise AssertionError("fixed and dynamic paths found different voxels")
    return float(np.abs(vox_fixed[fo] - vox_dyn[do]).max())


def _stats(xs: list[float]) -> dict:
    a = np.asarray(xs) * 1e3
    q1, med, q3 = np.percentile(a, [25, 50, 75])
    return {"median_ms": float(med), "iqr_ms": float(q3 - q1)}


def time_batch(preset: BenchPreset, batch: int, seed: int, dtype=np.float32) -> dict:
    pb = prepare_batch(preset, batch, seed, dtype)
    w = init_weights(np.random.Generator(np.random.PCG64(seed)), preset.f, preset.width, dtype)
    rng = np.random.Generator(np.random.PCG64(seed + 7))
    g_vox = rng.normal(size=(len(pb.fixed_features), preset.width)).astype(dtype)
    dyn_f, dyn_b, fix_f, fix_b = [], [], [], []
    for _ in range(preset.repeats):
        t0 = time.perf_counter()
        vox, cache = dynamic_forward(pb.dynamic, w)
        t1 = time.perf_counter()
        dynamic_backward(pb.dynamic, w, cache, g_vox[:pb.dynamic.n_occ])
        t2 = time.perf_counter()
        del cache
        dyn_f.append(t1 - t0)
        dyn_b.append(t2 - t1)
        tm: dict = {}
        fixed_pass(pb.fixed_features, pb.fixed_mask, w, preset.chunk, g_vox, tm)
        fix_f.append(tm["fwd"])
        fix_b.append(tm["bwd"])
    out = {
        "batch": batch,
        "points": int(len(pb.dynamic.points)),
        "voxels": int(pb.dynamic.n_occ),
        "dynamic_forward": _stats(dyn_f),
        "dynamic_backward": _stats(dyn_b),
        "fixed_forward": _stats(fix_f),
        "fixed_backward": _stats(fix_b),
        "voxelize_ms": pb.voxelize_ms,
    }
    # same orientation as the reference table: dynamic time over fixed time
    out["forward_ratio"] = out["dynamic_forward"]["median_ms"] / out["fixed_forward"]["median_ms"]
    out["backward_ratio"] = out["dynamic_backward"]["median_ms"] / out["fixed_backward"]["median_ms"]
    return out


def downshift(preset: BenchPreset) -> BenchPreset:
    return replace(preset, name=preset.name + "/2", m=preset.m // 2, n_voxels=preset.n_voxels // 2,
                   chunk=max(256, preset.chunk // 2))


def run_benchmark(preset_name: str = "tiny", repeats: int | None = None, batches=(1, 2, 4), seed: int = 0,
                  log: Callable[[str], None] | None = None) -> dict:
    """Equivalence gate, then timings for each batch size. Downshifts on MemoryError."""
    preset = PRESETS[preset_name]
    if repeats is not None:
        preset = replace(preset, repeats=repeats)
    warnings_list = []
    while True:
        try:
            diff = check_equivalence(preset, seed)
            if not diff < EQUIV_TOL:
                raise AssertionError(f"fixed and dynamic voxel features differ by {diff:.3e}")
            rows = [time_batch(preset, b, seed + 100 * b) for b in batches]
            break
        except MemoryError:
            if preset.m < 2000:
                raise
            msg = f"out of memory at preset {preset.name}; halving m and N"
            warnings.warn(msg)
            warnings_list.append(msg)
            preset = downshift(preset)
    report = {
        "preset": preset.name,
        "shape": {"m": preset.m, "N": preset.n_voxels, "f": preset.f, "P": preset.cap, "width": preset.width},
        "repeats": preset.repeats,
        "equivalence_max_abs_diff": diff,
        "rows": rows,
        "warnings": warnings_list,
        "reference_tpu_ms": {str(k): dict(zip(("forward_dynamic", "forward_fixed", "backward_dynamic",
                                                "backward_fixed"), v)) for k, v in REFERENCE_MS.items()},
    }
    if log is not None:
        log(format_report(report))
    return report


def format_report(report: dict) -> str:
    s = report["shape"]
    lines = [f"preset {report['preset']}: m={s['m']} N={s['N']} f={s['f']} P={s['P']} "
             f"(PointNet {s['f']}->{s['width']}->{s['width']}), repeats={report['repeats']}",
             f"equivalence: max |fixed - dynamic| = {report['equivalence_max_abs_diff']:.3e}",
             "batch | fwd dyn ms | fwd fixed ms | ratio | bwd dyn ms | bwd fixed ms | ratio"]
    for r in report["rows"]:
        lines.append(f"{r['batch']:5d} | {r['dynamic_forward']['median_ms']:10.1f} | "
                     f"{r['fixed_forward']['median_ms']:12.1f} | {r['forward_ratio']:5.2f} | "
                     f"{r['dynamic_backward']['median_ms']:10.1f} | {r['fixed_backward']['median_ms']:12.1f} | "
                     f"{r['backward_ratio']:5.2f}")
    lines.append("reference (TPU, not asserted; hardware differs):")
    for b, (fd, ff, bd, bf) in REFERENCE_MS.items():
        lines.append(f"{b:5d} | {fd:10.1f} | {ff:12.1f} | {fd / ff:5.2f} | {bd:10.1f} | {bf:12.1f} | {bd / bf:5.2f}")
    return "\n".join(lines)
