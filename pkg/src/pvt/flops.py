"""Analytic FLOP and parameter counts for an :class:`~pvt.arch.ArchSpec`.

Counting rules: only matrix products are counted, at 2 flops per
multiply-accumulate (a k->n linear on t tokens costs 2*t*k*n). Attention
adds the QK^T and AV products, 2*Tq*Tk*d MACs per window. Norms,
activations, softmax and pooling are free. Windows are dense, so every
window of the padded grid is paid for whether occupied or not; this mirrors
the implementation and makes the count exact against the instrumented
counter in :func:`pvt.tensor.count_macs`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .arch import ArchSpec, SCALE_KEYS
from .backbone import HEAD_OUT, HEAD_STRIDE, SCALE_STEPS
from .model import HEAD_NAMES, point_width


@dataclass(frozen=True)
class SceneShape:
    grid_extent: tuple[int, int] = (32, 32)
    n_voxels: int = 256            # occupied voxels, summed over the batch
    cap_points: int = 32
    f: int = 4
    batch: int = 1


@dataclass
class FlopReport:
    macs: dict[str, int] = field(default_factory=dict)

    @property
    def total_macs(self) -> int:
        return sum(self.macs.values())

    @property
    def flops(self) -> int:
        return 2 * self.total_macs

    @property
    def gflops(self) -> float:
        return self.flops / 1e9


def block_macs(n_groups: int, tq: int, tk: int, d: int, expansion: int, mlp: bool = True) -> int:
    """One attention block over ``n_groups`` independent token groups."""
    proj = tq * d * d + 2 * tk * d * d + tq * d * d       # q, k, v, out
    attn = 2 * tq * tk * d                                 # QK^T and AV summed over heads
    ffn = 2 * tq * d * expansion * d if mlp else 0
    return n_groups * (proj + attn + ffn)


def _ceil(a: int, b: int) -> int:
    return -(-a // b)


def scale_extents(grid_extent: tuple[int, int], mode: str) -> list[tuple[int, int]]:
    """Map extents at each backbone scale."""
    sizes = [tuple(grid_extent)]
    if mode == "multi_scale":
        for step in SCALE_STEPS:
            h, w = sizes[-1]
            sizes.append((_ceil(h, step), _ceil(w, step)))
    return sizes


def _windows(batch: int, hw: tuple[int, int], window: int) -> int:
    return batch * _ceil(hw[0], window) * _ceil(hw[1], window)


def point_macs(spec: ArchSpec, shape: SceneShape) -> dict[str, int]:
    n, p, f = shape.n_voxels, shape.cap_points, shape.f
    out = {}
    c = spec["point.fc_channel"]
    if n == 0:
        return {"point": 0}
    if spec["point.type"] == "pointnet":
        dims = [f, c] + [spec["point.pointnet_width"]] * (spec["point.pointnet_depth"] - 1)
        out["point.fc"] = sum(n * p * a * b for a, b in zip(dims, dims[1:]))
        return out
    e = spec["point.mlp_expansion"]
    out["point.fc"] = n * p * f * c
    if spec["point.depth"] == "FC-PP-PV":
        out["point.pp"] = spec["point.pp_depth"] * block_macs(n, p, p, c, e)
    if spec["point.depth"] != "FC":
        out["point.pv"] = block_macs(n, 1, p, c, e, spec["point.pv_mlp"])
    return out


def count_macs_analytic(spec: ArchSpec, shape: SceneShape) -> FlopReport:
    rep = FlopReport(point_macs(spec, shape))
    b, win = shape.batch, spec["backbone.window"]
    d, e = spec["backbone.tfm_channel"], spec["backbone.tfm_mlp_expansion"]
    dp = point_width(spec)
    rep.macs["input_proj"] = shape.n_voxels * dp * d if dp != d else 0
    mode = spec["backbone.mode"]
    sizes = scale_extents(shape.grid_extent, mode)
    if mode == "multi_scale":
        for key, hw, nb in zip(SCALE_KEYS, sizes, spec.blocks_per_scale()):
            rep.macs[f"backbone.{key}"] = nb * block_macs(_windows(b, hw, win), win * win, win * win, d, e)
        rep.macs["backbone.fuse"] = sum(b * h * w * 2 * d * d for h, w in sizes[:-1])
    else:
        rep.macs["backbone.0p32"] = spec["backbone.single_scale_blocks"] * block_macs(
            _windows(b, sizes[0], win), win * win, win * win, d, e)
    dh, eh = spec["head.tfm_channel"], spec["head.tfm_mlp_expansion"]
    for cls_id, name in HEAD_NAMES.items():
        stride = HEAD_STRIDE[cls_id]
        hw = (_ceil(shape.grid_extent[0], stride), _ceil(shape.grid_extent[1], stride))
        cells = b * hw[0] * hw[1]
        macs = cells * d * dh if d != dh else 0
        macs += spec[f"head.{name}.blocks"] * block_macs(_windows(b, hw, win), win * win, win * win, dh, eh)
        macs += cells * dh * HEAD_OUT
        rep.macs[f"head.{name}"] = macs
    return rep


def count_flops(spec: ArchSpec, shape: SceneShape = SceneShape(), strict: bool = False) -> int:
    """Total forward flops (2 x matmul MACs) for one batch of the given shape."""
    spec.validate(strict)
    return count_macs_analytic(spec, shape).flops


def _linear_params(k: int, n: int) -> int:
    return k * n + n


def _block_params(d: int, e: int, mlp: bool = True) -> int:
    n = 4 * _linear_params(d, d) + 2 * d
    if mlp:
        n += 2 * d + _linear_params(d, e * d) + _linear_params(e * d, d)
    return n


def count_params(spec: ArchSpec, f: int = 4, strict: bool = False) -> dict[str, int]:
    """Learnable scalar count per component (matches ``Detector.named_parameters``)."""
    spec.validate(strict)
    out = {}
    c = spec["point.fc_channel"]
    if spec["point.type"] == "pointnet":
        dims = [f, c] + [spec["point.pointnet_width"]] * (spec["point.pointnet_depth"] - 1)
        out["point"] = sum(_linear_params(a, b) for a, b in zip(dims, dims[1:]))
    else:
        e = spec["point.mlp_expansion"]
        n = _linear_params(f, c)
        if spec["point.depth"] == "FC-PP-PV":
            n += spec["point.pp_depth"] * _block_params(c, e)
        if spec["point.depth"] != "FC":
            n += _block_params(c, e, spec["point.pv_mlp"]) + c
        out["point"] = n
    d, e = spec["backbone.tfm_channel"], spec["backbone.tfm_mlp_expansion"]
    dp = point_width(spec)
    out["input_proj"] = _linear_params(dp, d) if dp != d else 0
    if spec["backbone.mode"] == "multi_scale":
        for key, nb in zip(SCALE_KEYS, spec.blocks_per_scale()):
            out[f"backbone.{key}"] = nb * _block_params(d, e)
        out["backbone.fuse"] = (len(SCALE_KEYS) - 1) * _linear_params(2 * d, d)
    else:
        out["backbone.0p32"] = spec["backbone.single_scale_blocks"] * _block_params(d, e)
    dh, eh = spec["head.tfm_channel"], spec["head.tfm_mlp_expansion"]
    for name in HEAD_NAMES.values():
        n = _linear_params(d, dh) if d != dh else 0
        n += spec[f"head.{name}.blocks"] * _block_params(dh, eh) + _linear_params(dh, HEAD_OUT)
        out[f"head.{name}"] = n
    return out


def total_params(spec: ArchSpec, f: int = 4, strict: bool = False) -> int:
    return sum(count_params(spec, f, strict).values())
