"""Architecture specs: the point and voxel scaling spaces, sampling and flat key=value form."""

from __future__ import annotations

import hashlib
from typing import Iterable, Iterator, Mapping

import numpy as np

from .encoder import DEPTH_VARIANTS, QUERY_MODES

SCALE_KEYS = ("0p32", "0p64", "1p28", "5p12", "10p24")

# point architecture space
FC_CHANNELS = (128, 192, 256, 320)
POINTNET_DEPTHS = (2, 5, 7)
PVT_DEPTHS = DEPTH_VARIANTS

# voxel architecture space (backbone and head columns share value lists)
TFM_CHANNELS = (128, 192, 256)
TFM_HEADS = (4, 8, 16)
TFM_EXPANSIONS = (2, 4)
SCALE_BLOCKS = (2, 3, 4, 6)
HEAD_BLOCKS = (1, 2, 4, 6)

VOXEL_DOMAINS: dict[str, tuple] = {
    "backbone.tfm_channel": TFM_CHANNELS,
    "backbone.tfm_heads": TFM_HEADS,
    "backbone.tfm_mlp_expansion": TFM_EXPANSIONS,
    **{f"backbone.blocks.{k}": SCALE_BLOCKS for k in SCALE_KEYS},
    "head.tfm_channel": TFM_CHANNELS,
    "head.tfm_heads": TFM_HEADS,
    "head.tfm_mlp_expansion": TFM_EXPANSIONS,
    "head.vehicle.blocks": HEAD_BLOCKS,
    "head.pedestrian.blocks": HEAD_BLOCKS,
}

POINT_DOMAINS: dict[str, tuple] = {
    "point.fc_channel": FC_CHANNELS,
    "point.pointnet_depth": POINTNET_DEPTHS,
    "point.depth": PVT_DEPTHS,
}

ENUMS: dict[str, tuple] = {
    "point.type": ("pointnet", "pvt"),
    "point.depth": PVT_DEPTHS,
    "point.aggregation": ("max", "mean"),
    "point.query": QUERY_MODES,
    "backbone.mode": ("multi_scale", "single_scale"),
}

DEFAULTS: dict[str, object] = {
    "point.type": "pvt",
    "point.fc_channel": 128,
    "point.pointnet_depth": 2,
    "point.pointnet_width": 128,       # width of PointNet layers after the first
    "point.depth": "FC-PP-PV",
    "point.aggregation": "max",
    "point.query": "residual",
    "point.heads": 8,
    "point.mlp_expansion": 2,
    "point.pp_depth": 1,
    "point.pv_mlp": True,
    "backbone.mode": "multi_scale",
    "backbone.tfm_channel": 128,
    "backbone.tfm_heads": 8,
    "backbone.tfm_mlp_expansion": 2,
    "backbone.blocks.0p32": 2,
    "backbone.blocks.0p64": 3,
    "backbone.blocks.1p28": 2,
    "backbone.blocks.5p12": 3,
    "backbone.blocks.10p24": 2,
    "backbone.single_scale_blocks": 6,
    "backbone.window": 4,
    "head.tfm_channel": 128,
    "head.tfm_heads": 8,
    "head.tfm_mlp_expansion": 2,
    "head.vehicle.blocks": 1,
    "head.pedestrian.blocks": 1,
}


class ArchError(ValueError):
    """An ArchSpec key or value is outside its declared domain."""


def parse_value(key: str, text: str, like: object):
    if isinstance(like, bool):
        low = text.strip().lower()
        if low not in ("true", "false", "1", "0"):
            raise ArchError(f"{key}: expected a boolean, got {text!r}")
        return low in ("true", "1")
    if isinstance(like, int):
        try:
            return int(text)
        except ValueError:
            raise ArchError(f"{key}: expected an integer, got {text!r}") from None
    if isinstance(like, float):
        return float(text)
    return text.strip()


def format_value(v: object) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


class ArchSpec(Mapping):
    """Immutable flat map of architecture keys to values, complete over DEFAULTS."""

    __slots__ = ("_values",)

    def __init__(self, values: Mapping[str, object] | None = None):
        merged = dict(DEFAULTS)
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise ArchError(f"unknown architecture key {k!r}")
            like = DEFAULTS[k]
            merged[k] = parse_value(k, v, like) if isinstance(v, str) and not isinstance(like, str) else v
        self._values = merged

    def __getitem__(self, key: str):
        return self._values[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def __repr__(self) -> str:
        return f"ArchSpec({self.digest()})"

    def replace(self, **kw) -> "ArchSpec":
        """Copy with keys overridden; dots in keys are written as ``__`` here."""
        upd = {k.replace("__", "."): v for k, v in kw.items()}
        return ArchSpec({**self._values, **upd})

    def updated(self, values: Mapping[str, object]) -> "ArchSpec":
        return ArchSpec({**self._values, **values})

    def blocks_per_scale(self) -> list[int]:
        return [self[f"backbone.blocks.{k}"] for k in SCALE_KEYS]

    def to_lines(self) -> list[str]:
        return [f"{k}={format_value(v)}" for k, v in sorted(self._values.items())]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.to_lines()).encode()).hexdigest()[:12]

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "ArchSpec":
        vals = {}
        for raw in lines:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ArchError(f"malformed line {raw!r}")
            k, v = line.split("=", 1)
            vals[k.strip()] = v.strip()
        return cls(vals)

    def validate(self, strict: bool = True) -> "ArchSpec":
        """Check enums always; with ``strict`` also the published value lists."""
        for k, allowed in ENUMS.items():
            if self[k] not in allowed:
                raise ArchError(f"{k}={self[k]!r} not in {allowed}")
        for k, like in DEFAULTS.items():
            v = self[k]
            if isinstance(like, int) and not isinstance(like, bool):
                if not isinstance(v, (int, np.integer)) or v < 0:
                    raise ArchError(f"{k}={v!r} must be a nonnegative integer")
        positive = ["point.fc_channel", "point.pointnet_width", "point.heads", "point.mlp_expansion",
                    "backbone.tfm_channel", "backbone.tfm_heads", "backbone.tfm_mlp_expansion",
                    "backbone.window", "head.tfm_channel", "head.tfm_heads", "head.tfm_mlp_expansion",
                    "point.pointnet_depth"]
        for k in positive:
            if self[k] < 1:
                raise ArchError(f"{k} must be >= 1")
        for width, heads in (("point.fc_channel", "point.heads"), ("backbone.tfm_channel", "backbone.tfm_heads"),
                             ("head.tfm_channel", "head.tfm_heads")):
            if self[width] % self[heads]:
                raise ArchError(f"{width}={self[width]} not divisible by {heads}={self[heads]}")
        if strict:
            domains = dict(VOXEL_DOMAINS)
            domains["point.fc_channel"] = FC_CHANNELS
            if self["point.type"] == "pointnet":
                domains["point.pointnet_depth"] = POINTNET_DEPTHS
            for k, allowed in domains.items():
                if self[k] not in allowed:
                    raise ArchError(f"{k}={self[k]!r} outside the search domain {allowed}")
        return self


def enumerate_point_space() -> list[ArchSpec]:
    """Every point-architecture variant: PointNet channel x depth, then the PVT depth ladder."""
    specs = [ArchSpec({"point.type": "pointnet", "point.fc_channel": c, "point.pointnet_depth": n})
             for c in FC_CHANNELS for n in POINTNET_DEPTHS]
    specs += [ArchSpec({"point.type": "pvt", "point.depth": dv}) for dv in PVT_DEPTHS]
    return specs


def sample_point_specs(count: int, seed: int) -> list[ArchSpec]:
    if count < 1:
        raise ArchError("count must be >= 1")
    space = enumerate_point_space()
    rng = np.random.Generator(np.random.PCG64(seed))
    return [space[int(i)] for i in rng.integers(0, len(space), count)]


def sample_voxel_specs(count: int, seed: int, base: ArchSpec | None = None) -> list[ArchSpec]:
    """Independent uniform draws over every voxel-space key.

    The point side is held at the two-layer 128-channel PointNet unless
    ``base`` says otherwise.
    """
    if count < 1:
        raise ArchError("count must be >= 1")
    base = base or ArchSpec({"point.type": "pointnet", "point.pointnet_depth": 2, "point.fc_channel": 128})
    rng = np.random.Generator(np.random.PCG64(seed))
    out = []
    for _ in range(count):
        draw = {k: dom[int(rng.integers(0, len(dom)))] for k, dom in VOXEL_DOMAINS.items()}
        out.append(base.updated({**draw, "backbone.mode": "multi_scale"}).validate())
    return out
