"""End-to-end detector: point encoder, BEV scatter, backbone and per-class heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .arch import ArchSpec
from .backbone import (HEAD_STRIDE, BackboneParams, DetectionOutput, HeadParams, LossWeights,
                       backbone_forward, detection_heads, scatter_to_bev, total_loss)
from .encoder import PointNetParams, PVTParams, encode
from .nn import Linear
from .scenes import PEDESTRIAN, VEHICLE, Scene, SceneTargets, TargetGrid, rasterize_targets
from .tensor import Tensor
from .voxelizer import DropStats, FixedVoxelBatch, PillarGridConfig, fixed_voxelize

HEAD_NAMES = {VEHICLE: "vehicle", PEDESTRIAN: "pedestrian"}


def build_point_encoder(rng, spec: ArchSpec, f: int) -> PointNetParams | PVTParams:
    c = spec["point.fc_channel"]
    if spec["point.type"] == "pointnet":
        widths = [c] + [spec["point.pointnet_width"]] * (spec["point.pointnet_depth"] - 1)
        return PointNetParams.init(rng, f, widths, spec["point.aggregation"])
    return PVTParams.init(rng, f, c, spec["point.heads"], spec["point.mlp_expansion"],
                          spec["point.depth"], spec["point.query"], spec["point.pp_depth"],
                          spec["point.pv_mlp"])


def point_width(spec: ArchSpec) -> int:
    if spec["point.type"] == "pointnet" and spec["point.pointnet_depth"] > 1:
        return spec["point.pointnet_width"]
    return spec["point.fc_channel"]


@dataclass
class VoxelInput:
    """Several scenes' fixed voxel batches stacked into one encoder call."""

    batch: FixedVoxelBatch        # occupied rows only, all scenes
    coords: np.ndarray            # n x 3 (scene, ix, iy)
    batch_size: int
    drop_stats: DropStats


def stack_voxel_batches(batches: Sequence[FixedVoxelBatch]) -> VoxelInput:
    feats, masks, coords = [], [], []
    cap = out_rng = vox = 0
    for b, vb in enumerate(batches):
        n = vb.num_voxels
        feats.append(vb.features[:n])
        masks.append(vb.mask[:n])
        coords.append(np.column_stack([np.full(n, b, np.int64), vb.coords[:n]]))
        cap += vb.drop_stats.cap
        out_rng += vb.drop_stats.out_of_range
        vox += vb.drop_stats.voxel
    first = batches[0]
    features = np.concatenate(feats) if feats else first.features[:0]
    mask = np.concatenate(masks) if masks else first.mask[:0]
    c = np.concatenate(coords) if coords else np.zeros((0, 3), np.int64)
    stacked = FixedVoxelBatch(features, mask, c[:, 1:], len(c), DropStats(cap, out_rng, vox),
                              int(mask.sum()))
    return VoxelInput(stacked, c, len(batches), stacked.drop_stats)


def target_grid(grid: PillarGridConfig, stride: int) -> TargetGrid:
    h, w = grid.grid_extent
    return TargetGrid(tuple(grid.origin_xy), grid.voxel_size * stride, (-(-h // stride), -(-w // stride)))


def batch_targets(scenes: Sequence[Scene], grid: PillarGridConfig) -> dict[int, SceneTargets]:
    """Per-class targets stacked over scenes at each class head's stride."""
    out = {}
    for cls, stride in HEAD_STRIDE.items():
        tg = target_grid(grid, stride)
        per = [rasterize_targets([b for b in s.boxes if b.class_id == cls], tg) for s in scenes]
        out[cls] = SceneTargets(*(np.stack([getattr(t, k) for t in per])
                                  for k in ("heatmap", "box", "box_mask", "foreground")))
    return out


@dataclass
class Detector:
    spec: ArchSpec
    grid: PillarGridConfig
    point: PointNetParams | PVTParams
    input_proj: Linear | None
    backbone: BackboneParams
    heads: dict[int, HeadParams]

    @classmethod
    def build(cls, spec: ArchSpec, grid: PillarGridConfig, f: int = 4, seed: int = 0,
              strict: bool = False) -> "Detector":
        spec.validate(strict)
        rng = np.random.Generator(np.random.PCG64(seed))
        point = build_point_encoder(rng, spec, f)
        d = spec["backbone.tfm_channel"]
        dp = point_width(spec)
        input_proj = Linear.init(rng, dp, d) if dp != d else None
        backbone = BackboneParams.init(rng, d, spec["backbone.tfm_heads"], spec["backbone.tfm_mlp_expansion"],
                                       spec["backbone.mode"], spec.blocks_per_scale(),
                                       spec["backbone.single_scale_blocks"], spec["backbone.window"])
        dh = spec["head.tfm_channel"]
        heads = {cls_id: HeadParams.init(rng, d, dh, spec["head.tfm_heads"], spec["head.tfm_mlp_expansion"],
                                         spec[f"head.{name}.blocks"])
                 for cls_id, name in HEAD_NAMES.items()}
        return cls(spec, grid, point, input_proj, backbone, heads)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.point.named_parameters("pvt" if isinstance(self.point, PVTParams) else "pointnet")
        if self.input_proj is not None:
            yield from self.input_proj.named_parameters("input_proj")
        yield from self.backbone.named_parameters("backbone")
        for cls_id, hp in self.heads.items():
            yield from hp.named_parameters(f"head.{HEAD_NAMES[cls_id]}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def voxelize(self, scenes: Sequence[Scene]) -> VoxelInput:
        return stack_voxel_batches([fixed_voxelize(s.cloud, self.grid) for s in scenes])

    def forward(self, vin: VoxelInput) -> dict[int, DetectionOutput]:
        feats = encode(vin.batch, self.point)
        if self.input_proj is not None:
            feats = self.input_proj(feats)
        bev = scatter_to_bev(feats, vin.coords, self.grid.grid_extent, vin.batch_size)
        maps = backbone_forward(bev, self.backbone)
        return detection_heads(maps, self.heads, self.backbone.window)

    def loss(self, scenes: Sequence[Scene], weights: LossWeights = LossWeights()):
        pred = self.forward(self.voxelize(scenes))
        return total_loss(pred, batch_targets(scenes, self.grid), weights)
