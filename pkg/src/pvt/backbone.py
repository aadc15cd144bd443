"""Dense masked window-attention backbone, CenterNet-style heads, loss and decoding.

Maps are batched: ``features`` is [B, H, W, d] with an occupancy mask
[B, H, W]. Unoccupied cells are zero after every block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy.ndimage import maximum_filter

from . import tensor as T
from .arch import SCALE_KEYS
from .nn import AttentionBlockParams, Linear, self_attention_block
from .scenes import Box2D, SceneTargets, TargetGrid
from .tensor import Tensor

# stride factors of the multi-scale ladder and the step between consecutive scales
SCALES = (1, 2, 4, 16, 32)
SCALE_STEPS = (2, 2, 4, 2)
HEAD_STRIDE = {0: 2, 1: 1}      # vehicle-like at stride 2, pedestrian-like at stride 1
BOX_CHANNELS = 5
HEAD_OUT = 1 + BOX_CHANNELS + 1  # heatmap, box, foreground


@dataclass
class BEVFeatureMap:
    features: Tensor          # B x H x W x d
    occupancy: np.ndarray     # B x H x W bool
    scale: int = 1

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.features.shape


def scatter_to_bev(voxel_features, coords: np.ndarray, grid_extent: tuple[int, int],
                   batch_size: int = 1) -> BEVFeatureMap:
    """Place voxel rows on a zero grid. ``coords`` rows are (ix, iy) or (b, ix, iy)."""
    voxel_features = T.as_tensor(voxel_features)
    coords = np.asarray(coords, dtype=np.int64)
    if coords.shape[1] == 2:
        coords = np.column_stack([np.zeros(len(coords), np.int64), coords])
    h, w = grid_extent
    if len(coords) and ((coords[:, 1] < 0).any() or (coords[:, 1] >= h).any()
                        or (coords[:, 2] < 0).any() or (coords[:, 2] >= w).any()
                        or (coords[:, 0] < 0).any() or (coords[:, 0] >= batch_size).any()):
        raise ValueError("scatter_to_bev: coordinates outside the grid")
    flat = (coords[:, 0] * h + coords[:, 1]) * w + coords[:, 2]
    d = voxel_features.shape[1]
    grid = T.scatter_rows(voxel_features, flat, batch_size * h * w)
    occ = np.zeros(batch_size * h * w, dtype=bool)
    occ[flat] = True
    return BEVFeatureMap(T.reshape(grid, (batch_size, h, w, d)), occ.reshape(batch_size, h, w), 1)


def gather_from_bev(bev: BEVFeatureMap, coords: np.ndarray) -> Tensor:
    coords = np.asarray(coords, dtype=np.int64)
    if coords.shape[1] == 2:
        coords = np.column_stack([np.zeros(len(coords), np.int64), coords])
    b, h, w, d = bev.shape
    flat = (coords[:, 0] * h + coords[:, 1]) * w + coords[:, 2]
    return T.take(T.reshape(bev.features, (b * h * w, d)), flat, axis=0)


# ----------------------------------------------------------------------------
# windows


@dataclass(frozen=True)
class WindowLayout:
    batch: int
    height: int
    width: int
    window: int

    @property
    def padded(self) -> tuple[int, int]:
        w = self.window
        return -(-self.height // w) * w, -(-self.width // w) * w

    @property
    def grid(self) -> tuple[int, int]:
        ph, pw = self.padded
        return ph // self.window, pw // self.window

    @property
    def num_windows(self) -> int:
        gh, gw = self.grid
        return self.batch * gh * gw


def window_partition(bev: BEVFeatureMap, window: int):
    """Split into non-overlapping window x window token groups (zero padded).

    Returns (tokens [nW, window*window, d], mask [nW, window*window], layout).
    """
    b, h, w, d = bev.shape
    lay = WindowLayout(b, h, w, window)
    ph, pw = lay.padded
    gh, gw = lay.grid
    x = bev.features
    occ = bev.occupancy
    if (ph, pw) != (h, w):
        x = T.pad(x, ((0, 0), (0, ph - h), (0, pw - w), (0, 0)))
        occ = np.pad(occ, ((0, 0), (0, ph - h), (0, pw - w)))
    x = T.reshape(x, (b, gh, window, gw, window, d))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (b * gh * gw, window * window, d))
    m = occ.reshape(b, gh, window, gw, window).transpose(0, 1, 3, 2, 4).reshape(b * gh * gw, window * window)
    return x, m, lay


def window_merge(tokens, layout: WindowLayout) -> Tensor:
    """Inverse of :func:`window_partition` (padding cropped away)."""
    tokens = T.as_tensor(tokens)
    d = tokens.shape[-1]
    gh, gw = layout.grid
    win = layout.window
    x = T.reshape(tokens, (layout.batch, gh, gw, win, win, d))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (layout.batch, gh * win, gw * win, d))
    if (gh * win, gw * win) != (layout.height, layout.width):
        x = x[:, :layout.height, :layout.width, :]
    return x


def swformer_block(bev: BEVFeatureMap, params: AttentionBlockParams, window: int) -> BEVFeatureMap:
    """Masked self-attention within windows plus MLP; unoccupied cells re-zeroed."""
    tokens, mask, lay = window_partition(bev, window)
    out = self_attention_block(tokens, mask, params)
    x = T.where_mask(window_merge(out, lay), bev.occupancy[..., None])
    return BEVFeatureMap(x, bev.occupancy, bev.scale)


def downsample(bev: BEVFeatureMap, factor: int) -> BEVFeatureMap:
    """Per-channel masked max over factor x factor cells; occupancy is OR-ed."""
    b, h, w, d = bev.shape
    hh, ww = -(-h // factor), -(-w // factor)
    x, occ = bev.features, bev.occupancy
    if (hh * factor, ww * factor) != (h, w):
        x = T.pad(x, ((0, 0), (0, hh * factor - h), (0, ww * factor - w), (0, 0)))
        occ = np.pad(occ, ((0, 0), (0, hh * factor - h), (0, ww * factor - w)))
    x = T.reshape(x, (b, hh, factor, ww, factor, d))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (b, hh, ww, factor * factor, d))
    m = occ.reshape(b, hh, factor, ww, factor).transpose(0, 1, 3, 2, 4).reshape(b, hh, ww, factor * factor)
    v, _ = T.masked_max(x, m[..., None], axis=3, allow_empty=True)
    return BEVFeatureMap(v, m.any(axis=3), bev.scale * factor)


def upsample_fuse(coarse: BEVFeatureMap, fine: BEVFeatureMap, fuse: Linear) -> BEVFeatureMap:
    """Nearest-neighbour upsample, concat with ``fine``, project back to d."""
    factor = coarse.scale // fine.scale
    _, h, w, _ = fine.shape
    up = T.take(coarse.features, np.arange(h) // factor, axis=1)
    up = T.take(up, np.arange(w) // factor, axis=2)
    x = fuse(T.concat([fine.features, up], axis=3))
    return BEVFeatureMap(T.where_mask(x, fine.occupancy[..., None]), fine.occupancy, fine.scale)


# ----------------------------------------------------------------------------
# backbone + heads


@dataclass
class BackboneParams:
    mode: str
    window: int
    stages: list[list[AttentionBlockParams]]     # one list per scale used
    fuse: list[Linear]                            # coarse-to-fine fusions (multi-scale only)

    @classmethod
    def init(cls, rng, d: int, heads: int, expansion: int, mode: str, blocks_per_scale,
             single_scale_blocks: int = 6, window: int = 4) -> "BackboneParams":
        if mode == "single_scale":
            stages = [[AttentionBlockParams.init(rng, d, heads, expansion) for _ in range(single_scale_blocks)]]
            fuse = []
        elif mode == "multi_scale":
            stages = [[AttentionBlockParams.init(rng, d, heads, expansion) for _ in range(n)]
                      for n in blocks_per_scale]
            fuse = [Linear.init(rng, 2 * d, d) for _ in range(len(SCALES) - 1)]
        else:
            raise ValueError(f"unknown backbone mode {mode!r}")
        return cls(mode, window, stages, fuse)

    def named_parameters(self, prefix: str = "backbone") -> Iterator[tuple[str, Tensor]]:
        keys = SCALE_KEYS if self.mode == "multi_scale" else ("0p32",)
        for key, stage in zip(keys, self.stages):
            for i, blk in enumerate(stage):
                yield from blk.named_parameters(f"{prefix}.s{key}.b{i}")
        for i, f in enumerate(self.fuse):
            yield from f.named_parameters(f"{prefix}.fuse{i}")


def backbone_forward(bev: BEVFeatureMap, params: BackboneParams) -> dict[int, BEVFeatureMap]:
    """Run the backbone; returns the stride-1 and stride-2 maps the heads read."""
    if params.mode == "single_scale":
        x = bev
        for blk in params.stages[0]:
            x = swformer_block(x, blk, params.window)
        return {1: x, 2: downsample(x, 2)}
    maps = []
    x = bev
    for i, stage in enumerate(params.stages):
        if i:
            x = downsample(x, SCALE_STEPS[i - 1])
        for blk in stage:
            x = swformer_block(x, blk, params.window)
        maps.append(x)
    fused = maps[-1]
    out = {}
    for i in range(len(maps) - 2, -1, -1):
        fused = upsample_fuse(fused, maps[i], params.fuse[i])
        out[maps[i].scale] = fused
    return {1: out[1], 2: out[2]}


@dataclass
class HeadParams:
    in_proj: Linear | None
    blocks: list[AttentionBlockParams]
    out: Linear

    @classmethod
    def init(cls, rng, d_in: int, d: int, heads: int, expansion: int, n_blocks: int) -> "HeadParams":
        in_proj = Linear.init(rng, d_in, d) if d_in != d else None
        blocks = [AttentionBlockParams.init(rng, d, heads, expansion) for _ in range(n_blocks)]
        out = Linear.init(rng, d, HEAD_OUT, gain=0.1)
        out.b.data[0] = -2.19      # heatmap prior of ~0.1
        return cls(in_proj, blocks, out)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        if self.in_proj is not None:
            yield from self.in_proj.named_parameters(f"{prefix}.in_proj")
        for i, blk in enumerate(self.blocks):
            yield from blk.named_parameters(f"{prefix}.b{i}")
        yield from self.out.named_parameters(f"{prefix}.out")


@dataclass
class DetectionOutput:
    heatmap: Tensor     # B x H x W logits
    box_reg: Tensor     # B x H x W x 5
    fg_seg: Tensor      # B x H x W logits
    scale: int


def detection_heads(maps: dict[int, BEVFeatureMap], heads: dict[int, HeadParams],
                    window: int) -> dict[int, DetectionOutput]:
    """Per-class transformer blocks then a 1x1 projection to heatmap/box/seg."""
    out = {}
    for cls, hp in heads.items():
        bev = maps[HEAD_STRIDE[cls]]
        if hp.in_proj is not None:
            bev = BEVFeatureMap(T.where_mask(hp.in_proj(bev.features), bev.occupancy[..., None]),
                                bev.occupancy, bev.scale)
        for blk in hp.blocks:
            bev = swformer_block(bev, blk, window)
        y = hp.out(bev.features)
        out[cls] = DetectionOutput(y[..., 0], y[..., 1:1 + BOX_CHANNELS], y[..., HEAD_OUT - 1], bev.scale)
    return out


# ----------------------------------------------------------------------------
# loss


@dataclass(frozen=True)
class LossWeights:
    heatmap: float = 1.0
    box: float = 1.0
    seg: float = 1.0


def focal_loss(logits: Tensor, target: np.ndarray, alpha: float = 2.0, beta: float = 4.0) -> Tensor:
    """Penalty-reduced focal loss on Gaussian heatmaps, normalised by #peaks."""
    pos = target >= 1.0
    p = T.sigmoid(logits)
    pos_term = T.where_mask(-T.log_sigmoid(logits) * (1.0 - p) ** alpha, pos)
    neg_w = np.where(pos, 0.0, (1.0 - target) ** beta)
    neg_term = -T.log_sigmoid(-logits) * p ** alpha * neg_w
    return (pos_term + neg_term).sum() * (1.0 / max(1, int(pos.sum())))


def box_l1_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """L1 on (dx, dy, log w, log l) and on the wrapped heading error at centre cells."""
    n = int(mask.sum())
    if n == 0:
        return Tensor(0.0)
    diff = pred - target
    wrap = np.zeros(diff.shape)
    wrap[..., 4] = 2 * np.pi * np.round(diff.data[..., 4] / (2 * np.pi))
    err = T.tabs(diff - wrap)
    return T.where_mask(err, mask[..., None].astype(bool)).sum() * (1.0 / (n * BOX_CHANNELS))


def seg_bce_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    ll = T.log_sigmoid(logits) * target + T.log_sigmoid(-logits) * (1.0 - target)
    return -ll.mean()


def total_loss(pred: dict[int, DetectionOutput], targets: dict[int, SceneTargets],
               weights: LossWeights = LossWeights()) -> tuple[Tensor, dict[str, float]]:
    """Weighted average of heatmap, box and foreground losses, summed over classes.

    ``targets`` hold batched arrays ([B, H, W] / [B, H, W, 5]) at each class's head scale.
    """
    total = Tensor(0.0)
    parts = {"heatmap": 0.0, "box": 0.0, "seg": 0.0}
    norm = weights.heatmap + weights.box + weights.seg
    for cls, out in pred.items():
        tg = targets[cls]
        hm = focal_loss(out.heatmap, tg.heatmap)
        bx = box_l1_loss(out.box_reg, tg.box, tg.box_mask)
        sg = seg_bce_loss(out.fg_seg, tg.foreground)
        total = total + (hm * weights.heatmap + bx * weights.box + sg * weights.seg) * (1.0 / norm)
        parts["heatmap"] += hm.item()
        parts["box"] += bx.item()
        parts["seg"] += sg.item()
    return total, parts


# ----------------------------------------------------------------------------
# decoding


def decode_boxes(heatmap_logits: np.ndarray, box_reg: np.ndarray, grid: TargetGrid, class_id: int,
                 score_threshold: float = 0.3, max_dets: int = 50) -> list[tuple[Box2D, float]]:
    """Boxes at 3x3 local maxima of one scene's heatmap (sigmoid of logits)."""
    scores = 1.0 / (1.0 + np.exp(-np.asarray(heatmap_logits, dtype=np.float64)))
    peak = maximum_filter(scores, size=3, mode="constant", cval=-np.inf)
    ii, jj = np.nonzero((scores >= peak) & (scores > score_threshold))
    order = np.argsort(-scores[ii, jj], kind="stable")[:max_dets]
    dets = []
    for k in order:
        i, j = ii[k], jj[k]
        dx, dy, lw, ll, hd = box_reg[i, j]
        cx = grid.origin_xy[0] + (i + 0.5 + dx) * grid.cell_size
        cy = grid.origin_xy[1] + (j + 0.5 + dy) * grid.cell_size
        w, l = math.exp(min(lw, 5.0)), math.exp(min(ll, 5.0))
        dets.append((Box2D(float(cx), float(cy), w, l, float(hd), class_id), float(scores[i, j])))
    return dets
