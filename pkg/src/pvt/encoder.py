"""Point-to-voxel encoders: PointNet pooling and attention aggregation.

Both consume a :class:`~pvt.voxelizer.FixedVoxelBatch` and return one
feature row per voxel slot ([N, d]); rows past ``num_voxels`` stay zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .nn import AttentionBlockParams, ContractError, Linear, cross_attention_block, self_attention_block
from .tensor import Tensor
from .voxelizer import DynamicVoxelBatch, FixedVoxelBatch

DEPTH_VARIANTS = ("FC", "FC-PV", "FC-PP-PV")
QUERY_MODES = ("latent", "residual")


class ConfigError(ValueError):
    """Encoder parameters are inconsistent with the requested variant."""


@dataclass
class PointNetParams:
    fc_layers: list[Linear]
    aggregation: str = "max"

    def __post_init__(self):
        if self.aggregation not in ("max", "mean"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        for a, b in zip(self.fc_layers, self.fc_layers[1:]):
            if a.w.shape[1] != b.w.shape[0]:
                raise ConfigError("PointNet layer widths do not chain")

    @property
    def d(self) -> int:
        return self.fc_layers[-1].w.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, f: int, widths: list[int], aggregation: str = "max"):
        dims = [f] + list(widths)
        return cls([Linear.init(rng, a, b) for a, b in zip(dims, dims[1:])], aggregation)

    def named_parameters(self, prefix: str = "pointnet") -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.fc_layers):
            yield from layer.named_parameters(f"{prefix}.fc{i}")


@dataclass
class PVTParams:
    fc: Linear
    pp_blocks: list[AttentionBlockParams]
    pv_block: AttentionBlockParams | None
    latent_query: Tensor
    depth_variant: str = "FC-PP-PV"
    query_mode: str = "residual"

    def __post_init__(self):
        if self.depth_variant not in DEPTH_VARIANTS:
            raise ConfigError(f"unknown depth variant {self.depth_variant!r}")
        if self.query_mode not in QUERY_MODES:
            raise ConfigError(f"unknown query mode {self.query_mode!r}")
        has_pv = self.pv_block is not None
        if has_pv != (self.depth_variant != "FC"):
            raise ConfigError(f"{self.depth_variant} inconsistent with pv_block presence")
        if bool(self.pp_blocks) != (self.depth_variant == "FC-PP-PV"):
            raise ConfigError(f"{self.depth_variant} inconsistent with {len(self.pp_blocks)} PP blocks")
        d = self.d
        blocks = self.pp_blocks + ([self.pv_block] if has_pv else [])
        if any(b.d != d for b in blocks) or self.latent_query.shape != (1, d):
            raise ConfigError("all PVT widths must equal the FC width")

    @property
    def d(self) -> int:
        return self.fc.w.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, f: int, d: int, heads: int, expansion: int = 2,
             depth_variant: str = "FC-PP-PV", query_mode: str = "residual", pp_depth: int = 1,
             pv_mlp: bool = True) -> "PVTParams":
        fc = Linear.init(rng, f, d)
        n_pp = pp_depth if depth_variant == "FC-PP-PV" else 0
        pp = [AttentionBlockParams.init(rng, d, heads, expansion) for _ in range(n_pp)]
        pv = None if depth_variant == "FC" else AttentionBlockParams.init(rng, d, heads, expansion, pv_mlp)
        latent = Tensor(rng.normal(0.0, 0.02, (1, d)), requires_grad=True)
        return cls(fc, pp, pv, latent, depth_variant, query_mode)

    def named_parameters(self, prefix: str = "pvt") -> Iterator[tuple[str, Tensor]]:
        yield from self.fc.named_parameters(f"{prefix}.fc")
        for i, blk in enumerate(self.pp_blocks):
            yield from blk.named_parameters(f"{prefix}.pp{i}" if len(self.pp_blocks) > 1 else f"{prefix}.pp")
        if self.pv_block is not None:
            yield from self.pv_block.named_parameters(f"{prefix}.pv")
            yield f"{prefix}.latent_q", self.latent_query


def _occupied(batch: FixedVoxelBatch):
    n = batch.num_voxels
    mask = batch.mask[:n].astype(bool)
    # masked-off slots are zeroed here, so no pad value can leak downstream
    feats = Tensor(np.where(mask[..., None], batch.features[:n], 0.0))
    return feats, mask


def _pad_rows(x: Tensor, total: int) -> Tensor:
    if x.shape[0] == total:
        return x
    return T.pad(x, ((0, total - x.shape[0]),) + ((0, 0),) * (x.ndim - 1))


def _empty(batch: FixedVoxelBatch, d: int) -> Tensor:
    return Tensor(np.zeros((batch.mask.shape[0], d)))


def pointnet_encode(batch: FixedVoxelBatch, params: PointNetParams) -> Tensor:
    """Shared per-point FC+ReLU stack, then masked max (or mean) over points."""
    if batch.num_voxels == 0:
        return _empty(batch, params.d)
    x, mask = _occupied(batch)
    for layer in params.fc_layers:
        x = T.relu(layer(x))
    if params.aggregation == "max":
        v, _ = T.masked_max(x, mask[..., None], axis=1)
    else:
        v = T.masked_mean(x, mask[..., None], axis=1)
    return _pad_rows(v, batch.mask.shape[0])


def pointnet_encode_dynamic(dyn: DynamicVoxelBatch, params: PointNetParams) -> Tensor:
    """Same network on the ragged layout: FC on every point, then a segment reduction."""
    if dyn.n_occ == 0:
        return Tensor(np.zeros((0, params.d)))
    x = Tensor(dyn.flat_features)
    for layer in params.fc_layers:
        x = T.relu(layer(x))
    if params.aggregation == "max":
        return T.segment_max(x, dyn.voxel_id, dyn.n_occ)
    return T.segment_mean(x, dyn.voxel_id, dyn.n_occ)


def residual_query(pooled, latent) -> Tensor:
    """Pooled voxel feature plus the learned latent: [N, 1, d] + [1, d]."""
    pooled, latent = T.as_tensor(pooled), T.as_tensor(latent)
    if pooled.shape[-1] != latent.shape[-1]:
        raise ContractError(f"residual_query: width {pooled.shape[-1]} != latent width {latent.shape[-1]}")
    return pooled + latent


def pvt_encode(batch: FixedVoxelBatch, params: PVTParams, query_mode: str | None = None,
               **attn_kw) -> Tensor:
    """FC featurizer, optional point self-attention, then cross-attention pooling.

    ``query_mode`` defaults to the mode the parameters were built for;
    ``attn_kw`` is forwarded to the cross-attention (``logit_scale``,
    ``weights_hook``).
    """
    mode = params.query_mode if query_mode is None else query_mode
    if mode not in QUERY_MODES:
        raise ConfigError(f"unknown query mode {mode!r}")
    if mode != params.query_mode:
        raise ConfigError(f"parameters were trained for {params.query_mode!r} queries, not {mode!r}")
    if batch.num_voxels == 0:
        return _empty(batch, params.d)
    x, mask = _occupied(batch)
    x = T.relu(params.fc(x))
    if params.depth_variant == "FC":
        v, _ = T.masked_max(x, mask[..., None], axis=1)
        return _pad_rows(v, batch.mask.shape[0])
    for blk in params.pp_blocks:
        x = T.where_mask(self_attention_block(x, mask, blk), mask[..., None])
    n, d = x.shape[0], params.d
    if mode == "residual":
        pooled, _ = T.masked_max(x, mask[..., None], axis=1)
        query = residual_query(T.reshape(pooled, (n, 1, d)), params.latent_query)
    else:
        query = T.reshape(params.latent_query, (1, 1, d)) + Tensor(np.zeros((n, 1, d)))
    v = cross_attention_block(query, x, mask, params.pv_block, **attn_kw)
    return _pad_rows(T.reshape(v, (n, d)), batch.mask.shape[0])


def encode(batch: FixedVoxelBatch, params: PointNetParams | PVTParams) -> Tensor:
    if isinstance(params, PVTParams):
        return pvt_encode(batch, params)
    return pointnet_encode(batch, params)
