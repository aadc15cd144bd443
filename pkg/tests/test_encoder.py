import numpy as np
import pytest

from pvt import tensor as T
from pvt.encoder import (
    ConfigError,
    PointNetParams,
    PVTParams,
    pointnet_encode,
    pvt_encode,
    residual_query,
)
from pvt.gradcheck import check_gradients, relative_error
from pvt.nn import AttentionBlockParams, ContractError, Linear, mha_forward, weighted_aggregate
from pvt.tensor import Tensor, backward, finite_diff_grad
from pvt.voxelizer import DropStats, FixedVoxelBatch


def random_batch(rng, n_voxels=6, n_occ=5, p=8, f=4, full=False):
    feats = rng.uniform(-1, 1, (n_voxels, p, f))
    mask = np.zeros((n_voxels, p))
    for i in range(n_occ):
        k = p if full else rng.integers(1, p + 1)
        mask[i, rng.permutation(p)[:k]] = 1
    feats *= mask[..., None]
    coords = np.zeros((n_voxels, 2), dtype=np.int64)
    coords[:n_occ] = np.stack([np.arange(n_occ), np.zeros(n_occ)], 1)
    return FixedVoxelBatch(feats, mask, coords, n_occ, DropStats(), int(mask.sum()))


def single_voxel(batch, i):
    return FixedVoxelBatch(batch.features[i:i + 1], batch.mask[i:i + 1], batch.coords[i:i + 1], 1)


def permute_within(batch, rng):
    feats, mask = batch.features.copy(), batch.mask.copy()
    for i in range(batch.num_voxels):
        perm = rng.permutation(feats.shape[1])
        feats[i], mask[i] = feats[i, perm], mask[i, perm]
    return FixedVoxelBatch(feats, mask, batch.coords, batch.num_voxels)


# --- attention ---------------------------------------------------------------

def test_mha_single_key_returns_value_path():
    rng = np.random.default_rng(0)
    p = AttentionBlockParams.init(rng, 8, 2)
    q, k = Tensor(rng.normal(size=(3, 2, 8))), Tensor(rng.normal(size=(3, 1, 8)))
    v = Tensor(rng.normal(size=(3, 1, 8)))
    out = mha_forward(q, k, v, np.ones((3, 1)), p).data
    expected = p.out_proj(p.v_proj(v)).data
    np.testing.assert_allclose(out, np.broadcast_to(expected, out.shape), atol=1e-14)


def test_mha_identical_keys_match_single_key():
    rng = np.random.default_rng(1)
    p = AttentionBlockParams.init(rng, 8, 4)
    q = Tensor(rng.normal(size=(2, 1, 8)))
    kv1 = rng.normal(size=(2, 1, 8))
    kv5 = np.repeat(kv1, 5, axis=1)
    a = mha_forward(q, Tensor(kv1), Tensor(kv1), np.ones((2, 1)), p).data
    b = mha_forward(q, Tensor(kv5), Tensor(kv5), np.ones((2, 5)), p).data
    np.testing.assert_allclose(a, b, atol=1e-13)


def test_mha_gradients_all_params():
    rng = np.random.default_rng(2)
    p = AttentionBlockParams.init(rng, 8, 2)
    for _, t in p.named_parameters("a"):
        t.data += rng.normal(0, 0.1, t.shape)
    q = Tensor(rng.uniform(-1, 1, (2, 1, 8)), requires_grad=True)
    kv = Tensor(rng.uniform(-1, 1, (2, 5, 8)), requires_grad=True)
    mask = np.array([[1, 1, 0, 1, 0], [1, 1, 1, 1, 1]])
    w = rng.normal(size=(2, 1, 8))
    loss = lambda: (mha_forward(q, kv, kv, mask, p) * w).sum()
    errs = check_gradients(loss, list(p.named_parameters("a")) + [("q", q), ("kv", kv)])
    assert max(errs.values()) < 1e-4, errs


def test_mha_all_masked_row_gives_zeros_and_counts():
    rng = np.random.default_rng(3)
    p = AttentionBlockParams.init(rng, 4, 1)
    T.diagnostics.reset()
    out = mha_forward(Tensor(rng.normal(size=(2, 1, 4))), Tensor(rng.normal(size=(2, 3, 4))),
                      Tensor(rng.normal(size=(2, 3, 4))), np.array([[0, 0, 0], [1, 0, 0]]), p).data
    np.testing.assert_array_equal(out[0], 0.0)
    assert T.diagnostics.all_masked_softmax == 1


def test_heads_must_divide_width():
    with pytest.raises(ContractError):
        AttentionBlockParams.init(np.random.default_rng(0), 6, 4)


# --- weighted aggregate ------------------------------------------------------

def test_weighted_aggregate_one_hot_selects_row():
    rng = np.random.default_rng(4)
    values = rng.normal(size=(3, 5, 6))
    w = np.zeros((3, 1, 5))
    w[np.arange(3), 0, [4, 0, 2]] = 1.0
    out = weighted_aggregate(w, values).data
    np.testing.assert_array_equal(out[:, 0], values[np.arange(3), [4, 0, 2]])


def test_weighted_aggregate_uniform_is_masked_mean():
    rng = np.random.default_rng(5)
    values = rng.normal(size=(4, 7, 3))
    mask = rng.random((4, 7)) < 0.6
    mask[:, 0] = True
    w = (mask / mask.sum(1, keepdims=True))[:, None, :]
    out = weighted_aggregate(w, values).data[:, 0]
    np.testing.assert_array_equal(out, T.masked_mean(Tensor(values), mask[..., None], 1).data)


def test_weighted_aggregate_argmax_is_masked_max_for_scalar_channel():
    rng = np.random.default_rng(6)
    values = rng.normal(size=(5, 9, 1))
    mask = rng.random((5, 9)) < 0.7
    mask[:, 3] = True
    ref, arg = T.masked_max(Tensor(values), mask[..., None], axis=1)
    w = np.zeros((5, 1, 9))
    w[np.arange(5), 0, arg[:, 0]] = 1.0
    np.testing.assert_array_equal(weighted_aggregate(w, values).data[:, 0], ref.data)


def test_weighted_aggregate_contract():
    with pytest.raises(ContractError):
        weighted_aggregate(np.array([[[0.5, 0.6]]]), np.ones((1, 2, 3)))
    with pytest.raises(ContractError):
        weighted_aggregate(np.array([[[1.5, -0.5]]]), np.ones((1, 2, 3)))


# --- PointNet ----------------------------------------------------------------

def test_pointnet_identity_weights_equal_masked_max():
    rng = np.random.default_rng(7)
    b = random_batch(rng)
    b.features[:] = np.abs(b.features)
    params = PointNetParams([Linear(Tensor(np.eye(4)), Tensor(np.zeros(4)))], "max")
    out = pointnet_encode(b, params).data
    ref, _ = T.masked_max(Tensor(b.features[:5]), b.mask[:5, :, None].astype(bool), axis=1)
    np.testing.assert_array_equal(out[:5], ref.data)
    assert not out[5:].any()


def test_pointnet_single_point_is_fc_stack():
    rng = np.random.default_rng(8)
    params = PointNetParams.init(rng, 4, [16, 16])
    pt = rng.normal(size=4)
    feats = np.zeros((1, 8, 4))
    feats[0, 3] = pt
    mask = np.zeros((1, 8))
    mask[0, 3] = 1
    out = pointnet_encode(FixedVoxelBatch(feats, mask, np.zeros((1, 2), int), 1), params).data
    x = Tensor(pt[None])
    for layer in params.fc_layers:
        x = T.relu(layer(x))
    np.testing.assert_allclose(out, x.data, rtol=1e-14, atol=0)


@pytest.mark.parametrize("agg", ["max", "mean"])
def test_pointnet_matches_per_voxel_loop(agg):
    rng = np.random.default_rng(9)
    b = random_batch(rng, 10, 8, 16)
    params = PointNetParams.init(rng, 4, [16, 32], agg)
    out = pointnet_encode(b, params).data
    for i in range(8):
        np.testing.assert_array_equal(out[i], pointnet_encode(single_voxel(b, i), params).data[0])


# --- PVT ---------------------------------------------------------------------

def test_residual_query_examples():
    latent = Tensor(np.arange(4.0)[None])
    np.testing.assert_array_equal(residual_query(np.zeros((3, 1, 4)), latent).data[:, 0], np.tile(latent.data, (3, 1)))
    pooled = np.random.default_rng(0).normal(size=(3, 1, 4))
    np.testing.assert_array_equal(residual_query(pooled, np.zeros((1, 4))).data, pooled)
    with pytest.raises(ContractError):
        residual_query(np.zeros((3, 1, 4)), np.zeros((1, 5)))


def test_residual_query_latent_gradient_is_sum_over_voxels():
    rng = np.random.default_rng(10)
    latent = Tensor(rng.normal(size=(1, 4)), requires_grad=True)
    pooled = rng.normal(size=(6, 1, 4))
    up = rng.normal(size=(6, 1, 4))
    backward((residual_query(pooled, latent) * up).sum())
    np.testing.assert_allclose(latent.grad, up.sum(axis=0), rtol=1e-14)
    numeric = finite_diff_grad(lambda t: (residual_query(pooled, t) * up).sum(), latent)
    assert relative_error(latent.grad, numeric) < 1e-6


def test_pvt_single_point_residual_path():
    rng = np.random.default_rng(11)
    params = PVTParams.init(rng, 4, 8, 2, depth_variant="FC-PV")
    b = random_batch(rng, 3, 3, 4)
    b.mask[:] = 0
    b.mask[:, 1] = 1
    b.features *= b.mask[..., None]
    out = pvt_encode(b, params).data
    blk = params.pv_block
    pt = T.relu(params.fc(Tensor(b.features[:, 1]))).reshape(3, 1, 8)
    q = pt + params.latent_query
    hk = blk.ln1(pt)
    x = q + blk.out_proj(blk.v_proj(hk))
    x = x + blk.mlp_out(T.gelu(blk.mlp_in(blk.ln2(x))))
    np.testing.assert_allclose(out, x.data[:, 0], atol=1e-13)


def test_pvt_fc_variant_equals_pointnet():
    rng = np.random.default_rng(12)
    params = PVTParams.init(rng, 4, 16, 4, depth_variant="FC")
    b = random_batch(rng)
    pn = PointNetParams([params.fc], "max")
    np.testing.assert_array_equal(pvt_encode(b, params).data, pointnet_encode(b, pn).data)


@pytest.mark.parametrize("variant", ["FC-PV", "FC-PP-PV"])
@pytest.mark.parametrize("mode", ["latent", "residual"])
def test_pvt_invariances(variant, mode):
    rng = np.random.default_rng(13)
    params = PVTParams.init(rng, 4, 8, 2, depth_variant=variant, query_mode=mode)
    b = random_batch(rng, 7, 6, 10)
    out = pvt_encode(b, params).data
    np.testing.assert_allclose(pvt_encode(permute_within(b, rng), params).data, out, atol=1e-9, rtol=0)
    junk = FixedVoxelBatch(np.where(b.mask[..., None] == 1, b.features, rng.normal(0, 50, b.features.shape)),
                           b.mask, b.coords, b.num_voxels)
    np.testing.assert_array_equal(pvt_encode(junk, params).data, out)
    for i in range(b.num_voxels):
        np.testing.assert_allclose(pvt_encode(single_voxel(b, i), params).data[0], out[i], atol=1e-12, rtol=0)
    assert not out[b.num_voxels:].any()


def test_pvt_latent_query_gradient():
    rng = np.random.default_rng(14)
    params = PVTParams.init(rng, 4, 8, 2, depth_variant="FC-PP-PV")
    b = random_batch(rng, 5, 4, 6)
    w = rng.normal(size=(5, 8))
    loss = lambda: (pvt_encode(b, params) * w).sum()
    errs = check_gradients(loss, params.named_parameters())
    assert max(errs.values()) < 1e-4, errs


def test_pvt_config_errors():
    rng = np.random.default_rng(15)
    params = PVTParams.init(rng, 4, 8, 2, depth_variant="FC-PV", query_mode="residual")
    with pytest.raises(ConfigError):
        pvt_encode(random_batch(rng), params, query_mode="latent")
    with pytest.raises(ConfigError):
        PVTParams(params.fc, [], None, params.latent_query, "FC-PV")


def test_attention_temperature_limit_selects_largest_logit():
    rng = np.random.default_rng(16)
    d = 4
    blk = AttentionBlockParams.init(rng, d, 1)
    blk.v_proj = Linear(Tensor(np.eye(d)), Tensor(np.zeros(d)))
    blk.out_proj = Linear(Tensor(np.eye(d)), Tensor(np.zeros(d)))
    q = Tensor(rng.normal(size=(1, 1, d)))
    kv = Tensor(rng.normal(size=(1, 6, d)))
    logits = (blk.q_proj(q).data @ blk.k_proj(kv).data.transpose(0, 2, 1))[0, 0]
    target = kv.data[0, np.argmax(logits)]
    dists = [np.abs(mha_forward(q, kv, kv, np.ones((1, 6)), blk, logit_scale=tau).data[0, 0] - target).max()
             for tau in (1, 10, 100)]
    assert dists[0] > dists[1] > dists[2]
