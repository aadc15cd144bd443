import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from pvt import tensor as T
from pvt.gradcheck import relative_error
from pvt.optim import AdamWState, WarmupCosine, adamw_step
from pvt.tensor import Tensor, backward, finite_diff_grad


def rand(rng, *shape, grad=True):
    return Tensor(rng.uniform(-1, 1, size=shape), requires_grad=grad)


def grad_err(loss_fn, *xs, eps=1e-6):
    for x in xs:
        x.grad = None
    backward(loss_fn())
    return max(relative_error(x.grad, finite_diff_grad(lambda _: loss_fn(), x, eps)) for x in xs)


# --- matmul / linear ---------------------------------------------------------

def test_matmul_identity():
    out = T.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_row_col():
    assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient():
    rng = np.random.default_rng(0)
    a, b = rand(rng, 4, 5), rand(rng, 5, 3)
    w = rng.normal(size=(4, 3))
    assert grad_err(lambda: (T.matmul(a, b) * w).sum(), a, b) < 1e-6


def test_batched_matmul_broadcast_gradient():
    rng = np.random.default_rng(1)
    a, b = rand(rng, 2, 3, 4, 5), rand(rng, 5, 2)
    assert grad_err(lambda: (T.matmul(a, b) ** 2).sum(), a, b) < 1e-6


def test_linear_cases():
    out = T.linear(Tensor([1.0, 1.0]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [1, 1])
    out = T.linear(Tensor([0.0, 0.0]), Tensor(np.arange(4.0).reshape(2, 2)), Tensor([5.0, -1.0]))
    np.testing.assert_array_equal(out.data, [5, -1])
    with pytest.raises(T.ShapeError):
        T.linear(Tensor(np.ones(3)), Tensor(np.ones((2, 2))), Tensor(np.ones(2)))


def test_linear_gradient():
    rng = np.random.default_rng(2)
    x, w, b = rand(rng, 3, 4), rand(rng, 4, 2), rand(rng, 2)
    assert grad_err(lambda: (T.linear(x, w, b) ** 2).sum(), x, w, b) < 1e-6


# --- activations / layer norm ------------------------------------------------

def test_relu():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 2.0])).data, [0, 2])


def test_gelu_gradient():
    rng = np.random.default_rng(3)
    x = rand(rng, 10)
    assert grad_err(lambda: (T.gelu(x) * np.arange(10)).sum(), x) < 1e-5


def test_layer_norm_constant_row_is_zero():
    out = T.layer_norm(Tensor(np.full((1, 5), 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)), 1e-6)
    np.testing.assert_array_equal(out.data, np.zeros((1, 5)))


def test_layer_norm_moments():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(6, 16)) * 3 + 1)
    out = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=1e-12).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-9)


def test_layer_norm_eps_validated():
    with pytest.raises(T.ParameterError):
        T.layer_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)


def test_layer_norm_gradient():
    rng = np.random.default_rng(5)
    x, g, b = rand(rng, 3, 6), rand(rng, 6), rand(rng, 6)
    w = rng.normal(size=(3, 6))
    assert grad_err(lambda: (T.layer_norm(x, g, b) * w).sum(), x, g, b) < 1e-4


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (3, 7), elements=st.floats(-5, 5)), st.floats(-100, 100))
def test_layer_norm_shift_invariant(x, c):
    gamma, beta = Tensor(np.linspace(0.5, 2, 7)), Tensor(np.linspace(-1, 1, 7))
    a = T.layer_norm(Tensor(x), gamma, beta).data
    b = T.layer_norm(Tensor(x + c), gamma, beta).data
    np.testing.assert_allclose(a, b, atol=1e-9)


# --- masked softmax ----------------------------------------------------------

def test_masked_softmax_examples():
    np.testing.assert_array_equal(T.masked_softmax(Tensor([0.0, 0.0]), [1, 1]).data, [0.5, 0.5])
    np.testing.assert_array_equal(T.masked_softmax(Tensor([9.0, 100.0]), [1, 0]).data, [1, 0])


def test_masked_softmax_all_masked_gives_zeros_and_counts():
    T.diagnostics.reset()
    out = T.masked_softmax(Tensor([[1.0, 2.0], [3.0, 4.0]]), [[0, 0], [1, 1]])
    np.testing.assert_array_equal(out.data[0], [0, 0])
    assert not np.isnan(out.data).any()
    assert T.diagnostics.all_masked_softmax == 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_masked_softmax_is_distribution(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(2, 5)) * 10
    mask = rng.random((2, 5)) < 0.6
    mask[:, rng.integers(5)] = True
    out = T.masked_softmax(Tensor(logits), mask).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    assert (out[~mask] == 0).all()


def test_masked_softmax_gradient():
    rng = np.random.default_rng(6)
    x = rand(rng, 3, 5)
    mask = np.array([[1, 1, 0, 1, 0], [1, 0, 0, 0, 0], [1, 1, 1, 1, 1]])
    w = rng.normal(size=(3, 5))
    assert grad_err(lambda: (T.masked_softmax(x, mask) * w).sum(), x) < 1e-6


# --- masked max / mean -------------------------------------------------------

def test_masked_max_examples():
    v, arg = T.masked_max(Tensor([[1.0, 5.0], [3.0, 2.0]]), np.array([[1], [1]]), axis=0)
    np.testing.assert_array_equal(v.data, [3, 5])
    np.testing.assert_array_equal(arg, [1, 0])
    v, _ = T.masked_max(Tensor([[1.0, 5.0], [9.0, 9.0]]), np.array([[1], [0]]), axis=0)
    np.testing.assert_array_equal(v.data, [1, 5])


def test_masked_max_all_masked_raises():
    with pytest.raises(T.EmptySliceError):
        T.masked_max(Tensor([[1.0], [2.0]]), np.array([[0], [0]]), axis=0)


def test_masked_max_brute_force():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(32, 128))
    mask = rng.random(32) < 0.5
    mask[3] = True
    v, _ = T.masked_max(Tensor(x), mask[:, None], axis=0)
    expected = [max(x[i, c] for i in range(32) if mask[i]) for c in range(128)]
    np.testing.assert_array_equal(v.data, expected)


def test_masked_max_tie_goes_to_lowest_index():
    x = Tensor(np.array([[1.0], [4.0], [4.0]]), requires_grad=True)
    v, arg = T.masked_max(x, np.ones((3, 1)), axis=0)
    assert arg.tolist() == [1]
    backward(v.sum())
    np.testing.assert_array_equal(x.grad, [[0], [1], [0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_masked_max_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(8, 4))
    mask = rng.random(8) < 0.7
    mask[0] = True
    perm = rng.permutation(8)
    v1, a1 = T.masked_max(Tensor(x), mask[:, None], axis=0)
    v2, a2 = T.masked_max(Tensor(x[perm]), mask[perm][:, None], axis=0)
    np.testing.assert_array_equal(v1.data, v2.data)
    np.testing.assert_array_equal(perm[a2], a1)


def test_masked_max_gradient():
    rng = np.random.default_rng(8)
    x = rand(rng, 4, 6, 3)
    mask = rng.random((4, 6)) < 0.6
    mask[:, 0] = True
    w = rng.normal(size=(4, 3))
    assert grad_err(lambda: (T.masked_max(x, mask[..., None], axis=1)[0] * w).sum(), x) < 1e-6


def test_masked_mean_examples():
    np.testing.assert_array_equal(T.masked_mean(Tensor([[2.0], [4.0]]), [[1], [1]], 0).data, [3])
    np.testing.assert_array_equal(T.masked_mean(Tensor([[2.0], [4.0]]), [[1], [0]], 0).data, [2])
    with pytest.raises(T.EmptySliceError):
        T.masked_mean(Tensor([[2.0]]), [[0]], 0)


def test_masked_mean_brute_force_and_gradient():
    rng = np.random.default_rng(9)
    x = rand(rng, 10, 3)
    mask = rng.random(10) < 0.5
    mask[2] = True
    out = T.masked_mean(x, mask[:, None], 0).data
    np.testing.assert_allclose(out, x.data[mask].sum(0) / mask.sum(), rtol=1e-15)
    assert grad_err(lambda: (T.masked_mean(x, mask[:, None], 0) ** 2).sum(), x) < 1e-6


# --- backward ----------------------------------------------------------------

def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2, 4])


def test_backward_unused_param_gets_zero():
    x, p = Tensor([1.0], requires_grad=True), Tensor([3.0], requires_grad=True)
    backward((x * 2).sum() + p * 0)
    np.testing.assert_array_equal(p.grad, [0])


def test_backward_rejects_non_scalar():
    with pytest.raises(T.ShapeError):
        backward(Tensor([1.0, 2.0], requires_grad=True) * 2)


def test_backward_accumulates_across_calls():
    x = Tensor([3.0], requires_grad=True)
    backward((x * x).sum())
    backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [12])


def test_backward_fan_out_accumulates():
    rng = np.random.default_rng(10)
    x = rand(rng, 5)
    loss = lambda: (T.exp(x) * T.sigmoid(x) + T.gelu(x) * x).sum()
    assert grad_err(loss, x) < 1e-6


def test_tape_is_topologically_ordered():
    x = Tensor([1.0], requires_grad=True)
    y = x * 2
    z = y + x
    tape = T.GradTape.from_output(z.sum())
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]


def test_mlp_backward_matches_finite_differences():
    rng = np.random.default_rng(11)
    x = Tensor(rng.uniform(-1, 1, (6, 4)))
    w1, b1, w2, b2 = rand(rng, 4, 8), rand(rng, 8), rand(rng, 8, 1), rand(rng, 1)
    loss = lambda: (T.linear(T.gelu(T.linear(x, w1, b1)), w2, b2) ** 2).mean()
    assert grad_err(loss, w1, b1, w2, b2) < 1e-4


def test_shape_ops_gradients():
    rng = np.random.default_rng(12)
    x = rand(rng, 2, 3, 4)
    w = rng.normal(size=(3, 2, 8))
    loss = lambda: (T.reshape(T.transpose(x, (1, 0, 2)), (3, 2, 4)) @ Tensor(rng.normal(size=(4, 8)) * 0 + 1) * w).sum()
    assert grad_err(loss, x) < 1e-6
    idx = np.array([2, 0, 2, 1])
    assert grad_err(lambda: (T.take(x, idx, axis=1) ** 2).sum(), x) < 1e-6
    assert grad_err(lambda: (T.pad(x, ((0, 0), (1, 2), (0, 1))) ** 3).sum(), x) < 1e-6
    assert grad_err(lambda: (T.concat([x, x * 2], axis=2) ** 2).sum(), x) < 1e-6
    assert grad_err(lambda: (x[:, 1:, :2] ** 2).sum(), x) < 1e-6
    y = rand(rng, 3, 4)
    assert grad_err(lambda: (T.scatter_rows(y, np.array([4, 0, 2]), 5) ** 2).sum(), y) < 1e-6


def test_log_sigmoid_stable_and_gradient():
    out = T.log_sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
    np.testing.assert_allclose(out, [-1000.0, np.log(0.5), 0.0])
    rng = np.random.default_rng(13)
    x = rand(rng, 7)
    assert grad_err(lambda: T.log_sigmoid(x * 5).sum(), x) < 1e-6


# --- finite differences ------------------------------------------------------

def test_finite_diff_examples():
    rng = np.random.default_rng(14)
    x = Tensor(rng.normal(size=(3, 2)))
    np.testing.assert_allclose(finite_diff_grad(lambda t: t.sum(), x, 1e-5), np.ones((3, 2)), atol=1e-9)
    g = finite_diff_grad(lambda t: (t * t).sum(), Tensor([3.0]), 1e-5)
    assert abs(g[0] - 6.0) < 1e-6


def test_finite_diff_eps_range():
    with pytest.raises(T.ParameterError):
        finite_diff_grad(lambda t: t.sum(), Tensor([1.0]), 1e-2)


# --- optimizer ---------------------------------------------------------------

def test_adamw_zero_grad_no_decay_is_identity():
    p = Tensor([1.0, -2.0], requires_grad=True)
    state = AdamWState.for_params([p])
    adamw_step([p], [np.zeros(2)], state, lr=1e-2, weight_decay=0.0)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step == 1


def test_adamw_decreases_quadratic():
    p = Tensor([1.0], requires_grad=True)
    state = AdamWState.for_params([p])
    before = float(p.data[0] ** 2)
    backward((p * p).sum())
    adamw_step([p], [p.grad], state, lr=1e-2, weight_decay=0.01)
    assert float(p.data[0] ** 2) < before


def test_adamw_shape_mismatch():
    p = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(T.ShapeError):
        adamw_step([p], [np.zeros(3)], AdamWState.for_params([p]), lr=1.0)


def test_warmup_cosine_schedule():
    sched = WarmupCosine(warmup_lr=3e-4, peak_lr=1.2e-3, warmup_steps=200, total_steps=2000)
    assert sched(0) == 3e-4
    assert sched(200) == pytest.approx(1.2e-3)
    assert sched(2000) == pytest.approx(0.0, abs=1e-15)
    assert sched(100) == pytest.approx((3e-4 + 1.2e-3) / 2)
