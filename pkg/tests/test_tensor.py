import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tptsumm import tensor as T
from tptsumm.rng import Rng
from tptsumm.tensor import Tensor


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def rand(shape, seed=0, scale=1.0):
    return t64(Rng(seed).normal(shape, scale))


# --- forward values ---------------------------------------------------------

def test_matmul_forward_matches_numpy():
    a, b = rand((3, 4), 1), rand((4, 2), 2)
    np.testing.assert_allclose((a @ b).data, a.data @ b.data)


def test_batched_matmul_with_shared_weight():
    a, w = rand((2, 3, 4), 1), rand((4, 5), 2)
    np.testing.assert_allclose((a @ w).data, np.einsum("bij,jk->bik", a.data, w.data))


def test_softmax_rows_sum_to_one():
    y = T.softmax_lastdim(rand((5, 7), 3, 10.0))
    np.testing.assert_allclose(y.data.sum(-1), 1.0, atol=1e-12)


@given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    y = T.softmax_lastdim(t64(x, False)).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-6)


def test_softmax_mask_excludes_positions():
    mask = np.array([[True, False, True]])
    y = T.softmax_lastdim(t64([[1.0, 100.0, 1.0]]), mask).data
    np.testing.assert_allclose(y, [[0.5, 0.0, 0.5]])


def test_softmax_fully_masked_row_raises():
    with pytest.raises(ValueError):
        T.softmax_lastdim(t64([[1.0, 2.0]]), np.array([[False, False]]))


def test_log_softmax_consistent_with_softmax():
    x = rand((3, 5), 4)
    np.testing.assert_allclose(np.exp(T.log_softmax_lastdim(x).data), T.softmax_lastdim(x).data, atol=1e-12)


@given(hnp.arrays(np.float64, (3, 8), elements=st.floats(-1e3, 1e3)),
       st.floats(0.01, 100))
def test_layer_norm_centres_rows(x, spread):
    x = x + spread * np.arange(8)  # guarantees variance well above eps
    d = x.shape[-1]
    y = T.layer_norm(t64(x, False), t64(np.ones(d), False), t64(np.zeros(d), False), 1e-6).data
    assert np.abs(y.mean(-1)).max() < 1e-6


def test_relu_zeroes_negatives():
    np.testing.assert_array_equal(T.relu(t64([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_embedding_lookup_and_range_check():
    table = rand((5, 3), 5)
    np.testing.assert_array_equal(T.embedding_lookup(table, np.array([[4, 0]])).data, table.data[[[4, 0]]])
    with pytest.raises(IndexError):
        T.embedding_lookup(table, np.array([5]))
    with pytest.raises(TypeError):
        T.embedding_lookup(table, np.array([0.5]))


def test_dropout_eval_is_identity_and_train_is_inverted():
    x = t64(np.ones((200, 50)))
    assert T.dropout(x, 0.3, None, training=False) is x
    y = T.dropout(x, 0.3, Rng(0), training=True).data
    assert set(np.unique(y)) <= {0.0, 1.0 / 0.7}
    assert abs(y.mean() - 1.0) < 0.03
    with pytest.raises(ValueError):
        T.dropout(x, 0.3, None, training=True)


def test_dropout_masks_reproducible_from_rng_state():
    r = Rng(9)
    r.normal((3,))
    saved = r.state()
    a = T.dropout(t64(np.ones(64)), 0.5, r).data
    b = T.dropout(t64(np.ones(64)), 0.5, Rng.from_state(saved)).data
    np.testing.assert_array_equal(a, b)


def test_cross_entropy_uniform_logits_is_log_v():
    V = 7
    loss = T.cross_entropy(t64(np.zeros((4, V))), np.array([1, 2, 3, 4]))
    assert float(loss.data) == pytest.approx(np.log(V), abs=1e-12)


def test_cross_entropy_gradient_is_p_minus_y():
    z = rand((3, 5), 6)
    y = np.array([1, 4, 2])
    T.backward(T.cross_entropy(z, y, ignore_index=None))
    p = np.exp(z.data) / np.exp(z.data).sum(-1, keepdims=True)
    np.testing.assert_allclose(z.grad.data, (p - np.eye(5)[y]) / 3, atol=1e-12)


def test_cross_entropy_ignores_padding():
    z = rand((3, 5), 7)
    full = T.cross_entropy(t64(z.data[:2], False), np.array([1, 4]))
    padded = T.cross_entropy(t64(z.data, False), np.array([1, 4, 0]))
    assert float(full.data) == pytest.approx(float(padded.data), abs=1e-12)
    with pytest.raises(ValueError):
        T.cross_entropy(z, np.zeros(3, dtype=int))


def test_label_smoothing_matches_mixture():
    z = rand((2, 4), 8)
    y = np.array([1, 3])
    eps = 0.2
    logp = z.data - np.log(np.exp(z.data).sum(-1, keepdims=True))
    q = (1 - eps) * np.eye(4)[y] + eps / 4
    want = -(q * logp).sum(-1).mean()
    got = float(T.cross_entropy(z, y, ignore_index=None, label_smoothing=eps).data)
    assert got == pytest.approx(want, abs=1e-12)


def test_reshape_transpose_getitem_concat_values():
    x = rand((2, 3, 4), 9)
    np.testing.assert_array_equal(x.reshape(6, 4).data, x.data.reshape(6, 4))
    np.testing.assert_array_equal(x.transpose(2, 0, 1).data, x.data.transpose(2, 0, 1))
    np.testing.assert_array_equal(x[:, 1].data, x.data[:, 1])
    c = T.concat_lastdim([x, x[..., :2]])
    assert c.shape == (2, 3, 6)


# --- gradients ------------------------------------------------------------------

UNARY = {
    "relu": lambda x: T.relu(x).sum(),
    "sqrt": lambda x: T.sqrt(x * x + 1.0).sum(),
    "scale": lambda x: (T.scale(x, 2.5) * x).sum(),
    "softmax": lambda x: (T.softmax_lastdim(x) * Tensor(np.arange(12.0).reshape(3, 4), dtype=np.float64)).sum(),
    "log_softmax": lambda x: (T.log_softmax_lastdim(x) * Tensor(np.arange(12.0).reshape(3, 4), dtype=np.float64)).sum(),
    "layer_norm": lambda x: (T.layer_norm(x, t64(np.linspace(0.5, 2, 4), False), t64(np.ones(4), False))
                             * Tensor(np.arange(12.0).reshape(3, 4), dtype=np.float64)).sum(),
    "transpose": lambda x: (x.transpose() @ x).sum(),
    "reshape": lambda x: (x.reshape(4, 3) * x.reshape(4, 3)).sum(),
    "getitem": lambda x: (x[1:, ::2] * x[1:, ::2]).sum(),
    "concat": lambda x: (T.concat_lastdim([x, x * x]) * T.concat_lastdim([x, x])).sum(),
    "mean": lambda x: (x.mean(axis=0) * x.mean(axis=0)).sum(),
    "div": lambda x: (x / (x * x + 2.0)).sum(),
    "sub": lambda x: ((x - x.mean(axis=1, keepdims=True)) * x).sum(),
    "cross_entropy": lambda x: T.cross_entropy(x, np.array([1, 0, 3]), ignore_index=None, label_smoothing=0.1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_primitive_gradients(name):
    x = rand((3, 4), 11)
    if name == "relu":
        x.data[np.abs(x.data) < 1e-2] += 0.1  # keep away from the kink
    assert T.grad_check(UNARY[name], x) < 1e-6


def test_matmul_and_broadcast_add_gradients():
    a, w, b = rand((2, 3, 4), 1), rand((4, 5), 2), rand((5,), 3)
    assert T.grad_check(lambda w_: ((a @ w_ + b) * (a @ w_)).sum(), w) < 1e-6
    assert T.grad_check(lambda b_: ((a @ w + b_) * (a @ w + b_)).sum(), b) < 1e-6
    assert T.grad_check(lambda a_: ((a_ @ w) * (a_ @ w)).sum(), a) < 1e-6


def test_batched_matmul_gradient_both_sides():
    a, b = rand((2, 3, 4), 4), rand((2, 4, 2), 5)
    assert T.grad_check(lambda a_: ((a_ @ b) * (a_ @ b)).sum(), a) < 1e-6
    assert T.grad_check(lambda b_: ((a @ b_) * (a @ b_)).sum(), b) < 1e-6


def test_hadamard_gradient():
    y = rand((3, 4), 12)
    assert T.grad_check(lambda x: (T.hadamard(x, y) * x).sum(), rand((3, 4), 13)) < 1e-6


def test_embedding_gradient_accumulates_repeated_ids():
    table = rand((5, 3), 14)
    ids = np.array([[1, 1, 4]])
    assert T.grad_check(lambda t: (T.embedding_lookup(t, ids) * T.embedding_lookup(t, ids)).sum(), table) < 1e-6


def test_dropout_gradient_uses_saved_mask():
    x = rand((3, 4), 15)
    r = Rng(3)
    saved = r.state()

    def f(x_):
        return (T.dropout(x_, 0.5, Rng.from_state(saved)) * x_).sum()

    assert T.grad_check(f, x) < 1e-6


def test_sum_of_squares_and_linear_checks():
    x = rand((3, 4), 16)
    assert T.grad_check(lambda v: (v * v).sum(), x) < 1e-7
    c = t64(Rng(17).normal((3, 4)), False)
    assert T.grad_check(lambda v: (v * c).sum(), x) < 1e-9


def test_grad_check_requires_float64():
    with pytest.raises(TypeError):
        T.grad_check(lambda v: v.sum(), Tensor(np.ones(3, dtype=np.float32), requires_grad=True))


def test_grad_check_result_skips_relu_kinks():
    x = t64([[1e-5, 1.0]])
    r = T.grad_check_result(lambda v: T.relu(v).sum(), x, skip_kinks=True)
    assert (r.checked, r.skipped) == (1, 1)
    assert r.max_error < 1e-9


# --- graph semantics ----------------------------------------------------------------

def test_backward_twice_raises():
    x = rand((2,), 1)
    loss = (x * x).sum()
    T.backward(loss)
    with pytest.raises(T.GraphError):
        T.backward(loss)


def test_backward_requires_scalar():
    with pytest.raises(T.GraphError):
        T.backward(rand((2,), 1) * 2.0)


def test_detached_subgraph_gets_no_grad():
    x = rand((3,), 2)
    loss = (x.detach() * x.detach()).sum() + x.sum()
    T.backward(loss)
    np.testing.assert_allclose(x.grad.data, np.ones(3))
    y = rand((3,), 3)
    with T.no_grad():
        z = y * y
    assert not z.requires_grad


def test_shared_node_gradients_accumulate():
    x = rand((4,), 4)
    y = x * 3.0
    T.backward((y + y).sum())
    np.testing.assert_allclose(x.grad.data, np.full(4, 6.0))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_raises():
    with pytest.raises(T.NonFiniteError):
        t64([1e308]) * 10.0
    with pytest.raises(T.NonFiniteError):
        T.sqrt(t64([-1.0]))
    with pytest.raises(T.NonFiniteError):
        Tensor([np.nan])


def test_default_dtype_switch():
    assert T.get_default_dtype() == np.float32
    with T.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_determinism_bitwise():
    def run():
        x = rand((4, 6), 21)
        w = rand((6, 3), 22)
        loss = T.cross_entropy(T.layer_norm(x, t64(np.ones(6)), t64(np.zeros(6))) @ w, np.array([0, 1, 2, 1]),
                               ignore_index=None)
        T.backward(loss)
        return loss.data.tobytes(), w.grad.data.tobytes()
    assert run() == run()


def test_shape_invariants():
    x = Tensor(np.zeros((2, 3)))
    assert x.size == 6 and x.shape == (2, 3)
    y = rand((2, 3), 2)
    T.backward((y * y).sum())
    assert y.grad.shape == y.shape
