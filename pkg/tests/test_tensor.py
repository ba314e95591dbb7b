import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gsa import counting
from gsa import tensor as T
from gsa.gradcheck import check_rules, grad_check, relative_error, tensor_relative_error
from gsa.rng import Rng, init_matrix
from gsa.tensor import NonFiniteError, ShapeError, Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def leaf(data, dtype=np.float64):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True, dtype=dtype)


# -- matmul -------------------------------------------------------------------

def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal((a @ b).data, [[1, 2], [3, 4]])


def test_matmul_zero_product():
    a = Tensor(np.array([[1.0, 0.0], [0.0, 0.0]]))
    b = Tensor(np.array([[0.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_array_equal((a @ b).data, np.zeros((2, 2)))


def test_matmul_gradient_matches_central_differences():
    rng = Rng(3, "t")
    a, b = leaf(rng.normal((3, 4))), leaf(rng.normal((4, 2)))
    assert grad_check(lambda: T.tsum(a @ b), [a, b]) < 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


# -- softmax ------------------------------------------------------------------

def test_softmax_symmetric_pair():
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros(2))).data, [0.5, 0.5])


@given(finite)
def test_softmax_single_valid_entry(x):
    assert T.softmax(Tensor(np.array([x]))).data[0] == 1.0


def test_softmax_matches_direct_formula():
    x = np.array([1.0, 2.0, 3.0])
    direct = np.exp(x) / np.exp(x).sum()
    np.testing.assert_allclose(T.softmax(Tensor(x)).data, direct, rtol=1e-12)


def test_softmax_masked_entries_exactly_zero():
    out = T.softmax(Tensor(np.array([5.0, 1.0, 2.0])), np.array([False, True, True])).data
    assert out[0] == 0.0
    assert math.isclose(out[1:].sum(), 1.0, rel_tol=1e-12)


def test_softmax_empty_mask_raises():
    with pytest.raises(ValueError):
        T.softmax(Tensor(np.zeros(3)), np.zeros(3, dtype=bool))


@settings(max_examples=200)
@given(hnp.arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e3, 1e3)),
       st.data())
def test_softmax_sums_to_one_over_valid(x, data):
    mask = data.draw(hnp.arrays(bool, x.shape))
    mask[data.draw(st.integers(0, x.size - 1))] = True
    out64 = T.softmax(Tensor(x), mask).data
    out32 = T.softmax(Tensor(x.astype(np.float32), dtype=np.float32), mask).data
    assert np.all(out64 >= 0) and np.all(out64[~mask] == 0)
    assert abs(out64[mask].sum() - 1.0) < 1e-12
    assert abs(float(out32[mask].sum()) - 1.0) < 1e-6


# -- sigmoid ------------------------------------------------------------------

def test_sigmoid_at_zero_and_gradient():
    x = leaf([0.0])
    y = T.sigmoid(x)
    assert y.data[0] == 0.5
    y.backward(np.ones(1))
    assert x.grad[0] == 0.25
    assert grad_check(lambda: T.tsum(T.sigmoid(x)), [x]) < 1e-8


@given(hnp.arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e4, 1e4)))
def test_sigmoid_open_interval_and_symmetry(x):
    for dtype in (np.float32, np.float64):
        y = T.sigmoid(Tensor(x.astype(dtype), dtype=dtype)).data
        assert np.all(y > 0) and np.all(y < 1)
    y = T.sigmoid(Tensor(x)).data
    mirror = 1.0 - T.sigmoid(Tensor(-x)).data
    moderate = np.abs(x) < 30
    np.testing.assert_allclose(y[moderate], mirror[moderate], atol=1e-15)


def test_sigmoid_monotone():
    x = np.linspace(-20, 20, 401)
    assert np.all(np.diff(T.sigmoid(Tensor(x)).data) > 0)


# -- gradient checking --------------------------------------------------------

def test_grad_check_square():
    w = leaf([3.0])
    f = lambda: T.tsum(T.mul(w, w))  # noqa: E731
    out = f()
    out.backward()
    assert w.grad[0] == 6.0
    assert grad_check(f, [w]) < 1e-8


def test_grad_check_constant_function():
    w = leaf([1.0, -2.0])
    assert grad_check(lambda: Tensor(np.array(4.0)), [w]) == 0.0


def test_grad_check_rejects_non_finite_objective():
    w = leaf([1.0])
    with pytest.raises(NonFiniteError), np.errstate(divide="ignore"):
        grad_check(lambda: T.mul(T.log(T.add(w, -1.0)), 1.0), [w])


def test_every_rule_passes_gradcheck():
    errs = check_rules(seed=11)
    assert set(errs) == set(T.RULES)
    worst = max(errs, key=errs.get)
    assert errs[worst] < 1e-4, worst


def test_corrupted_rule_is_detected(monkeypatch):
    orig = T.RULES["silu"]
    monkeypatch.setitem(T.RULES, "silu", lambda ctx, g, out: tuple(x * 1.5 for x in orig(ctx, g, out)))
    errs = check_rules()
    assert errs["silu"] > 1e-2
    assert all(e < 1e-4 for k, e in errs.items() if k != "silu")


def test_relative_error_definitions():
    assert relative_error(np.array(1.0), np.array(1.1)) == pytest.approx(0.1 / 1.1)
    assert relative_error(np.array(0.0), np.array(0.0)) == 0.0
    assert tensor_relative_error(np.array([1.0, 1e-9]), np.array([1.0, 2e-9])) == pytest.approx(1e-9)


# -- core semantics ------------------------------------------------------------

def test_non_finite_leaf_rejected():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1.0, np.nan]))


def test_grad_shape_matches_data():
    rng = Rng(0, "t")
    a, b = leaf(rng.normal((2, 3, 4))), leaf(rng.normal((4, 5)))
    T.tsum(a @ b).backward()
    assert a.grad.shape == a.shape and b.grad.shape == b.shape


def test_gradients_accumulate_across_uses():
    x = leaf([2.0])
    T.tsum(T.add(T.mul(x, 3.0), T.mul(x, x))).backward()
    assert x.grad[0] == 3.0 + 4.0


def test_no_grad_builds_no_graph():
    x = leaf([1.0, 2.0])
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert y.parents == () and not y.requires_grad


def test_cross_entropy_uniform_logits():
    out = T.cross_entropy(Tensor(np.zeros((3, 4))), np.array([0, 1, 3]))
    assert float(out.data) == pytest.approx(math.log(4), rel=1e-12)


def test_cross_entropy_confident_correct():
    logits = np.full((2, 5), -30.0)
    logits[0, 2] = logits[1, 4] = 30.0
    assert float(T.cross_entropy(Tensor(logits), np.array([2, 4])).data) < 1e-20


def test_cross_entropy_matches_direct_computation():
    rng = Rng(1, "t")
    logits = rng.normal((6, 7))
    targets = rng.integers(0, 7, 6)
    direct = -np.mean([logits[i, t] - np.log(np.exp(logits[i]).sum()) for i, t in enumerate(targets)])
    assert float(T.cross_entropy(Tensor(logits), targets).data) == pytest.approx(direct, rel=1e-12)


@pytest.mark.parametrize("spec, sa, sb", [
    ("btngd,bsnd->bngts", (2, 5, 2, 3, 4), (2, 5, 2, 4)),
    ("bngts,bsnd->btngd", (2, 2, 3, 5, 5), (2, 5, 2, 4)),
    ("btngd,btknd->btngk", (2, 5, 2, 3, 4), (2, 5, 6, 2, 4)),
    ("ij,jk->ik", (3, 4), (4, 2)),
    ("i,j->ij", (3,), (4,)),
])
def test_einsum_matches_numpy(spec, sa, sb):
    rng = Rng(2, "t")
    a, b = rng.normal(sa), rng.normal(sb)
    np.testing.assert_allclose(T.einsum(spec, Tensor(a), Tensor(b)).data, np.einsum(spec, a, b), atol=1e-12)


def test_einsum_rejects_single_operand_sum():
    with pytest.raises(ShapeError):
        T.einsum("ij,jk->k", Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))


def test_scatter_backward_matches_add_at():
    rng = Rng(5, "t")
    x = leaf(rng.normal((2, 6, 3)))
    idx = rng.integers(0, 6, (2, 6, 4))
    g = rng.normal((2, 6, 4, 3))
    T.tsum(T.mul(T.gather(x, idx), Tensor(g))).backward()
    expect = np.zeros((2, 6, 3))
    np.add.at(expect, (np.arange(2)[:, None, None], idx), g)
    np.testing.assert_allclose(x.grad, expect, atol=1e-12)


# -- counting -----------------------------------------------------------------

def test_matmul_counts_macs_in_scope():
    with counting.counting() as c:
        with counting.scope("qkv"):
            Tensor(np.ones((2, 3, 4))) @ Tensor(np.ones((4, 5)))
    assert c.snapshot() == {"qkv": 2 * 3 * 4 * 5}


def test_counter_never_activated_raises():
    with pytest.raises(counting.CountingDisabledError):
        counting.MacCounter().snapshot()


# -- rng and init -------------------------------------------------------------

def test_rng_streams_deterministic_and_distinct():
    a = Rng(42, "init").normal(100)
    b = Rng(42, "init").normal(100)
    c = Rng(42, "data").normal(100)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.array_equal(Rng(7, "x").child("y").normal(5), Rng(7, "x").child("y").normal(5))


def test_init_zeros():
    assert np.all(init_matrix(2, 2, "zeros", Rng(0, "t")).data == 0)


def test_init_normal_bit_identical():
    a = init_matrix(8, 8, "normal", Rng(42, "t"), std=0.02)
    b = init_matrix(8, 8, "normal", Rng(42, "t"), std=0.02)
    assert a.data.tobytes() == b.data.tobytes()


def test_init_normal_std():
    w = init_matrix(1000, 1000, "normal", Rng(42, "t"), std=0.02)
    assert abs(float(w.data.std()) / 0.02 - 1) < 0.05


def test_init_scaled_normal_uses_fan_in():
    w = init_matrix(400, 300, "scaled-normal", Rng(1, "t"), std=1.0, dtype=np.float64)
    assert abs(float(w.data.std()) * math.sqrt(400) - 1) < 0.05


def test_init_rejects_bad_dims():
    with pytest.raises(ValueError):
        init_matrix(0, 3, "normal", Rng(0, "t"))
