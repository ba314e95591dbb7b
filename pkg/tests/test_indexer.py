import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gsa import counting
from gsa.attention import GsaConfig
from gsa.gradcheck import grad_check
from gsa.indexer import (
    IndexerParams,
    SparsityState,
    adaptive_k,
    adaptive_k_batch,
    gated_scores,
    relu_scores,
    row_variance,
    select_batch,
    select_batch_counted,
    top_k_select,
    update_vbar,
    warmup_kl_loss,
)
from gsa.rng import Rng
from gsa.tensor import Tensor


def params(d=6, d_i=3, heads=2, seed=0, std=0.5):
    return IndexerParams.init(d, d_i, heads, Rng(seed, "idx"), std=std, dtype=np.float64)


def scalar_gated(h, p):
    # direct double loop over (t, s, j)
    L = h.shape[0]
    out = np.zeros((L, L))
    w = h @ p.Ww.data
    k = h @ p.Wk.data
    for t in range(L):
        for s in range(t + 1):
            total = 0.0
            for j in range(p.n_heads):
                q = h[t] @ p.query_projection(j)
                pair = 1.0 / (1.0 + math.exp(-(q @ k[s] + p.b.data[j])))
                total += pair / (1.0 + math.exp(-w[t, j]))
            out[t, s] = total
    return out


def cfg(**kw):
    base = dict(d=8, n_h=2, n_kv=1, d_k=4, d_I=4, H_I=2, k_base=4, k_min=2, k_max=6, mode="gsa")
    base.update(kw)
    return GsaConfig(**base)


# -- scores ---------------------------------------------------------------------

def test_gated_scores_match_scalar_loop():
    p = params()
    h = Rng(1, "h").normal((5, 6))
    np.testing.assert_allclose(gated_scores(Tensor(h), p).data, scalar_gated(h, p), atol=1e-12)


def test_gated_scores_batched_equals_per_sequence():
    p = params()
    h = Rng(2, "h").normal((3, 5, 6))
    batched = gated_scores(Tensor(h), p).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], gated_scores(Tensor(h[b]), p).data, atol=1e-12)


def test_zero_params_give_quarter_per_head():
    p = params(heads=3)
    for t in p.named().values():
        t.data[...] = 0.0
    out = gated_scores(Tensor(Rng(0, "h").normal((4, 6))), p).data
    causal = np.tril(np.ones((4, 4), dtype=bool))
    np.testing.assert_allclose(out[causal], 3 / 4)
    assert np.all(out[~causal] == 0)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-1e3, 1e3)))
def test_gated_scores_bounded_by_head_count(h):
    p = params(heads=2)
    out = gated_scores(Tensor(h), p).data
    assert np.all(out >= 0) and np.all(out <= 2)


def test_relu_scores_match_scalar_loop():
    p = params()
    h = Rng(3, "h").normal((4, 6))
    w = h @ p.Ww.data
    k = h @ p.Wk.data
    expect = np.zeros((4, 4))
    for t in range(4):
        for s in range(t + 1):
            expect[t, s] = sum(w[t, j] * max(0.0, (h[t] @ p.query_projection(j)) @ k[s]) for j in range(2))
    np.testing.assert_allclose(relu_scores(Tensor(h), p).data, expect, atol=1e-12)


def test_relu_scores_vanish_when_all_dots_negative():
    p = params(d=2, d_i=1, heads=1)
    p.Wq.data[...] = [[1.0], [0.0]]
    p.Wk.data[...] = [[-1.0], [0.0]]
    h = np.array([[1.0, 0.0], [2.0, 1.0], [0.5, -1.0]])
    assert np.all(relu_scores(Tensor(h), p).data == 0)


def test_score_gradients_match_central_differences():
    p = params()
    h = Tensor(Rng(4, "h").normal((4, 6)))
    weights = Tensor(Rng(5, "w").normal((4, 4)))
    f = lambda: (gated_scores(h, p) * weights).sum()  # noqa: E731
    assert grad_check(f, list(p.named().values())) < 1e-6


def test_indexer_counts_pairs():
    p = params(d_i=3, heads=2)
    with counting.counting() as c:
        gated_scores(Tensor(np.ones((5, 6))), p)
    assert c.snapshot()["indexer"] == 15 * 2 * (3 + 1)


# -- adaptive budget ------------------------------------------------------------

def test_row_variance_is_population_variance_over_mask():
    scores = np.array([[1.0, 0.0, 0.0], [1.0, 3.0, 0.0]])
    mask = np.tril(np.ones((2, 3), dtype=bool))
    np.testing.assert_allclose(row_variance(scores, mask), [0.0, 1.0])


def test_adaptive_k_uninitialised_state_uses_base():
    assert adaptive_k(np.arange(5.0), SparsityState(), cfg()) == 4


def test_adaptive_k_formula_and_clamp():
    c = cfg(k_base=4, k_min=2, k_max=6)
    state = SparsityState(v_bar=1.0, initialized=True)
    row = np.array([0.0, 2.0])  # variance 1
    assert adaptive_k(row, state, c) == 4
    assert adaptive_k(np.array([0.0, 4.0]), state, c) == 6  # 16 clamps to k_max
    assert adaptive_k(np.array([0.0, 0.2]), state, c) == 2  # floor(0.04) clamps to k_min
    state.v_bar = 2.0 / 3.0
    assert adaptive_k(np.array([0.0, 2.0]), state, c) == 6  # floor(4 * 1.5)


def test_adaptive_k_single_entry_row_gets_minimum():
    assert adaptive_k(np.array([3.0]), SparsityState(v_bar=1.0, initialized=True), cfg()) == 2


@settings(max_examples=100)
@given(hnp.arrays(np.float64, (2, 7), elements=st.floats(0, 100)), st.floats(1e-6, 10))
def test_adaptive_k_batch_within_bounds(var, vbar):
    c = cfg()
    k = adaptive_k_batch(var, SparsityState(v_bar=vbar, initialized=True), c)
    assert np.all(k >= c.k_min) and np.all(k <= c.k_max)
    assert np.all(k[:, 0] == c.k_min)


def test_update_vbar_first_then_ema():
    s = update_vbar(SparsityState(decay=0.9), [2.0, 4.0])
    assert s.initialized and s.v_bar == 3.0
    update_vbar(s, [1.0])
    assert s.v_bar == pytest.approx(0.9 * 3.0 + 0.1 * 1.0)


def test_update_vbar_floors_zero_variance():
    assert update_vbar(SparsityState(), [0.0]).v_bar == SparsityState.FLOOR


def test_update_vbar_rejects_empty():
    with pytest.raises(ValueError):
        update_vbar(SparsityState(), [])


# -- selection --------------------------------------------------------------------

@settings(max_examples=200)
@given(hnp.arrays(np.float64, st.integers(1, 40), elements=st.floats(-5, 5, width=16)),
       st.integers(1, 45))
def test_heap_selection_matches_stable_full_sort(row, k):
    sel = top_k_select(row, k)
    expect = np.sort(np.argsort(-row, kind="stable")[:k])
    np.testing.assert_array_equal(sel.indices, expect)


def test_selection_returns_all_when_row_short():
    counter = {}
    sel = top_k_select(np.array([0.3, 0.1]), 5, counter)
    np.testing.assert_array_equal(sel.indices, [0, 1])
    assert counter.get("comparisons", 0) == 0


def test_selection_ties_prefer_lower_index():
    np.testing.assert_array_equal(top_k_select(np.zeros(6), 2).indices, [0, 1])


def test_selection_rejects_zero_budget():
    with pytest.raises(ValueError):
        top_k_select(np.ones(3), 0)


def test_select_batch_matches_counted_path():
    rng = Rng(6, "s")
    scores = rng.normal((2, 9, 9))
    k = rng.integers(1, 5, (2, 9))
    a = select_batch(scores, k)
    b = select_batch_counted(scores, k)
    np.testing.assert_array_equal(a[1], b[1])
    np.testing.assert_array_equal(np.where(a[1], a[0], -1), np.where(b[1], b[0], -1))


def test_select_batch_causal_and_sized():
    scores = Rng(7, "s").normal((1, 8, 8))
    k = np.full((1, 8), 3)
    idx, valid = select_batch(scores, k)
    assert idx.shape == (1, 8, 3)
    for t in range(8):
        chosen = idx[0, t][valid[0, t]]
        assert len(chosen) == min(3, t + 1)
        assert np.all(chosen <= t)


# -- distillation ---------------------------------------------------------------------

def test_kl_two_point_value():
    loss = warmup_kl_loss(np.array([0.7, 0.3]), np.log(np.array([0.5, 0.5])))
    expect = 0.7 * math.log(1.4) + 0.3 * math.log(0.6)
    assert float(loss.data) == pytest.approx(expect, rel=1e-12)


def test_kl_zero_at_teacher():
    p = np.array([0.2, 0.5, 0.3])
    assert abs(float(warmup_kl_loss(p, np.log(p)).data)) < 1e-12


def test_kl_restricted_to_subset_renormalises_teacher():
    p = np.array([0.5, 0.25, 0.25])
    scores = np.array([9.0, 0.0, 0.0])
    # over {1, 2} the renormalised teacher is uniform and so is the student
    assert abs(float(warmup_kl_loss(p, scores, subset=[1, 2]).data)) < 1e-12


def test_kl_gradient_is_student_minus_teacher():
    p = np.array([0.6, 0.4])
    s = Tensor(np.zeros(2), requires_grad=True)
    warmup_kl_loss(p, s).backward()
    np.testing.assert_allclose(s.grad, [0.5 - 0.6, 0.5 - 0.4], atol=1e-12)


def test_kl_rejects_teacher_without_mass_on_subset():
    with pytest.raises(ValueError):
        warmup_kl_loss(np.array([1.0, 0.0]), np.zeros(2), subset=[1])
