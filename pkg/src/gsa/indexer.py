"""Lightning indexer: per-pair importance scores, adaptive budgets, top-k selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from gsa import counting
from gsa import tensor as T
from gsa.rng import Rng, init_matrix
from gsa.tensor import Tensor


@dataclass
class IndexerParams:
    """Indexer weights.

    ``Wq`` stacks the per-head query projections column-wise (head ``j`` owns
    columns ``j*d_I:(j+1)*d_I``); ``Wk`` is the single key projection shared by
    all heads; ``Ww`` yields one head weight per indexer head; ``b`` holds the
    per-head score bias.
    """

    Wq: Tensor
    Wk: Tensor
    Ww: Tensor
    b: Tensor
    n_heads: int

    @property
    def d_index(self) -> int:
        return self.Wk.shape[1]

    @classmethod
    def init(cls, d: int, d_index: int, n_heads: int, rng: Rng, std: float = 0.02,
             dtype=np.float32) -> "IndexerParams":
        return cls(
            Wq=init_matrix(d, n_heads * d_index, "normal", rng.child("Wq"), std, dtype),
            Wk=init_matrix(d, d_index, "normal", rng.child("Wk"), std, dtype),
            Ww=init_matrix(d, n_heads, "normal", rng.child("Ww"), std, dtype),
            b=Tensor(np.zeros(n_heads, dtype=dtype), requires_grad=True),
            n_heads=n_heads,
        )

    def named(self) -> dict[str, Tensor]:
        return {"Wq": self.Wq, "Wk": self.Wk, "Ww": self.Ww, "b": self.b}

    def query_projection(self, j: int) -> np.ndarray:
        d_i = self.d_index
        return self.Wq.data[:, j * d_i:(j + 1) * d_i]


@dataclass
class SparsityState:
    """Running average of indexer score variance used to scale the budget."""

    v_bar: float = 0.0
    decay: float = 0.99
    initialized: bool = False

    FLOOR = 1e-8


@dataclass
class SelectionResult:
    indices: np.ndarray
    k_t: int
    scores: np.ndarray = field(repr=False)

    def __post_init__(self):
        t = len(self.scores) - 1
        if len(self.indices) != min(self.k_t, t + 1):
            raise AssertionError("selection size does not match budget")
        if len(self.indices) and (self.indices[-1] > t or np.any(np.diff(self.indices) <= 0)):
            raise AssertionError("selection is not causal, sorted and unique")


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def _batched(h: Tensor) -> tuple[Tensor, bool]:
    if h.ndim == 2:
        return T.reshape(h, (1, *h.shape)), True
    return h, False


def _projections(h: Tensor, params: IndexerParams, rope=None):
    B, L, _ = h.shape
    H, d_i = params.n_heads, params.d_index
    with counting.scope("indexer_proj"):
        q = T.reshape(h @ params.Wq, (B, L, H, d_i))
        k = h @ params.Wk
        w = h @ params.Ww
    if rope is not None:
        cos, sin = rope
        q = T.rope(q, cos[:L], sin[:L])
        k = T.rope(k, cos[:L], sin[:L])
    return q, k, w


def _count_pairs(L: int, batch: int, params: IndexerParams) -> None:
    # dot products over d_I per head, plus one multiply by the head weight
    counting.add(batch * (L * (L + 1) // 2) * params.n_heads * (params.d_index + 1), "indexer")


def gated_scores(h: Tensor, params: IndexerParams, rope=None) -> Tensor:
    """Sigmoid-gated scores ``I[t, s] = sum_j sig(h_t Ww)_j * sig(q_tj . k_s + b_j)``.

    ``h`` is ``[L, d]`` or ``[B, L, d]``; the result is ``[.., L, L]`` with
    entries above the diagonal (future positions) set to zero.
    """
    h, squeeze = _batched(h)
    B, L, _ = h.shape
    q, k, w = _projections(h, params, rope)
    logits = T.add(T.einsum("btjd,bsd->btsj", q, k), params.b)
    pair = T.sigmoid(logits)
    weight = T.sigmoid(w)
    scores = T.einsum("btsj,btj->bts", pair, weight)
    _count_pairs(L, B, params)
    scores = T.mul(scores, causal_mask(L).astype(scores.dtype))
    return T.reshape(scores, (L, L)) if squeeze else scores


def relu_scores(h: Tensor, params: IndexerParams, rope=None) -> Tensor:
    """ReLU baseline ``I[t, s] = sum_j (h_t Ww)_j * relu(q_tj . k_s)`` (no sigmoid, no bias)."""
    h, squeeze = _batched(h)
    B, L, _ = h.shape
    q, k, w = _projections(h, params, rope)
    pair = T.relu(T.einsum("btjd,bsd->btsj", q, k))
    scores = T.einsum("btsj,btj->bts", pair, w)
    _count_pairs(L, B, params)
    scores = T.mul(scores, causal_mask(L).astype(scores.dtype))
    return T.reshape(scores, (L, L)) if squeeze else scores


# ---------------------------------------------------------------------------
# adaptive budget
# ---------------------------------------------------------------------------

def row_variance(scores: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Population variance of each row over its valid (causal) entries."""
    scores = np.asarray(scores, dtype=np.float64)
    if mask is None:
        return scores.var(axis=-1)
    n = mask.sum(axis=-1)
    mu = np.where(mask, scores, 0.0).sum(axis=-1) / n
    return np.where(mask, (scores - mu[..., None]) ** 2, 0.0).sum(axis=-1) / n


def _clamp_budget(raw, k_min: int, k_max: int):
    return np.clip(raw, k_min, k_max)


def adaptive_k(score_row, state: SparsityState, cfg) -> int:
    """Budget for one query row: ``clamp(floor(k_base * Var(row) / v_bar), k_min, k_max)``."""
    row = np.asarray(score_row.data if isinstance(score_row, Tensor) else score_row)
    if len(row) < 2:
        return cfg.k_min
    if not state.initialized:
        return int(_clamp_budget(cfg.k_base, cfg.k_min, cfg.k_max))
    var = float(row_variance(row))
    raw = math.floor(cfg.k_base * var / max(state.v_bar, SparsityState.FLOOR))
    return int(_clamp_budget(raw, cfg.k_min, cfg.k_max))


def adaptive_k_batch(variances: np.ndarray, state: SparsityState, cfg) -> np.ndarray:
    """Vectorised ``adaptive_k`` over rows whose variances are already known.

    Row ``t`` of each sequence has ``t+1`` entries; rows with a single entry
    always get ``k_min``.
    """
    L = variances.shape[-1]
    if not state.initialized:
        k = np.full(variances.shape, int(_clamp_budget(cfg.k_base, cfg.k_min, cfg.k_max)))
    else:
        raw = np.floor(cfg.k_base * variances / max(state.v_bar, SparsityState.FLOOR))
        k = _clamp_budget(raw, cfg.k_min, cfg.k_max).astype(np.int64)
    if L:
        k[..., 0] = cfg.k_min
    return k


def update_vbar(state: SparsityState, batch_variances) -> SparsityState:
    vals = np.asarray(batch_variances, dtype=np.float64).reshape(-1)
    if vals.size == 0:
        raise ValueError("update_vbar needs at least one variance")
    m = float(vals.mean())
    if not state.initialized:
        state.v_bar = m
        state.initialized = True
    else:
        state.v_bar = state.decay * state.v_bar + (1.0 - state.decay) * m
    state.v_bar = max(state.v_bar, SparsityState.FLOOR)
    return state


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------

class _Ranker:
    """Orders positions by descending score, lower index first on ties; counts comparisons."""

    def __init__(self, scores: np.ndarray):
        self.s = scores.tolist()
        self.comparisons = 0

    def before(self, a: int, b: int) -> bool:
        self.comparisons += 1
        sa, sb = self.s[a], self.s[b]
        return sa > sb or (sa == sb and a < b)


def _sift_down(heap: list[int], i: int, n: int, rank: _Ranker) -> None:
    while True:
        left = 2 * i + 1
        if left >= n:
            return
        best = left
        right = left + 1
        if right < n and rank.before(heap[right], heap[left]):
            best = right
        if rank.before(heap[best], heap[i]):
            heap[i], heap[best] = heap[best], heap[i]
            i = best
        else:
            return


def top_k_select(score_row, k_t: int, counter: dict | None = None) -> SelectionResult:
    """Heap-based selection of the ``k_t`` best causal positions.

    Builds a max-heap over the row (Floyd) and pops ``k_t`` times. If the row
    has no more than ``k_t`` entries every position is returned without any
    comparisons. When ``counter`` is given its ``"comparisons"`` entry is
    incremented by the number of score comparisons performed.
    """
    row = np.asarray(score_row.data if isinstance(score_row, Tensor) else score_row)
    if k_t < 1:
        raise ValueError("k_t must be at least 1")
    n = len(row)
    if n <= k_t:
        return SelectionResult(np.arange(n), k_t, row)
    rank = _Ranker(row)
    heap = list(range(n))
    for i in range(n // 2 - 1, -1, -1):
        _sift_down(heap, i, n, rank)
    chosen = []
    size = n
    for _ in range(k_t):
        chosen.append(heap[0])
        size -= 1
        heap[0] = heap[size]
        _sift_down(heap, 0, size, rank)
    if counter is not None:
        counter["comparisons"] = counter.get("comparisons", 0) + rank.comparisons
    counting.add(rank.comparisons, "topk")
    return SelectionResult(np.array(sorted(chosen), dtype=np.int64), k_t, row)


def select_batch(scores: np.ndarray, k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Top-``k[b, t]`` selection for every query row of ``scores[B, L, L]`` at once.

    Returns ``(idx, valid)`` of shape ``[B, L, K]`` where ``K`` is the largest
    realised budget; ``idx`` is ascending within the valid prefix of each row
    and padded with zeros (``valid`` False) after it.
    """
    B, L, _ = scores.shape
    size = np.minimum(k, np.arange(1, L + 1)[None, :])
    K = int(size.max())
    masked = np.where(causal_mask(L)[None], scores, -np.inf)
    # stable sort of the negated scores: lower index wins ties
    order = np.argsort(-masked, axis=-1, kind="stable")[..., :K]
    valid = np.arange(K)[None, None, :] < size[..., None]
    idx = np.sort(np.where(valid, order, L), axis=-1)
    idx = np.where(valid, idx, 0)
    return idx.astype(np.int64), valid


def select_batch_counted(scores: np.ndarray, k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Same result as ``select_batch`` but routed row by row through ``top_k_select``."""
    B, L, _ = scores.shape
    size = np.minimum(k, np.arange(1, L + 1)[None, :])
    K = int(size.max())
    idx = np.zeros((B, L, K), dtype=np.int64)
    valid = np.zeros((B, L, K), dtype=bool)
    for b in range(B):
        for t in range(L):
            sel = top_k_select(scores[b, t, :t + 1], int(k[b, t]))
            n = len(sel.indices)
            idx[b, t, :n] = sel.indices
            valid[b, t, :n] = True
    return idx, valid


# ---------------------------------------------------------------------------
# distillation objective
# ---------------------------------------------------------------------------

def kl_rows(p: np.ndarray, scores: Tensor, mask: np.ndarray) -> Tensor:
    """``sum over rows of KL(p_row || softmax(scores_row))`` restricted to ``mask``.

    ``p`` is treated as a constant and renormalised over the mask; gradients
    flow only into ``scores``.
    """
    p = np.where(mask, np.asarray(p, dtype=scores.dtype), 0.0)
    mass = p.sum(axis=-1, keepdims=True)
    if np.any(mass <= 0):
        raise ValueError("teacher distribution has zero mass on the selected subset")
    p = p / mass
    logq = T.log_softmax(scores, mask)
    with np.errstate(divide="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    cross = T.tsum(T.mul(logq, p))
    return T.add(-cross, float(plogp.sum()))


def warmup_kl_loss(p, scores, subset=None) -> Tensor:
    """KL(p || softmax(scores)) for one query row, optionally restricted to ``subset``."""
    scores = scores if isinstance(scores, Tensor) else Tensor(scores)
    p = np.asarray(p)
    mask = np.ones(len(p), dtype=bool)
    if subset is not None:
        mask = np.zeros(len(p), dtype=bool)
        mask[np.asarray(subset)] = True
    return kl_rows(p, scores, mask)
