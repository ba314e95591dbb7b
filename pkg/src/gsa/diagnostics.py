"""Behavioural measurements: first-token attention mass, gate statistics,
activation magnitudes, indexer/teacher overlap, gradient attenuation and the
linearity (rank) probe that separates gated from ungated heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gsa.gating import gate_stats
from gsa.rng import Rng
from gsa.tensor import _sigmoid_np

NAN = float("nan")


@dataclass
class DiagnosticsRecord:
    first_token_attn: float = NAN
    mean_gate: float = NAN
    max_activation: float = 0.0
    mean_k: float = NAN
    overlap_at_k: float = NAN
    per_layer: list[dict] = field(default_factory=list)

    def __post_init__(self):
        for name in ("first_token_attn", "overlap_at_k"):
            v = getattr(self, name)
            if not np.isnan(v) and not 0.0 <= v <= 1.0 + 1e-9:
                raise ValueError(f"{name}={v} is not a fraction")
        if not np.isfinite(self.max_activation):
            raise ValueError("max_activation must be finite")


def first_token_attention(attn_weights) -> float:
    """Mean weight on position 0 over query rows ``t >= 1``.

    ``attn_weights`` is an array (or list of arrays) of shape ``[..., L, L]``
    with queries on the second-to-last axis.
    """
    arrays = attn_weights if isinstance(attn_weights, (list, tuple)) else [attn_weights]
    vals = [np.asarray(a)[..., 1:, 0].reshape(-1) for a in arrays if np.asarray(a).shape[-1] > 1]
    if not vals:
        return 0.0
    return float(np.concatenate(vals).mean())


def max_activation(traces) -> float:
    arrays = traces if isinstance(traces, (list, tuple)) else [traces]
    m = 0.0
    for a in arrays:
        a = np.asarray(getattr(a, "data", a))
        if a.size:
            m = max(m, float(np.max(np.abs(a))))
    return m


def overlap_at_k(indexer_topk, teacher_topk) -> float:
    a, b = set(np.asarray(list(indexer_topk)).tolist()), set(np.asarray(list(teacher_topk)).tolist())
    if len(a) != len(b):
        raise ValueError(f"top-k sets differ in size ({len(a)} vs {len(b)})")
    if not a:
        raise ValueError("empty top-k sets")
    return len(a & b) / len(a)


def _topk_sets(rows: np.ndarray, k: int) -> np.ndarray:
    return np.argsort(-rows, axis=-1, kind="stable")[..., :k]


def mean_overlap(indexer_scores: np.ndarray, teacher: np.ndarray, k: int) -> float:
    """Average overlap@k over every query row with more than ``k`` causal positions."""
    L = indexer_scores.shape[-1]
    if L <= k:
        return NAN
    mask = np.tril(np.ones((L, L), dtype=bool))
    s = np.where(mask, indexer_scores, -np.inf)[..., k:, :]
    p = np.where(mask, teacher, -np.inf)[..., k:, :]
    a = np.sort(_topk_sets(s, k), axis=-1)
    b = np.sort(_topk_sets(p, k), axis=-1)
    hits = (a[..., :, None] == b[..., None, :]).any(axis=-1).sum(axis=-1)
    return float((hits / k).mean())


def record_from_traces(traces, overlap_k: int = 8) -> DiagnosticsRecord:
    """Aggregate per-layer traces from one forward pass into a record."""
    per_layer = []
    gates_all = []
    for i, tr in enumerate(traces):
        gates = [g for g in (tr.value_gate, tr.output_gate) if g is not None]
        gates_all.extend(gates)
        row = {
            "layer": i,
            "first_token_attn": tr.first_token_attn,
            "mean_gate": gate_stats(gates)["mean"] if gates else NAN,
            "max_activation": max_activation(tr.o_post_gate) if tr.o_post_gate is not None else 0.0,
            "mean_k": float(tr.k_t[:, 1:].mean()) if tr.k_t is not None and tr.k_t.shape[1] > 1 else NAN,
            "overlap_at_k": (mean_overlap(tr.scores.data, tr.teacher, overlap_k)
                             if tr.teacher is not None and tr.scores is not None else NAN),
        }
        per_layer.append(row)

    def avg(key):
        vals = [r[key] for r in per_layer if not np.isnan(r[key])]
        return float(np.mean(vals)) if vals else NAN

    return DiagnosticsRecord(
        first_token_attn=avg("first_token_attn"),
        mean_gate=gate_stats(gates_all)["mean"] if gates_all else NAN,
        max_activation=max((r["max_activation"] for r in per_layer), default=0.0),
        mean_k=avg("mean_k"),
        overlap_at_k=avg("overlap_at_k"),
        per_layer=per_layer,
    )


def gradient_attenuation(trace) -> dict[str, float]:
    """Compare the gradient entering SDPA's output with the one leaving the output gate.

    Call after ``backward``. Counts coordinates where the pre-gate gradient is
    larger in magnitude than the post-gate gradient (zero for a sigmoid gate).
    """
    pre, post = trace.o_pre_gate.grad, trace.o_post_gate.grad
    if pre is None or post is None:
        raise ValueError("trace has no gradients; run backward first")
    return {
        "violations": int(np.sum(np.abs(pre) > np.abs(post))),
        "norm_pre": float(np.linalg.norm(pre)),
        "norm_post": float(np.linalg.norm(post)),
    }


# ---------------------------------------------------------------------------
# rank probe
# ---------------------------------------------------------------------------

def random_causal_pattern(length: int, rng: Rng) -> np.ndarray:
    logits = rng.normal((length, length))
    logits = np.where(np.tril(np.ones((length, length), dtype=bool)), logits, -np.inf)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def head_output_collection(pattern: np.ndarray, inputs: np.ndarray, W_V: np.ndarray, W_O: np.ndarray,
                           gate_V: tuple[np.ndarray, np.ndarray] | None = None,
                           gate_O: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Outputs of one head under a fixed attention pattern, one flattened row per input.

    ``inputs`` is ``[N, L, d]``; ``W_V`` is ``d x d_k``; ``W_O`` is ``d_k x d``.
    Optional ``(W, b)`` pairs add the value gate and output gate.
    """
    v = inputs @ W_V
    if gate_V is not None:
        v = v * _sigmoid_np(inputs @ gate_V[0] + gate_V[1])
    o = np.einsum("ts,nsd->ntd", pattern, v)
    if gate_O is not None:
        o = o * _sigmoid_np(inputs @ gate_O[0] + gate_O[1])
    return (o @ W_O).reshape(len(inputs), -1)


def rank_probe(d: int = 32, d_k: int = 8, length: int = 6, n_samples: int | None = None,
               seed: int = 0, tol: float = 1e-6, weight_std: float = 0.5) -> dict[str, int]:
    """Numerical rank of head-output collections with and without gates.

    Inputs are drawn from a fixed ``d_k``-dimensional subspace of sequence
    space. With a fixed pattern an ungated head is linear in its input, so
    its outputs cannot span more than ``d_k`` dimensions; a gated head is
    not linear and escapes that bound.
    """
    from gsa.attention import numerical_rank

    rng = Rng(seed, "rank-probe")
    n = n_samples or 4 * d_k
    pattern = random_causal_pattern(length, rng.child("pattern"))
    basis = rng.child("basis").normal((d_k, length, d))
    coeff = rng.child("coeff").normal((n, d_k))
    inputs = np.einsum("nr,rld->nld", coeff, basis)
    w = rng.child("weights")
    W_V, W_O = w.normal((d, d_k), weight_std), w.normal((d_k, d), weight_std)
    gV = (w.normal((d, d_k), weight_std), np.zeros(d_k))
    gO = (w.normal((d, d_k), weight_std), np.zeros(d_k))
    standard = head_output_collection(pattern, inputs, W_V, W_O)
    gated = head_output_collection(pattern, inputs, W_V, W_O, gV, gO)
    return {
        "standard": numerical_rank(standard, tol),
        "gated": numerical_rank(gated, tol),
        "d_k": d_k,
        "samples": n,
    }
