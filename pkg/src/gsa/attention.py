"""Attention layer in four variants: standard, sparse_only, gated_only and gsa.

Stage order inside one layer::

    h -> Q, K, V -> value gate -> indexer scores -> top-k -> SDPA -> output gate -> W_O

Sparse SDPA works on padded index sets (one set per query position, shared
by every head). Dense SDPA is the causal softmax over the whole prefix.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from gsa import counting
from gsa import tensor as T
from gsa.gating import GateParams, output_gate, value_gate
from gsa.indexer import (IndexerParams, SelectionResult, SparsityState, adaptive_k_batch, causal_mask,
                         gated_scores, kl_rows, relu_scores, row_variance, select_batch, select_batch_counted,
                         update_vbar)
from gsa.rng import Rng, init_matrix
from gsa.tensor import Tensor

MODES = ("standard", "sparse_only", "gated_only", "gsa")
PHASES = ("dense", "warmup", "sparse")


class ConfigError(ValueError):
    pass


@dataclass
class GsaConfig:
    d: int = 64
    n_h: int = 4
    n_kv: int = 2
    d_k: int = 16
    d_I: int = 16
    H_I: int = 4
    k_base: int = 32
    k_min: int = 8
    k_max: int = 64
    mode: str = "gsa"
    adaptive_k_enabled: bool = True
    ema_decay: float = 0.99
    gates: str = "both"  # both | g1 | g2 (ablation flags; ignored by ungated modes)
    rope: bool = False
    rope_base: float = 10000.0
    init_std: float = 0.02
    gate_init_std: float = 0.02

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.gates not in ("both", "g1", "g2"):
            raise ConfigError(f"gates must be both, g1 or g2, got {self.gates!r}")
        for name in ("d", "n_h", "n_kv", "d_k", "d_I", "H_I", "k_base", "k_min", "k_max"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.d != self.n_h * self.d_k:
            raise ConfigError(f"d ({self.d}) must equal n_h*d_k ({self.n_h}*{self.d_k})")
        if self.n_h % self.n_kv:
            raise ConfigError(f"n_h ({self.n_h}) must be divisible by n_kv ({self.n_kv})")
        if not self.k_min <= self.k_base <= self.k_max:
            raise ConfigError("need k_min <= k_base <= k_max")
        if self.d_I >= self.d:
            raise ConfigError("indexer dimension d_I must be smaller than d")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in (0, 1)")
        if self.rope and (self.d_k % 2 or self.d_I % 2):
            raise ConfigError("rotary encoding needs even d_k and d_I")

    @classmethod
    def table1(cls, **overrides) -> "GsaConfig":
        """The 7B-class defaults: d=4096, 32/8 heads, d_k=128, d_I=64, 4 indexer heads, k=2048/256/4096."""
        base = dict(d=4096, n_h=32, n_kv=8, d_k=128, d_I=64, H_I=4, k_base=2048, k_min=256, k_max=4096)
        base.update(overrides)
        return cls(**base)

    @property
    def uses_indexer(self) -> bool:
        return self.mode in ("sparse_only", "gsa")

    @property
    def uses_g1(self) -> bool:
        return self.mode in ("gated_only", "gsa") and self.gates in ("both", "g1")

    @property
    def uses_g2(self) -> bool:
        return self.mode in ("gated_only", "gsa") and self.gates in ("both", "g2")

    @property
    def group_size(self) -> int:
        return self.n_h // self.n_kv

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GsaConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown attention config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class LayerParams:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_O: Tensor
    indexer: IndexerParams | None = None
    gates: GateParams | None = None

    @classmethod
    def init(cls, cfg: GsaConfig, rng: Rng, dtype=np.float32, out_std: float | None = None) -> "LayerParams":
        std = cfg.init_std
        hd, kvd = cfg.n_h * cfg.d_k, cfg.n_kv * cfg.d_k
        p = cls(
            W_Q=init_matrix(cfg.d, hd, "normal", rng.child("W_Q"), std, dtype),
            W_K=init_matrix(cfg.d, kvd, "normal", rng.child("W_K"), std, dtype),
            W_V=init_matrix(cfg.d, kvd, "normal", rng.child("W_V"), std, dtype),
            W_O=init_matrix(hd, cfg.d, "normal", rng.child("W_O"), std if out_std is None else out_std, dtype),
        )
        if cfg.uses_indexer:
            p.indexer = IndexerParams.init(cfg.d, cfg.d_I, cfg.H_I, rng.child("indexer"), std, dtype)
        if cfg.uses_g1 or cfg.uses_g2:
            p.gates = GateParams.init(cfg.d, cfg.n_kv, cfg.n_h, cfg.d_k, rng.child("gates"),
                                      cfg.gate_init_std, dtype)
        return p

    def named(self) -> dict[str, Tensor]:
        out = {"W_Q": self.W_Q, "W_K": self.W_K, "W_V": self.W_V, "W_O": self.W_O}
        if self.indexer is not None:
            out.update({f"indexer.{k}": v for k, v in self.indexer.named().items()})
        if self.gates is not None:
            out.update({f"gates.{k}": v for k, v in self.gates.named().items()})
        return out


def parameter_overhead(cfg: GsaConfig) -> dict[str, float]:
    """Extra parameter counts of the gated sparse layer over a plain GQA layer."""
    d, n_h, n_kv, d_k = cfg.d, cfg.n_h, cfg.n_kv, cfg.d_k
    base = d * n_h * d_k + 2 * d * n_kv * d_k + n_h * d_k * d
    extra = {
        "indexer_q": cfg.H_I * d * cfg.d_I,
        "indexer_k": d * cfg.d_I,
        "indexer_head_weights": d * cfg.H_I,
        "value_gate": d * n_kv * d_k,
        "output_gate": d * n_h * d_k,
    }
    out: dict[str, float] = {"base_attention": base, **extra, "extra_total": sum(extra.values())}
    out["extra_fraction"] = out["extra_total"] / base
    return out


# ---------------------------------------------------------------------------
# SDPA
# ---------------------------------------------------------------------------

def _split_heads(q: Tensor, cfg: GsaConfig) -> Tensor:
    B, L = q.shape[:2]
    return T.reshape(q, (B, L, cfg.n_kv, cfg.group_size, cfg.d_k))


def dense_sdpa(q: Tensor, k: Tensor, v: Tensor, cfg: GsaConfig) -> tuple[Tensor, Tensor]:
    """Causal GQA attention.

    ``q`` is ``[B, L, n_h, d_k]``; ``k``/``v`` are ``[B, L, n_kv, d_k]``.
    Returns the head outputs ``[B, L, n_h, d_k]`` and the weights
    ``[B, n_kv, group, L, L]``.
    """
    B, L = q.shape[:2]
    qh = _split_heads(q, cfg)
    logits = T.mul(T.einsum("btngd,bsnd->bngts", qh, k), 1.0 / math.sqrt(cfg.d_k))
    probs = T.softmax(logits, causal_mask(L))
    out = T.einsum("bngts,bsnd->btngd", probs, v)
    counting.add(B * (L * (L + 1) // 2) * cfg.d_k * cfg.n_h * 2, "attention")
    return T.reshape(out, (B, L, cfg.n_h, cfg.d_k)), probs


def pad_selections(selections: list[SelectionResult]) -> tuple[np.ndarray, np.ndarray]:
    """Pack one sequence's selections into padded ``(idx, valid)`` arrays of shape ``[1, L, K]``."""
    K = max(len(s.indices) for s in selections)
    L = len(selections)
    idx = np.zeros((1, L, K), dtype=np.int64)
    valid = np.zeros((1, L, K), dtype=bool)
    for t, s in enumerate(selections):
        if len(s.indices) == 0:
            raise ValueError(f"empty selection at position {t}")
        if s.indices[-1] > t:
            raise ValueError(f"selection at position {t} is not causal")
        idx[0, t, :len(s.indices)] = s.indices
        valid[0, t, :len(s.indices)] = True
    return idx, valid


def sparse_sdpa(q: Tensor, k: Tensor, v: Tensor, idx: np.ndarray, valid: np.ndarray,
                cfg: GsaConfig) -> tuple[Tensor, Tensor]:
    """Attention restricted to the selected positions ``idx[b, t, :]`` (where ``valid``).

    The softmax is normalised over the selected set only. Returns head outputs
    ``[B, L, n_h, d_k]`` and weights ``[B, L, n_kv, group, K]``.
    """
    if not np.all(valid[..., 0]):
        raise ValueError("every query position needs a non-empty selection")
    B, L = q.shape[:2]
    qh = _split_heads(q, cfg)
    ks = T.gather(k, idx)
    vs = T.gather(v, idx)
    logits = T.mul(T.einsum("btngd,btknd->btngk", qh, ks), 1.0 / math.sqrt(cfg.d_k))
    probs = T.softmax(logits, valid[:, :, None, None, :])
    out = T.einsum("btngk,btknd->btngd", probs, vs)
    counting.add(int(valid.sum()) * cfg.d_k * cfg.n_h * 2, "attention")
    return T.reshape(out, (B, L, cfg.n_h, cfg.d_k)), probs


def sparse_attention(Q: Tensor, K: Tensor, V: Tensor, selections, cfg: GsaConfig) -> Tensor:
    """Sparse SDPA for one sequence (``[L, heads, d_k]`` tensors) or a padded batch.

    ``selections`` is either a list of ``SelectionResult`` (one per position)
    or an ``(idx, valid)`` pair.
    """
    squeeze = Q.ndim == 3
    if squeeze:
        Q, K, V = (T.reshape(x, (1, *x.shape)) for x in (Q, K, V))
    idx, valid = pad_selections(selections) if isinstance(selections, list) else selections
    out, _ = sparse_sdpa(Q, K, V, idx, valid, cfg)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def dense_attention(h: Tensor, params: LayerParams, cfg: GsaConfig) -> Tensor:
    """Plain causal GQA layer: projections, dense SDPA, output projection."""
    squeeze = h.ndim == 2
    if squeeze:
        h = T.reshape(h, (1, *h.shape))
    q, k, v = _qkv(h, params, cfg, None)
    o, _ = dense_sdpa(q, k, v, cfg)
    u = _out_proj(o, params)
    return T.reshape(u, u.shape[1:]) if squeeze else u


def _qkv(h: Tensor, params: LayerParams, cfg: GsaConfig, rope):
    B, L, _ = h.shape
    with counting.scope("qkv"):
        q = T.reshape(h @ params.W_Q, (B, L, cfg.n_h, cfg.d_k))
        k = T.reshape(h @ params.W_K, (B, L, cfg.n_kv, cfg.d_k))
        v = T.reshape(h @ params.W_V, (B, L, cfg.n_kv, cfg.d_k))
    if rope is not None:
        cos, sin = rope
        q = T.rope(q, cos[:L], sin[:L])
        k = T.rope(k, cos[:L], sin[:L])
    return q, k, v


def _out_proj(o: Tensor, params: LayerParams) -> Tensor:
    B, L = o.shape[:2]
    with counting.scope("qkv"):
        return T.reshape(o, (B, L, -1)) @ params.W_O


# ---------------------------------------------------------------------------
# full layer
# ---------------------------------------------------------------------------

@dataclass
class LayerTrace:
    """Intermediate values from one layer forward, kept for losses and diagnostics."""

    o_pre_gate: Tensor | None = None
    o_post_gate: Tensor | None = None
    value_gate: Tensor | None = None
    output_gate: Tensor | None = None
    scores: Tensor | None = None
    kl: Tensor | None = None
    k_t: np.ndarray | None = None
    idx: np.ndarray | None = None
    valid: np.ndarray | None = None
    first_token_attn: float = 0.0
    variances: np.ndarray | None = None
    teacher: np.ndarray | None = field(default=None, repr=False)


def _first_token_dense(probs: np.ndarray) -> float:
    # probs [B, n_kv, g, L, L]; skip t = 0, whose whole mass sits on position 0
    if probs.shape[-1] < 2:
        return 0.0
    return float(probs[..., 1:, 0].mean())


def _first_token_sparse(probs: np.ndarray, idx: np.ndarray, valid: np.ndarray) -> float:
    # probs [B, L, n_kv, g, K]
    if probs.shape[1] < 2:
        return 0.0
    on_zero = (idx == 0) & valid
    w = (probs * on_zero[:, :, None, None, :]).sum(axis=-1)
    return float(w[:, 1:].mean())


def layer_forward(h: Tensor, params: LayerParams, cfg: GsaConfig, state: SparsityState | None = None,
                  phase: str = "sparse", update_state: bool = False, rope=None,
                  counted_topk: bool | None = None) -> tuple[Tensor, LayerTrace]:
    """One attention layer on ``h[B, L, d]``.

    ``phase`` selects how variants with an indexer behave: ``dense`` ignores
    the indexer, ``warmup`` runs dense attention and distils the indexer
    towards it, ``sparse`` attends over the indexer's top-k. Indexer-free
    variants ignore ``phase``. ``rope`` is ``None`` or a pair of rotary tables
    ``((cos, sin) for d_k, (cos, sin) for d_I)``. Gradients reach the indexer only
    through ``trace.kl``: its input is detached and selection is discrete.
    """
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}")
    B, L, _ = h.shape
    trace = LayerTrace()
    rope_attn, rope_index = rope if rope is not None else (None, None)
    q, k, v = _qkv(h, params, cfg, rope_attn)

    if cfg.uses_g2:
        v, trace.value_gate = value_gate(v, h, params.gates, return_gate=True)

    use_indexer = cfg.uses_indexer and phase != "dense"
    if use_indexer:
        score_fn = gated_scores if cfg.mode == "gsa" else relu_scores
        trace.scores = score_fn(h.detach(), params.indexer, rope_index)
        mask = causal_mask(L)
        trace.variances = row_variance(trace.scores.data, mask[None])

    if use_indexer and phase == "sparse":
        if cfg.mode == "gsa" and cfg.adaptive_k_enabled:
            k_t = adaptive_k_batch(trace.variances, state, cfg)
        else:
            k_t = np.full((B, L), cfg.k_base, dtype=np.int64)
        select = select_batch_counted if (counted_topk if counted_topk is not None else counting.enabled()) \
            else select_batch
        idx, valid = select(trace.scores.data, k_t)
        o, probs = sparse_sdpa(q, k, v, idx, valid, cfg)
        trace.k_t, trace.idx, trace.valid = k_t, idx, valid
        trace.first_token_attn = _first_token_sparse(probs.data, idx, valid)
        teacher = probs.data.mean(axis=(2, 3))
        bi = np.arange(B)[:, None, None]
        ti = np.arange(L)[None, :, None]
        sel_scores = trace.scores[np.broadcast_to(bi, idx.shape), np.broadcast_to(ti, idx.shape), idx]
        trace.kl = T.mul(kl_rows(teacher, sel_scores, valid), 1.0 / B)
    else:
        o, probs = dense_sdpa(q, k, v, cfg)
        trace.first_token_attn = _first_token_dense(probs.data)
        if use_indexer:
            teacher = probs.data.mean(axis=(1, 2))
            trace.teacher = teacher
            trace.kl = T.mul(kl_rows(teacher, trace.scores, causal_mask(L)[None]), 1.0 / B)

    if use_indexer and update_state and state is not None and L > 1:
        update_vbar(state, trace.variances[:, 1:])

    trace.o_pre_gate = o
    if cfg.uses_g1:
        o, trace.output_gate = output_gate(o, h, params.gates, return_gate=True)
    trace.o_post_gate = o
    return _out_proj(o, params), trace


def gsa_forward(h: Tensor, params: LayerParams, cfg: GsaConfig, state: SparsityState | None = None,
                rope=None):
    """Evaluate the layer as configured and return ``(u, DiagnosticsRecord)``; the sparsity state is read-only."""
    from gsa.diagnostics import record_from_traces

    squeeze = h.ndim == 2
    if squeeze:
        h = T.reshape(h, (1, *h.shape))
    state = state if state is not None else SparsityState(decay=cfg.ema_decay)
    u, trace = layer_forward(h, params, cfg, state, phase="sparse", update_state=False, rope=rope)
    record = record_from_traces([trace])
    return (T.reshape(u, u.shape[1:]) if squeeze else u), record


def numerical_rank(M, tol: float = 1e-6) -> int:
    """Number of singular values above ``tol * sigma_max``."""
    M = np.asarray(getattr(M, "data", M), dtype=np.float64)
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))
