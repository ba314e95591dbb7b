"""Sigmoid value gate (G2) and per-head output gate (G1)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gsa import counting
from gsa import tensor as T
from gsa.rng import Rng, init_matrix
from gsa.tensor import Tensor


class GateRangeError(ValueError):
    pass


@dataclass
class GateParams:
    Wg_V: Tensor  # d -> n_kv * d_k
    bg_V: Tensor
    Wg_O: Tensor  # d -> n_h * d_k
    bg_O: Tensor

    @classmethod
    def init(cls, d: int, n_kv: int, n_h: int, d_k: int, rng: Rng, std: float = 0.02,
             dtype=np.float32) -> "GateParams":
        # small weights and zero bias: every gate starts at sigmoid(~0) ~ 0.5
        return cls(
            Wg_V=init_matrix(d, n_kv * d_k, "normal", rng.child("Wg_V"), std, dtype),
            bg_V=Tensor(np.zeros(n_kv * d_k, dtype=dtype), requires_grad=True),
            Wg_O=init_matrix(d, n_h * d_k, "normal", rng.child("Wg_O"), std, dtype),
            bg_O=Tensor(np.zeros(n_h * d_k, dtype=dtype), requires_grad=True),
        )

    def named(self) -> dict[str, Tensor]:
        return {"Wg_V": self.Wg_V, "bg_V": self.bg_V, "Wg_O": self.Wg_O, "bg_O": self.bg_O}


def _gate(h: Tensor, W: Tensor, b: Tensor, shape) -> Tensor:
    with counting.scope("gating"):
        pre = T.add(h @ W, b)
    return T.sigmoid(T.reshape(pre, shape))


def value_gate(V: Tensor, h: Tensor, p: GateParams, return_gate: bool = False):
    """``V'[s] = V[s] * sig(h_s Wg_V + bg_V)``; the gate for a value comes from that value's position."""
    gate = _gate(h, p.Wg_V, p.bg_V, V.shape)
    counting.add(V.data.size, "gating")
    out = T.mul(V, gate)
    return (out, gate) if return_gate else out


def output_gate(O: Tensor, h: Tensor, p: GateParams, return_gate: bool = False):
    """``O[t, head] * sig(h_t Wg_O + bg_O)[head]``; one gate vector per query position and head."""
    gate = _gate(h, p.Wg_O, p.bg_O, O.shape)
    counting.add(O.data.size, "gating")
    out = T.mul(O, gate)
    return (out, gate) if return_gate else out


def gate_stats(gate_values) -> dict[str, float]:
    vals = np.concatenate([np.asarray(getattr(g, "data", g), dtype=np.float64).reshape(-1)
                           for g in (gate_values if isinstance(gate_values, (list, tuple)) else [gate_values])])
    if vals.size == 0:
        raise GateRangeError("no gate values")
    if np.any(vals <= 0.0) or np.any(vals >= 1.0):
        raise GateRangeError("gate value outside the open interval (0, 1)")
    return {
        "mean": float(vals.mean()),
        "frac_below_0.5": float(np.mean(vals < 0.5)),
        "min": float(vals.min()),
        "max": float(vals.max()),
    }
