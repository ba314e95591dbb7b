"""Analytical cost model and an instrumented MAC count of one layer forward.

Counts are multiply-accumulates except ``topk``, which counts comparisons.
Categories:

    qkv           Q/K/V projections and the output projection
    indexer       pairwise indexer scoring over the causal prefix
    indexer_proj  indexer query/key/head-weight projections
    topk          comparisons made by the heap selector
    attention     QK^T and PV over the attended positions
    gating        gate projections and the elementwise gate products
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from gsa import counting
from gsa import tensor as T
from gsa.attention import GsaConfig, LayerParams, layer_forward
from gsa.indexer import SparsityState
from gsa.rng import Rng

BENCH_SCHEMA = "gsa-bench/1"
BENCH_COLUMNS = ("L", "k", "mode", "predicted_total", "measured_total", "speedup_vs_dense",
                 "predicted_qkv", "measured_qkv", "predicted_indexer", "measured_indexer",
                 "predicted_indexer_proj", "measured_indexer_proj", "predicted_topk", "measured_topk",
                 "predicted_attention", "measured_attention", "predicted_gating", "measured_gating")
COMPONENTS = ("qkv", "indexer", "indexer_proj", "topk", "attention", "gating")

# largest dense score tensor (bytes) a measured run may allocate
MEMORY_BUDGET = 2 * 1024 ** 3


class BenchBoundError(ValueError):
    pass


@dataclass(frozen=True)
class CostBreakdown:
    qkv: int = 0
    indexer: int = 0
    indexer_proj: int = 0
    topk: int = 0
    attention: int = 0
    gating: int = 0

    @property
    def total(self) -> int:
        return sum(getattr(self, c) for c in COMPONENTS)

    @property
    def matmul_terms(self) -> dict[str, int]:
        return {c: getattr(self, c) for c in COMPONENTS if c != "topk"}

    def as_dict(self) -> dict[str, int]:
        return {**asdict(self), "total": self.total}


def _check(L: int, k: int) -> None:
    if L < 1 or not 1 <= k <= L:
        raise ValueError(f"need L >= 1 and 1 <= k <= L (L={L}, k={k})")


def topk_comparisons_bound(L: int, k: int) -> int:
    """Heap-selection comparisons, ``2*(n + k*log2(n))`` per row with ``n = t+1 > k`` candidates.

    Heapify and each pop compare against both children at every level,
    hence the factor 2. Rows with ``n <= k`` keep everything and compare nothing.
    """
    total = 0.0
    for n in range(k + 1, L + 1):
        total += 2 * (n + k * math.log2(n))
    return int(round(total))


def predict_cost(cfg: GsaConfig, L: int, k: int) -> CostBreakdown:
    """Leading-term counts with unit constants for one sequence of length ``L`` and fixed budget ``k``."""
    _check(L, k)
    d, n_h, n_kv, d_k = cfg.d, cfg.n_h, cfg.n_kv, cfg.d_k
    qkv = L * d * (n_h + 2 * n_kv) * d_k + L * n_h * d_k * d
    pairs = L * (L + 1) // 2
    if cfg.uses_indexer:
        attended = sum(min(k, t + 1) for t in range(L))
        indexer = pairs * cfg.H_I * (cfg.d_I + 1)
        indexer_proj = L * d * cfg.d_I * (cfg.H_I + 1) + L * d * cfg.H_I
        topk = topk_comparisons_bound(L, k)
    else:
        attended, indexer, indexer_proj, topk = pairs, 0, 0, 0
    attention = attended * d_k * n_h * 2
    gating = 0
    if cfg.uses_g2:
        gating += L * d * n_kv * d_k + L * n_kv * d_k
    if cfg.uses_g1:
        gating += L * d * n_h * d_k + L * n_h * d_k
    return CostBreakdown(qkv, indexer, indexer_proj, topk, attention, gating)


def speedup(cfg: GsaConfig, L: int, k: int) -> float:
    """Dominant-term ratio of dense attention cost to indexer plus sparse attention cost."""
    _check(L, k)
    return (L * L * cfg.d) / (L * L * cfg.d_I * cfg.H_I + L * k * cfg.d)


def check_bounds(cfg: GsaConfig, L: int, batch: int = 1) -> None:
    need = batch * max(cfg.n_h, cfg.H_I) * L * L * 8
    if need > MEMORY_BUDGET:
        raise BenchBoundError(f"L={L} needs ~{need / 1024 ** 3:.1f} GiB of score storage, "
                              f"over the {MEMORY_BUDGET / 1024 ** 3:.0f} GiB bound")


def fixed_budget(cfg: GsaConfig, k: int) -> GsaConfig:
    return replace(cfg, k_base=k, k_min=min(cfg.k_min, k), k_max=max(cfg.k_max, k), adaptive_k_enabled=False)


def measure_macs(cfg: GsaConfig, L: int, k: int, seed: int = 0) -> CostBreakdown:
    """Run one counted forward of a randomly initialised layer on a length-``L`` sequence."""
    _check(L, k)
    check_bounds(cfg, L)
    cfg = fixed_budget(cfg, k)
    rng = Rng(seed, "bench")
    params = LayerParams.init(cfg, rng.child("params"), np.float32)
    h = T.Tensor(rng.child("input").normal((1, L, cfg.d)).astype(np.float32))
    with T.no_grad(), counting.counting() as counter:
        layer_forward(h, params, cfg, SparsityState(decay=cfg.ema_decay), phase="sparse", counted_topk=True)
    counts = counter.snapshot()
    unexpected = set(counts) - set(COMPONENTS)
    if unexpected:
        raise RuntimeError(f"uncategorised counts: {sorted(unexpected)}")
    return CostBreakdown(**{c: counts.get(c, 0) for c in COMPONENTS})


def bench_rows(cfg: GsaConfig, Ls, ks, modes, formula_only: bool = False, seed: int = 0) -> list[dict]:
    rows = []
    for L in Ls:
        for k in ks:
            if k > L:
                continue
            for mode in modes:
                mcfg = replace(cfg, mode=mode)
                pred = predict_cost(mcfg, L, k)
                meas = None if formula_only else measure_macs(mcfg, L, k, seed)
                row = {
                    "L": L, "k": k, "mode": mode,
                    "predicted_total": pred.total,
                    "measured_total": meas.total if meas else None,
                    "speedup_vs_dense": speedup(mcfg, L, k) if mcfg.uses_indexer else 1.0,
                }
                for c in COMPONENTS:
                    row[f"predicted_{c}"] = getattr(pred, c)
                    row[f"measured_{c}"] = getattr(meas, c) if meas else None
                rows.append(row)
    return rows


def write_bench_csv(rows: list[dict], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        fh.write(f"# {BENCH_SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            w.writerow(["" if r[c] is None else (f"{r[c]:.6g}" if isinstance(r[c], float) else r[c])
                        for c in BENCH_COLUMNS])
