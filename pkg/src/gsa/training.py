"""Two-phase training: dense pretraining, indexer warm-up, then joint sparse training.

Phase schedule for variants with an indexer (``sparse_only``, ``gsa``)::

    [0, dense_steps)                          dense   all non-indexer params, LM loss
    [dense_steps, dense_steps + warmup_steps)  warmup  indexer only, KL to dense attention
    [.., total_steps)                          sparse  LM loss + kl_weight * KL over S_t

Variants without an indexer train with the LM loss for every step.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from gsa import tensor as T
from gsa.attention import ConfigError
from gsa.diagnostics import record_from_traces
from gsa.model import TransformerLM
from gsa.rng import Rng
from gsa.tensor import NonFiniteError, Tensor

GROUPS = ("base", "indexer", "gates")
METRICS_SCHEMA = "gsa-metrics/1"
METRICS_COLUMNS = ("step", "phase", "lm_loss", "kl_loss", "vbar", "mean_k", "first_token_attn",
                   "mean_gate", "max_activation", "spike_flag")


@dataclass
class TrainConfig:
    warmup_steps: int = 1000
    dense_steps: int = 0
    total_steps: int = 2000
    batch_size: int = 8
    seq_len: int = 64
    base_lr: float = 1e-3
    lr_multipliers: dict = field(default_factory=lambda: {"base": 1.0, "indexer": 10.0, "gates": 1.0})
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.01
    kl_weight: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.total_steps < 1:
            raise ConfigError("total_steps must be positive")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("need 0 <= warmup_steps < total_steps")
        if self.dense_steps < 0 or self.dense_steps + self.warmup_steps > self.total_steps:
            raise ConfigError("dense_steps + warmup_steps must fit inside total_steps")
        unknown = set(self.lr_multipliers) - set(GROUPS)
        if unknown:
            raise ConfigError(f"unknown learning-rate groups: {sorted(unknown)}")
        self.lr_multipliers = {g: float(self.lr_multipliers.get(g, 1.0)) for g in GROUPS}
        if any(m <= 0 for m in self.lr_multipliers.values()):
            raise ConfigError("learning-rate multipliers must be positive")
        if self.batch_size < 1 or self.seq_len < 2:
            raise ConfigError("batch_size must be >= 1 and seq_len >= 2")
        if self.kl_weight < 0:
            raise ConfigError("kl_weight must be non-negative")

    def phase(self, step: int, has_indexer: bool) -> str:
        if not has_indexer or step < self.dense_steps:
            return "dense"
        if step < self.dense_steps + self.warmup_steps:
            return "warmup"
        return "sparse"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Batch:
    tokens: np.ndarray
    targets: np.ndarray


class TrainingDivergedError(NonFiniteError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adamw_update(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
                 beta1: float, beta2: float, eps: float, weight_decay: float):
    """One AdamW step with bias correction and decoupled decay. Returns ``(p, m, v)``."""
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    p = p - lr * weight_decay * p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p, m, v


class AdamW:
    """AdamW over named parameters partitioned into base / indexer / gates groups.

    Parameters without a gradient in a step are left untouched (no moment
    decay, no weight decay). Weight decay applies to matrices only.
    """

    def __init__(self, params: dict[str, Tensor], groups: dict[str, str], cfg: TrainConfig):
        missing = set(params) - set(groups)
        extra = set(groups) - set(params)
        if missing or extra:
            raise ConfigError(f"parameter groups must cover every parameter exactly once "
                              f"(missing={sorted(missing)}, unknown={sorted(extra)})")
        bad = {n: g for n, g in groups.items() if g not in GROUPS}
        if bad:
            raise ConfigError(f"unknown groups: {bad}")
        self.params = params
        self.groups = groups
        self.cfg = cfg
        self.state: dict[str, dict] = {}

    @classmethod
    def from_group_lists(cls, params: dict[str, Tensor], group_lists: dict[str, list[str]],
                         cfg: TrainConfig) -> "AdamW":
        groups: dict[str, str] = {}
        for g, names in group_lists.items():
            for n in names:
                if n in groups:
                    raise ConfigError(f"parameter {n!r} assigned to both {groups[n]!r} and {g!r}")
                groups[n] = g
        return cls(params, groups, cfg)

    def lr(self, name: str) -> float:
        return self.cfg.base_lr * self.cfg.lr_multipliers[self.groups[name]]

    def step(self) -> None:
        c = self.cfg
        for name, p in self.params.items():
            if p.grad is None:
                continue
            st = self.state.setdefault(name, {"t": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)})
            st["t"] += 1
            wd = c.weight_decay if p.ndim >= 2 else 0.0
            new, st["m"], st["v"] = adamw_update(p.data, p.grad, st["m"], st["v"], st["t"], self.lr(name),
                                                 c.beta1, c.beta2, c.eps, wd)
            p.data = new.astype(p.dtype, copy=False)


def adamw_step(params: dict[str, Tensor], groups: dict[str, str], opt_state: AdamW | None,
               config: TrainConfig) -> AdamW:
    """Functional entry point: apply one step using the gradients stored on ``params``."""
    opt = opt_state or AdamW(params, groups, config)
    opt.step()
    return opt


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def lm_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    V = logits.shape[-1]
    return T.cross_entropy(T.reshape(logits, (-1, V)), np.asarray(targets).reshape(-1))


def detect_spike(loss_history, current: float | None = None, window: int = 100,
                 factor: float = 1.5) -> bool:
    """True when ``current`` exceeds ``factor`` times the median of the previous ``window`` losses.

    With ``current`` omitted the last element of ``loss_history`` is tested
    against the ones before it. Fewer than ``window`` prior losses: no spike.
    """
    hist = list(loss_history)
    if current is None:
        if not hist:
            return False
        current, hist = hist[-1], hist[:-1]
    if len(hist) < window:
        return False
    return bool(current > factor * float(np.median(hist[-window:])))


# ---------------------------------------------------------------------------
# tasks
# ---------------------------------------------------------------------------

def _copy_rows(n: int, seq_len: int, vocab: int, rng: Rng) -> np.ndarray:
    half = seq_len // 2
    raw = np.empty((n, seq_len + 1), dtype=np.int64)
    raw[:, :half] = rng.integers(0, vocab, (n, half))
    for i in range(half, seq_len + 1):
        raw[:, i] = raw[:, i - half]
    return raw


def _induction_rows(n: int, seq_len: int, vocab: int, rng: Rng) -> np.ndarray:
    # a quarter of the vocabulary acts as keys; each sequence binds every key
    # to a random value, and a key is always followed by its value
    n_keys = max(1, vocab // 4)
    raw = rng.integers(n_keys, vocab, (n, seq_len + 1))
    values = rng.integers(n_keys, vocab, (n, n_keys))
    place = rng.uniform(0, 1, (n, seq_len + 1)) < 0.25
    keys = rng.integers(0, n_keys, (n, seq_len + 1))
    for b in range(n):
        i = 0
        while i < seq_len:
            if place[b, i]:
                raw[b, i] = keys[b, i]
                raw[b, i + 1] = values[b, keys[b, i]]
                i += 2
            else:
                i += 1
    return raw


def _byte_rows(n: int, seq_len: int, data: np.ndarray, rng: Rng) -> np.ndarray:
    starts = rng.integers(0, len(data) - seq_len - 1, n)
    return np.stack([data[s:s + seq_len + 1] for s in starts]).astype(np.int64)


def load_bytes(path) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)


def make_task(kind: str, seq_len: int, vocab: int, rng: Rng, batch_size: int = 8,
              path: str | None = None) -> Iterator[Batch]:
    """Endless stream of batches: ``copy``, ``induction`` or ``bytes`` (windows over a file)."""
    if kind == "bytes":
        if not path:
            raise FileNotFoundError("bytes task needs a file path")
        data = load_bytes(path)
        if len(data) < seq_len + 2:
            raise ValueError(f"{path} is shorter than one window")
        if vocab < 256:
            raise ConfigError("bytes task needs vocab_size >= 256")
    elif kind not in ("copy", "induction"):
        raise ConfigError(f"unknown task kind {kind!r}")

    while True:
        if kind == "copy":
            raw = _copy_rows(batch_size, seq_len, vocab, rng)
        elif kind == "induction":
            raw = _induction_rows(batch_size, seq_len, vocab, rng)
        else:
            raw = _byte_rows(batch_size, seq_len, data, rng)
        yield Batch(tokens=raw[:, :-1], targets=raw[:, 1:])


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------

def _total_kl(traces) -> Tensor | None:
    kls = [tr.kl for tr in traces if tr.kl is not None]
    if not kls:
        return None
    total = kls[0]
    for k in kls[1:]:
        total = total + k
    return total


def _check_finite(loss: Tensor, model: TransformerLM, step: int | None, what: str) -> None:
    if not np.isfinite(loss.data).all():
        bad = [n for n, p in model.named_parameters().items() if not np.isfinite(p.data).all()]
        raise TrainingDivergedError(f"non-finite {what} at step {step}",
                                    {"step": step, "what": what, "non_finite_params": bad})


def _run_step(model: TransformerLM, batch: Batch, opt: AdamW, phase: str, kl_weight: float,
              step: int | None = None) -> dict:
    model.zero_grad()
    logits, traces = model.forward(batch.tokens, phase=phase, update_state=True)
    lm = lm_loss(logits, batch.targets)
    kl = _total_kl(traces)
    _check_finite(lm, model, step, "lm_loss")
    if kl is not None:
        _check_finite(kl, model, step, "kl_loss")
    if phase == "warmup":
        loss = kl
    elif phase == "sparse" and kl is not None and kl_weight > 0:
        loss = lm + T.mul(kl, kl_weight)
    else:
        loss = lm
    loss.backward()
    opt.step()
    return {
        "lm_loss": float(lm.data),
        "kl_loss": float(kl.data) if kl is not None else math.nan,
        "record": record_from_traces(traces),
    }


def warmup_step(model: TransformerLM, batch: Batch, opt: AdamW) -> dict:
    """Distil the indexer towards the frozen dense attention; only indexer params change."""
    return _run_step(model, batch, opt, "warmup", 0.0)


def sparse_step(model: TransformerLM, batch: Batch, opt: AdamW, kl_weight: float | None = None) -> dict:
    """Joint step: LM loss trains the model, KL over the selected subsets trains the indexer."""
    w = opt.cfg.kl_weight if kl_weight is None else kl_weight
    return _run_step(model, batch, opt, "sparse", w)


def dense_step(model: TransformerLM, batch: Batch, opt: AdamW) -> dict:
    return _run_step(model, batch, opt, "dense", 0.0)


def evaluate(model: TransformerLM, batches, phase: str | None = None) -> dict:
    """Mean LM loss and diagnostics over ``batches`` without touching params or the sparsity state."""
    phase = phase or ("sparse" if model.cfg.attention.uses_indexer else "dense")
    losses, records = [], []
    with T.no_grad():
        for batch in batches:
            logits, traces = model.forward(batch.tokens, phase=phase, update_state=False)
            losses.append(float(lm_loss(logits, batch.targets).data))
            records.append(record_from_traces(traces))
    return {"lm_loss": float(np.mean(losses)), "records": records}


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None or not np.isfinite(x):
        return ""
    return f"{float(x):.9g}"


class MetricsWriter:
    """Writes the per-step metrics CSV: a schema comment line, a header, one row per step."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._fh.write(f"# {METRICS_SCHEMA}\n")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(METRICS_COLUMNS)

    def write(self, row: dict) -> None:
        self._w.writerow([_fmt(row[c]) for c in METRICS_COLUMNS])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[dict]:
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(io.StringIO("\n".join(lines))))


def train(model: TransformerLM, tcfg: TrainConfig, batches: Iterator[Batch], metrics_path=None,
          log_every: int = 0, log=print) -> list[dict]:
    """Run the phased schedule for ``tcfg.total_steps`` steps and return the metric rows."""
    groups = model.param_groups()
    opt = AdamW(model.named_parameters(), groups, tcfg)
    has_indexer = model.cfg.attention.uses_indexer
    writer = MetricsWriter(metrics_path) if metrics_path else None
    rows: list[dict] = []
    history: list[float] = []
    try:
        for step in range(tcfg.total_steps):
            phase = tcfg.phase(step, has_indexer)
            batch = next(batches)
            out = _run_step(model, batch, opt, phase, tcfg.kl_weight, step)
            rec = out["record"]
            spike = detect_spike(history, out["lm_loss"])
            history.append(out["lm_loss"])
            vbars = [s.v_bar for s in model.states if s.initialized]
            row = {
                "step": step,
                "phase": phase,
                "lm_loss": out["lm_loss"],
                "kl_loss": out["kl_loss"],
                "vbar": float(np.mean(vbars)) if vbars else math.nan,
                "mean_k": rec.mean_k,
                "first_token_attn": rec.first_token_attn,
                "mean_gate": rec.mean_gate,
                "max_activation": rec.max_activation,
                "spike_flag": spike,
            }
            rows.append(row)
            if writer:
                writer.write(row)
            if log_every and (step % log_every == 0 or step == tcfg.total_steps - 1):
                log(f"step {step:5d} {phase:6s} lm={row['lm_loss']:.4f} kl={_fmt(row['kl_loss']) or '-'}")
    finally:
        if writer:
            writer.close()
    return rows
