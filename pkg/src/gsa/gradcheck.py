"""Central-difference gradient checking.

``grad_check`` is the independent oracle for every backward rule in
``gsa.tensor``; ``check_rules`` exercises each registered rule in isolation
so a broken rule is reported by op name rather than by parameter.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from gsa import tensor as T
from gsa.attention import MODES, GsaConfig
from gsa.rng import Rng
from gsa.tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return np.abs(analytic - numeric) / denom


def tensor_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(|a|, |n|)`` over a whole tensor (max-norm relative error).

    Elementwise ratios blow up on coordinates whose true gradient sits at the
    finite-difference noise floor; normalising by the tensor's scale does not.
    """
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(float(np.abs(a).max()), float(np.abs(n).max()), 1e-12)
    return float(np.abs(a - n).max()) / scale


def _coords(p: Tensor, max_coords: int | None, rng: Rng | None) -> np.ndarray:
    n = p.data.size
    if max_coords is None or n <= max_coords:
        return np.arange(n)
    rng = rng or Rng(0, "gradcheck")
    return np.sort(rng.permutation(n)[:max_coords])


def _evaluate(f: Callable[[], Tensor]) -> float:
    with T.no_grad():
        val = f()
    v = float(np.asarray(val.data).reshape(()))
    if not np.isfinite(v):
        raise T.NonFiniteError("objective is not finite")
    return v


def grad_check_per_param(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6,
                         max_coords: int | None = None, rng: Rng | None = None,
                         numeric_fs: Sequence[Callable[[], Tensor]] | None = None,
                         elementwise: bool = True) -> list[float]:
    """Relative error between backprop and central differences, one entry per param.

    By default the error of a param is the largest per-coordinate
    ``relative_error``; ``elementwise=False`` uses ``tensor_relative_error``.

    ``f`` rebuilds the scalar objective from the current parameter values on
    each call. Parameters should be 64-bit; 32-bit differences are too noisy.
    ``numeric_fs`` optionally gives, per param, the objective to difference
    when ``f`` contains stop-gradient paths that differences would see.
    """
    for p in params:
        p.zero_grad()
    out = f()
    T.assert_finite(out, "objective")
    out.backward()
    errors = []
    numeric_fs = numeric_fs or [f] * len(params)
    for p, fd in zip(params, numeric_fs):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        coords = _coords(p, max_coords, rng)
        numeric = np.empty(len(coords))
        for j, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + eps
            up = _evaluate(fd)
            flat[i] = orig - eps
            down = _evaluate(fd)
            flat[i] = orig
            numeric[j] = (up - down) / (2.0 * eps)
        a = analytic.reshape(-1)[coords]
        if elementwise:
            errors.append(float(relative_error(a, numeric).max(initial=0.0)))
        else:
            errors.append(tensor_relative_error(a, numeric))
    for p in params:
        p.zero_grad()
    return errors


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6,
               max_coords: int | None = None, rng: Rng | None = None) -> float:
    return max(grad_check_per_param(f, params, eps, max_coords, rng), default=0.0)


# ---------------------------------------------------------------------------
# per-rule checks
# ---------------------------------------------------------------------------

def _leaf(rng: Rng, *shape, low=None) -> Tensor:
    data = rng.normal(shape) if low is None else rng.uniform(low, 2.0, shape)
    return Tensor(data, requires_grad=True, dtype=np.float64)


def _weights(rng: Rng, shape) -> np.ndarray:
    return rng.normal(shape)


def _rule_cases(rng: Rng) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """One small scalar objective per backward rule.

    Each objective contracts the op output with fixed random weights, so the
    upstream gradient is not constant.
    """
    cases = {}

    def weighted(out_fn, params):
        w = {}

        def f():
            out = out_fn()
            if out.shape not in w:
                w[out.shape] = Tensor(_weights(rng, out.shape), dtype=np.float64)
            return T.tsum(T.mul(out, w[out.shape]))

        return f, params

    a, b = _leaf(rng, 3, 4), _leaf(rng, 4)
    cases["add"] = weighted(lambda: T.add(a, b), [a, b])
    x = _leaf(rng, 3, 4)
    cases["neg"] = weighted(lambda: T.neg(x), [x])
    m1, m2 = _leaf(rng, 3, 4), _leaf(rng, 3, 1)
    cases["mul"] = weighted(lambda: T.mul(m1, m2), [m1, m2])
    e = _leaf(rng, 5)
    cases["exp"] = weighted(lambda: T.exp(e), [e])
    lg = _leaf(rng, 5, low=0.5)
    cases["log"] = weighted(lambda: T.log(lg), [lg])
    s = _leaf(rng, 6)
    cases["sigmoid"] = weighted(lambda: T.sigmoid(s), [s])
    r = Tensor(np.array([-1.3, -0.4, 0.3, 0.9, 2.1]), requires_grad=True, dtype=np.float64)
    cases["relu"] = weighted(lambda: T.relu(r), [r])
    si = _leaf(rng, 6)
    cases["silu"] = weighted(lambda: T.silu(si), [si])
    rs = _leaf(rng, 2, 6)
    cases["reshape"] = weighted(lambda: T.reshape(rs, (3, 4)), [rs])
    tr = _leaf(rng, 2, 3, 4)
    cases["transpose"] = weighted(lambda: T.transpose(tr, (2, 0, 1)), [tr])
    ix = _leaf(rng, 4, 5)
    cases["index"] = weighted(lambda: ix[1:3, [0, 2, 2]], [ix])
    su = _leaf(rng, 3, 4)
    cases["sum"] = weighted(lambda: T.tsum(su, axis=1), [su])
    ma, mb = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 2)
    cases["matmul"] = weighted(lambda: T.matmul(ma, mb), [ma, mb])
    ea, eb = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 5, 4)
    cases["einsum"] = weighted(lambda: T.einsum("btd,bsd->bts", ea, eb), [ea, eb])
    sm = _leaf(rng, 3, 4)
    mask = np.array([[1, 1, 0, 1], [1, 0, 0, 0], [1, 1, 1, 1]], dtype=bool)
    cases["softmax"] = weighted(lambda: T.softmax(sm, mask), [sm])
    ls = _leaf(rng, 3, 4)
    cases["log_softmax"] = weighted(lambda: T.log_softmax(ls, mask), [ls])
    ce = _leaf(rng, 4, 5)
    targets = np.array([0, 3, 4, 1])
    cases["cross_entropy"] = (lambda: T.cross_entropy(ce, targets), [ce])
    rx, rw = _leaf(rng, 3, 6), _leaf(rng, 6)
    cases["rms_norm"] = weighted(lambda: T.rms_norm(rx, rw), [rx, rw])
    emb = _leaf(rng, 5, 3)
    ids = np.array([[0, 2, 2], [4, 1, 0]])
    cases["embedding"] = weighted(lambda: T.embedding(emb, ids), [emb])
    ga = _leaf(rng, 2, 4, 3)
    gidx = np.array([[[0, 1], [1, 1], [2, 0], [3, 2]], [[0, 0], [1, 0], [2, 1], [3, 3]]])
    cases["gather"] = weighted(lambda: T.gather(ga, gidx), [ga])
    ro = _leaf(rng, 2, 4, 3, 6)
    cos, sin = T.rope_tables(4, 6)
    cases["rope"] = weighted(lambda: T.rope(ro, cos, sin), [ro])
    return cases


def check_rules(seed: int = 0, eps: float = 1e-6) -> dict[str, float]:
    """Max relative error per registered backward rule, on random 64-bit inputs."""
    cases = _rule_cases(Rng(seed, "rule-check"))
    missing = set(T.RULES) - set(cases)
    if missing:
        raise RuntimeError(f"no gradcheck case for rules: {sorted(missing)}")
    return {name: grad_check(f, params, eps) for name, (f, params) in sorted(cases.items())}


# ---------------------------------------------------------------------------
# whole-model checks
# ---------------------------------------------------------------------------

def tiny_model_config(mode: str, **attention):
    """The small configuration used for whole-model checks (L=16 sequences)."""
    from gsa.model import ModelConfig

    acfg = dict(d=32, n_h=4, n_kv=2, d_k=8, d_I=8, H_I=2, k_base=6, k_min=4, k_max=12, mode=mode,
                init_std=0.3, gate_init_std=0.3)
    acfg.update(attention)
    return ModelConfig(n_layers=2, vocab_size=16, ffn_width=48, attention=GsaConfig(**acfg))


# Whole-model losses sit near 3 with some gradient entries near 1e-7: at 1e-6
# rounding dominates those entries, at 1e-4 truncation error reaches ~1e-4.
MODEL_EPS = 1e-5


def check_model(model, tokens: np.ndarray, targets: np.ndarray, kl_weight: float = 0.1,
                phase: str = "sparse", eps: float = MODEL_EPS, max_coords: int | None = 12,
                seed: int = 0) -> dict[str, float]:
    """Max relative error per named parameter for the model's total training loss.

    The analytic side backpropagates ``lm + kl_weight * kl``. The indexer sees a
    detached input and a detached teacher, so the loss each parameter is
    trained on differs by group: base and gate parameters are differenced
    through the LM loss, indexer parameters through the total loss. The
    sparsity state is never updated, so budgets stay fixed across evaluations.
    """
    from gsa.training import lm_loss

    def parts():
        logits, traces = model.forward(tokens, phase=phase, update_state=False)
        lm = lm_loss(logits, targets)
        kls = [tr.kl for tr in traces if tr.kl is not None]
        return lm, kls

    def total():
        lm, kls = parts()
        for kl in kls:
            lm = lm + T.mul(kl, kl_weight)
        return lm

    def lm_only():
        return parts()[0]

    named = model.named_parameters()
    groups = model.param_groups()
    numeric = [total if groups[n] == "indexer" else lm_only for n in named]
    errs = grad_check_per_param(total, list(named.values()), eps, max_coords, Rng(seed, "gradcheck"),
                                numeric_fs=numeric)
    return dict(zip(named, errs))


def check_modes(modes=MODES, seed: int = 0, seq_len: int = 16, batch: int = 2, eps: float = MODEL_EPS,
                max_coords: int | None = 12, phases=("sparse", "warmup")) -> dict[str, dict[str, float]]:
    """Run ``check_model`` for each mode on a fresh 64-bit tiny model; keys are ``mode/phase``."""
    from gsa.model import TransformerLM

    rng = Rng(seed, "gradcheck-data")
    out = {}
    for mode in modes:
        cfg = tiny_model_config(mode)
        raw = rng.child(mode).integers(0, cfg.vocab_size, (batch, seq_len + 1))
        for phase in phases if cfg.attention.uses_indexer else ("dense",):
            model = TransformerLM(cfg, seed=seed, dtype=np.float64)
            out[f"{mode}/{phase}"] = check_model(model, raw[:, :-1], raw[:, 1:], phase=phase, eps=eps,
                                                 max_coords=max_coords, seed=seed)
    return out
