"""Command-line front end: ``gsa {train,eval,bench,sink-report,gradcheck}``.

Exit codes: 0 success, 1 check failed, 2 bad input (config, checkpoint,
bounds), 3 training diverged.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from gsa.attention import MODES, ConfigError, GsaConfig
from gsa.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from gsa.config import ExperimentConfig, TaskConfig
from gsa.rng import Rng
from gsa.training import TrainingDivergedError, evaluate, make_task, train

PROBE_SEQUENCES = 32
PROBE_CHUNK = 8
SINK_SCHEMA = "gsa-sink/1"
SINK_COLUMNS = ("checkpoint", "layer", "first_token_attn", "mean_gate", "max_activation", "mean_k")
GRADCHECK_TOL = 1e-4


def _dtype(precision: int):
    return np.float64 if precision == 64 else np.float32


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    return cfg.with_overrides(seed=args.seed, out_dir=args.out_dir)


def _modes(arg: str | None) -> list[str | None]:
    if arg is None:
        return [None]
    modes = list(MODES) if arg == "all" else [m.strip() for m in arg.split(",")]
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise ConfigError(f"unknown modes {bad}; choose from {MODES} or 'all'")
    return modes


def probe_batches(cfg: ExperimentConfig, probe_path: str | None = None):
    """The held-out probe set: 32 sequences from the ``probe`` stream, in chunks of 8."""
    task = TaskConfig("bytes", probe_path) if probe_path else cfg.task
    stream = make_task(task.kind, cfg.train.seq_len, cfg.model.vocab_size, Rng(cfg.seed, "probe"),
                       PROBE_CHUNK, task.path)
    return [next(stream) for _ in range(PROBE_SEQUENCES // PROBE_CHUNK)]


def layer_summary(records) -> list[dict]:
    n_layers = len(records[0].per_layer)
    out = []
    for i in range(n_layers):
        rows = [r.per_layer[i] for r in records]

        def avg(key):
            vals = [r[key] for r in rows if not np.isnan(r[key])]
            return float(np.mean(vals)) if vals else float("nan")

        out.append({"layer": i, "first_token_attn": avg("first_token_attn"), "mean_gate": avg("mean_gate"),
                    "max_activation": max(r["max_activation"] for r in rows), "mean_k": avg("mean_k")})
    return out


def _fmt(x) -> str:
    if isinstance(x, float):
        return "" if np.isnan(x) else f"{x:.6g}"
    return str(x)


def _report_lines(label: str, eval_loss: float, layers: list[dict]) -> list[str]:
    lines = [f"[{label}]", f"probe_lm_loss {eval_loss:.6f}"]
    for r in layers:
        lines.append(f"layer {r['layer']}: first_token_attn={_fmt(r['first_token_attn']) or '-'} "
                     f"mean_gate={_fmt(r['mean_gate']) or '-'} max_activation={_fmt(r['max_activation'])} "
                     f"mean_k={_fmt(r['mean_k']) or '-'}")
    return lines


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    from gsa.model import TransformerLM
    from gsa.plotting import plot_training

    base = _load_config(args)
    modes = _modes(args.mode_override)
    for mode in modes:
        cfg = base.with_overrides(mode=mode)
        out = Path(cfg.out_dir) / mode if len(modes) > 1 else Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        model = TransformerLM(cfg.model, seed=cfg.seed, dtype=_dtype(args.precision))
        label = cfg.model.attention.mode
        try:
            rows = train(model, cfg.train, cfg.batches("data"), out / "metrics.csv",
                         log_every=args.log_every, log=print)
        except TrainingDivergedError as exc:
            (out / "divergence.json").write_text(json.dumps(exc.dump, indent=2, sort_keys=True))
            print(f"error: {exc}; diagnostic dump in {out / 'divergence.json'}", file=sys.stderr)
            return 3
        save_checkpoint(model, out / "checkpoint.npz", extra={"experiment": cfg.to_dict()})
        ev = evaluate(model, probe_batches(cfg))
        lines = _report_lines(label, ev["lm_loss"], layer_summary(ev["records"]))
        last = rows[-1]
        lines.insert(1, f"final_lm_loss {last['lm_loss']:.6f}")
        if not np.isnan(last["kl_loss"]):
            lines.insert(2, f"final_kl_loss {last['kl_loss']:.6f}")
        (out / "report.txt").write_text("\n".join(lines) + "\n")
        plot_training(rows, out / "training.png", title=label)
        print(f"{label}: final lm_loss {last['lm_loss']:.4f}"
              + ("" if np.isnan(last["kl_loss"]) else f", kl_loss {last['kl_loss']:.4f}")
              + f" -> {out}")
    return 0


def _experiment_from_checkpoint(meta: dict) -> ExperimentConfig:
    exp = meta.get("extra", {}).get("experiment")
    if exp is None:
        raise CheckpointError("checkpoint carries no experiment config; pass --config")
    return ExperimentConfig.from_dict(exp)


def _resolve(args, path) -> tuple:
    expected = None
    if getattr(args, "config", None):
        expected = ExperimentConfig.load(args.config)
    model, meta = load_checkpoint(path, expected.model if expected else None)
    cfg = expected or _experiment_from_checkpoint(meta)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return model, cfg


def cmd_eval(args) -> int:
    model, cfg = _resolve(args, args.checkpoint)
    ev = evaluate(model, probe_batches(cfg, args.probe))
    lines = _report_lines(model.cfg.attention.mode, ev["lm_loss"], layer_summary(ev["records"]))
    print("\n".join(lines))
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text("\n".join(lines) + "\n")
    return 0


def cmd_sink_report(args) -> int:
    from gsa.plotting import plot_sink_report

    rows, lines = [], []
    for path in args.checkpoint:
        model, cfg = _resolve(args, path)
        mode, where = model.cfg.attention.mode, Path(path).parent.name or Path(path).stem
        label = mode if where == mode else f"{mode}:{where}"
        ev = evaluate(model, probe_batches(cfg, args.probe))
        layers = layer_summary(ev["records"])
        rows.extend({"checkpoint": label, **r} for r in layers)
        lines.extend(_report_lines(label, ev["lm_loss"], layers))
        rec = ev["records"]
        fta = [r.first_token_attn for r in rec if not np.isnan(r.first_token_attn)]
        gates = [r.mean_gate for r in rec if not np.isnan(r.mean_gate)]
        lines.append(f"overall: first_token_attn={_fmt(float(np.mean(fta))) if fta else '-'} "
                     f"mean_gate={_fmt(float(np.mean(gates))) if gates else '-'} "
                     f"max_activation={_fmt(max(r.max_activation for r in rec))}")
    print("\n".join(lines))
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    with open(out / "sink_report.csv", "w", newline="") as fh:
        fh.write(f"# {SINK_SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SINK_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in SINK_COLUMNS])
    plot_sink_report(rows, out / "sink_report.png")
    return 0


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("values must be positive integers")
    return vals


def cmd_bench(args) -> int:
    from gsa.bench import BenchBoundError, bench_rows, check_bounds, speedup, write_bench_csv
    from gsa.plotting import plot_bench

    if args.table1:
        acfg = GsaConfig.table1()
    elif args.config:
        acfg = ExperimentConfig.load(args.config).model.attention
    else:
        acfg = GsaConfig()
    modes = _modes(args.modes or "all")
    bad = [(L, k) for L in args.L for k in args.k if k > L]
    if bad:
        raise ConfigError(f"need k <= L, got {bad}")
    if args.formula_only:
        for L in args.L:
            for k in args.k:
                s = speedup(acfg, L, k)
                print(f"L={L} k={k} speedup {s:.1f}x (exact {s:.4f})")
    else:
        for L in args.L:
            try:
                check_bounds(acfg, L)
            except BenchBoundError as exc:
                print(f"error: refusing to measure: {exc}", file=sys.stderr)
                return 2
    rows = bench_rows(acfg, args.L, args.k, modes, formula_only=args.formula_only, seed=args.seed or 0)
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_bench_csv(rows, out / "bench.csv")
    plot_bench(rows, out / "bench.png")
    if not args.formula_only:
        for r in rows:
            print(f"L={r['L']} k={r['k']} {r['mode']}: predicted {r['predicted_total']} "
                  f"measured {r['measured_total']}")
    return 0


def cmd_gradcheck(args) -> int:
    from gsa.gradcheck import check_model, check_rules, tiny_model_config
    from gsa.model import TransformerLM

    failures = []
    rules = check_rules(seed=args.seed or 0)
    for op, err in rules.items():
        status = "ok" if err < GRADCHECK_TOL else "FAIL"
        print(f"rule {op:14s} {err:.3e} {status}")
        if err >= GRADCHECK_TOL:
            failures.append(f"op {op}")

    if args.config:
        exp = ExperimentConfig.load(args.config)
        seq_len, vocab = min(exp.train.seq_len, 16), exp.model.vocab_size
    else:
        exp, seq_len, vocab = None, 16, tiny_model_config("gsa").vocab_size
    rng = Rng(args.seed or 0, "gradcheck-data")
    raw = rng.integers(0, vocab, (2, seq_len + 1))
    for mode in MODES:
        mcfg = (replace(exp.model, attention=replace(exp.model.attention, mode=mode)) if exp
                else tiny_model_config(mode))
        phases = ("sparse", "warmup") if mcfg.attention.uses_indexer else ("dense",)
        for phase in phases:
            model = TransformerLM(mcfg, seed=args.seed or 0, dtype=np.float64)
            errs = check_model(model, raw[:, :-1], raw[:, 1:], phase=phase, max_coords=args.max_coords,
                               seed=args.seed or 0)
            groups = model.param_groups()
            for g in ("base", "indexer", "gates"):
                vals = {n: e for n, e in errs.items() if groups[n] == g}
                if not vals:
                    continue
                worst = max(vals.values())
                status = "ok" if worst < GRADCHECK_TOL else "FAIL"
                print(f"{mode:11s} {phase:6s} {g:7s} max rel-err {worst:.3e} {status}")
                failures.extend(f"param {mode}/{phase}/{n} ({e:.2e})" for n, e in vals.items()
                                if e >= GRADCHECK_TOL)
    if failures:
        print("gradient check failed: " + "; ".join(failures), file=sys.stderr)
        return 1
    print("all gradients agree")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gsa", description="Gated sparse attention experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="experiment TOML file")
        p.add_argument("--seed", type=int, default=None, help="override the top-level seed")
        p.add_argument("--out-dir", default=None, help="output directory")
        p.add_argument("--precision", type=int, choices=(32, 64), default=32)

    p = sub.add_parser("train", help="train a model and write metrics.csv, checkpoint.npz, report.txt")
    common(p, config_required=True)
    p.add_argument("--mode-override", default=None,
                   help="attention mode, comma-separated modes, or 'all' (one sub-directory per mode)")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="probe-set loss and diagnostics for a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--probe", default=None, help="byte file to draw probe sequences from")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="predicted versus measured MAC counts")
    common(p)
    p.add_argument("--L", type=_int_list, default=[256, 512, 1024], help="comma-separated lengths")
    p.add_argument("--k", type=_int_list, default=[64], help="comma-separated budgets")
    p.add_argument("--modes", default=None, help="comma-separated modes (default all)")
    p.add_argument("--formula-only", action="store_true", help="skip measurement; print speedups")
    p.add_argument("--table1", action="store_true", help="use the 4096-wide reference shape")
    p.add_argument("--mode-override", dest="modes", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sink-report", help="first-token attention, gates and activations per layer")
    common(p)
    p.add_argument("--checkpoint", required=True, nargs="+")
    p.add_argument("--probe", default=None, help="byte file to draw probe sequences from")
    p.set_defaults(func=cmd_sink_report)

    p = sub.add_parser("gradcheck", help="finite-difference check of every rule and every mode (64-bit)")
    common(p)
    p.add_argument("--max-coords", type=int, default=12, help="sampled coordinates per parameter")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
