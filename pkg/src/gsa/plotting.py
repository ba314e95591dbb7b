"""PNG figures written next to the CSV outputs (headless Agg backend)."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _num(x) -> float:
    try:
        return float(x)
    except (TypeError, ValueError):
        return math.nan


def plot_training(rows: list[dict], path, title: str = "") -> Path:
    """Loss curves plus first-token attention and mean gate over steps."""
    steps = [int(r["step"]) for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    axes[0].plot(steps, [_num(r["lm_loss"]) for r in rows], label="lm_loss")
    kl = [_num(r["kl_loss"]) for r in rows]
    if any(not math.isnan(v) for v in kl):
        axes[0].plot(steps, kl, label="kl_loss")
    axes[0].set_xlabel("step")
    axes[0].legend()
    axes[1].plot(steps, [_num(r["first_token_attn"]) for r in rows])
    axes[1].set_title("first-token attention")
    axes[1].set_xlabel("step")
    axes[2].plot(steps, [_num(r["mean_gate"]) for r in rows])
    axes[2].set_title("mean gate")
    axes[2].set_xlabel("step")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_bench(rows: list[dict], path) -> Path:
    """Predicted versus measured totals per mode, log-log in L, one line per k."""
    modes = sorted({r["mode"] for r in rows})
    fig, axes = plt.subplots(1, len(modes), figsize=(4 * len(modes), 3.6), squeeze=False)
    for ax, mode in zip(axes[0], modes):
        sub = [r for r in rows if r["mode"] == mode]
        for k in sorted({r["k"] for r in sub}):
            pts = sorted((r["L"], r["predicted_total"], r["measured_total"]) for r in sub if r["k"] == k)
            Ls = [p[0] for p in pts]
            ax.plot(Ls, [p[1] for p in pts], "--", label=f"k={k} predicted")
            if all(p[2] is not None for p in pts):
                ax.plot(Ls, [p[2] for p in pts], "o", label=f"k={k} measured")
        ax.set_xscale("log", base=2)
        ax.set_yscale("log")
        ax.set_title(mode)
        ax.set_xlabel("L")
    axes[0][0].set_ylabel("MACs")
    axes[0][-1].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_sink_report(rows: list[dict], path) -> Path:
    """Per-layer first-token attention and max activation, one bar group per checkpoint."""
    labels = sorted({r["checkpoint"] for r in rows}, key=[r["checkpoint"] for r in rows].index)
    layers = sorted({int(r["layer"]) for r in rows})
    width = 0.8 / max(1, len(labels))
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6))
    for i, label in enumerate(labels):
        sub = {int(r["layer"]): r for r in rows if r["checkpoint"] == label}
        xs = [l + i * width for l in layers]
        axes[0].bar(xs, [_num(sub[l]["first_token_attn"]) for l in layers], width, label=label)
        axes[1].bar(xs, [_num(sub[l]["max_activation"]) for l in layers], width, label=label)
    axes[0].set_title("first-token attention")
    axes[1].set_title("max activation")
    for ax in axes:
        ax.set_xlabel("layer")
        ax.set_xticks([l + 0.4 - width / 2 for l in layers], [str(l) for l in layers])
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
