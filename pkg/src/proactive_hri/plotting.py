"""Report figures written next to the CSV/JSON outputs (headless backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_pr_curve(curve, path, threshold: float | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.step(curve.recall, curve.precision, where="post", color="tab:blue", label=f"AP={curve.ap:.3f}")
    if threshold is not None:
        i = int(abs(curve.thresholds - threshold).argmin())
        ax.plot(curve.recall[i], curve.precision[i], "o", color="tab:red", label=f"H={threshold:.3f}")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left")
    return _save(fig, path)


def plot_score_histogram(scored: Sequence, path, threshold: float | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    pos = [c.score for c in scored if c.positive]
    neg = [c.score for c in scored if not c.positive]
    bins = [i / 40 for i in range(41)]
    ax.hist(neg, bins=bins, alpha=0.6, label=f"negative ({len(neg)})", color="tab:gray", log=True)
    ax.hist(pos, bins=bins, alpha=0.7, label=f"positive ({len(pos)})", color="tab:green", log=True)
    if threshold is not None:
        ax.axvline(threshold, color="tab:red", ls="--", lw=1)
    ax.set_ylim(bottom=0.8)
    ax.set_xlabel("trigger score")
    ax.set_ylabel("clips")
    ax.legend()
    return _save(fig, path)


def plot_loss_curve(history: Sequence[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    steps = [r["step"] for r in history]
    for key, color in (("total", "k"), ("trigger", "tab:blue"), ("action", "tab:orange"), ("target", "tab:green")):
        ax.plot(steps, [r[key] for r in history], lw=0.8 if key != "total" else 1.2, color=color, label=key)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax.legend()
    val = [(r["step"], r["val_f1"]) for r in history if r.get("val_f1") is not None]
    if val:
        twin = ax.twinx()
        twin.plot(*zip(*val), "o-", color="tab:red", ms=3, lw=0.8)
        twin.set_ylabel("val F1", color="tab:red")
        twin.set_ylim(0, 1)
    return _save(fig, path)
