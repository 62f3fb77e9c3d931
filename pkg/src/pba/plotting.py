"""PNG figures for the report command.  Each function returns the encoded
image so the caller can write it atomically."""

from __future__ import annotations

import io
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .augment import OPS  # noqa: E402


def _png(fig) -> bytes:
    buf = io.BytesIO()
    # no Software/date chunks, so identical inputs give identical bytes
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return buf.getvalue()


def schedule_figure(summary: Sequence[Mapping]) -> bytes:
    """Mean probability and magnitude per operation across epochs, from
    :func:`pba.harness.schedule_summary` rows."""
    fig, (ax_p, ax_m) = plt.subplots(2, 1, figsize=(9, 7), sharex=True)
    cmap = plt.get_cmap("tab20")
    for k, op in enumerate(OPS):
        rows = [r for r in summary if r["op"] == op.value]
        epochs = [r["epoch"] for r in rows]
        ax_p.step(epochs, [r["mean_prob"] for r in rows], where="post", color=cmap(k), label=op.value)
        ax_m.step(epochs, [r["mean_mag"] for r in rows], where="post", color=cmap(k))
    ax_p.set_ylabel("mean probability level")
    ax_m.set_ylabel("mean magnitude level")
    ax_m.set_xlabel("epoch")
    ax_p.legend(ncol=5, fontsize=7, loc="upper left")
    fig.tight_layout()
    return _png(fig)


def search_scores_figure(rows: Sequence[Mapping]) -> bytes:
    """Validation score of every trial at each barrier; the best trial's
    score is drawn on top."""
    fig, ax = plt.subplots(figsize=(8, 4.5))
    trials = sorted({r["trial_id"] for r in rows})
    for tid in trials:
        mine = [r for r in rows if r["trial_id"] == tid]
        ax.plot([r["epoch"] for r in mine], [r["score"] for r in mine], color="0.7", lw=0.8)
    epochs = sorted({r["epoch"] for r in rows})
    best = [max(r["score"] for r in rows if r["epoch"] == e) for e in epochs]
    ax.plot(epochs, best, color="C3", lw=2, label="best trial")
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation accuracy")
    ax.legend()
    fig.tight_layout()
    return _png(fig)


def best_of_n_figure(curve: Sequence[tuple[int, float]], reference: float | None = None) -> bytes:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([n for n, _ in curve], [v for _, v in curve], marker=".", label="random schedules")
    if reference is not None:
        ax.axhline(reference, color="C3", ls="--", label="searched schedule")
        ax.legend()
    ax.set_xlabel("number of random trials")
    ax.set_ylabel("expected best test accuracy")
    fig.tight_layout()
    return _png(fig)


def training_figure(runs: Mapping[str, Sequence[Mapping]]) -> bytes:
    """Test accuracy per epoch for each replay mode's results."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for mode, rows in sorted(runs.items()):
        pts = [(r["epoch"], r["test_acc"]) for r in rows if r.get("test_acc") is not None]
        ax.plot([e for e, _ in pts], [a for _, a in pts], label=mode)
    ax.set_xlabel("epoch")
    ax.set_ylabel("test accuracy")
    ax.legend()
    fig.tight_layout()
    return _png(fig)
