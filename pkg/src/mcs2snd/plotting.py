"""Report figures written next to the delimited outputs of the CLI."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .core import DiarizationResult

ERROR_COLORS = {"MISS": "#4c72b0", "FA": "#dd8452", "CONF": "#c44e52"}


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _timeline(ax, result: DiarizationResult, speakers, color, y0=0.0, height=0.8):
    for seg in result.segments:
        if seg.speaker in speakers:
            ax.broken_barh([(seg.onset, seg.duration)], (y0 + speakers.index(seg.speaker), height), color=color)


def plot_activity(scores: np.ndarray, frame_period: float, hyp: DiarizationResult, path,
                  ref: DiarizationResult | None = None, threshold: float = 0.5) -> Path:
    """Fused speaker scores as a heatmap over hypothesis (and reference) segment timelines."""
    plt = _pyplot()
    nrows = 3 if ref is not None else 2
    fig, axes = plt.subplots(nrows, 1, figsize=(10, 1.5 + 1.2 * nrows), sharex=True, squeeze=False)
    axes = axes[:, 0]
    duration = scores.shape[1] * frame_period if scores.size else hyp.end_time
    extent = (0.0, duration, scores.shape[0] - 0.5, -0.5)
    if scores.size:
        im = axes[0].imshow(scores, aspect="auto", interpolation="nearest", extent=extent, vmin=0, vmax=1,
                            cmap="viridis")
        fig.colorbar(im, ax=axes[0], pad=0.01, label="p(active)")
    axes[0].set_ylabel("slot")
    axes[0].set_title(f"fused scores (threshold {threshold:g})", fontsize=9)
    spk = hyp.speakers
    _timeline(axes[1], hyp, spk, "#55a868")
    axes[1].set_yticks(np.arange(len(spk)) + 0.4, spk)
    axes[1].set_ylabel("hypothesis")
    if ref is not None:
        rs = ref.speakers
        _timeline(axes[2], ref, rs, "#8172b2")
        axes[2].set_yticks(np.arange(len(rs)) + 0.4, rs)
        axes[2].set_ylabel("reference")
    axes[-1].set_xlabel("time (s)")
    axes[-1].set_xlim(0, max(duration, 1e-3))
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_der_breakdown(rows, path, title: str = "DER breakdown") -> Path:
    """Stacked miss / false alarm / confusion bars; ``rows`` are (label, miss, fa, conf) in percent."""
    plt = _pyplot()
    rows = list(rows)
    labels = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(rows) + 2), 3.5))
    x = np.arange(len(rows))
    bottom = np.zeros(len(rows))
    for k, name in enumerate(("MISS", "FA", "CONF")):
        vals = np.array([r[k + 1] for r in rows], dtype=float)
        ax.bar(x, vals, bottom=bottom, color=ERROR_COLORS[name], label=name, width=0.6)
        bottom += vals
    for xi, total in zip(x, bottom):
        ax.text(xi, total, f"{total:.2f}", ha="center", va="bottom", fontsize=8)
    ax.set_xticks(x, labels, rotation=30 if len(rows) > 3 else 0, ha="right" if len(rows) > 3 else "center")
    ax.set_ylabel("error (%)")
    ax.set_title(title, fontsize=10)
    ax.legend(frameon=False, fontsize=8)
    ax.set_ylim(0, max(1.0, bottom.max() * 1.15) if len(rows) else 1.0)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_losses(history, path) -> Path:
    """Training curves from parsed log records (dicts with stage, step, bce, arc, total)."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 3.5))
    groups: dict[str, list] = {}
    for rec in history:
        groups.setdefault(rec["stage"], []).append(rec)
    offset = 0
    for name, recs in groups.items():
        steps = [offset + r["step"] for r in recs]
        ax.plot(steps, [r["bce"] for r in recs], color="#4c72b0", lw=1)
        ax.plot(steps, [r["arc"] for r in recs], color="#dd8452", lw=1)
        ax.axvline(steps[-1], color="0.8", lw=0.8)
        ax.text(offset, 1.0, name, transform=ax.get_xaxis_transform(), fontsize=7, va="top")
        offset = steps[-1]
    ax.plot([], [], color="#4c72b0", label="bce")
    ax.plot([], [], color="#dd8452", label="arcface")
    ax.set_yscale("log")
    ax.set_xlabel("step (cumulative)")
    ax.set_ylabel("loss")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
