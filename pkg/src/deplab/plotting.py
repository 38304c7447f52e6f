"""Report figures rendered straight to files (no pyplot state, no display)."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.figure import Figure

from .analysis import PhaseMatrix, StepPattern


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    return path


def spectrum_figure(samples, path, count: int = 6, title: str = "") -> Path:
    """Moduli of the leading eigenvalues over time, with the nonzero count underneath."""
    t = np.array([s.time for s in samples])
    k = min(count, len(samples[0].eigenvalues)) if samples else 0
    mod = np.array([np.abs(s.eigenvalues[:k]) for s in samples]).reshape(len(samples), k)
    counts = [s.nonzero_count() for s in samples]
    fig = Figure(figsize=(7, 4.5))
    ax, ax2 = fig.subplots(2, 1, sharex=True, gridspec_kw={"height_ratios": [3, 1]})
    for i in range(k):
        ax.plot(t, mod[:, i], lw=1.2, label=f"|λ{i + 1}|")
    ax.set_ylabel("modulus")
    ax.legend(loc="upper right", fontsize=8, ncol=3, frameon=False)
    if title:
        ax.set_title(title)
    ax2.step(t, counts, where="post", color="k", lw=1)
    ax2.set_ylabel("nonzero")
    ax2.set_xlabel("time [s]")
    return _save(fig, path)


def phase_figure(pm: PhaseMatrix, path, title: str = "") -> Path:
    data = np.where(pm.defined, pm.phases, np.nan)
    fig = Figure(figsize=(5, 4.2))
    ax = fig.subplots()
    im = ax.imshow(data, cmap="twilight", vmin=-np.pi, vmax=np.pi)
    ticks = range(len(pm.labels))
    ax.set_xticks(ticks, [str(v) for v in pm.labels])
    ax.set_yticks(ticks, [str(v) for v in pm.labels])
    cb = fig.colorbar(im, ax=ax, ticks=[-np.pi, 0, np.pi])
    cb.ax.set_yticklabels(["-π", "0", "π"])
    ax.set_title(title or f"phase differences at {pm.frequency:.3g} Hz")
    return _save(fig, path)


def step_figure(pattern: StepPattern, path, leg_names=None, title: str = "") -> Path:
    """Step diagram; black bars mark intervals with the leg down."""
    n = len(pattern.intervals)
    names = leg_names or [str(i) for i in range(n)]
    fig = Figure(figsize=(7, 0.35 * n + 1.2))
    ax = fig.subplots()
    for i, ivs in enumerate(pattern.intervals):
        ax.broken_barh([(a, b - a) for a, b in ivs], (n - 1 - i - 0.4, 0.8), color="k")
    ax.set_yticks(range(n), names[::-1])
    ax.set_xlim(0, pattern.duration)
    ax.set_xlabel("time [s]")
    label = f" ({pattern.label})" if pattern.label else ""
    ax.set_title((title or "step pattern") + label)
    return _save(fig, path)


def timeseries_figure(t, x, path, labels=None, title: str = "") -> Path:
    fig = Figure(figsize=(7, 3.5))
    ax = fig.subplots()
    x = np.asarray(x)
    for j in range(x.shape[1]):
        ax.plot(t, x[:, j], lw=0.8, label=None if labels is None else str(labels[j]))
    if labels is not None:
        ax.legend(fontsize=7, ncol=6, frameon=False)
    ax.set_xlabel("time [s]")
    if title:
        ax.set_title(title)
    return _save(fig, path)
