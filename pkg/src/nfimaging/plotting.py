"""PNG renderings of the figure tables written by the command-line tool.

Figures are built with :class:`matplotlib.figure.Figure` directly, so no
pyplot state or interactive backend is involved and rendering is safe in
worker processes and headless sessions.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib as mpl
import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .io import atomic_write

__all__ = ["Panel", "render_panels", "STYLE"]

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
}


@dataclass
class Panel:
    """One axes: an optional histogram plus any number of curves."""

    title: str
    xlabel: str
    ylabel: str
    edges: np.ndarray | None = None
    counts: np.ndarray | None = None
    curves: Mapping[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    logy: bool = False
    vlines: Sequence[float] = ()


def _draw(ax, p: Panel) -> None:
    if p.edges is not None and p.counts is not None:
        ax.stairs(np.asarray(p.counts, float), np.asarray(p.edges, float), fill=True,
                  color="0.75", edgecolor="0.35", label="simulated")
    for (label, (x, y)), style in zip(p.curves.items(), ("-", "--", ":", "-.", "-", "--")):
        ax.plot(x, y, style, lw=1.2, label=label)
    for v in p.vlines:
        ax.axvline(v, color="k", lw=0.6, ls=":")
    if p.logy:
        ax.set_yscale("log")
    ax.set_title(p.title)
    ax.set_xlabel(p.xlabel)
    ax.set_ylabel(p.ylabel)
    if p.curves or p.counts is not None:
        ax.legend(frameon=False)


def render_panels(path: str | Path, panels: Sequence[Panel], ncols: int | None = None,
                  dpi: int = 120) -> None:
    """Lay the panels out on a grid and write a PNG atomically."""
    n = len(panels)
    ncols = ncols or min(n, 2)
    nrows = -(-n // ncols)
    with mpl.rc_context(STYLE):
        fig = Figure(figsize=(3.6 * ncols, 2.8 * nrows))
        FigureCanvasAgg(fig)
        axes = fig.subplots(nrows, ncols, squeeze=False)
        for ax, p in zip(axes.ravel(), panels):
            _draw(ax, p)
        for ax in axes.ravel()[n:]:
            ax.set_visible(False)
        fig.tight_layout()
        buf = _png_bytes(fig, dpi)
    atomic_write(path, buf)


def _png_bytes(fig: Figure, dpi: int) -> bytes:
    out = io.BytesIO()
    # fixed metadata keeps reruns byte-identical
    fig.savefig(out, format="png", dpi=dpi, metadata={"Software": None})
    return out.getvalue()
