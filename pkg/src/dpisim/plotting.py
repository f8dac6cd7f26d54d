"""SVG figures for reports. CSV files stay the canonical output."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed ids and no timestamp so reruns write identical bytes
_RC = {"svg.hashsalt": "dpisim", "svg.fonttype": "none", "path.simplify": False}


def _to_svg(fig) -> bytes:
    buf = io.BytesIO()
    with matplotlib.rc_context(_RC):
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return buf.getvalue()


def _figure(title: str, xlabel: str, ylabel: str, size=(6.0, 3.2)):
    with matplotlib.rc_context(_RC):
        fig, ax = plt.subplots(figsize=size)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    return fig, ax


def trace_plot(times, series: dict, title: str = "membrane current", log: bool = True) -> bytes:
    """Line plot of currents (A) over time (s); values are shown in pA."""
    fig, ax = _figure(title, "time (s)", "current (pA)")
    for label, y in series.items():
        ax.plot(times, np.asarray(y) * 1e12, lw=0.8, label=label)
    if log:
        ax.set_yscale("log")
    if len(series) > 1:
        ax.legend(fontsize=7, loc="upper right")
    fig.tight_layout()
    return _to_svg(fig)


def raster_plot(spikes, populations, title: str = "spike raster", t_stop: float | None = None) -> bytes:
    """Raster of SpikeEvents; populations are stacked in the given order."""
    fig, ax = _figure(title, "time (s)", "neuron")
    offset = 0
    ticks, labels = [], []
    for name, size in populations:
        t = [ev.time for ev in spikes if ev.population == name]
        y = [offset + ev.neuron_id for ev in spikes if ev.population == name]
        ax.scatter(t, y, s=1.5, marker="|", linewidths=0.6)
        ticks.append(offset + size / 2)
        labels.append(name)
        offset += size
    ax.set_yticks(ticks, labels)
    ax.set_ylim(-0.5, max(offset, 1) - 0.5)
    if t_stop is not None:
        ax.set_xlim(0, t_stop)
    fig.tight_layout()
    return _to_svg(fig)


def histogram_plot(values, title: str, xlabel: str, bins: int = 40) -> bytes:
    fig, ax = _figure(title, xlabel, "count")
    ax.hist(np.asarray(values), bins=bins)
    fig.tight_layout()
    return _to_svg(fig)


def curve_plot(x, ys: dict, title: str, xlabel: str, ylabel: str, hline: float | None = None,
               logy: bool = False) -> bytes:
    fig, ax = _figure(title, xlabel, ylabel)
    for label, y in ys.items():
        ax.plot(x, y, lw=0.9, label=label)
    if hline is not None:
        ax.axhline(hline, color="k", lw=0.6, ls="--")
    if logy:
        ax.set_yscale("log")
    if 1 < len(ys) <= 12:
        ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    return _to_svg(fig)


def weight_plot(W, title: str = "synapse counts") -> bytes:
    fig, ax = _figure(title, "pre neuron", "post neuron", size=(6.0, 2.5))
    im = ax.imshow(np.asarray(W), aspect="auto", interpolation="nearest", cmap="viridis")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    return _to_svg(fig)
