"""The three figure kinds: plane bundles, configuration-space projections,
ensemble histograms.

Each plotter returns a :class:`FigureResult` carrying the exact data series
it rendered, so callers (and tests) can assert on content without touching
pixels.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from plotviz.io import RunData, load_run

_SIDE_COLORS = {"top": "tab:red", "bottom": "tab:blue"}
_BAND_COLORS = ("tab:orange", "tab:green")


class FigureKind(enum.Enum):
    PLANE = "plane"
    CONFIG_SPACE = "config-space"
    HISTOGRAM = "histogram"


@dataclass
class FigureJob:
    """What to draw, from which run directory, to which file."""

    run_dir: Path
    kind: FigureKind
    out_path: Path
    checkpoint: int = -1
    band_sigmas: float = 3.0
    figsize: tuple[float, float] = (8.0, 6.0)
    dpi: int = 120


@dataclass
class FigureResult:
    kind: FigureKind
    out_path: Path
    figsize: tuple[float, float]
    series: dict = field(default_factory=dict)


def _finish(fig, job: FigureJob) -> None:
    fig.tight_layout()
    job.out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(job.out_path, dpi=job.dpi)
    plt.close(fig)


def plot_plane(job: FigureJob, data: RunData | None = None) -> FigureResult:
    """Trajectory bundle in the test particle's plane.

    Curves are colored by initial side; the symmetry line and the labeled
    geometry points are drawn from the summary, never recomputed.
    """
    data = data or load_run(job.run_dir)
    ix = data.column("p_x")
    iy = data.column("p_y")
    geom = data.summary["geometry"]

    fig, ax = plt.subplots(figsize=job.figsize)
    curves = []
    for tid in sorted(data.trajectories):
        arr = data.trajectories[tid]
        side = data.side_of(tid)
        ax.plot(arr[:, ix], arr[:, iy], color=_SIDE_COLORS.get(side, "gray"),
                lw=0.8, alpha=0.7)
        curves.append({"id": tid, "side": side, "x": arr[:, ix], "y": arr[:, iy]})

    lam = geom["line"]["value"]
    ax.axhline(lam, color="black", lw=1.0, ls="--", label="L")
    for name in ("I", "A_prime", "B_prime"):
        px, py = geom[name]
        ax.plot([px], [py], marker="o", color="black", ms=4)
        ax.annotate(name.replace("_prime", "'"), (px, py),
                    textcoords="offset points", xytext=(6, 6))
    ax.set_xlabel("p_x")
    ax.set_ylabel("p_y")
    ax.set_title(f"{data.summary['params']['scenario']}: trajectories")
    _finish(fig, job)
    return FigureResult(
        FigureKind.PLANE, job.out_path, job.figsize,
        {"curves": curves, "line_value": lam},
    )


def plot_config_space(job: FigureJob, data: RunData | None = None) -> FigureResult:
    """Projection onto (test-particle transverse, pointer) coordinates.

    Branch supports are shaded as center +- ``band_sigmas`` pointer widths
    using the branch tracks recorded in the summary.
    """
    data = data or load_run(job.run_dir)
    iy = data.column("p_y")
    if_ = data.column("f_x")

    fig, ax = plt.subplots(figsize=job.figsize)
    bands = []
    for k, iv in enumerate(data.summary.get("branch_tracks", [])):
        if not iv["t"] or iv["t_end"] <= iv["t_start"]:
            continue
        for b in iv["branches"]:
            py = np.asarray(b["centers"]["p_y"], dtype=float)
            fx = np.asarray(b["centers"]["f_x"], dtype=float)
            sf = np.asarray(b["sigma"]["f_x"], dtype=float)
            lo, hi = fx - job.band_sigmas * sf, fx + job.band_sigmas * sf
            color = _BAND_COLORS[b["index"] % len(_BAND_COLORS)]
            ax.fill(
                np.concatenate([py, py[::-1]]),
                np.concatenate([lo, hi[::-1]]),
                color=color, alpha=0.15, lw=0,
            )
            bands.append(
                {"interval": k, "branch": b["index"], "path": b["path"],
                 "t": np.asarray(iv["t"], dtype=float),
                 "p_y": py, "f_lo": lo, "f_hi": hi}
            )

    curves = []
    for tid in sorted(data.trajectories):
        arr = data.trajectories[tid]
        side = data.side_of(tid)
        ax.plot(arr[:, iy], arr[:, if_], color=_SIDE_COLORS.get(side, "gray"),
                lw=0.8, alpha=0.7)
        curves.append({"id": tid, "side": side, "p_y": arr[:, iy], "f_x": arr[:, if_]})

    ax.set_xlabel("p_y")
    ax.set_ylabel("f_x")
    ax.set_title(f"{data.summary['params']['scenario']}: configuration space")
    _finish(fig, job)
    return FigureResult(
        FigureKind.CONFIG_SPACE, job.out_path, job.figsize,
        {"curves": curves, "bands": bands},
    )


def plot_histogram(job: FigureJob, data: RunData | None = None) -> FigureResult:
    """Empirical checkpoint histogram with the recorded expected counts.

    The chi-squared value and p-value are annotated verbatim from the
    summary.
    """
    data = data or load_run(job.run_dir)
    stats = data.summary.get("report", {}).get("equivariance", [])
    if not stats:
        raise ValueError("summary carries no checkpoint statistics to plot")
    stat = stats[job.checkpoint]
    observed = np.asarray(stat["observed"], dtype=float)
    expected = np.asarray(stat["expected"], dtype=float)
    inner = np.asarray(stat["inner_edges"], dtype=float)
    if observed.size < 2:
        raise ValueError(
            f"checkpoint histogram needs at least 2 bins, got {observed.size}"
        )
    pad = float(np.median(np.diff(inner))) if inner.size > 1 else 1.0
    edges = np.concatenate([[inner[0] - pad], inner, [inner[-1] + pad]])
    mids = 0.5 * (edges[:-1] + edges[1:])
    widths = np.diff(edges)

    fig, ax = plt.subplots(figsize=job.figsize)
    ax.bar(mids, observed, width=widths, alpha=0.6, label="ensemble")
    ax.step(edges, np.concatenate([expected, expected[-1:]]), where="post",
            color="black", label="|psi|^2 expectation")
    ax.annotate(
        f"chi2 = {stat['chi2']:.2f}\np = {stat['p_value']:.3g}",
        xy=(0.02, 0.95), xycoords="axes fraction", va="top",
    )
    ax.set_xlabel("p_y")
    ax.set_ylabel("count")
    ax.set_title(
        f"{data.summary['params']['scenario']}: checkpoint t = {stat['t']:g}"
    )
    ax.legend(loc="upper right")
    _finish(fig, job)
    return FigureResult(
        FigureKind.HISTOGRAM, job.out_path, job.figsize,
        {
            "t": stat["t"],
            "edges": edges,
            "observed": observed,
            "expected": expected,
            "chi2": stat["chi2"],
            "p_value": stat["p_value"],
        },
    )


_PLOTTERS = {
    FigureKind.PLANE: plot_plane,
    FigureKind.CONFIG_SPACE: plot_config_space,
    FigureKind.HISTOGRAM: plot_histogram,
}


def render(job: FigureJob) -> FigureResult:
    return _PLOTTERS[job.kind](job)
