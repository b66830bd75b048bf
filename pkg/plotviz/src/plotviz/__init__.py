"""Read-only figure generation from simulator run directories.

Renders trajectory bundles, configuration-space projections and ensemble
histograms from ``trajectories.csv`` and ``summary.json``.  Nothing here
recomputes physics: every number drawn or annotated is read from the run
artifacts, so figures cannot drift from the results they illustrate.
"""

from plotviz.io import (
    RunData,
    SchemaMismatchError,
    load_run,
    SUMMARY_SCHEMA,
    TRAJ_SCHEMA,
)
from plotviz.figures import (
    FigureJob,
    FigureKind,
    FigureResult,
    plot_config_space,
    plot_histogram,
    plot_plane,
    render,
)

__version__ = "0.1.0"

__all__ = [
    "FigureJob",
    "FigureKind",
    "FigureResult",
    "RunData",
    "SchemaMismatchError",
    "SUMMARY_SCHEMA",
    "TRAJ_SCHEMA",
    "load_run",
    "plot_config_space",
    "plot_histogram",
    "plot_plane",
    "render",
]
