"""Velocity field, trajectory integration and flow diagnostics.

The particle configuration moves with the velocity field

    v_d(Q, t) = (hbar / m_d) * Im(psi* d_d psi) / (psi* psi)   at Q

summed over spin assignments.  Integration is classical RK4 with local step
halving whenever a stage lands in near-vacuum density or exceeds a sanity
velocity bound; impulsive events apply between steps at their exact times
with the configuration continuous across them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from bohmsim.packets import StateTable, WaveFunction

__all__ = [
    "Configuration",
    "LineSpec",
    "Trajectory",
    "BatchTrajectories",
    "VacuumRegionError",
    "velocity_at",
    "integrate_batch",
    "integrate_trajectory",
    "current_across_line",
    "branch_weights_at",
    "min_pairwise_separation",
]

#: A configuration is a plain float vector, one entry per registered coordinate.
Configuration = np.ndarray

DENSITY_FLOOR_REL = 1e-12
REFINE_FLOOR_FACTOR = 100.0
MAX_HALVINGS = 12
_TIME_EPS = 1e-12


@dataclass(frozen=True)
class LineSpec:
    """The zero set of ``coords[coord_index] - value``."""

    coord_index: int
    value: float


class VacuumRegionError(RuntimeError):
    """Velocity requested where the density is below the vacuum floor."""

    def __init__(self, t: float, Q, density: float, floor: float):
        self.t = t
        self.Q = np.asarray(Q, dtype=float)
        self.density = density
        self.floor = floor
        super().__init__(
            f"density {density:.3e} below floor {floor:.3e} at t={t}, Q={self.Q.tolist()}"
        )


class Timeline(Protocol):
    """What the integrator needs to know about a compiled scenario."""

    t0: float
    t1: float
    v_max: float
    density_floor_rel: float

    def wavefunction_at(self, t: float) -> WaveFunction: ...

    @property
    def event_times(self) -> tuple[float, ...]: ...


@dataclass
class Trajectory:
    """One integrated path: sampled configurations plus integration diagnostics."""

    times: np.ndarray
    points: np.ndarray
    events_seen: tuple[float, ...] = ()
    density_floor_hits: int = 0
    line_crossings: int | None = None
    aborted: bool = False
    abort_reason: str | None = None
    abort_time: float | None = None

    @property
    def samples(self) -> list[tuple[float, np.ndarray]]:
        return [(float(t), q) for t, q in zip(self.times, self.points)]


@dataclass
class BatchTrajectories:
    """Shared-grid trajectories for a whole batch of initial configurations."""

    times: np.ndarray                  # (S,)
    points: np.ndarray                 # (N, S, D)
    events_seen: tuple[float, ...]
    density_floor_hits: np.ndarray     # (N,)
    line_crossings: np.ndarray | None  # (N,)
    aborted: np.ndarray                # (N,) bool
    abort_reasons: dict[int, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.points.shape[0]

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(
            times=self.times,
            points=self.points[i],
            events_seen=self.events_seen,
            density_floor_hits=int(self.density_floor_hits[i]),
            line_crossings=None if self.line_crossings is None else int(self.line_crossings[i]),
            aborted=bool(self.aborted[i]),
            abort_reason=self.abort_reasons.get(i),
        )

    def index_of_time(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9:
            raise KeyError(f"time {t} was not recorded")
        return i


def velocity_at(
    wf: WaveFunction | StateTable,
    Q,
    t: float | None = None,
    *,
    floor_rel: float = DENSITY_FLOOR_REL,
):
    """Guidance velocity at one or many configurations.

    Raises :class:`VacuumRegionError` if any requested point sits below the
    density floor (``floor_rel`` times the largest branch peak), so a caller
    can never silently integrate through a vacuum region.
    """
    table = wf if isinstance(wf, StateTable) else wf.at(float(t))
    pts, single = table._as_points(Q)
    rho, cur = table.fields(pts)
    floor = floor_rel * table.peak_density()
    bad = rho < floor
    if np.any(bad):
        i = int(np.argmax(bad))
        raise VacuumRegionError(table.t, pts[i], float(rho[i]), floor)
    v = table.hbar * cur / (table.masses[None, :] * rho[:, None])
    return v[0] if single else v


def _stage_velocity(table: StateTable, pts: np.ndarray, floor: float, v_max: float):
    """Velocity plus per-row health flags for one RK4 stage."""
    rho, cur = table.fields(pts)
    safe_rho = np.where(rho > 0.0, rho, 1.0)
    v = table.hbar * cur / (table.masses[None, :] * safe_rho[:, None])
    speed = np.sqrt(np.sum(v * v, axis=1))
    refine = (rho < REFINE_FLOOR_FACTOR * floor) | (speed > v_max)
    vacuum = rho < floor
    return v, refine, vacuum


def _advance(
    timeline: Timeline,
    t_a: float,
    t_b: float,
    Q: np.ndarray,
    depth: int,
    floor_hits: np.ndarray,
    active_rows: np.ndarray,
    abort: dict[int, str],
    cache: dict | None = None,
) -> np.ndarray:
    """One RK4 span from t_a to t_b for the given rows, refining as needed.

    Rows whose stages hit near-vacuum density or the velocity bound are
    retried on two half spans, up to ``MAX_HALVINGS`` levels; rows still in
    vacuum at the bottom are marked aborted and frozen in place.
    """
    h = t_b - t_a
    wf = timeline.wavefunction_at(t_a)

    def table(time: float) -> StateTable:
        if cache is None:
            return wf.at(time)
        key = (id(wf), time)
        tab = cache.get(key)
        if tab is None:
            tab = wf.at(time)
            cache[key] = tab
        return tab

    tab_a = table(t_a)
    tab_m = table(t_a + 0.5 * h)
    tab_b = table(t_b)
    floor = timeline.density_floor_rel * tab_a.peak_density()
    v_max = timeline.v_max

    k1, r1, x1 = _stage_velocity(tab_a, Q, floor, v_max)
    k2, r2, x2 = _stage_velocity(tab_m, Q + 0.5 * h * k1, floor, v_max)
    k3, r3, x3 = _stage_velocity(tab_m, Q + 0.5 * h * k2, floor, v_max)
    k4, r4, x4 = _stage_velocity(tab_b, Q + h * k3, floor, v_max)
    out = Q + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    trouble = r1 | r2 | r3 | r4
    if not np.any(trouble):
        return out
    floor_hits[active_rows[trouble]] += 1
    if depth >= MAX_HALVINGS:
        vacuum = x1 | x2 | x3 | x4
        for local_i in np.flatnonzero(trouble):
            row = int(active_rows[local_i])
            if vacuum[local_i]:
                abort[row] = (
                    f"persistent vacuum region near t={t_a:.6g} after "
                    f"{MAX_HALVINGS} halvings"
                )
            else:
                abort[row] = f"velocity bound {v_max:.3g} exceeded near t={t_a:.6g}"
            out[local_i] = Q[local_i]
        return out
    sub = np.flatnonzero(trouble)
    mid = t_a + 0.5 * h
    half = _advance(
        timeline, t_a, mid, Q[sub], depth + 1, floor_hits, active_rows[sub], abort, cache
    )
    out[sub] = _advance(
        timeline, mid, t_b, half, depth + 1, floor_hits, active_rows[sub], abort, cache
    )
    return out


def integrate_batch(
    timeline: Timeline,
    Q0,
    dt: float,
    record_times: Sequence[float],
    *,
    t0: float | None = None,
    t1: float | None = None,
    line: LineSpec | None = None,
    hysteresis: float = 0.0,
) -> BatchTrajectories:
    """Integrate a batch of configurations over the compiled timeline.

    All rows share one step sequence: fixed steps of ``dt`` truncated to land
    exactly on event times and requested record times.  Row results are
    independent of how the batch is chunked, which is what makes ensemble
    runs reproducible regardless of worker count.  ``t0``/``t1`` default to
    the timeline span; a sub-span expects ``Q0`` drawn at ``t0``.
    """
    Q = np.array(Q0, dtype=float)
    if Q.ndim == 1:
        Q = Q[None, :]
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    t0 = timeline.t0 if t0 is None else float(t0)
    t1 = timeline.t1 if t1 is None else float(t1)
    if t1 <= t0:
        raise ValueError(f"empty time span: t0={t0}, t1={t1}")
    if t0 < timeline.t0 - _TIME_EPS or t1 > timeline.t1 + _TIME_EPS:
        raise ValueError(
            f"span [{t0}, {t1}] outside the timeline [{timeline.t0}, {timeline.t1}]"
        )
    rec = np.array(sorted(set(float(t) for t in record_times)))
    if rec.size == 0:
        rec = np.array([t1])
    if rec[0] < t0 - _TIME_EPS or rec[-1] > t1 + _TIME_EPS:
        raise ValueError("record times must lie within [t0, t1]")

    events = tuple(t for t in timeline.event_times if t0 < t < t1)
    stops = np.array(sorted(set([t1, *events, *rec.tolist()])))
    N, D = Q.shape

    # Initial density must be healthy; refuse to start from a vacuum point.
    tab0 = timeline.wavefunction_at(t0).at(t0)
    rho0 = tab0.density(Q)
    floor0 = timeline.density_floor_rel * tab0.peak_density()
    if np.any(rho0 < floor0):
        i = int(np.argmax(rho0 < floor0))
        raise VacuumRegionError(t0, Q[i], float(rho0[i]), floor0)

    out = np.empty((N, rec.size, D))
    rec_i = 0
    if abs(rec[0] - t0) <= _TIME_EPS:
        out[:, 0, :] = Q
        rec_i = 1

    crossings = np.zeros(N, dtype=int) if line is not None else None
    side = None
    if line is not None:
        d0 = Q[:, line.coord_index] - line.value
        side = np.sign(d0).astype(int)
        side[np.abs(d0) <= hysteresis] = 0

    floor_hits = np.zeros(N, dtype=int)
    abort: dict[int, str] = {}
    rows = np.arange(N)
    alive = np.ones(N, dtype=bool)
    n_aborted = 0
    cache: dict = {}
    t = t0
    for t_stop in stops:
        while t < t_stop - _TIME_EPS:
            t_next = min(t + dt, t_stop)
            if n_aborted == 0:
                Q = _advance(timeline, t, t_next, Q, 0, floor_hits, rows, abort, cache)
            else:
                act = rows[alive]
                if act.size:
                    Q[act] = _advance(
                        timeline, t, t_next, Q[act], 0, floor_hits, act, abort, cache
                    )
            if len(abort) != n_aborted:
                n_aborted = len(abort)
                alive = np.ones(N, dtype=bool)
                alive[list(abort)] = False
            t = t_next
            if line is not None:
                d = Q[:, line.coord_index] - line.value
                new_side = np.where(np.abs(d) > hysteresis, np.sign(d).astype(int), side)
                flips = (side != 0) & (new_side != 0) & (new_side != side)
                crossings[flips] += 1
                side = new_side
        t = t_stop
        if rec_i < rec.size and abs(rec[rec_i] - t) <= _TIME_EPS:
            out[:, rec_i, :] = Q
            rec_i += 1
    if rec_i != rec.size:
        raise RuntimeError("integration failed to visit every record time")

    aborted = np.zeros(N, dtype=bool)
    for i in abort:
        aborted[i] = True
    return BatchTrajectories(
        times=rec,
        points=out,
        events_seen=events,
        density_floor_hits=floor_hits,
        line_crossings=crossings,
        aborted=aborted,
        abort_reasons=abort,
    )


def integrate_trajectory(
    timeline: Timeline,
    Q0,
    dt: float,
    record_times: Sequence[float] | None = None,
    *,
    t0: float | None = None,
    t1: float | None = None,
    line: LineSpec | None = None,
    hysteresis: float = 0.0,
) -> Trajectory:
    """Integrate one configuration; see :func:`integrate_batch`."""
    a = timeline.t0 if t0 is None else float(t0)
    b = timeline.t1 if t1 is None else float(t1)
    if record_times is None:
        n = max(2, int(round((b - a) / dt)) // 8 + 1)
        record_times = np.linspace(a, b, n)
    batch = integrate_batch(
        timeline, np.asarray(Q0, dtype=float)[None, :], dt, record_times,
        t0=t0, t1=t1, line=line, hysteresis=hysteresis,
    )
    return batch.trajectory(0)


def branch_weights_at(
    wf: WaveFunction | StateTable,
    Q,
    t: float | None = None,
    *,
    floor_rel: float = DENSITY_FLOOR_REL,
):
    """Relative branch occupation weights |amp_b packets_b(Q)|^2, normalized.

    The branch with weight above 0.99, when it exists, is the effective wave
    function guiding the configuration from there on.
    """
    table = wf if isinstance(wf, StateTable) else wf.at(float(t))
    pts, single = table._as_points(Q)
    w = np.abs(table.branch_values(pts)) ** 2
    tot = w.sum(axis=0)
    floor = floor_rel * table.peak_density()
    bad = tot < floor
    if np.any(bad):
        i = int(np.argmax(bad))
        raise VacuumRegionError(table.t, pts[i], float(tot[i]), floor)
    w = (w / tot).T
    return w[0] if single else w


def current_across_line(
    wf: WaveFunction,
    line: LineSpec,
    t: float,
    n_samples: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Normal probability current through a line, marginalized exactly.

    The profile runs along the other coordinate of the particle that owns
    the line's coordinate, within the 6-sigma support of its packets; all
    remaining coordinates are integrated out analytically.  Returns
    ``(positions, j_normal)``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    reg = wf.registry
    owner = reg.coord_owner(line.coord_index)
    sl = reg.coord_slice(owner.id)
    along = [d for d in range(sl.start, sl.stop) if d != line.coord_index]
    table = wf.at(t)
    ny = line.coord_index

    if along:
        ax = along[0]
        lo = float(np.min(table.center[:, ax] - 6.0 * table.sigma[:, ax]))
        hi = float(np.max(table.center[:, ax] + 6.0 * table.sigma[:, ax]))
        positions = np.linspace(lo, hi, n_samples)
    else:
        ax = None
        positions = np.array([line.value])

    masses = reg.coord_masses
    groups: dict[tuple, list[int]] = {}
    for bi, b in enumerate(wf.branches):
        groups.setdefault(b.spins, []).append(bi)

    from bohmsim.packets import packet_evolve, packet_overlap

    j = np.zeros(positions.shape, dtype=complex)
    for ix in groups.values():
        for b1 in ix:
            for b2 in ix:
                br1, br2 = wf.branches[b1], wf.branches[b2]
                coef = np.conj(br1.amp) * br2.amp
                for d in range(reg.dim):
                    if d == ny or d == ax:
                        continue
                    coef *= packet_overlap(
                        br1.packets[d], br2.packets[d], masses[d], wf.hbar, t
                    )
                s1y = packet_evolve(br1.packets[ny], masses[ny], wf.hbar, t)
                s2y = packet_evolve(br2.packets[ny], masses[ny], wf.hbar, t)
                yterm = (
                    np.conj(s1y.value(line.value))
                    * s2y.value(line.value)
                    * s2y.dlog(line.value)
                )
                if ax is None:
                    j += coef * yterm
                else:
                    s1x = packet_evolve(br1.packets[ax], masses[ax], wf.hbar, t)
                    s2x = packet_evolve(br2.packets[ax], masses[ax], wf.hbar, t)
                    j += coef * yterm * np.conj(s1x.value(positions)) * s2x.value(positions)
    j_normal = wf.hbar / masses[ny] * np.imag(j)
    return positions, j_normal


def min_pairwise_separation(trajs: Sequence[Trajectory]) -> float:
    """Smallest configuration-space distance between any two trajectories.

    All trajectories must share the same sample grid.  Distinct initial
    configurations of a deterministic flow keep this strictly positive.
    """
    if len(trajs) < 2:
        return math.inf
    ref = trajs[0].times
    for tr in trajs[1:]:
        if tr.times.shape != ref.shape or not np.allclose(tr.times, ref, atol=1e-12):
            raise ValueError("trajectories do not share sample times")
    best = math.inf
    for i in range(len(trajs)):
        for k in range(i + 1, len(trajs)):
            d = trajs[i].points - trajs[k].points
            sep = float(np.min(np.sqrt(np.sum(d * d, axis=1))))
            best = min(best, sep)
    return best
