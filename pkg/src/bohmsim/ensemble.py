"""Ensemble sampling, batched trajectory runs and the statistics on top.

Initial configurations are drawn from the squared amplitude of the state at
the start of the run, one counter-based random stream per trajectory, so a
run is reproducible bit for bit from ``(seed, n, dt)`` no matter how the
batch is chunked across workers.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import stats

from bohmsim.guidance import BatchTrajectories, integrate_batch
from bohmsim.packets import WaveFunction, marginal_density, norm
from bohmsim.scenarios import (
    CompiledScenario,
    Endpoint,
    Flag,
    OutcomeRecord,
    ScenarioSpec,
    Side,
    SpinLabel,
    classify_batch,
    compile_scenario,
    with_conversion_time,
)

__all__ = [
    "SamplingPlan",
    "EquivarianceStat",
    "RecordCheck",
    "EnsembleReport",
    "SignalingComparison",
    "FlipTestResult",
    "sample_initial",
    "integrate_ensemble",
    "build_report",
    "run_ensemble",
    "equivariance_check",
    "no_signaling_compare",
    "delayed_choice_flip_test",
    "resolve_workers",
]

WORKERS_ENV = "BOHMSIM_WORKERS"


@dataclass(frozen=True)
class SamplingPlan:
    """How many initial configurations to draw and from which seed."""

    n: int
    seed: int
    antithetic: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if not (0 <= self.seed < 2**63):
            raise ValueError(f"seed must be a non-negative 63-bit integer, got {self.seed}")


def resolve_workers(workers: int | None = None) -> int:
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers < 1:
        raise ValueError(f"worker count must be >= 1, got {workers}")
    return workers


def _stream(seed: int, index: int) -> np.random.Generator:
    """Per-trajectory counter-based stream; independent of every other index."""
    key = np.array([seed, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_initial(wf: WaveFunction, plan: SamplingPlan, t: float | None = None) -> np.ndarray:
    """Draw i.i.d. configurations from |psi(., t)|^2.

    Branch selection followed by a within-branch Gaussian draw is exact when
    same-spin branches are at least 8 sigma apart in some coordinate (spin
    orthogonality handles the rest); otherwise rejection sampling against the
    exact density is used.  Draw ``i`` depends only on ``(seed, i)``.
    """
    total = norm(wf, t)
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"state is not normalized: norm={total}")
    if t is None:
        t = wf.earliest_time()
    table = wf.at(t)
    weights = np.abs(table.amp) ** 2
    weights = weights / weights.sum()
    cum = np.cumsum(weights)
    centers = table.center
    sigmas = table.sigma
    D = centers.shape[1]

    exact = True
    for ix in table.groups:
        for i in range(len(ix)):
            for j in range(i + 1, len(ix)):
                gap = np.abs(centers[ix[i]] - centers[ix[j]]) / np.maximum(
                    sigmas[ix[i]], sigmas[ix[j]]
                )
                if gap.max() < 8.0:
                    exact = False
    bound = max(len(ix) for ix in table.groups)

    out = np.empty((plan.n, D))
    half_stash: tuple[int, np.ndarray] | None = None
    for i in range(plan.n):
        if plan.antithetic and i % 2 == 1:
            rng = _stream(plan.seed, i - 1)
            u = 1.0 - rng.random()
            z = -rng.standard_normal(D)
        else:
            rng = _stream(plan.seed, i)
            u = rng.random()
            z = rng.standard_normal(D)
        if exact:
            b = int(np.searchsorted(cum, u * cum[-1]))
            b = min(b, len(weights) - 1)
            out[i] = centers[b] + sigmas[b] * z
        else:
            # Rejection against the exact density with the incoherent mixture
            # as proposal; coherent terms can at most multiply the density by
            # the same-spin branch multiplicity.
            while True:
                b = int(np.searchsorted(cum, u * cum[-1]))
                b = min(b, len(weights) - 1)
                q = centers[b] + sigmas[b] * z
                mix = np.sum(
                    weights
                    * np.prod(
                        np.exp(-((q[None, :] - centers) ** 2) / (2.0 * sigmas**2))
                        / np.sqrt(2.0 * np.pi * sigmas**2),
                        axis=1,
                    )
                )
                rho = float(table.density(q[None, :])[0])
                if rng.random() * bound * mix <= rho:
                    out[i] = q
                    break
                u = rng.random()
                z = rng.standard_normal(D)
    return out


def _chunks(n: int, workers: int) -> list[np.ndarray]:
    idx = np.arange(n)
    return [c for c in np.array_split(idx, workers) if c.size]


def integrate_ensemble(
    compiled: CompiledScenario,
    Q0: np.ndarray,
    record_times: Sequence[float],
    *,
    workers: int | None = None,
) -> BatchTrajectories:
    """Integrate a sampled batch, chunked across workers, merged by index.

    Row results never depend on the chunking, so any worker count yields the
    same arrays.
    """
    workers = resolve_workers(workers)
    parts = _chunks(Q0.shape[0], workers)

    def run_chunk(rows: np.ndarray) -> BatchTrajectories:
        return integrate_batch(
            compiled,
            Q0[rows],
            compiled.spec.dt,
            record_times,
            line=compiled.line,
            hysteresis=compiled.hysteresis,
        )

    if workers == 1 or len(parts) == 1:
        results = [run_chunk(rows) for rows in parts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_chunk, parts))

    times = results[0].times
    N = Q0.shape[0]
    points = np.empty((N, times.size, Q0.shape[1]))
    floor_hits = np.empty(N, dtype=int)
    crossings = np.empty(N, dtype=int)
    aborted = np.zeros(N, dtype=bool)
    reasons: dict[int, str] = {}
    for rows, res in zip(parts, results):
        points[rows] = res.points
        floor_hits[rows] = res.density_floor_hits
        crossings[rows] = res.line_crossings
        aborted[rows] = res.aborted
        for local_i, reason in res.abort_reasons.items():
            reasons[int(rows[local_i])] = reason
    return BatchTrajectories(
        times=times,
        points=points,
        events_seen=results[0].events_seen,
        density_floor_hits=floor_hits,
        line_crossings=crossings,
        aborted=aborted,
        abort_reasons=reasons,
    )


@dataclass(frozen=True)
class EquivarianceStat:
    """Chi-squared comparison of an empirical marginal against |psi_t|^2."""

    t: float
    inner_edges: tuple[float, ...]
    observed: tuple[int, ...]
    expected: tuple[float, ...]
    chi2: float
    p_value: float


@dataclass(frozen=True)
class RecordCheck:
    """Dominant-branch diagnostics at the moment the pointer record is made."""

    t: float
    fraction_dominant: float       # trajectories whose top branch weight > 0.99
    min_dominant_weight: float
    prediction_violations: int     # dominant-branch spin vs final flag mismatches
    fraction_within_3sigma: float  # test particle inside the dominant packet
    n: int


@dataclass(frozen=True)
class SignalingComparison:
    delta: float
    threshold: float
    passed: bool
    p_yes_a: float
    p_yes_b: float
    n: int
    same_seed: bool
    flip_fraction: float | None


@dataclass(frozen=True)
class FlipTestResult:
    flip_fraction: float
    n_compared: int
    tc_early: float
    tc_late: float
    interfere: bool


@dataclass
class EnsembleReport:
    """Outcome tallies plus equivariance, reliability and record statistics."""

    scenario: str
    n: int
    seed: int
    dt: float
    t0: float
    t1: float
    conversion_time: float | None
    interfere: bool
    antithetic: bool
    outcomes: tuple[OutcomeRecord, ...]
    counts: dict[tuple[Side, Endpoint, Flag], int]
    flag_yes_fraction: float | None
    endpoint_fractions: dict[Endpoint, float]
    crossings_by_count: dict[int, int]
    equivariance: tuple[EquivarianceStat, ...]
    record_check: RecordCheck | None
    aborted_count: int
    aborted_details: tuple[tuple[int, str], ...]
    density_floor_hits: int

    @property
    def unclassified_count(self) -> int:
        """Endpoint NONE: ambiguous at t1 (tail starts), reported not dropped."""
        return sum(
            1 for rec in self.outcomes if not rec.aborted and rec.endpoint is Endpoint.NONE
        )

    @property
    def classified(self) -> int:
        return self.n - self.aborted_count - self.unclassified_count

    def reliability_violations(self) -> int:
        """Classified trajectories breaking the flag <-> endpoint biconditional."""
        bad = 0
        for rec in self.outcomes:
            if rec.aborted or rec.flag is Flag.UNSET or rec.endpoint is Endpoint.NONE:
                continue
            want = Flag.NO if rec.endpoint is Endpoint.A_PRIME else Flag.YES
            if rec.flag is not want:
                bad += 1
        return bad


def equivariance_check(
    values: np.ndarray,
    wf: WaveFunction,
    t: float,
    coord_index: int,
    bins: int = 50,
    min_expected: float = 20.0,
) -> EquivarianceStat:
    """Chi-squared test of sampled coordinates against the analytic marginal.

    Bins are equal-probability under the marginal of |psi_t|^2 with the two
    outermost bins open-ended, and the bin count is reduced until every bin
    expects at least ``min_expected`` counts.
    """
    values = np.asarray(values, dtype=float)
    n = values.size
    k = min(int(bins), int(n // min_expected))
    if k < 2:
        need = int(2 * min_expected)
        raise ValueError(f"need at least {need} samples for a binned test, got {n}")
    table = wf.at(t)
    lo = float(np.min(table.center[:, coord_index] - 10.0 * table.sigma[:, coord_index]))
    hi = float(np.max(table.center[:, coord_index] + 10.0 * table.sigma[:, coord_index]))
    xs = np.linspace(lo, hi, 8001)
    rho = marginal_density(wf, coord_index, xs, t)
    cdf = np.concatenate([[0.0], np.cumsum((rho[1:] + rho[:-1]) * 0.5 * np.diff(xs))])
    cdf /= cdf[-1]
    qs = np.arange(1, k) / k
    inner_edges = np.interp(qs, cdf, xs)
    observed = np.bincount(np.searchsorted(inner_edges, values), minlength=k)
    expected = np.full(k, n / k)
    chi2 = float(np.sum((observed - expected) ** 2 / expected))
    p = float(stats.chi2.sf(chi2, k - 1))
    return EquivarianceStat(
        t=float(t),
        inner_edges=tuple(float(x) for x in inner_edges),
        observed=tuple(int(c) for c in observed),
        expected=tuple(float(e) for e in expected),
        chi2=chi2,
        p_value=p,
    )


def build_report(
    batch: BatchTrajectories,
    compiled: CompiledScenario,
    plan: SamplingPlan,
    checkpoints: Sequence[float],
) -> EnsembleReport:
    """Classify a finished batch and compute every ensemble statistic."""
    spec = compiled.spec
    outcomes = classify_batch(batch, compiled)
    counts: dict[tuple[Side, Endpoint, Flag], int] = {}
    crossings: dict[int, int] = {}
    flags_yes = flags_total = 0
    endpoint_counts: dict[Endpoint, int] = {}
    for rec in outcomes:
        if rec.aborted:
            continue
        key = (rec.initial_side, rec.endpoint, rec.flag)
        counts[key] = counts.get(key, 0) + 1
        crossings[rec.l_crossings] = crossings.get(rec.l_crossings, 0) + 1
        endpoint_counts[rec.endpoint] = endpoint_counts.get(rec.endpoint, 0) + 1
        if rec.flag is not Flag.UNSET:
            flags_total += 1
            flags_yes += rec.flag is Flag.YES
    classified = sum(endpoint_counts.values())
    endpoint_fractions = {
        ep: c / classified for ep, c in sorted(endpoint_counts.items(), key=lambda kv: kv[0].value)
    }
    flag_yes_fraction = flags_yes / flags_total if flags_total else None

    eq_stats = []
    line_coord = compiled.line.coord_index
    for t in checkpoints:
        idx = batch.index_of_time(float(t))
        vals = batch.points[~batch.aborted, idx, line_coord]
        eq_stats.append(
            equivariance_check(vals, compiled.wavefunction_at(float(t)), float(t), line_coord)
        )

    record = None
    t_c = compiled.conversion_time
    if t_c is not None and compiled.conversion_spin is not None:
        idx = batch.index_of_time(t_c)
        keep = ~batch.aborted
        Q = batch.points[keep, idx, :]
        wf_c = compiled.wavefunction_at(t_c)
        table = wf_c.at(t_c)
        w = np.abs(table.branch_values(Q)) ** 2
        w = w / w.sum(axis=0)
        dom = np.argmax(w, axis=0)
        dom_w = w[dom, np.arange(Q.shape[0])]
        spin_pid = compiled.conversion_spin
        down = np.array(
            [b.spin(spin_pid) is SpinLabel.DOWN_X for b in wf_c.branches], dtype=bool
        )
        predicted_yes = down[dom]
        final_flags = np.array(
            [rec.flag is Flag.YES for rec, ab in zip(outcomes, batch.aborted) if not ab]
        )
        violations = int(np.sum(predicted_yes != final_flags))
        from bohmsim.scenarios import _test_particle

        sl = compiled.registry.coord_slice(_test_particle(compiled.registry).id)
        within = np.ones(Q.shape[0], dtype=bool)
        for d in range(sl.start, sl.stop):
            within &= (
                np.abs(Q[:, d] - table.center[dom, d]) <= 3.0 * table.sigma[dom, d]
            )
        record = RecordCheck(
            t=t_c,
            fraction_dominant=float(np.mean(dom_w > 0.99)),
            min_dominant_weight=float(dom_w.min()),
            prediction_violations=violations,
            fraction_within_3sigma=float(np.mean(within)),
            n=int(Q.shape[0]),
        )

    details = tuple(sorted(batch.abort_reasons.items()))
    return EnsembleReport(
        scenario=spec.name,
        n=plan.n,
        seed=plan.seed,
        dt=spec.dt,
        t0=spec.t0,
        t1=spec.t1,
        conversion_time=spec.conversion_time,
        interfere=spec.interfere,
        antithetic=plan.antithetic,
        outcomes=tuple(outcomes),
        counts=counts,
        flag_yes_fraction=flag_yes_fraction,
        endpoint_fractions=endpoint_fractions,
        crossings_by_count=dict(sorted(crossings.items())),
        equivariance=tuple(eq_stats),
        record_check=record,
        aborted_count=int(batch.aborted.sum()),
        aborted_details=details,
        density_floor_hits=int(batch.density_floor_hits.sum()),
    )


def run_ensemble(
    compiled: CompiledScenario,
    plan: SamplingPlan,
    checkpoints: Sequence[float] = (),
    *,
    workers: int | None = None,
    extra_record_times: Sequence[float] = (),
    perturb_on_line: bool = False,
) -> EnsembleReport:
    """Sample, integrate and score a full ensemble.

    Aborted trajectories are carried through with diagnostics, never dropped.
    """
    spec = compiled.spec
    for t in checkpoints:
        if not (spec.t0 <= t <= spec.t1):
            raise ValueError(f"checkpoint {t} outside [{spec.t0}, {spec.t1}]")
    Q0 = sample_initial(compiled.wavefunction_at(spec.t0), plan, spec.t0)

    lam = compiled.line.value
    on_line = Q0[:, compiled.line.coord_index] == lam
    if np.any(on_line):
        if perturb_on_line:
            Q0[on_line, compiled.line.coord_index] += 1e-9 * spec.geometry.sigma0
        else:
            raise ValueError(
                f"initial configuration(s) {np.flatnonzero(on_line).tolist()} sit "
                f"exactly on the line; enable perturb_on_line to nudge them"
            )

    record = {spec.t0, spec.t1, *map(float, checkpoints), *map(float, extra_record_times)}
    if compiled.conversion_time is not None:
        record.add(compiled.conversion_time)
    batch = integrate_ensemble(compiled, Q0, sorted(record), workers=workers)
    return build_report(batch, compiled, plan, checkpoints)


def no_signaling_compare(
    report_interfere: EnsembleReport, report_blocked: EnsembleReport
) -> SignalingComparison:
    """Compare remote-choice arms at the statistics level.

    The yes-fractions of the two arms must agree within four binomial sigmas;
    with a shared seed the per-trajectory flags are also compared, which is
    where the individual-trajectory dependence on the remote choice shows up.
    """
    a, b = report_interfere, report_blocked
    if a.n != b.n:
        raise ValueError(f"arm sizes differ: {a.n} vs {b.n}")
    if a.flag_yes_fraction is None or b.flag_yes_fraction is None:
        raise ValueError("both arms need pointer flags to compare")
    delta = abs(a.flag_yes_fraction - b.flag_yes_fraction)
    threshold = 4.0 * math.sqrt(0.5 * 0.5 * 2.0 / a.n)
    same_seed = a.seed == b.seed
    flip = None
    if same_seed:
        pairs = [
            (ra.flag, rb.flag)
            for ra, rb in zip(a.outcomes, b.outcomes)
            if not (ra.aborted or rb.aborted)
        ]
        if pairs:
            flip = sum(fa is not fb for fa, fb in pairs) / len(pairs)
    return SignalingComparison(
        delta=delta,
        threshold=threshold,
        passed=delta < threshold,
        p_yes_a=a.flag_yes_fraction,
        p_yes_b=b.flag_yes_fraction,
        n=a.n,
        same_seed=same_seed,
        flip_fraction=flip,
    )


def delayed_choice_flip_test(
    spec: ScenarioSpec,
    tc_early: float,
    tc_late: float,
    plan: SamplingPlan,
    *,
    workers: int | None = None,
) -> FlipTestResult:
    """Fraction of shared initial configurations whose flag depends on when
    the spin record is converted.

    With interference the flip fraction is 1 for every off-line start; with
    the packets kept apart it is 0.
    """
    if tc_early > tc_late:
        raise ValueError(f"tc_early={tc_early} must not exceed tc_late={tc_late}")
    flags = []
    for tc in (tc_early, tc_late):
        variant = with_conversion_time(spec, tc)
        compiled = compile_scenario(variant)
        report = run_ensemble(compiled, plan, workers=workers)
        flags.append([(r.flag, r.aborted) for r in report.outcomes])
    pairs = [
        (fa, fb)
        for (fa, aa), (fb, ab) in zip(flags[0], flags[1])
        if not (aa or ab)
    ]
    if not pairs:
        raise ValueError("no comparable trajectories survived both runs")
    flip = sum(fa is not fb for fa, fb in pairs) / len(pairs)
    return FlipTestResult(
        flip_fraction=flip,
        n_compared=len(pairs),
        tc_early=tc_early,
        tc_late=tc_late,
        interfere=spec.interfere,
    )
