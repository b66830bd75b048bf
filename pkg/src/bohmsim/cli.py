"""Command-line front end: list/describe/run scenarios, comparisons, artifacts.

Artifacts per run directory:

* ``trajectories.csv`` - sampled configurations, one row per (trajectory,
  time), with dominant-branch diagnostics; schema comment on line one.
* ``summary.json`` - outcome tables, statistics, geometry and branch tracks;
  byte-stable for fixed inputs.
* ``manifest.json`` - resolved parameters, output listing, version and wall
  clock; written last, so a run is complete iff the manifest exists.

Numbers are serialized with 17 significant digits so determinism is
byte-testable.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

import bohmsim
from bohmsim.ensemble import (
    EnsembleReport,
    SamplingPlan,
    delayed_choice_flip_test,
    integrate_ensemble,
    build_report,
    no_signaling_compare,
    resolve_workers,
    sample_initial,
)
from bohmsim.guidance import BatchTrajectories
from bohmsim.scenarios import (
    BUILTIN_NAMES,
    CompiledScenario,
    ScenarioError,
    ScenarioSpec,
    builtin_scenario,
    compile_scenario,
    parse_scenario_file,
    render_scenario,
    with_conversion_time,
)

TRAJ_SCHEMA = "bohmsim.trajectories/1"
SUMMARY_SCHEMA = "bohmsim.summary/1"
MANIFEST_SCHEMA = "bohmsim.manifest/1"

_DESCRIPTIONS = {
    "EXP1": "crossing paths, no detector: trajectories bounce at the overlap",
    "EXP2": "flag pointer correlated with the path early: symmetry broken, record reliable",
    "EXP3": "path written to a spin, converted to a pointer after the overlap",
    "EXP4": "EXP3 with movable conversion time and optional deflection (no overlap)",
}


def _fmt(x) -> str:
    return "%.17g" % float(x)


def _jval(obj) -> str:
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt(obj)
    if isinstance(obj, dict):
        items = ", ".join(f"{json.dumps(str(k))}: {_jval(v)}" for k, v in sorted(obj.items()))
        return "{" + items + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_jval(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj)}")


def write_json(obj: dict, path: Path) -> None:
    path.write_text(_jval(obj) + "\n")


def write_summary_json(summary: dict, path: Path) -> None:
    """Canonical byte-stable JSON with 17-significant-digit floats."""
    write_json(summary, path)


def write_trajectory_csv(
    batch: BatchTrajectories, compiled: CompiledScenario, sample_times, path: Path
) -> None:
    """Write sampled trajectories with per-row dominant-branch diagnostics."""
    names = compiled.registry.coord_names
    idx = [batch.index_of_time(float(t)) for t in sample_times]
    times = batch.times[idx]
    pts = batch.points[:, idx, :]
    N, S, D = pts.shape

    dom_idx = np.zeros((N, S), dtype=int)
    dom_w = np.zeros((N, S))
    for si, t in enumerate(times):
        table = compiled.wavefunction_at(float(t)).at(float(t))
        w = np.abs(table.branch_values(pts[:, si, :])) ** 2
        tot = w.sum(axis=0)
        tot[tot == 0.0] = 1.0
        w = w / tot
        dom_idx[:, si] = np.argmax(w, axis=0)
        dom_w[:, si] = w[dom_idx[:, si], np.arange(N)]

    lines = [f"# schema={TRAJ_SCHEMA}"]
    lines.append(",".join(["traj_id", "t", *names, "dominant_branch", "dominant_weight"]))
    for i in range(N):
        for si in range(S):
            row = [str(i), _fmt(times[si])]
            row += [_fmt(x) for x in pts[i, si]]
            row += [str(int(dom_idx[i, si])), _fmt(dom_w[i, si])]
            lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")


def _geometry_dict(spec: ScenarioSpec) -> dict:
    g = spec.geometry
    return {
        "S": list(g.S),
        "A": list(g.A),
        "B": list(g.B),
        "I": list(g.I),
        "A_prime": list(g.A_prime),
        "B_prime": list(g.B_prime),
        "line": {"coord": spec.registry.coord_names[g.line.coord_index], "value": g.line.value},
        "u": g.u,
        "v": g.v,
        "r_region": g.r_region,
        "sigma0": g.sigma0,
        "pointer_sigma": g.pointer_sigma,
        "pointer_travel": g.pointer_travel,
        "t_cross": spec.t0 + g.t_cross,
    }


def _branch_tracks(compiled: CompiledScenario, sample_times) -> list[dict]:
    names = compiled.registry.coord_names
    tracks = []
    ts = np.asarray(sample_times, dtype=float)
    for iv in compiled.intervals:
        sel = ts[(ts >= iv.t_start - 1e-12) & (ts <= iv.t_end + 1e-12)]
        if sel.size == 0 and iv.t_end > iv.t_start:
            sel = np.array([iv.t_start, iv.t_end])
        entry = {
            "t_start": iv.t_start,
            "t_end": iv.t_end,
            "t": list(sel),
            "branches": [],
        }
        tables = [iv.wf.at(float(t)) for t in sel]
        for bi, b in enumerate(iv.wf.branches):
            entry["branches"].append(
                {
                    "index": bi,
                    "path": iv.paths[bi],
                    "spins": {pid: label.value for pid, label in b.spins},
                    "amp_re": b.amp.real,
                    "amp_im": b.amp.imag,
                    "centers": {
                        names[d]: [float(tb.center[bi, d]) for tb in tables]
                        for d in range(len(names))
                    },
                    "sigma": {
                        names[d]: [float(tb.sigma[bi, d]) for tb in tables]
                        for d in range(len(names))
                    },
                }
            )
        tracks.append(entry)
    return tracks


def _report_dict(report: EnsembleReport) -> dict:
    counts = [
        {
            "initial_side": side.value,
            "endpoint": ep.value,
            "flag": fl.value,
            "count": c,
        }
        for (side, ep, fl), c in sorted(
            report.counts.items(), key=lambda kv: (kv[0][0].value, kv[0][1].value, kv[0][2].value)
        )
    ]
    return {
        "scenario": report.scenario,
        "n": report.n,
        "seed": report.seed,
        "dt": report.dt,
        "conversion_time": report.conversion_time,
        "interfere": report.interfere,
        "antithetic": report.antithetic,
        "counts": counts,
        "flag_yes_fraction": report.flag_yes_fraction,
        "endpoint_fractions": {ep.value: f for ep, f in report.endpoint_fractions.items()},
        "crossings_by_count": {str(k): v for k, v in report.crossings_by_count.items()},
        "reliability_violations": report.reliability_violations(),
        "unclassified": report.unclassified_count,
        "equivariance": [
            {
                "t": s.t,
                "inner_edges": list(s.inner_edges),
                "observed": list(s.observed),
                "expected": list(s.expected),
                "chi2": s.chi2,
                "p_value": s.p_value,
            }
            for s in report.equivariance
        ],
        "record_check": (
            None
            if report.record_check is None
            else {
                "t": report.record_check.t,
                "fraction_dominant": report.record_check.fraction_dominant,
                "min_dominant_weight": report.record_check.min_dominant_weight,
                "prediction_violations": report.record_check.prediction_violations,
                "fraction_within_3sigma": report.record_check.fraction_within_3sigma,
                "n": report.record_check.n,
            }
        ),
        "aborted": {
            "count": report.aborted_count,
            "details": [{"traj": i, "reason": r} for i, r in report.aborted_details],
        },
        "density_floor_hits": report.density_floor_hits,
    }


def _per_trajectory(report: EnsembleReport) -> list[dict]:
    return [
        {
            "id": i,
            "initial_side": rec.initial_side.value,
            "endpoint": rec.endpoint.value,
            "flag": rec.flag.value,
            "l_crossings": rec.l_crossings,
            "aborted": rec.aborted,
        }
        for i, rec in enumerate(report.outcomes)
    ]


def _load_spec(token: str, args) -> ScenarioSpec:
    overrides = {}
    for key in ("n", "seed", "dt"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if token in _DESCRIPTIONS:
        if getattr(args, "conversion_time", None) is not None:
            overrides["conversion_time"] = args.conversion_time
        if getattr(args, "interfere", None) is not None:
            overrides["interfere"] = args.interfere == "true"
        return builtin_scenario(token, **overrides)
    path = Path(token)
    if not path.exists():
        raise ScenarioError(
            f"{token!r} is neither a built-in scenario ({', '.join(BUILTIN_NAMES)}) "
            f"nor a scenario file"
        )
    spec = parse_scenario_file(path.read_text())
    if getattr(args, "interfere", None) is not None:
        raise ScenarioError("--interfere applies to built-in scenarios; edit the file instead")
    from dataclasses import replace

    if overrides:
        spec = replace(spec, **overrides)
    if getattr(args, "conversion_time", None) is not None:
        spec = with_conversion_time(spec, args.conversion_time)
    from bohmsim.scenarios import validate_scenario

    validate_scenario(spec)
    return spec


def _default_checkpoints(spec: ScenarioSpec) -> list[float]:
    if spec.n < 40:  # too small for a binned equivariance test
        return []
    T = spec.duration
    return [spec.t0 + 0.25 * T, spec.t0 + 0.5 * T, spec.t0 + 0.75 * T]


def _sample_times(spec: ScenarioSpec, samples: int) -> np.ndarray:
    return np.linspace(spec.t0, spec.t1, samples)


def _manifest(command: str, spec_params: dict, outputs: list[Path], t_start: float) -> dict:
    return {
        "schema": MANIFEST_SCHEMA,
        "command": command,
        "params": spec_params,
        "outputs": [p.name for p in outputs],
        "tool_version": bohmsim.__version__,
        "wall_clock_s": time.monotonic() - t_start,
        "created_unix": time.time(),
    }


def _abort_exit(reports) -> int:
    for rep in reports:
        if rep.aborted_count > 0.001 * rep.n:
            return 2
    return 0


def cmd_run(args) -> int:
    t_start = time.monotonic()
    spec = _load_spec(args.scenario, args)
    frame_order = args.frame_order
    if frame_order == "swapped":
        if spec.conversion_time is None:
            raise ScenarioError("--frame-order swapped needs a conversion event to reorder")
        compiled_tmp = compile_scenario(spec)
        spec = with_conversion_time(spec, 2.0 * compiled_tmp.t_cross - spec.conversion_time)
    compiled = compile_scenario(spec)
    plan = SamplingPlan(spec.n, spec.seed, spec.antithetic)
    checkpoints = _default_checkpoints(spec)
    sample_times = _sample_times(spec, args.samples)

    Q0 = sample_initial(compiled.wavefunction_at(spec.t0), plan, spec.t0)
    record = sorted(
        {spec.t0, spec.t1, *checkpoints, *sample_times.tolist()}
        | ({spec.conversion_time} if spec.conversion_time is not None else set())
    )
    batch = integrate_ensemble(compiled, Q0, record, workers=args.workers)
    report = build_report(batch, compiled, plan, checkpoints)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "trajectories.csv"
    summary_path = out / "summary.json"
    manifest_path = out / "manifest.json"
    write_trajectory_csv(batch, compiled, sample_times, csv_path)
    summary = {
        "schema": SUMMARY_SCHEMA,
        "kind": "run",
        "params": {
            "scenario": spec.name,
            "t0": spec.t0,
            "t1": spec.t1,
            "dt": spec.dt,
            "n": spec.n,
            "seed": spec.seed,
            "antithetic": spec.antithetic,
            "conversion_time": spec.conversion_time,
            "interfere": spec.interfere,
            "frame_order": frame_order,
            "hbar": spec.hbar,
        },
        "geometry": _geometry_dict(spec),
        "coords": list(compiled.registry.coord_names),
        "flag_threshold": compiled.flag_threshold,
        "scenario_text": render_scenario(spec),
        "report": _report_dict(report),
        "per_trajectory": _per_trajectory(report),
        "branch_tracks": _branch_tracks(compiled, sample_times),
    }
    write_summary_json(summary, summary_path)
    params = dict(summary["params"])
    params["workers"] = resolve_workers(args.workers)
    params["samples"] = args.samples
    write_json(
        _manifest("run", params, [csv_path, summary_path, manifest_path], t_start),
        manifest_path,
    )
    print(f"wrote {csv_path}, {summary_path}, {manifest_path}")
    return _abort_exit([report])


def cmd_compare_signaling(args) -> int:
    t_start = time.monotonic()
    reports = []
    specs = []
    for interfere in ("true", "false"):
        ns = argparse.Namespace(**vars(args))
        ns.interfere = interfere
        ns.conversion_time = args.conversion_time
        spec = _load_spec(args.scenario, ns)
        specs.append(spec)
        compiled = compile_scenario(spec)
        seed = spec.seed if interfere == "true" or args.seed_b is None else args.seed_b
        plan = SamplingPlan(spec.n, seed, spec.antithetic)
        reports.append(
            build_report(
                integrate_ensemble(
                    compiled,
                    sample_initial(compiled.wavefunction_at(spec.t0), plan, spec.t0),
                    sorted({spec.t0, spec.t1, spec.conversion_time}),
                    workers=args.workers,
                ),
                compiled,
                plan,
                (),
            )
        )
    cmp = no_signaling_compare(reports[0], reports[1])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary_path = out / "summary.json"
    manifest_path = out / "manifest.json"
    summary = {
        "schema": SUMMARY_SCHEMA,
        "kind": "compare_signaling",
        "params": {
            "scenario": specs[0].name,
            "n": specs[0].n,
            "seed": specs[0].seed,
            "seed_b": args.seed_b,
            "dt": specs[0].dt,
            "conversion_time": specs[0].conversion_time,
        },
        "comparison": {
            "delta": cmp.delta,
            "threshold": cmp.threshold,
            "passed": cmp.passed,
            "p_yes_interfere": cmp.p_yes_a,
            "p_yes_blocked": cmp.p_yes_b,
            "n": cmp.n,
            "same_seed": cmp.same_seed,
            "flip_fraction": cmp.flip_fraction,
        },
        "arm_interfere": _report_dict(reports[0]),
        "arm_blocked": _report_dict(reports[1]),
    }
    write_summary_json(summary, summary_path)
    write_json(
        _manifest("compare-signaling", dict(summary["params"]), [summary_path, manifest_path], t_start),
        manifest_path,
    )
    print(
        f"delta={cmp.delta:.5f} threshold={cmp.threshold:.5f} "
        f"pass={'yes' if cmp.passed else 'no'} -> {summary_path}"
    )
    return _abort_exit(reports)


def cmd_flip_test(args) -> int:
    t_start = time.monotonic()
    spec = _load_spec(args.scenario, args)
    if spec.conversion_time is None:
        raise ScenarioError(f"scenario {spec.name} has no conversion event to move")
    compiled = compile_scenario(spec)
    win_early = args.tc_early
    win_late = args.tc_late
    if win_early is None or win_late is None:
        from bohmsim.scenarios import _windows

        win = _windows(spec)
        if win_early is None:
            win_early = 0.45 * win.t_near
        if win_late is None:
            win_late = win.t_far + 0.25 * (spec.t1 - win.t_far)
    plan = SamplingPlan(spec.n, spec.seed, spec.antithetic)
    result = delayed_choice_flip_test(spec, win_early, win_late, plan, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary_path = out / "summary.json"
    manifest_path = out / "manifest.json"
    summary = {
        "schema": SUMMARY_SCHEMA,
        "kind": "flip_test",
        "params": {
            "scenario": spec.name,
            "n": spec.n,
            "seed": spec.seed,
            "dt": spec.dt,
            "interfere": spec.interfere,
            "tc_early": result.tc_early,
            "tc_late": result.tc_late,
        },
        "flip_fraction": result.flip_fraction,
        "n_compared": result.n_compared,
    }
    write_summary_json(summary, summary_path)
    write_json(
        _manifest("flip-test", dict(summary["params"]), [summary_path, manifest_path], t_start),
        manifest_path,
    )
    print(f"flip_fraction={result.flip_fraction} -> {summary_path}")
    return 0


def cmd_list(_args) -> int:
    for name in BUILTIN_NAMES:
        print(f"{name}  {_DESCRIPTIONS[name]}")
    return 0


def cmd_describe(args) -> int:
    spec = _load_spec(args.scenario, args)
    sys.stdout.write(render_scenario(spec))
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on bad usage, not argparse's default 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common(p: argparse.ArgumentParser, with_knobs: bool = True) -> None:
    p.add_argument("--n", type=int, default=None, help="ensemble size (default 1000)")
    p.add_argument("--seed", type=int, default=None, help="master seed (default 42)")
    p.add_argument("--dt", type=float, default=None, help="integrator step (default 1e-3)")
    p.add_argument("--workers", type=int, default=None,
                   help="worker count (default $BOHMSIM_WORKERS or 1)")
    if with_knobs:
        p.add_argument("--conversion-time", dest="conversion_time", type=float, default=None)
        p.add_argument("--interfere", choices=("true", "false"), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bohmsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("list", help="list the built-in scenarios").set_defaults(func=cmd_list)

    p = sub.add_parser("describe", help="print a scenario in canonical file form")
    p.add_argument("scenario")
    _add_common(p)
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("run", help="run one scenario and write artifacts")
    p.add_argument("scenario", help="built-in name or scenario file path")
    _add_common(p)
    p.add_argument("--frame-order", choices=("normal", "swapped"), default="normal",
                   help="swapped reflects the conversion time about the crossing time")
    p.add_argument("--samples", type=int, default=161,
                   help="trajectory sample times written to CSV (default 161)")
    p.add_argument("--out", default="out", help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare-signaling",
                       help="run interfere/blocked arms and compare yes-statistics")
    p.add_argument("scenario", nargs="?", default="EXP4")
    _add_common(p, with_knobs=False)
    p.add_argument("--conversion-time", dest="conversion_time", type=float, default=None)
    p.add_argument("--seed-b", type=int, default=None,
                   help="independent seed for the blocked arm (default: shared seed)")
    p.add_argument("--out", default="out", help="output directory")
    p.set_defaults(func=cmd_compare_signaling)

    p = sub.add_parser("flip-test",
                       help="same initial points, early vs late conversion, flag flip fraction")
    p.add_argument("scenario", nargs="?", default="EXP4")
    _add_common(p)
    p.add_argument("--tc-early", type=float, default=None)
    p.add_argument("--tc-late", type=float, default=None)
    p.add_argument("--out", default="out", help="output directory")
    p.set_defaults(func=cmd_flip_test)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"bohmsim: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"bohmsim: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
