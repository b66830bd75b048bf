"""Experiment definitions: geometry, schedules, compilation, outcome scoring.

Four built-in scenarios cover the crossing-path experiments:

* ``EXP1`` - bare crossing paths, no detector; trajectories bounce at the
  crossing region and never cross the symmetry line.
* ``EXP2`` - a flag pointer is position-correlated with the path while the
  packets are still apart; the symmetry breaks, every trajectory crosses.
* ``EXP3`` - the path is first written into a spin-only particle, and only
  converted into a pointer position after the packets have recrossed.
* ``EXP4`` - EXP3 with a movable conversion time and an optional deflection
  that keeps the packet supports apart at the would-be crossing.

A scenario file is line-oriented key=value text with [particles], [geometry],
[events] and [run] sections; see ``render_scenario`` for the canonical form.
"""

from __future__ import annotations

import enum
import math
from bisect import bisect_right
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from bohmsim.guidance import LineSpec, Trajectory
from bohmsim.packets import (
    Branch,
    EventKind,
    GaussianPacket,
    Particle,
    ParticleRegistry,
    SpinLabel,
    UnitaryEvent,
    WaveFunction,
    apply_event,
    norm,
)

__all__ = [
    "Endpoint",
    "Flag",
    "Side",
    "OutcomeRecord",
    "ScenarioGeometry",
    "ScenarioSpec",
    "CompiledScenario",
    "ScenarioError",
    "ScenarioParseError",
    "ScenarioValidationError",
    "BUILTIN_NAMES",
    "builtin_scenario",
    "parse_scenario_file",
    "render_scenario",
    "compile_scenario",
    "verify_overlap_spin",
    "classify_outcome",
]

BUILTIN_NAMES = ("EXP1", "EXP2", "EXP3", "EXP4")

_GEOM_TOL = 1e-9


class ScenarioError(Exception):
    """Base class for scenario definition problems."""


class ScenarioParseError(ScenarioError):
    """Syntax problem in a scenario file, with line and column."""

    def __init__(self, line: int, column: int, message: str):
        self.line = line
        self.column = column
        super().__init__(f"line {line}, column {column}: {message}")


class ScenarioValidationError(ScenarioError):
    """Semantic problem in an otherwise well-formed scenario."""


class Endpoint(str, enum.Enum):
    A_PRIME = "A_prime"
    B_PRIME = "B_prime"
    NONE = "none"


class Flag(str, enum.Enum):
    YES = "yes"
    NO = "no"
    UNSET = "unset"


class Side(str, enum.Enum):
    TOP = "top"
    BOTTOM = "bottom"


@dataclass(frozen=True)
class OutcomeRecord:
    """Classified endpoint, flag reading and line-crossing count for one run."""

    endpoint: Endpoint
    flag: Flag
    l_crossings: int
    initial_side: Side
    conversion_time_used: float | None = None
    aborted: bool = False


@dataclass(frozen=True)
class ScenarioGeometry:
    """Labeled points of the crossing geometry plus packet scales.

    ``A``/``B`` mirror each other across the line L, the paths continue
    straight through the crossing point ``I`` to ``A_prime``/``B_prime``,
    and ``u``/``v`` are the transverse/forward packet speeds.
    """

    S: tuple[float, float]
    A: tuple[float, float]
    B: tuple[float, float]
    I: tuple[float, float]
    A_prime: tuple[float, float]
    B_prime: tuple[float, float]
    line: LineSpec
    u: float
    v: float
    r_region: float
    sigma0: float
    pointer_sigma: float
    pointer_travel: float

    @property
    def leg_height(self) -> float:
        return self.A[1] - self.line.value

    @property
    def t_cross(self) -> float:
        """Flight time from A/B to the crossing point I."""
        return self.leg_height / self.u


@dataclass(frozen=True)
class ScenarioSpec:
    """A validated scenario: registry, geometry, schedule and run plan."""

    name: str
    registry: ParticleRegistry
    geometry: ScenarioGeometry
    events: tuple[UnitaryEvent, ...]
    t0: float
    t1: float
    dt: float
    n: int
    seed: int
    antithetic: bool = False
    conversion_time: float | None = None
    interfere: bool = True
    hbar: float = 1.0

    @property
    def duration(self) -> float:
        return self.t1 - self.t0


def _f(x) -> float:
    return float(x)


def _test_particle(reg: ParticleRegistry) -> Particle:
    cands = [p for p in reg.particles if p.n_coords == 2 and p.has_spin]
    if len(cands) != 1:
        raise ScenarioValidationError(
            "registry must contain exactly one two-coordinate spin-carrying test particle"
        )
    return cands[0]


def _pointer_particle(reg: ParticleRegistry) -> Particle | None:
    cands = [p for p in reg.particles if p.n_coords == 1 and not p.has_spin]
    if len(cands) > 1:
        raise ScenarioValidationError("registry may contain at most one pointer particle")
    return cands[0] if cands else None


def _spin_only_particle(reg: ParticleRegistry) -> Particle | None:
    cands = [p for p in reg.particles if p.n_coords == 0 and p.has_spin]
    if len(cands) > 1:
        raise ScenarioValidationError(
            "registry may contain at most one coordinate-free spin particle"
        )
    return cands[0] if cands else None


@dataclass(frozen=True)
class _Windows:
    """Derived times that gate where detector events may sit."""

    t_cross: float        # packet centers meet the line
    t_near: float         # supports begin to overlap (centers 10 sigma apart)
    t_far: float          # supports are disjoint again
    tau_min: float        # shortest usable gap before a deadline


def _windows(spec: ScenarioSpec) -> _Windows:
    g = spec.geometry
    t_cross = spec.t0 + g.t_cross
    w = 5.0 * g.sigma0 / g.u
    tau_min = max(20.0 * spec.dt, 0.02 * spec.duration)
    return _Windows(t_cross=t_cross, t_near=t_cross - w, t_far=t_cross + w, tau_min=tau_min)


def _validate_geometry(reg: ParticleRegistry, g: ScenarioGeometry) -> None:
    test = _test_particle(reg)
    sl = reg.coord_slice(test.id)
    if not (sl.start <= g.line.coord_index < sl.stop):
        raise ScenarioValidationError(
            f"line coordinate index {g.line.coord_index} does not belong to the "
            f"test particle {test.id!r}"
        )
    lam = g.line.value
    scale = max(1.0, abs(lam), abs(g.A[1] - lam))
    tol = _GEOM_TOL * scale

    for name in ("u", "v", "sigma0", "r_region", "pointer_sigma", "pointer_travel"):
        if getattr(g, name) <= 0:
            raise ScenarioValidationError(f"geometry field {name} must be > 0")
    if abs(g.S[1] - lam) > tol:
        raise ScenarioValidationError(f"point S={g.S} does not lie on the line L (y={lam})")
    if abs(g.I[1] - lam) > tol:
        raise ScenarioValidationError(f"point I={g.I} does not lie on the line L (y={lam})")
    if g.A[1] <= lam:
        raise ScenarioValidationError(f"point A={g.A} must lie above the line L (y={lam})")
    if abs(g.A[0] - g.B[0]) > tol or abs((g.A[1] - lam) + (g.B[1] - lam)) > tol:
        raise ScenarioValidationError(
            f"points A={g.A} and B={g.B} are not mirror images across the line L (y={lam})"
        )
    if (
        abs(g.A_prime[0] - g.B_prime[0]) > tol
        or abs((g.A_prime[1] - lam) + (g.B_prime[1] - lam)) > tol
    ):
        raise ScenarioValidationError(
            f"points A_prime={g.A_prime} and B_prime={g.B_prime} are not mirror "
            f"images across the line L (y={lam})"
        )
    for name, pt, src in (("A_prime", g.A_prime, g.A), ("B_prime", g.B_prime, g.B)):
        want = (2.0 * g.I[0] - src[0], 2.0 * g.I[1] - src[1])
        if abs(pt[0] - want[0]) > tol or abs(pt[1] - want[1]) > tol:
            raise ScenarioValidationError(
                f"point {name}={pt} is not the straight continuation of the leg "
                f"through I; expected {want}"
            )
    h = g.leg_height
    if h < 8.0 * g.sigma0 - tol:
        raise ScenarioValidationError(
            f"leg height {h} must be at least 8*sigma0 = {8.0 * g.sigma0} for the "
            f"paths to be resolvable"
        )
    t_leg = h / g.u
    if abs((g.I[0] - g.A[0]) - g.v * t_leg) > tol * max(1.0, abs(g.I[0])):
        raise ScenarioValidationError(
            f"speeds u={g.u}, v={g.v} are inconsistent with points A={g.A}, I={g.I}: "
            f"the leg flight times differ"
        )


def _validate_events(spec: ScenarioSpec) -> None:
    reg = spec.registry
    test = _test_particle(reg)
    pointer = _pointer_particle(reg)
    spin_only = _spin_only_particle(reg)
    win = _windows(spec)

    if not spec.events:
        raise ScenarioValidationError("scenario has no events; a splitter is required")
    times = [e.time for e in spec.events]
    if any(t2 <= t1 for t1, t2 in zip(times, times[1:])):
        raise ScenarioValidationError(f"event times must be strictly increasing, got {times}")
    if times[0] != spec.t0:
        raise ScenarioValidationError(
            f"first event must be the splitter at t0={spec.t0}, got t={times[0]}"
        )
    if times[-1] >= spec.t1:
        raise ScenarioValidationError("events must be scheduled strictly before t1")

    kinds = [e.kind for e in spec.events]
    if kinds[0] is not EventKind.SPLITTER:
        raise ScenarioValidationError(
            f"schedule must open with the splitter; first event is {kinds[0].value}"
        )
    for kind in (EventKind.SPLITTER, EventKind.PATH_SPIN_COUPLING,
                 EventKind.SPIN_POINTER_CONVERSION, EventKind.DEFLECT):
        if kinds.count(kind) > 1:
            raise ScenarioValidationError(f"at most one {kind.value} event is allowed")

    coupling = conversion = deflect = None
    for e in spec.events:
        p = e.params
        if e.kind is EventKind.SPLITTER:
            if p.get("particle") != test.id:
                raise ScenarioValidationError(
                    f"splitter must target the test particle {test.id!r}"
                )
        elif e.kind is EventKind.PATH_SPIN_COUPLING:
            coupling = e
            if p.get("particle") != test.id:
                raise ScenarioValidationError(
                    f"path_spin_coupling must read the test particle {test.id!r}"
                )
            if spin_only is None or p.get("spin") != spin_only.id:
                raise ScenarioValidationError(
                    "path_spin_coupling must write a registered coordinate-free spin particle"
                )
            if p.get("side") not in ("top", "bottom"):
                raise ScenarioValidationError(
                    f"path_spin_coupling side must be 'top' or 'bottom', got {p.get('side')!r}"
                )
            if not (spec.t0 < e.time <= win.t_near):
                raise ScenarioValidationError(
                    f"path_spin_coupling at t={e.time} must precede the packet overlap "
                    f"window (t <= {win.t_near})"
                )
        elif e.kind is EventKind.SPIN_POINTER_CONVERSION:
            conversion = e
            spin_pid = p.get("spin")
            if spin_pid not in (test.id, spin_only.id if spin_only else None):
                raise ScenarioValidationError(
                    f"spin_pointer_conversion spin target {spin_pid!r} is not a "
                    f"registered spin carrier"
                )
            if pointer is None or p.get("pointer") != pointer.id:
                raise ScenarioValidationError(
                    "spin_pointer_conversion must drive the registered pointer particle"
                )
            early_ok = spec.t0 < e.time <= win.t_near - win.tau_min
            late_ok = win.t_far <= e.time <= spec.t1 - win.tau_min
            if not (early_ok or late_ok):
                raise ScenarioValidationError(
                    f"conversion_time {e.time} must avoid the packet overlap window: "
                    f"allowed ranges are ({spec.t0}, {win.t_near - win.tau_min}] and "
                    f"[{win.t_far}, {spec.t1 - win.tau_min}]"
                )
        elif e.kind is EventKind.DEFLECT:
            deflect = e
            if p.get("particle") != test.id:
                raise ScenarioValidationError(
                    f"deflect must target the test particle {test.id!r}"
                )
            if not (spec.t0 < e.time <= win.t_near):
                raise ScenarioValidationError(
                    f"deflect at t={e.time} must act before the packet overlap window "
                    f"(t <= {win.t_near})"
                )
            for key in ("dv_top", "dv_bottom"):
                if not math.isfinite(_f(p.get(key, math.nan))):
                    raise ScenarioValidationError(f"deflect parameter {key} must be a finite number")

    if conversion is not None and conversion.params.get("spin") == (
        spin_only.id if spin_only else None
    ):
        if coupling is None or coupling.time >= conversion.time:
            raise ScenarioValidationError(
                "spin_pointer_conversion reading the spin record requires an earlier "
                "path_spin_coupling event"
            )
    if conversion is not None:
        win_deadline = win.t_near if conversion.time <= win.t_near else spec.t1
        kick = spec.geometry.pointer_travel / (win_deadline - conversion.time)
        if kick * spec.dt > spec.geometry.pointer_sigma / 4.0:
            raise ScenarioValidationError(
                f"conversion_time {conversion.time} leaves too little room: the pointer "
                f"kick {kick:.3g} is unresolvable at dt={spec.dt}; convert earlier or "
                f"shrink dt"
            )
        if spec.conversion_time is not None and spec.conversion_time != conversion.time:
            raise ScenarioValidationError(
                f"conversion_time option {spec.conversion_time} disagrees with the "
                f"scheduled conversion event at t={conversion.time}"
            )
    elif spec.conversion_time is not None:
        raise ScenarioValidationError(
            "conversion_time option set but no spin_pointer_conversion event scheduled"
        )
    if spec.interfere == (deflect is not None):
        raise ScenarioValidationError(
            "interfere=false requires exactly one deflect event and interfere=true forbids it"
        )


def validate_scenario(spec: ScenarioSpec) -> None:
    """Check registry shape, geometry symmetry and schedule consistency."""
    reg = spec.registry
    _test_particle(reg)
    _pointer_particle(reg)
    _spin_only_particle(reg)
    if spec.t1 <= spec.t0:
        raise ScenarioValidationError(f"t1={spec.t1} must exceed t0={spec.t0}")
    if spec.dt <= 0:
        raise ScenarioValidationError(f"dt must be > 0, got {spec.dt}")
    if spec.dt > spec.duration / 100.0:
        raise ScenarioValidationError(
            f"dt={spec.dt} is too coarse for the run span {spec.duration}"
        )
    if spec.n < 1:
        raise ScenarioValidationError(f"n must be >= 1, got {spec.n}")
    if not (0 <= spec.seed < 2**63):
        raise ScenarioValidationError(f"seed must be a non-negative 63-bit integer, got {spec.seed}")
    if spec.hbar <= 0:
        raise ScenarioValidationError(f"hbar must be > 0, got {spec.hbar}")
    _validate_geometry(reg, spec.geometry)
    win = _windows(spec)
    if spec.t1 <= win.t_far:
        raise ScenarioValidationError(
            f"t1={spec.t1} must leave room past the crossing region (> {win.t_far})"
        )
    _validate_events(spec)


# ---------------------------------------------------------------------------
# Built-in scenarios
# ---------------------------------------------------------------------------

_BUILTIN_PARAMS = {
    "n": 1000,
    "seed": 42,
    "dt": 1e-3,
    "sigma0": 2.0,
    "u": 25.0,
    "v": 25.0,
    "antithetic": False,
    "conversion_time": None,
    "interfere": True,
    "hbar": 1.0,
}


def builtin_scenario(name: str, **params) -> ScenarioSpec:
    """Construct one of the built-in scenarios with optional overrides.

    ``conversion_time`` and ``interfere`` are only legal for EXP4; everything
    else (n, seed, dt, sigma0, u, v, antithetic, hbar) applies everywhere.
    Out-of-range parameters are rejected with the offending field named.
    """
    if name not in BUILTIN_NAMES:
        raise ScenarioValidationError(
            f"unknown scenario {name!r}; built-ins are {', '.join(BUILTIN_NAMES)}"
        )
    unknown = set(params) - set(_BUILTIN_PARAMS)
    if unknown:
        raise ScenarioValidationError(f"unknown parameter(s): {sorted(unknown)}")
    if name != "EXP4":
        for key in ("conversion_time", "interfere"):
            if key in params:
                raise ScenarioValidationError(f"parameter {key} is only valid for EXP4")
    merged = dict(_BUILTIN_PARAMS)
    merged.update(params)

    for key in ("dt", "sigma0", "u", "v", "hbar"):
        if not (isinstance(merged[key], (int, float)) and merged[key] > 0):
            raise ScenarioValidationError(f"parameter {key} must be a positive number")
    if not (isinstance(merged["n"], int) and merged["n"] >= 1):
        raise ScenarioValidationError("parameter n must be an integer >= 1")
    if not (isinstance(merged["seed"], int) and merged["seed"] >= 0):
        raise ScenarioValidationError("parameter seed must be a non-negative integer")

    sigma0 = float(merged["sigma0"])
    u = float(merged["u"])
    v = float(merged["v"])
    dt = float(merged["dt"])
    h = 8.0 * sigma0
    t_leg = h / u
    t0, t1 = 0.0, 2.0 * t_leg
    geometry = ScenarioGeometry(
        S=(0.0, 0.0),
        A=(0.0, h),
        B=(0.0, -h),
        I=(v * t_leg, 0.0),
        A_prime=(2.0 * v * t_leg, -h),
        B_prime=(2.0 * v * t_leg, h),
        line=LineSpec(coord_index=1, value=0.0),
        u=u,
        v=v,
        r_region=3.0 * sigma0,
        sigma0=sigma0,
        pointer_sigma=sigma0,
        pointer_travel=10.0 * sigma0,
    )
    t_cross = t_leg
    w = 5.0 * sigma0 / u
    t_near, t_far = t_cross - w, t_cross + w
    t_pc = 0.25 * t_near
    t_early = 0.45 * t_near
    t_deflect = 0.7 * t_near
    t_late = t_far + 0.25 * (t1 - t_far)

    particles = [Particle("P", 1.0, 2, True)]
    events: list[UnitaryEvent] = [UnitaryEvent(t0, EventKind.SPLITTER, {"particle": "P"})]
    conversion_time = None
    interfere = True

    if name == "EXP2":
        particles.append(Particle("F", 1.0, 1, False))
        conversion_time = t_early
        events.append(
            UnitaryEvent(
                t_early, EventKind.SPIN_POINTER_CONVERSION, {"spin": "P", "pointer": "F"}
            )
        )
    elif name in ("EXP3", "EXP4"):
        particles.append(Particle("M", 1.0, 0, True))
        particles.append(Particle("F", 1.0, 1, False))
        events.append(
            UnitaryEvent(
                t_pc,
                EventKind.PATH_SPIN_COUPLING,
                {"particle": "P", "spin": "M", "side": "bottom"},
            )
        )
        conversion_time = t_late
        if name == "EXP4":
            interfere = bool(merged["interfere"])
            if merged["conversion_time"] is not None:
                conversion_time = float(merged["conversion_time"])
            if not interfere:
                events.append(
                    UnitaryEvent(
                        t_deflect,
                        EventKind.DEFLECT,
                        {"particle": "P", "dv_top": u, "dv_bottom": -u},
                    )
                )
        events.append(
            UnitaryEvent(
                conversion_time,
                EventKind.SPIN_POINTER_CONVERSION,
                {"spin": "M", "pointer": "F"},
            )
        )

    events.sort(key=lambda e: e.time)
    spec = ScenarioSpec(
        name=name,
        registry=ParticleRegistry(tuple(particles)),
        geometry=geometry,
        events=tuple(events),
        t0=t0,
        t1=t1,
        dt=dt,
        n=int(merged["n"]),
        seed=int(merged["seed"]),
        antithetic=bool(merged["antithetic"]),
        conversion_time=conversion_time,
        interfere=interfere,
        hbar=float(merged["hbar"]),
    )
    validate_scenario(spec)
    return spec


# ---------------------------------------------------------------------------
# Scenario file format
# ---------------------------------------------------------------------------

_EVENT_KIND_NAMES = {k.value: k for k in EventKind}
_SECTION_ORDER = ("particles", "geometry", "events", "run")


def _fmt(x: float) -> str:
    return repr(float(x))


def render_scenario(spec: ScenarioSpec) -> str:
    """Canonical text form of a scenario; ``parse_scenario_file`` inverts it."""
    g = spec.geometry
    names = spec.registry.coord_names
    lines = ["[particles]"]
    for p in spec.registry.particles:
        lines.append(
            f"particle = {p.id} mass={_fmt(p.mass)} coords={p.n_coords} "
            f"spin={'true' if p.has_spin else 'false'}"
        )
    lines += ["", "[geometry]"]
    for key in ("S", "A", "B", "I", "A_prime", "B_prime"):
        pt = getattr(g, key)
        lines.append(f"{key} = {_fmt(pt[0])} {_fmt(pt[1])}")
    lines.append(f"line = {names[g.line.coord_index]} {_fmt(g.line.value)}")
    for key in ("u", "v", "r_region", "sigma0", "pointer_sigma", "pointer_travel"):
        lines.append(f"{key} = {_fmt(getattr(g, key))}")
    lines += ["", "[events]"]
    for e in spec.events:
        parts = [f"event = {_fmt(e.time)} {e.kind.value}"]
        for k in sorted(e.params):
            val = e.params[k]
            parts.append(f"{k}={_fmt(val) if isinstance(val, float) else val}")
        lines.append(" ".join(parts))
    lines += ["", "[run]"]
    lines.append(f"name = {spec.name}")
    for key in ("t0", "t1", "dt"):
        lines.append(f"{key} = {_fmt(getattr(spec, key))}")
    lines.append(f"n = {spec.n}")
    lines.append(f"seed = {spec.seed}")
    lines.append(f"antithetic = {'true' if spec.antithetic else 'false'}")
    lines.append(f"interfere = {'true' if spec.interfere else 'false'}")
    if spec.conversion_time is not None:
        lines.append(f"conversion_time = {_fmt(spec.conversion_time)}")
    lines.append(f"hbar = {_fmt(spec.hbar)}")
    return "\n".join(lines) + "\n"


def _parse_bool(tok: str, line: int, col: int) -> bool:
    if tok == "true":
        return True
    if tok == "false":
        return False
    raise ScenarioParseError(line, col, f"expected 'true' or 'false', got {tok!r}")


def _parse_float(tok: str, line: int, col: int) -> float:
    try:
        return float(tok)
    except ValueError:
        raise ScenarioParseError(line, col, f"expected a number, got {tok!r}") from None


def _parse_int(tok: str, line: int, col: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise ScenarioParseError(line, col, f"expected an integer, got {tok!r}") from None


def parse_scenario_file(text: str) -> ScenarioSpec:
    """Parse scenario text into a validated :class:`ScenarioSpec`.

    Syntax errors raise :class:`ScenarioParseError` with line and column;
    semantic problems (broken mirror symmetry, unsorted events, ...) raise
    :class:`ScenarioValidationError`.
    """
    sections: dict[str, list[tuple[int, str, str, int]]] = {s: [] for s in _SECTION_ORDER}
    current: str | None = None
    seen: list[str] = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.split("#", 1)[0].rstrip()
        if not stripped.strip():
            continue
        if stripped.strip().startswith("["):
            name = stripped.strip()
            if not name.endswith("]"):
                raise ScenarioParseError(ln, len(stripped), "unterminated section header")
            sec = name[1:-1]
            if sec not in _SECTION_ORDER:
                raise ScenarioParseError(ln, 1, f"unknown section [{sec}]")
            if sec in seen:
                raise ScenarioParseError(ln, 1, f"duplicate section [{sec}]")
            if seen and _SECTION_ORDER.index(sec) < _SECTION_ORDER.index(seen[-1]):
                raise ScenarioParseError(
                    ln, 1, f"section [{sec}] out of order; expected {_SECTION_ORDER}"
                )
            seen.append(sec)
            current = sec
            continue
        if current is None:
            raise ScenarioParseError(ln, 1, "content before the first section header")
        if "=" not in stripped:
            raise ScenarioParseError(ln, 1, "expected 'key = value'")
        key, _, value = stripped.partition("=")
        vcol = stripped.index("=") + 2
        sections[current].append((ln, key.strip(), value.strip(), vcol))
    for sec in _SECTION_ORDER:
        if sec not in seen:
            raise ScenarioParseError(len(text.splitlines()) + 1, 1, f"missing section [{sec}]")

    # [particles]
    particles: list[Particle] = []
    for ln, key, value, col in sections["particles"]:
        if key != "particle":
            raise ScenarioParseError(ln, 1, f"unknown key {key!r} in [particles]")
        toks = value.split()
        if not toks:
            raise ScenarioParseError(ln, col, "particle needs an id")
        pid = toks[0]
        fields = {"mass": 1.0, "coords": 0, "spin": False}
        seen_keys = set()
        for tok in toks[1:]:
            if "=" not in tok:
                raise ScenarioParseError(ln, col, f"expected key=value, got {tok!r}")
            k, _, v = tok.partition("=")
            if k not in fields:
                raise ScenarioParseError(ln, col, f"unknown particle field {k!r}")
            if k in seen_keys:
                raise ScenarioParseError(ln, col, f"duplicate particle field {k!r}")
            seen_keys.add(k)
            if k == "mass":
                fields[k] = _parse_float(v, ln, col)
            elif k == "coords":
                fields[k] = _parse_int(v, ln, col)
            else:
                fields[k] = _parse_bool(v, ln, col)
        particles.append(Particle(pid, fields["mass"], fields["coords"], fields["spin"]))
    if not particles:
        raise ScenarioValidationError("[particles] section declares no particles")
    try:
        registry = ParticleRegistry(tuple(particles))
    except ValueError as exc:
        raise ScenarioValidationError(str(exc)) from None

    # [geometry]
    geo: dict[str, object] = {}
    gline = {}
    point_keys = ("S", "A", "B", "I", "A_prime", "B_prime")
    scalar_keys = ("u", "v", "r_region", "sigma0", "pointer_sigma", "pointer_travel")
    for ln, key, value, col in sections["geometry"]:
        if key in geo or key in gline:
            raise ScenarioParseError(ln, 1, f"duplicate geometry key {key!r}")
        if key in point_keys:
            toks = value.split()
            if len(toks) != 2:
                raise ScenarioParseError(ln, col, f"point {key} needs two coordinates")
            geo[key] = (_parse_float(toks[0], ln, col), _parse_float(toks[1], ln, col))
        elif key == "line":
            toks = value.split()
            if len(toks) != 2:
                raise ScenarioParseError(ln, col, "line needs a coordinate name and a value")
            names = registry.coord_names
            if toks[0] not in names:
                raise ScenarioParseError(
                    ln, col, f"unknown coordinate {toks[0]!r}; have {', '.join(names)}"
                )
            gline["line"] = LineSpec(names.index(toks[0]), _parse_float(toks[1], ln, col))
        elif key in scalar_keys:
            geo[key] = _parse_float(value, ln, col)
        else:
            raise ScenarioParseError(ln, 1, f"unknown key {key!r} in [geometry]")
    missing = [k for k in (*point_keys, "u", "v", "sigma0") if k not in geo]
    if "line" not in gline:
        missing.append("line")
    if missing:
        raise ScenarioValidationError(f"[geometry] is missing required key(s): {missing}")
    sigma0 = float(geo["sigma0"])
    geo.setdefault("r_region", 3.0 * sigma0)
    geo.setdefault("pointer_sigma", sigma0)
    geo.setdefault("pointer_travel", 10.0 * float(geo["pointer_sigma"]))
    geometry = ScenarioGeometry(line=gline["line"], **geo)  # type: ignore[arg-type]

    # [events]
    events: list[UnitaryEvent] = []
    for ln, key, value, col in sections["events"]:
        if key != "event":
            raise ScenarioParseError(ln, 1, f"unknown key {key!r} in [events]")
        toks = value.split()
        if len(toks) < 2:
            raise ScenarioParseError(ln, col, "event needs a time and a kind")
        t = _parse_float(toks[0], ln, col)
        if toks[1] not in _EVENT_KIND_NAMES:
            raise ScenarioParseError(
                ln, col, f"unknown event kind {toks[1]!r}; have {sorted(_EVENT_KIND_NAMES)}"
            )
        kind = _EVENT_KIND_NAMES[toks[1]]
        allowed = {
            EventKind.SPLITTER: {"particle"},
            EventKind.PATH_SPIN_COUPLING: {"particle", "spin", "side"},
            EventKind.SPIN_POINTER_CONVERSION: {"spin", "pointer"},
            EventKind.DEFLECT: {"particle", "dv_top", "dv_bottom"},
        }[kind]
        params: dict[str, object] = {}
        for tok in toks[2:]:
            if "=" not in tok:
                raise ScenarioParseError(ln, col, f"expected key=value, got {tok!r}")
            k, _, v = tok.partition("=")
            if k not in allowed:
                raise ScenarioParseError(ln, col, f"unknown {toks[1]} parameter {k!r}")
            if k in params:
                raise ScenarioParseError(ln, col, f"duplicate event parameter {k!r}")
            params[k] = _parse_float(v, ln, col) if k.startswith("dv_") else v
        missing_p = allowed - set(params)
        if missing_p:
            raise ScenarioParseError(
                ln, col, f"event {toks[1]} is missing parameter(s) {sorted(missing_p)}"
            )
        events.append(UnitaryEvent(t, kind, params))

    # [run]
    run: dict[str, object] = {}
    for ln, key, value, col in sections["run"]:
        if key in run:
            raise ScenarioParseError(ln, 1, f"duplicate run key {key!r}")
        if key == "name":
            run[key] = value
        elif key in ("t0", "t1", "dt", "conversion_time", "hbar"):
            run[key] = _parse_float(value, ln, col)
        elif key in ("n", "seed"):
            run[key] = _parse_int(value, ln, col)
        elif key in ("antithetic", "interfere"):
            run[key] = _parse_bool(value, ln, col)
        else:
            raise ScenarioParseError(ln, 1, f"unknown key {key!r} in [run]")
    missing = [k for k in ("name", "t0", "t1", "dt", "n", "seed") if k not in run]
    if missing:
        raise ScenarioValidationError(f"[run] is missing required key(s): {missing}")

    spec = ScenarioSpec(
        name=str(run["name"]),
        registry=registry,
        geometry=geometry,
        events=tuple(events),
        t0=float(run["t0"]),
        t1=float(run["t1"]),
        dt=float(run["dt"]),
        n=int(run["n"]),
        seed=int(run["seed"]),
        antithetic=bool(run.get("antithetic", False)),
        conversion_time=(
            float(run["conversion_time"]) if "conversion_time" in run else None
        ),
        interfere=bool(run.get("interfere", True)),
        hbar=float(run.get("hbar", 1.0)),
    )
    if spec.conversion_time is None:
        for e in spec.events:
            if e.kind is EventKind.SPIN_POINTER_CONVERSION:
                spec = replace(spec, conversion_time=e.time)
    validate_scenario(spec)
    return spec


# ---------------------------------------------------------------------------
# Compilation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Interval:
    t_start: float
    t_end: float
    wf: WaveFunction
    paths: tuple[str, ...]   # path tag per branch: "S" before the split, then "A"/"B"


@dataclass
class CompiledScenario:
    """Piecewise-analytic timeline plus everything the integrator needs."""

    spec: ScenarioSpec
    intervals: tuple[Interval, ...]
    resolved_events: tuple[UnitaryEvent, ...]
    v_max: float
    density_floor_rel: float = 1e-12

    @property
    def registry(self) -> ParticleRegistry:
        return self.spec.registry

    @property
    def t0(self) -> float:
        return self.spec.t0

    @property
    def t1(self) -> float:
        return self.spec.t1

    @property
    def line(self) -> LineSpec:
        return self.spec.geometry.line

    @property
    def hysteresis(self) -> float:
        return 1e-6 * self.spec.geometry.sigma0

    @property
    def event_times(self) -> tuple[float, ...]:
        return tuple(e.time for e in self.resolved_events)

    @property
    def t_cross(self) -> float:
        return self.spec.t0 + self.spec.geometry.t_cross

    @property
    def conversion_time(self) -> float | None:
        return self.spec.conversion_time

    @property
    def conversion_spin(self) -> str | None:
        for e in self.resolved_events:
            if e.kind is EventKind.SPIN_POINTER_CONVERSION:
                return str(e.params["spin_particle"])
        return None

    @property
    def pointer_coord(self) -> int | None:
        from bohmsim.scenarios import _pointer_particle

        p = _pointer_particle(self.registry)
        return None if p is None else self.registry.coord_slice(p.id).start

    @property
    def flag_threshold(self) -> float | None:
        """Pointer reading that separates a no from a yes at t1."""
        for e in self.resolved_events:
            if e.kind is EventKind.SPIN_POINTER_CONVERSION:
                kick = float(e.params["kick_velocity"])
                return 0.5 * kick * (self.t1 - e.time)
        return None

    def interval_at(self, t: float) -> Interval:
        if t < self.t0 - 1e-12 or t > self.t1 + 1e-12:
            raise ValueError(f"time {t} outside the scenario span [{self.t0}, {self.t1}]")
        idx = bisect_right(self.event_times, t)
        return self.intervals[idx]

    def wavefunction_at(self, t: float) -> WaveFunction:
        return self.interval_at(t).wf

    def branch_counts(self) -> list[int]:
        return [len(iv.wf.branches) for iv in self.intervals]


def _resolve_event(spec: ScenarioSpec, e: UnitaryEvent) -> UnitaryEvent:
    """Turn the file-facing symbolic parameters into concrete numbers."""
    g = spec.geometry
    reg = spec.registry
    test = _test_particle(reg)
    sl = reg.coord_slice(test.id)
    axis = g.line.coord_index
    along = sl.start if axis != sl.start else sl.start + 1
    win = _windows(spec)
    p = dict(e.params)

    if e.kind is EventKind.SPLITTER:
        t_leg = g.t_cross
        outputs = []
        for spin, src in ((SpinLabel.UP_X, g.A), (SpinLabel.DOWN_X, g.B)):
            coords = [None, None]
            coords[along - sl.start] = (src[0], (g.I[0] - src[0]) / t_leg)
            coords[axis - sl.start] = (src[1], (g.I[1] - src[1]) / t_leg)
            outputs.append({"spin": spin.value, "coords": coords})
        params = {
            "particle": test.id,
            "amp_scale": 1.0 / math.sqrt(2.0),
            "outputs": outputs,
        }
    elif e.kind is EventKind.PATH_SPIN_COUPLING:
        params = {
            "axis_index": axis,
            "line_value": g.line.value,
            "side": p["side"],
            "spin_particle": p["spin"],
            "sigma_ref": g.sigma0,
        }
    elif e.kind is EventKind.SPIN_POINTER_CONVERSION:
        deadline = win.t_near if e.time <= win.t_near else spec.t1
        params = {
            "spin_particle": p["spin"],
            "pointer_particle": p["pointer"],
            "kick_velocity": g.pointer_travel / (deadline - e.time),
        }
    elif e.kind is EventKind.DEFLECT:
        params = {
            "axis_index": axis,
            "line_value": g.line.value,
            "dv_top": float(p["dv_top"]),
            "dv_bottom": float(p["dv_bottom"]),
            "sigma_ref": g.sigma0,
        }
    else:  # pragma: no cover
        raise ScenarioValidationError(f"unknown event kind {e.kind}")
    return UnitaryEvent(e.time, e.kind, params)


def _initial_wavefunction(spec: ScenarioSpec) -> WaveFunction:
    reg = spec.registry
    test = _test_particle(reg)
    pointer = _pointer_particle(reg)
    g = spec.geometry
    sl = reg.coord_slice(test.id)
    axis = g.line.coord_index
    packets: list[GaussianPacket] = []
    for d in range(reg.dim):
        if sl.start <= d < sl.stop:
            if d == axis:
                packets.append(GaussianPacket(g.S[1], 0.0, g.sigma0, spec.t0))
            else:
                packets.append(GaussianPacket(g.S[0], g.v, g.sigma0, spec.t0))
        elif pointer is not None and d == reg.coord_slice(pointer.id).start:
            packets.append(GaussianPacket(0.0, 0.0, g.pointer_sigma, spec.t0))
        else:  # pragma: no cover - registry validation forbids other shapes
            raise ScenarioValidationError(f"unplaceable coordinate index {d}")
    spins = {pid: SpinLabel.UP_X for pid in reg.spin_ids}
    return WaveFunction(
        registry=reg,
        branches=(Branch(amp=1.0 + 0.0j, packets=tuple(packets), spins=spins),),
        hbar=spec.hbar,
    )


def compile_scenario(spec: ScenarioSpec) -> CompiledScenario:
    """Fold the event schedule over analytic packet evolution.

    Produces the branch list for every inter-event interval, the resolved
    numeric event parameters, and the sanity velocity bound used by the
    integrator.  Event application failures are reported with the index of
    the offending event.
    """
    validate_scenario(spec)
    wf = _initial_wavefunction(spec)
    if abs(norm(wf) - 1.0) > 1e-9:
        raise ScenarioValidationError("initial state is not normalized")
    resolved = tuple(_resolve_event(spec, e) for e in spec.events)
    wfs = [wf]
    for i, e in enumerate(resolved):
        try:
            wfs.append(apply_event(wfs[-1], e))
        except Exception as exc:
            raise ScenarioValidationError(
                f"event {i} ({e.kind.value} at t={e.time}) failed: {exc}"
            ) from exc

    bounds = [spec.t0, *[e.time for e in resolved], spec.t1]
    intervals = []
    for i, w in enumerate(wfs):
        if i == 0:
            paths: tuple[str, ...] = ("S",)
        else:
            paths = ("A", "B")
        intervals.append(Interval(bounds[i], bounds[i + 1], w, paths))

    v_max = 1.0
    for w in wfs:
        for b in w.branches:
            speed = math.sqrt(sum(p.velocity**2 for p in b.packets))
            v_max = max(v_max, speed)
    return CompiledScenario(
        spec=spec,
        intervals=tuple(intervals),
        resolved_events=resolved,
        v_max=4.0 * v_max,
    )


# ---------------------------------------------------------------------------
# Diagnostics on compiled scenarios
# ---------------------------------------------------------------------------


def verify_overlap_spin(
    compiled: CompiledScenario, t: float, points: Sequence[Sequence[float]] | None = None
) -> float:
    """Squared overlap of the reconstructed spin state with the symmetric spinor.

    At the crossing point the two branch packets coincide with equal, in-phase
    amplitudes, so the local two-component spin state is the equal-weight
    x-spin superposition; its squared overlap with that target is the
    interference fidelity.  Detector scenarios are rejected: once another
    degree of freedom is correlated with the path, the local reconstruction
    is no longer spin-coherent.
    """
    for e in compiled.resolved_events:
        if e.kind in (EventKind.PATH_SPIN_COUPLING, EventKind.SPIN_POINTER_CONVERSION):
            raise ScenarioValidationError(
                "overlap spin reconstruction requires a detector-free scenario"
            )
    wf = compiled.wavefunction_at(t)
    test = _test_particle(compiled.registry)
    if points is None:
        points = [compiled.spec.geometry.I]
    from bohmsim.packets import spinor_components_at

    fid = math.inf
    for pt in points:
        comps = spinor_components_at(wf, np.asarray(pt, dtype=float), t)
        a_up = a_down = 0.0 + 0.0j
        for asgn, amp in comps.items():
            label = dict(asgn)[test.id]
            if label is SpinLabel.UP_X:
                a_up += amp
            else:
                a_down += amp
        total = abs(a_up) ** 2 + abs(a_down) ** 2
        if total <= 0.0:
            raise ValueError(f"no support at evaluation point {pt}")
        fid = min(fid, abs(a_up + a_down) ** 2 / (2.0 * total))
    return fid


def _classify_core(
    compiled: CompiledScenario,
    y0: np.ndarray,
    Q1: np.ndarray,
    crossings: np.ndarray,
    aborted: np.ndarray,
    proximity_sigmas: float,
) -> list[OutcomeRecord]:
    lam = compiled.line.value
    if np.any(y0 == lam):
        raise ValueError("initial configuration sits exactly on the line")
    sides = [Side.TOP if y > lam else Side.BOTTOM for y in y0]

    reg = compiled.registry
    test = _test_particle(reg)
    sl = reg.coord_slice(test.id)
    final = compiled.intervals[-1]
    table = final.wf.at(compiled.t1)
    near = np.ones((Q1.shape[0], len(final.wf.branches)), dtype=bool)
    for d in range(sl.start, sl.stop):
        near &= (
            np.abs(Q1[:, d][:, None] - table.center[None, :, d])
            <= proximity_sigmas * table.sigma[None, :, d]
        )
    n_hits = near.sum(axis=1)
    hit_index = np.argmax(near, axis=1)

    threshold = compiled.flag_threshold
    pc = compiled.pointer_coord

    records = []
    for i in range(Q1.shape[0]):
        if aborted[i]:
            records.append(
                OutcomeRecord(
                    Endpoint.NONE, Flag.UNSET, int(crossings[i]), sides[i],
                    compiled.conversion_time, aborted=True,
                )
            )
            continue
        if n_hits[i] == 1:
            path = final.paths[int(hit_index[i])]
            endpoint = Endpoint.A_PRIME if path == "A" else Endpoint.B_PRIME
        else:
            endpoint = Endpoint.NONE
        if threshold is None or pc is None:
            flag = Flag.UNSET
        else:
            flag = Flag.YES if Q1[i, pc] > threshold else Flag.NO
        records.append(
            OutcomeRecord(
                endpoint=endpoint,
                flag=flag,
                l_crossings=int(crossings[i]),
                initial_side=sides[i],
                conversion_time_used=compiled.conversion_time,
            )
        )
    return records


def classify_batch(
    batch, compiled: CompiledScenario, proximity_sigmas: float = 3.0
) -> list[OutcomeRecord]:
    """Classify every trajectory of a finished batch; see classify_outcome."""
    if abs(batch.times[-1] - compiled.t1) > 1e-9:
        raise ValueError("batch was not integrated to t1")
    crossings = (
        batch.line_crossings
        if batch.line_crossings is not None
        else np.zeros(len(batch), dtype=int)
    )
    return _classify_core(
        compiled,
        batch.points[:, 0, compiled.line.coord_index],
        batch.points[:, -1, :],
        crossings,
        batch.aborted,
        proximity_sigmas,
    )


def classify_outcome(
    traj: Trajectory, compiled: CompiledScenario, proximity_sigmas: float = 3.0
) -> OutcomeRecord:
    """Score one integrated trajectory against the compiled geometry.

    The endpoint is the branch whose packet the test particle sits in at t1
    (within ``proximity_sigmas`` per coordinate), mapped through that
    branch's path tag; the flag compares the pointer coordinate against half
    the realized pointer displacement; crossings were counted during
    integration with a hysteresis band.  An endpoint of NONE marks an
    aborted or ambiguous trajectory, which is reported rather than dropped.
    """
    if not traj.aborted and abs(traj.times[-1] - compiled.t1) > 1e-9:
        raise ValueError("trajectory was not integrated to t1")
    crossings = np.array([traj.line_crossings or 0])
    return _classify_core(
        compiled,
        traj.points[0, compiled.line.coord_index][None],
        traj.points[-1][None, :],
        crossings,
        np.array([traj.aborted]),
        proximity_sigmas,
    )[0]


def with_conversion_time(spec: ScenarioSpec, tc: float) -> ScenarioSpec:
    """Reschedule the pointer-conversion event; everything else is unchanged."""
    events = []
    found = False
    for e in spec.events:
        if e.kind is EventKind.SPIN_POINTER_CONVERSION:
            events.append(UnitaryEvent(float(tc), e.kind, e.params))
            found = True
        else:
            events.append(e)
    if not found:
        raise ScenarioValidationError("scenario schedules no spin_pointer_conversion event")
    events.sort(key=lambda e: e.time)
    out = replace(spec, events=tuple(events), conversion_time=float(tc))
    validate_scenario(out)
    return out
