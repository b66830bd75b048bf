"""Branch-sum Gaussian wave functions and the impulsive events that reshape them.

A state is a finite list of branches.  Each branch is a complex amplitude
times a product of one-dimensional Gaussian packets (one per registered
spatial coordinate) times an x-spin label for every spin-carrying particle.
Free evolution of a Gaussian packet has a closed form, so the state between
events is evaluated analytically with no grid and no time stepping.  Events
(beam splitting, path-conditioned spin flips, pointer kicks, deflections)
act instantaneously between free-flight intervals and map the family onto
itself exactly.

Conventions: a packet born at ``birth_time`` with minimal width ``width0``
and velocity ``v`` evaluates at time ``t`` as::

    phi(x) = (2 pi s0^2)^(-1/4) alpha^(-1/2)
             * exp(-(x - c)^2 / (4 s0^2 alpha) + i k (x - c) + i theta)

with ``tau = hbar (t - birth) / (2 m s0^2)``, ``alpha = 1 + i tau``,
``c = center + v (t - birth)``, ``k = m v / hbar`` and global phase
``theta = phase + m v^2 (t - birth) / (2 hbar)``.  The evolved width is
``sigma(t) = s0 sqrt(1 + tau^2)`` and the norm stays exactly 1.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "SpinLabel",
    "Particle",
    "ParticleRegistry",
    "GaussianPacket",
    "PacketState",
    "Branch",
    "WaveFunction",
    "StateTable",
    "EventKind",
    "UnitaryEvent",
    "UnitaryEventError",
    "packet_evolve",
    "packet_overlap",
    "spinor_components_at",
    "gradient_at",
    "norm",
    "marginal_density",
    "apply_event",
]

_AXES = "xyzw"

NORM_TOL = 1e-9


class SpinLabel(enum.Enum):
    """x-spin index carried by a branch for one spin-bearing particle."""

    UP_X = "up_x"
    DOWN_X = "down_x"

    def flipped(self) -> "SpinLabel":
        return SpinLabel.DOWN_X if self is SpinLabel.UP_X else SpinLabel.UP_X


@dataclass(frozen=True)
class Particle:
    """One registered particle: mass, number of modeled coordinates, spin flag."""

    id: str
    mass: float = 1.0
    n_coords: int = 0
    has_spin: bool = False


@dataclass(frozen=True)
class ParticleRegistry:
    """Declares the particles and fixes the configuration-space layout.

    Coordinates are laid out in declaration order; a particle with two
    coordinates named ``P`` owns columns ``p_x`` and ``p_y``.
    """

    particles: tuple[Particle, ...]

    def __post_init__(self):
        ids = [p.id for p in self.particles]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate particle ids: {ids}")
        for p in self.particles:
            if p.mass <= 0:
                raise ValueError(f"particle {p.id}: mass must be > 0, got {p.mass}")
            if p.n_coords < 0:
                raise ValueError(f"particle {p.id}: n_coords must be >= 0")

    @property
    def dim(self) -> int:
        return sum(p.n_coords for p in self.particles)

    @property
    def coord_names(self) -> tuple[str, ...]:
        names = []
        for p in self.particles:
            for i in range(p.n_coords):
                names.append(f"{p.id.lower()}_{_AXES[i]}")
        return tuple(names)

    @property
    def coord_masses(self) -> np.ndarray:
        return np.array(
            [p.mass for p in self.particles for _ in range(p.n_coords)], dtype=float
        )

    @property
    def spin_ids(self) -> tuple[str, ...]:
        return tuple(p.id for p in self.particles if p.has_spin)

    def particle(self, pid: str) -> Particle:
        for p in self.particles:
            if p.id == pid:
                return p
        raise KeyError(f"unknown particle id {pid!r}")

    def coord_slice(self, pid: str) -> slice:
        start = 0
        for p in self.particles:
            if p.id == pid:
                return slice(start, start + p.n_coords)
            start += p.n_coords
        raise KeyError(f"unknown particle id {pid!r}")

    def coord_owner(self, index: int) -> Particle:
        start = 0
        for p in self.particles:
            if start <= index < start + p.n_coords:
                return p
            start += p.n_coords
        raise IndexError(f"coordinate index {index} out of range")


@dataclass(frozen=True)
class GaussianPacket:
    """Free Gaussian packet for one coordinate, minimal at its birth time."""

    center: float
    velocity: float
    width0: float
    birth_time: float = 0.0
    phase: float = 0.0

    def __post_init__(self):
        if not (self.width0 > 0):
            raise ValueError(f"width0 must be > 0, got {self.width0}")
        for name in ("center", "velocity", "birth_time", "phase"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")


@dataclass(frozen=True)
class PacketState:
    """A packet frozen at one time: everything needed to evaluate it."""

    center: float          # envelope center c(t)
    k: float               # carrier wavenumber m v / hbar
    a: complex             # 1 / (4 sigma0^2 alpha)
    sigma0: float
    sigma: float           # evolved width sigma(t)
    log_pref: complex      # log prefactor including global phase

    def value(self, x):
        x = np.asarray(x, dtype=float)
        d = x - self.center
        return np.exp(self.log_pref - self.a * d * d + 1j * self.k * d)

    def dlog(self, x):
        """Logarithmic derivative phi'(x)/phi(x)."""
        x = np.asarray(x, dtype=float)
        return -2.0 * self.a * (x - self.center) + 1j * self.k


def packet_evolve(p: GaussianPacket, m: float, hbar: float, t: float) -> PacketState:
    """Evolve a free packet analytically to time ``t``.

    Exact solution of the free-particle linear wave dynamics: the center
    drifts at the packet velocity, the complex width parameter picks up the
    standard dispersion factor, and the norm is preserved.
    """
    if m <= 0:
        raise ValueError(f"mass must be > 0, got {m}")
    if t < p.birth_time:
        raise ValueError(f"t={t} precedes packet birth time {p.birth_time}")
    dt = t - p.birth_time
    tau = hbar * dt / (2.0 * m * p.width0**2)
    alpha = 1.0 + 1j * tau
    theta = p.phase + m * p.velocity**2 * dt / (2.0 * hbar)
    log_pref = (
        -0.25 * math.log(2.0 * math.pi * p.width0**2)
        - 0.5 * np.log(alpha)
        + 1j * theta
    )
    return PacketState(
        center=p.center + p.velocity * dt,
        k=m * p.velocity / hbar,
        a=1.0 / (4.0 * p.width0**2 * alpha),
        sigma0=p.width0,
        sigma=p.width0 * math.sqrt(1.0 + tau * tau),
        log_pref=log_pref,
    )


def packet_overlap(
    p1: GaussianPacket, p2: GaussianPacket, m: float, hbar: float, t: float
) -> complex:
    """Analytic overlap integral <phi1|phi2> of two evolved packets at time t.

    Both integrands are Gaussians with complex quadratic exponents, so the
    integral is a single closed-form Gaussian integral.  For packets with a
    common birth time the result is time independent (free evolution is
    unitary); evaluating at an explicit ``t`` keeps the formula total.
    """
    s1 = packet_evolve(p1, m, hbar, t)
    s2 = packet_evolve(p2, m, hbar, t)
    a1c = np.conj(s1.a)
    A = a1c + s2.a
    B = 2.0 * a1c * s1.center + 2.0 * s2.a * s2.center + 1j * (s2.k - s1.k)
    C = (
        -a1c * s1.center**2
        - s2.a * s2.center**2
        + 1j * (s1.k * s1.center - s2.k * s2.center)
    )
    return complex(
        np.sqrt(np.pi / A)
        * np.exp(B * B / (4.0 * A) + C + np.conj(s1.log_pref) + s2.log_pref)
    )


def _normalize_spins(spins) -> tuple[tuple[str, SpinLabel], ...]:
    if isinstance(spins, Mapping):
        items = spins.items()
    else:
        items = spins
    return tuple(sorted((str(k), SpinLabel(v)) for k, v in items))


@dataclass(frozen=True)
class Branch:
    """One product term: amplitude x coordinate packets x spin labels."""

    amp: complex
    packets: tuple[GaussianPacket, ...]
    spins: tuple[tuple[str, SpinLabel], ...]

    def __post_init__(self):
        if not (math.isfinite(self.amp.real) and math.isfinite(self.amp.imag)):
            raise ValueError("branch amplitude must be finite")
        object.__setattr__(self, "packets", tuple(self.packets))
        object.__setattr__(self, "spins", _normalize_spins(self.spins))

    def spin(self, pid: str) -> SpinLabel:
        for k, v in self.spins:
            if k == pid:
                return v
        raise KeyError(f"branch carries no spin label for {pid!r}")

    def with_spin(self, pid: str, label: SpinLabel) -> "Branch":
        spins = tuple((k, label if k == pid else v) for k, v in self.spins)
        return replace(self, spins=spins)


@dataclass(frozen=True)
class WaveFunction:
    """Finite branch sum over a fixed particle registry."""

    registry: ParticleRegistry
    branches: tuple[Branch, ...]
    hbar: float = 1.0

    def __post_init__(self):
        if not self.branches:
            raise ValueError("wave function needs at least one branch")
        if self.hbar <= 0:
            raise ValueError("hbar must be > 0")
        object.__setattr__(self, "branches", tuple(self.branches))
        dim = self.registry.dim
        spin_ids = set(self.registry.spin_ids)
        for b in self.branches:
            if len(b.packets) != dim:
                raise ValueError(
                    f"branch has {len(b.packets)} packets, registry dimension is {dim}"
                )
            if {k for k, _ in b.spins} != spin_ids:
                raise ValueError(
                    f"branch spin ids {sorted(k for k, _ in b.spins)} do not match "
                    f"registry spin ids {sorted(spin_ids)}"
                )

    def at(self, t: float) -> "StateTable":
        return StateTable(self, t)

    def earliest_time(self) -> float:
        return max(p.birth_time for b in self.branches for p in b.packets)


class StateTable:
    """A wave function frozen at one time, vectorized over branches and coords.

    Precomputes per-(branch, coordinate) packet parameters so that batched
    evaluation over many configuration points is a handful of array ops.
    """

    def __init__(self, wf: WaveFunction, t: float):
        self.wf = wf
        self.t = float(t)
        reg = wf.registry
        B, D = len(wf.branches), reg.dim
        masses = reg.coord_masses
        self.dim = D
        self.masses = masses
        self.hbar = wf.hbar
        self.amp = np.array([b.amp for b in wf.branches], dtype=complex)
        self.center = np.empty((B, D))
        self.k = np.empty((B, D))
        self.a = np.empty((B, D), dtype=complex)
        self.sigma = np.empty((B, D))
        self.log_pref = np.zeros(B, dtype=complex)
        for bi, b in enumerate(wf.branches):
            for d, pkt in enumerate(b.packets):
                st = packet_evolve(pkt, masses[d], wf.hbar, t)
                self.center[bi, d] = st.center
                self.k[bi, d] = st.k
                self.a[bi, d] = st.a
                self.sigma[bi, d] = st.sigma
                self.log_pref[bi] += st.log_pref
        # Branches sharing a joint spin assignment add coherently; distinct
        # assignments never interfere.
        groups: dict[tuple, list[int]] = {}
        for bi, b in enumerate(wf.branches):
            groups.setdefault(b.spins, []).append(bi)
        self.assignments = tuple(groups.keys())
        self.groups = tuple(np.array(ix) for ix in groups.values())
        # With one branch per assignment there are no coherent cross terms and
        # density/current evaluate in real arithmetic; precompute the pieces.
        self.all_single = all(ix.size == 1 for ix in self.groups)
        if self.all_single:
            self._re_a2 = 2.0 * np.real(self.a)              # (B, D)
            self._im_a2 = -2.0 * np.imag(self.a)             # (B, D)
            self._log_w = 2.0 * np.real(self.log_pref) + 2.0 * np.log(np.abs(self.amp))

    def peak_density(self) -> float:
        """Largest per-branch density peak; sets the vacuum floor scale."""
        peaks = np.abs(self.amp) ** 2 * np.prod(
            1.0 / np.sqrt(2.0 * np.pi * self.sigma**2), axis=1
        )
        return float(peaks.max())

    def _as_points(self, Q) -> tuple[np.ndarray, bool]:
        Q = np.asarray(Q, dtype=float)
        single = Q.ndim == 1
        pts = Q[None, :] if single else Q
        if pts.ndim != 2 or pts.shape[1] != self.dim:
            raise ValueError(
                f"configuration dimension {Q.shape} does not match registry dim {self.dim}"
            )
        if not np.all(np.isfinite(pts)):
            raise ValueError("configuration has non-finite entries")
        return pts, single

    def branch_values(self, pts: np.ndarray) -> np.ndarray:
        """Complex branch values amp_b * prod_d phi_bd(Q_d); shape (B, N)."""
        d = pts[None, :, :] - self.center[:, None, :]
        expo = np.sum(-self.a[:, None, :] * d * d + 1j * self.k[:, None, :] * d, axis=2)
        return self.amp[:, None] * np.exp(self.log_pref[:, None] + expo)

    def branch_dlog(self, pts: np.ndarray) -> np.ndarray:
        """Per-coordinate logarithmic derivatives; shape (B, N, D)."""
        d = pts[None, :, :] - self.center[:, None, :]
        return -2.0 * self.a[:, None, :] * d + 1j * self.k[:, None, :]

    def fields(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Density and current-per-hbar summed over spin assignments.

        Returns ``rho`` with shape (N,) and ``imag(psi* grad psi)`` with shape
        (N, D); the velocity field is ``hbar / m_d`` times the ratio.
        """
        if self.all_single:
            d = pts[None, :, :] - self.center[:, None, :]
            w = np.exp(
                self._log_w[:, None] - np.sum(self._re_a2[:, None, :] * d * d, axis=2)
            )
            rho = w.sum(axis=0)
            im_dlog = self._im_a2[:, None, :] * d + self.k[:, None, :]
            cur = np.einsum("bn,bnd->nd", w, im_dlog)
            return rho, cur
        vals = self.branch_values(pts)
        dlog = self.branch_dlog(pts)
        rho = np.zeros(pts.shape[0])
        cur = np.zeros((pts.shape[0], self.dim))
        for ix in self.groups:
            psi = vals[ix].sum(axis=0)
            grad = np.sum(vals[ix, :, None] * dlog[ix], axis=0)
            rho += np.abs(psi) ** 2
            cur += np.imag(np.conj(psi)[:, None] * grad)
        return rho, cur

    def density(self, pts: np.ndarray) -> np.ndarray:
        if self.all_single:
            d = pts[None, :, :] - self.center[:, None, :]
            w = np.exp(
                self._log_w[:, None] - np.sum(self._re_a2[:, None, :] * d * d, axis=2)
            )
            return w.sum(axis=0)
        vals = self.branch_values(pts)
        rho = np.zeros(pts.shape[0])
        for ix in self.groups:
            rho += np.abs(vals[ix].sum(axis=0)) ** 2
        return rho


def spinor_components_at(wf: WaveFunction, Q, t: float):
    """Coherent amplitude at Q for every distinct joint spin assignment.

    Branches sharing an assignment are summed coherently; assignments are
    reported separately because they never interfere.
    """
    table = wf.at(t)
    pts, single = table._as_points(Q)
    vals = table.branch_values(pts)
    out = {}
    for asgn, ix in zip(table.assignments, table.groups):
        psi = vals[ix].sum(axis=0)
        out[asgn] = complex(psi[0]) if single else psi
    return out


def gradient_at(wf: WaveFunction, Q, t: float):
    """Analytic configuration-space gradient per spin assignment.

    Returns a map from spin assignment to the complex gradient of that
    assignment's coherent amplitude, shape (D,) for a single point or
    (N, D) for a batch.
    """
    table = wf.at(t)
    pts, single = table._as_points(Q)
    vals = table.branch_values(pts)
    dlog = table.branch_dlog(pts)
    out = {}
    for asgn, ix in zip(table.assignments, table.groups):
        grad = np.sum(vals[ix, :, None] * dlog[ix], axis=0)
        out[asgn] = grad[0] if single else grad
    return out


def norm(wf: WaveFunction, t: float | None = None) -> float:
    """Norm of the branch sum via analytic Gaussian overlap integrals.

    Distinct spin assignments contribute orthogonally; within an assignment
    the full coherent Gram matrix is used.  Free evolution is unitary, so
    the result does not depend on the evaluation time.
    """
    if t is None:
        t = wf.earliest_time()
    masses = wf.registry.coord_masses
    total = 0.0
    groups: dict[tuple, list[Branch]] = {}
    for b in wf.branches:
        groups.setdefault(b.spins, []).append(b)
    for group in groups.values():
        for b1 in group:
            for b2 in group:
                ov = np.conj(b1.amp) * b2.amp
                for d in range(wf.registry.dim):
                    ov *= packet_overlap(b1.packets[d], b2.packets[d], masses[d], wf.hbar, t)
                total += ov.real
    return math.sqrt(max(total, 0.0))


def marginal_density(wf: WaveFunction, coord_index: int, xs, t: float) -> np.ndarray:
    """Exact one-coordinate marginal of |psi|^2 at time ``t``.

    All other coordinates are integrated out analytically through pairwise
    packet overlaps, so coherent cross terms between same-spin branches are
    kept.
    """
    reg = wf.registry
    if not 0 <= coord_index < reg.dim:
        raise IndexError(f"coordinate index {coord_index} out of range")
    xs = np.asarray(xs, dtype=float)
    masses = reg.coord_masses
    groups: dict[tuple, list[Branch]] = {}
    for b in wf.branches:
        groups.setdefault(b.spins, []).append(b)
    rho = np.zeros(xs.shape, dtype=complex)
    for group in groups.values():
        for b1 in group:
            for b2 in group:
                coef = np.conj(b1.amp) * b2.amp
                for d in range(reg.dim):
                    if d == coord_index:
                        continue
                    coef *= packet_overlap(b1.packets[d], b2.packets[d], masses[d], wf.hbar, t)
                s1 = packet_evolve(b1.packets[coord_index], masses[coord_index], wf.hbar, t)
                s2 = packet_evolve(b2.packets[coord_index], masses[coord_index], wf.hbar, t)
                rho += coef * np.conj(s1.value(xs)) * s2.value(xs)
    return np.maximum(rho.real, 0.0)


class EventKind(enum.Enum):
    SPLITTER = "splitter"
    PATH_SPIN_COUPLING = "path_spin_coupling"
    SPIN_POINTER_CONVERSION = "spin_pointer_conversion"
    DEFLECT = "deflect"


@dataclass(frozen=True)
class UnitaryEvent:
    """Impulsive unitary applied at a scheduled time.

    ``params`` is kind-specific; scenario compilation resolves geometry into
    the concrete numeric parameters consumed here.
    """

    time: float
    kind: EventKind
    params: Mapping[str, object]

    def __post_init__(self):
        object.__setattr__(self, "params", dict(self.params))


class UnitaryEventError(RuntimeError):
    """Raised when an event cannot be applied to the current state."""


def _with_velocity(
    pkt: GaussianPacket, new_v: float, t_event: float, m: float, hbar: float
) -> GaussianPacket:
    """Rebase a packet after an instantaneous velocity change at ``t_event``.

    A boost multiplies the wave by a position-linear phase; the result is the
    same Gaussian family member with a new carrier, so free evolution after
    the event is reproduced exactly by a packet with the same birth time and
    width, an adjusted center-at-birth, and a compensating phase offset.
    """
    if new_v == pkt.velocity:
        return pkt
    dt = t_event - pkt.birth_time
    c_e = pkt.center + pkt.velocity * dt
    dk = m * (new_v - pkt.velocity) / hbar
    phase = pkt.phase + m * (pkt.velocity**2 - new_v**2) * dt / (2.0 * hbar) + dk * c_e
    return GaussianPacket(
        center=c_e - new_v * dt,
        velocity=new_v,
        width0=pkt.width0,
        birth_time=pkt.birth_time,
        phase=phase,
    )


def _branch_side(
    branch: Branch, coord_index: int, line_value: float, sigma_ref: float, t: float,
    masses: np.ndarray, hbar: float,
) -> int:
    """Which side of a line the branch packet center sits on: +1 top, -1 bottom."""
    pkt = branch.packets[coord_index]
    c = pkt.center + pkt.velocity * (t - pkt.birth_time)
    if abs(c - line_value) <= 1e-9 * max(sigma_ref, 1.0):
        raise UnitaryEventError(
            f"branch packet center {c} sits on the path boundary {line_value} "
            f"at t={t}; path membership is ambiguous"
        )
    return 1 if c > line_value else -1


def apply_event(wf: WaveFunction, e: UnitaryEvent) -> WaveFunction:
    """Apply one impulsive unitary and return the new state.

    The configuration-space density is preserved pointwise by every kind
    (splitting is a spin rotation, the rest are conditional boosts or label
    flips), and the total norm is checked to 1e-9 after application.
    """
    reg = wf.registry
    masses = reg.coord_masses
    t = e.time
    p = e.params
    before = norm(wf, t)

    if e.kind is EventKind.SPLITTER:
        if len(wf.branches) != 1:
            raise UnitaryEventError(
                f"splitter expects a single branch, state has {len(wf.branches)}"
            )
        pid = str(p["particle"])
        if not reg.particle(pid).has_spin:
            raise UnitaryEventError(f"splitter target {pid!r} carries no spin")
        sl = reg.coord_slice(pid)
        src = wf.branches[0]
        scale = complex(p.get("amp_scale", 1.0 / math.sqrt(2.0)))
        new_branches = []
        for out in p["outputs"]:
            packets = list(src.packets)
            for j, (c, v) in zip(range(sl.start, sl.stop), out["coords"]):
                packets[j] = replace(packets[j], center=float(c), velocity=float(v))
            new_branches.append(
                Branch(
                    amp=src.amp * scale,
                    packets=tuple(packets),
                    spins=src.spins,
                ).with_spin(pid, SpinLabel(out["spin"]))
            )
        out_wf = replace(wf, branches=tuple(new_branches))

    elif e.kind is EventKind.PATH_SPIN_COUPLING:
        axis = int(p["axis_index"])
        line_value = float(p["line_value"])
        side = 1 if str(p["side"]) == "top" else -1
        spin_pid = str(p["spin_particle"])
        sigma_ref = float(p.get("sigma_ref", 1.0))
        new_branches = []
        for b in wf.branches:
            s = _branch_side(b, axis, line_value, sigma_ref, t, masses, wf.hbar)
            new_branches.append(b.with_spin(spin_pid, b.spin(spin_pid).flipped()) if s == side else b)
        out_wf = replace(wf, branches=tuple(new_branches))

    elif e.kind is EventKind.SPIN_POINTER_CONVERSION:
        spin_pid = str(p["spin_particle"])
        pointer_pid = str(p["pointer_particle"])
        kick = float(p["kick_velocity"])
        sl = reg.coord_slice(pointer_pid)
        if sl.stop - sl.start != 1:
            raise UnitaryEventError(
                f"pointer particle {pointer_pid!r} must carry exactly one coordinate"
            )
        j = sl.start
        new_branches = []
        for b in wf.branches:
            if b.spin(spin_pid) is SpinLabel.DOWN_X:
                pkt = _with_velocity(
                    b.packets[j], b.packets[j].velocity + kick, t, masses[j], wf.hbar
                )
                packets = list(b.packets)
                packets[j] = pkt
                b = replace(b, packets=tuple(packets))
            new_branches.append(b)
        out_wf = replace(wf, branches=tuple(new_branches))

    elif e.kind is EventKind.DEFLECT:
        axis = int(p["axis_index"])
        line_value = float(p["line_value"])
        dv_top = float(p["dv_top"])
        dv_bottom = float(p["dv_bottom"])
        sigma_ref = float(p.get("sigma_ref", 1.0))
        if dv_top == 0.0 and dv_bottom == 0.0:
            return wf
        new_branches = []
        for b in wf.branches:
            s = _branch_side(b, axis, line_value, sigma_ref, t, masses, wf.hbar)
            dv = dv_top if s > 0 else dv_bottom
            if dv != 0.0:
                pkt = _with_velocity(
                    b.packets[axis], b.packets[axis].velocity + dv, t, masses[axis], wf.hbar
                )
                packets = list(b.packets)
                packets[axis] = pkt
                b = replace(b, packets=tuple(packets))
            new_branches.append(b)
        out_wf = replace(wf, branches=tuple(new_branches))

    else:  # pragma: no cover - enum is closed
        raise UnitaryEventError(f"unknown event kind {e.kind}")

    after = norm(out_wf, t)
    if abs(after - before) > NORM_TOL * max(1.0, before):
        raise UnitaryEventError(
            f"{e.kind.value} at t={t} changed the norm: {before} -> {after}"
        )
    return out_wf
