"""Packet evolution, evaluation, norms and event algebra."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bohmsim.packets import (
    Branch,
    EventKind,
    GaussianPacket,
    Particle,
    ParticleRegistry,
    SpinLabel,
    UnitaryEvent,
    UnitaryEventError,
    WaveFunction,
    apply_event,
    gradient_at,
    marginal_density,
    norm,
    packet_evolve,
    packet_overlap,
    spinor_components_at,
)
from bohmsim.scenarios import builtin_scenario, compile_scenario

from oracles import fd_gradient


def single_packet_wf(center=0.0, velocity=0.0, sigma0=1.0, mass=1.0, hbar=1.0):
    reg = ParticleRegistry((Particle("P", mass, 1, True),))
    return WaveFunction(
        registry=reg,
        branches=(Branch(1.0 + 0j, (GaussianPacket(center, velocity, sigma0),), {"P": SpinLabel.UP_X}),),
        hbar=hbar,
    )


class TestPacketEvolve:
    def test_identity_at_birth(self):
        st0 = packet_evolve(GaussianPacket(0.0, 0.0, 1.0), 1.0, 1.0, 0.0)
        assert st0.sigma == 1.0
        assert st0.center == 0.0
        # peak value of a minimal Gaussian
        assert abs(st0.value(0.0)) == pytest.approx((2 * math.pi) ** -0.25)

    def test_spread_after_unit_time(self):
        st1 = packet_evolve(GaussianPacket(0.0, 0.0, 1.0), 1.0, 1.0, 1.0)
        assert st1.sigma == pytest.approx(math.sqrt(1.25), abs=1e-12)

    def test_center_drifts(self):
        st1 = packet_evolve(GaussianPacket(2.0, 3.0, 1.0, birth_time=1.0), 1.0, 1.0, 3.0)
        assert st1.center == pytest.approx(2.0 + 3.0 * 2.0)

    def test_rejects_pre_birth_time(self):
        with pytest.raises(ValueError):
            packet_evolve(GaussianPacket(0.0, 0.0, 1.0, birth_time=1.0), 1.0, 1.0, 0.5)

    @settings(max_examples=25, deadline=None)
    @given(
        sigma0=st.floats(0.3, 4.0),
        v=st.floats(-20.0, 20.0),
        dt=st.floats(0.0, 2.0),
        m=st.floats(0.5, 2.0),
    )
    def test_unit_norm_preserved(self, sigma0, v, dt, m):
        stt = packet_evolve(GaussianPacket(0.0, v, sigma0), m, 1.0, dt)
        xs = np.linspace(stt.center - 14 * stt.sigma, stt.center + 14 * stt.sigma, 6001)
        total = np.trapezoid(np.abs(stt.value(xs)) ** 2, xs)
        assert abs(total - 1.0) < 1e-9

    @settings(max_examples=25, deadline=None)
    @given(
        c1=st.floats(-3.0, 3.0),
        c2=st.floats(-3.0, 3.0),
        v1=st.floats(-5.0, 5.0),
        v2=st.floats(-5.0, 5.0),
        s1=st.floats(0.4, 2.0),
        s2=st.floats(0.4, 2.0),
        t=st.floats(0.0, 1.5),
    )
    def test_overlap_matches_quadrature(self, c1, c2, v1, v2, s1, s2, t):
        p1 = GaussianPacket(c1, v1, s1)
        p2 = GaussianPacket(c2, v2, s2)
        got = packet_overlap(p1, p2, 1.0, 1.0, t)
        st1 = packet_evolve(p1, 1.0, 1.0, t)
        st2 = packet_evolve(p2, 1.0, 1.0, t)
        xs = np.linspace(-40.0, 40.0, 20001)
        want = np.trapezoid(np.conj(st1.value(xs)) * st2.value(xs), xs)
        assert abs(got - want) < 1e-8


class TestSpinorComponents:
    def test_single_branch_peak_product(self):
        reg = ParticleRegistry((Particle("P", 1.0, 2, True),))
        wf = WaveFunction(
            reg,
            (
                Branch(
                    0.5 + 0.5j,
                    (GaussianPacket(1.0, 0.0, 1.0), GaussianPacket(-2.0, 0.0, 2.0)),
                    {"P": SpinLabel.UP_X},
                ),
            ),
        )
        comps = spinor_components_at(wf, np.array([1.0, -2.0]), 0.0)
        assert len(comps) == 1
        peak = (2 * math.pi) ** -0.25 * (2 * math.pi * 4) ** -0.25
        (val,) = comps.values()
        assert val == pytest.approx((0.5 + 0.5j) * peak)

    def test_flag_state_has_two_separate_assignments(self):
        # The two-branch state after the flag correlation: both assignments
        # present at a point in the crossing region, never cross-summed.
        compiled = compile_scenario(builtin_scenario("EXP2", n=10))
        t = compiled.t_cross
        wf = compiled.wavefunction_at(t)
        table = wf.at(t)
        f_mid = 0.5 * (table.center[0, 2] + table.center[1, 2])
        Q = np.array([compiled.spec.geometry.I[0], 0.0, f_mid])
        comps = spinor_components_at(wf, Q, t)
        assert len(comps) == 2
        assert all(abs(v) > 0.0 for v in comps.values())
        vals = wf.at(t).branch_values(Q[None, :])
        for asgn, got in comps.items():
            bi = [i for i, b in enumerate(wf.branches) if b.spins == asgn]
            assert got == pytest.approx(complex(vals[bi[0], 0]))

    def test_far_outside_support_decays(self):
        wf = single_packet_wf(sigma0=1.0)
        comps = spinor_components_at(wf, np.array([15.0]), 0.0)
        (val,) = comps.values()
        assert abs(val) < 1e-20

    def test_dimension_mismatch_rejected(self):
        wf = single_packet_wf()
        with pytest.raises(ValueError):
            spinor_components_at(wf, np.array([0.0, 1.0]), 0.0)


class TestGradient:
    def test_zero_at_center_of_stationary_packet(self):
        wf = single_packet_wf()
        grads = gradient_at(wf, np.array([0.0]), 0.0)
        (g,) = grads.values()
        assert abs(g[0]) < 1e-14

    def test_moving_packet_phase_gradient(self):
        v, m, hbar = 3.0, 1.0, 1.0
        wf = single_packet_wf(velocity=v, mass=m, hbar=hbar)
        Q = np.array([0.0])
        (g,) = gradient_at(wf, Q, 0.0).values()
        (val,) = spinor_components_at(wf, Q, 0.0).values()
        assert np.imag(np.conj(val) * g[0]) / abs(val) ** 2 == pytest.approx(m * v / hbar)

    def test_matches_finite_differences(self):
        compiled = compile_scenario(builtin_scenario("EXP3", n=10))
        t = 0.31
        wf = compiled.wavefunction_at(t)
        rng = np.random.default_rng(5)
        table = wf.at(t)
        for bi in range(2):
            Q = table.center[bi] + rng.uniform(-1.5, 1.5, size=3)
            ana = gradient_at(wf, Q, t)
            fd = fd_gradient(wf, Q, t, 1e-6 * compiled.spec.geometry.sigma0)
            for asgn in ana:
                scale = np.linalg.norm(ana[asgn])
                if scale < 1e-12:
                    continue
                assert np.linalg.norm(ana[asgn] - fd[asgn]) / scale < 1e-6

    def test_crossing_state_gradient_antisymmetry(self):
        # Mirror symmetry of the two-branch crossing state: the gradient of
        # the top assignment at -y equals minus the bottom assignment's at +y.
        compiled = compile_scenario(builtin_scenario("EXP1", n=10))
        t = compiled.t_cross / 2.0
        wf = compiled.wavefunction_at(t)
        up = next(a for a in wf.at(t).assignments if dict(a)["P"] is SpinLabel.UP_X)
        down = next(a for a in wf.at(t).assignments if dict(a)["P"] is SpinLabel.DOWN_X)
        x = compiled.spec.geometry.I[0] * 0.5
        scale = max(
            np.abs(gradient_at(wf, np.array([x, y]), t)[up]).max() for y in (4.0, -4.0)
        )
        for y in (0.5, 2.0, 4.0, 7.0):
            g_up = gradient_at(wf, np.array([x, -y]), t)[up]
            g_dn = gradient_at(wf, np.array([x, +y]), t)[down]
            # d/dy picks up a sign under reflection, d/dx does not
            assert abs(g_up[0] - g_dn[0]) / scale < 1e-10
            assert abs(g_up[1] + g_dn[1]) / scale < 1e-10


class TestNorm:
    def test_single_unit_branch(self):
        assert norm(single_packet_wf()) == pytest.approx(1.0, abs=1e-12)

    def test_split_state_normalized(self):
        compiled = compile_scenario(builtin_scenario("EXP1", n=10))
        wf = compiled.wavefunction_at(0.0)
        assert len(wf.branches) == 2
        assert norm(wf) == pytest.approx(1.0, abs=1e-9)

    def test_same_spin_duplicate_is_not_normalized(self):
        reg = ParticleRegistry((Particle("P", 1.0, 1, True),))
        b = Branch(1 / math.sqrt(2), (GaussianPacket(0.0, 0.0, 1.0),), {"P": SpinLabel.UP_X})
        wf = WaveFunction(reg, (b, b))
        assert norm(wf) == pytest.approx(math.sqrt(2.0), abs=1e-9)

    def test_norm_time_independent(self):
        compiled = compile_scenario(builtin_scenario("EXP3", n=10))
        for t in (0.0, 0.3, 0.9, 1.28):
            wf = compiled.wavefunction_at(t)
            assert norm(wf, t) == pytest.approx(1.0, abs=1e-9)


class TestMarginalDensity:
    def test_matches_quadrature_on_split_state(self):
        compiled = compile_scenario(builtin_scenario("EXP1", n=10))
        t = 0.4
        wf = compiled.wavefunction_at(t)
        ys = np.linspace(-30, 30, 7)
        got = marginal_density(wf, 1, ys, t)
        xs = np.linspace(-40, 60, 4001)
        table = wf.at(t)
        for yi, y in enumerate(ys):
            pts = np.stack([xs, np.full_like(xs, y)], axis=1)
            want = np.trapezoid(table.density(pts), xs)
            assert got[yi] == pytest.approx(want, rel=1e-9, abs=1e-300)

    def test_integrates_to_one(self):
        compiled = compile_scenario(builtin_scenario("EXP2", n=10))
        t = 0.8
        wf = compiled.wavefunction_at(t)
        ys = np.linspace(-40, 40, 4001)
        rho = marginal_density(wf, 1, ys, t)
        assert np.trapezoid(rho, ys) == pytest.approx(1.0, abs=1e-9)


class TestEvents:
    def test_splitter_creates_equal_amplitude_spin_pair(self):
        spec = builtin_scenario("EXP1", n=10)
        compiled = compile_scenario(spec)
        wf0 = compiled.intervals[0].wf
        wf1 = compiled.intervals[1].wf
        assert len(wf0.branches) == 1 and len(wf1.branches) == 2
        amps = sorted(b.amp.real for b in wf1.branches)
        assert amps == pytest.approx([1 / math.sqrt(2)] * 2)
        spins = {b.spin("P") for b in wf1.branches}
        assert spins == {SpinLabel.UP_X, SpinLabel.DOWN_X}
        g = spec.geometry
        up = next(b for b in wf1.branches if b.spin("P") is SpinLabel.UP_X)
        assert up.packets[1].center == pytest.approx(g.A[1])
        assert up.packets[1].velocity == pytest.approx(-g.u)
        assert norm(wf1) == pytest.approx(1.0, abs=1e-9)

    def test_splitter_requires_single_branch(self):
        compiled = compile_scenario(builtin_scenario("EXP1", n=10))
        wf1 = compiled.wavefunction_at(0.0)
        ev = compiled.resolved_events[0]
        with pytest.raises(UnitaryEventError):
            apply_event(wf1, UnitaryEvent(0.0, EventKind.SPLITTER, ev.params))

    def test_coupling_flips_only_bottom_path(self):
        compiled = compile_scenario(builtin_scenario("EXP3", n=10))
        pre = compiled.intervals[1].wf
        post = compiled.intervals[2].wf
        for b in pre.branches:
            assert b.spin("M") is SpinLabel.UP_X
        for b in post.branches:
            want = SpinLabel.DOWN_X if b.spin("P") is SpinLabel.DOWN_X else SpinLabel.UP_X
            assert b.spin("M") is want

    def test_coupling_on_overlapping_centers_rejected(self):
        compiled = compile_scenario(builtin_scenario("EXP1", n=10))
        wf = compiled.wavefunction_at(0.0)
        ev = UnitaryEvent(
            compiled.t_cross,
            EventKind.PATH_SPIN_COUPLING,
            {"axis_index": 1, "line_value": 0.0, "side": "bottom",
             "spin_particle": "P", "sigma_ref": 2.0},
        )
        with pytest.raises(UnitaryEventError, match="ambiguous"):
            apply_event(wf, ev)

    def test_conversion_kicks_only_down_branch(self):
        compiled = compile_scenario(builtin_scenario("EXP2", n=10))
        t_c = compiled.conversion_time
        pre = compiled.wavefunction_at(t_c - 1e-6)
        post = compiled.wavefunction_at(t_c)
        kick = next(
            float(e.params["kick_velocity"])
            for e in compiled.resolved_events
            if e.kind is EventKind.SPIN_POINTER_CONVERSION
        )
        for b_pre, b_post in zip(pre.branches, post.branches):
            dv = b_post.packets[2].velocity - b_pre.packets[2].velocity
            want = kick if b_pre.spin("P") is SpinLabel.DOWN_X else 0.0
            assert dv == pytest.approx(want)
        # the kick is a pure boost: the state is unchanged pointwise in density
        Q = np.random.default_rng(0).normal(size=(50, 3)) * 3.0
        assert np.allclose(pre.at(t_c).density(Q), post.at(t_c).density(Q), rtol=1e-12)

    def test_zero_deflection_is_identity(self):
        compiled = compile_scenario(builtin_scenario("EXP1", n=10))
        wf = compiled.wavefunction_at(0.3)
        ev = UnitaryEvent(
            0.3,
            EventKind.DEFLECT,
            {"axis_index": 1, "line_value": 0.0, "dv_top": 0.0, "dv_bottom": 0.0,
             "sigma_ref": 2.0},
        )
        assert apply_event(wf, ev) is wf

    def test_velocity_rebase_is_exact_continuation(self):
        # Kick a packet mid-flight and check the state agrees pointwise with
        # the boosted original at the event time and stays a solution after.
        from bohmsim.packets import _with_velocity

        p = GaussianPacket(1.0, 2.0, 1.3, birth_time=0.0, phase=0.4)
        t_e, dv, m, hbar = 0.7, 3.5, 1.0, 1.0
        p2 = _with_velocity(p, p.velocity + dv, t_e, m, hbar)
        xs = np.linspace(-8, 12, 2001)
        before = packet_evolve(p, m, hbar, t_e).value(xs)
        boosted = before * np.exp(1j * m * dv * xs / hbar)
        after = packet_evolve(p2, m, hbar, t_e).value(xs)
        assert np.max(np.abs(after - boosted)) < 1e-12
        # unit norm still holds later
        late = packet_evolve(p2, m, hbar, t_e + 1.0)
        grid = np.linspace(late.center - 14 * late.sigma, late.center + 14 * late.sigma, 4001)
        assert np.trapezoid(np.abs(late.value(grid)) ** 2, grid) == pytest.approx(1.0, abs=1e-9)

    def test_norm_preserved_across_every_builtin_event(self):
        for name in ("EXP1", "EXP2", "EXP3", "EXP4"):
            compiled = compile_scenario(builtin_scenario(name, n=10))
            for iv in compiled.intervals:
                assert abs(norm(iv.wf, iv.t_start) - 1.0) < 1e-9
