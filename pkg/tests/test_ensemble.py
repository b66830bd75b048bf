"""Sampling, equivariance statistics, comparisons and reproducibility."""

import math

import numpy as np
import pytest
from scipy import stats

from bohmsim.ensemble import (
    SamplingPlan,
    build_report,
    delayed_choice_flip_test,
    equivariance_check,
    integrate_ensemble,
    no_signaling_compare,
    run_ensemble,
    sample_initial,
)
from bohmsim.packets import (
    Branch,
    GaussianPacket,
    Particle,
    ParticleRegistry,
    SpinLabel,
    WaveFunction,
)
from bohmsim.scenarios import Endpoint, Flag, builtin_scenario, compile_scenario

from oracles import biased_gaussian_samples


def single_gaussian_wf(center=1.0, sigma0=2.0):
    reg = ParticleRegistry((Particle("P", 1.0, 1, True),))
    return WaveFunction(
        reg, (Branch(1.0 + 0j, (GaussianPacket(center, 0.0, sigma0),), {"P": SpinLabel.UP_X}),)
    )


class TestSampling:
    def test_mean_within_clt_bound(self):
        n = 10_000
        wf = single_gaussian_wf(center=1.0, sigma0=2.0)
        qs = sample_initial(wf, SamplingPlan(n, 7))
        assert abs(qs.mean() - 1.0) < 4 * 2.0 / math.sqrt(n)

    def test_ks_against_analytic_cdf(self):
        n = 10_000
        wf = single_gaussian_wf(center=-0.5, sigma0=1.5)
        qs = sample_initial(wf, SamplingPlan(n, 11))[:, 0]
        ks = stats.kstest(qs, lambda x: stats.norm.cdf(x, loc=-0.5, scale=1.5))
        assert ks.statistic < 1.63 / math.sqrt(n)

    def test_every_sample_has_support(self):
        compiled = compile_scenario(builtin_scenario("EXP3"))
        wf = compiled.wavefunction_at(0.0)
        qs = sample_initial(wf, SamplingPlan(500, 3), 0.0)
        assert np.all(wf.at(0.0).density(qs) > 0.0)

    def test_split_state_fills_both_branches(self):
        compiled = compile_scenario(builtin_scenario("EXP1"))
        qs = sample_initial(compiled.wavefunction_at(0.0), SamplingPlan(2000, 5), 0.0)
        top = np.sum(qs[:, 1] > 0)
        assert abs(top - 1000) < 4 * math.sqrt(2000 * 0.25)

    def test_deterministic_and_extensible_in_n(self):
        wf = single_gaussian_wf()
        a = sample_initial(wf, SamplingPlan(50, 123))
        b = sample_initial(wf, SamplingPlan(50, 123))
        c = sample_initial(wf, SamplingPlan(80, 123))
        assert np.array_equal(a, b)
        assert np.array_equal(a, c[:50])

    def test_antithetic_mirrors_pairs(self):
        wf = single_gaussian_wf(center=1.0, sigma0=2.0)
        qs = sample_initial(wf, SamplingPlan(10, 9, antithetic=True))
        for k in range(5):
            assert qs[2 * k, 0] - 1.0 == pytest.approx(-(qs[2 * k + 1, 0] - 1.0))

    def test_rejects_unnormalized_state(self):
        reg = ParticleRegistry((Particle("P", 1.0, 1, True),))
        b = Branch(1.0 + 0j, (GaussianPacket(0.0, 0.0, 1.0),), {"P": SpinLabel.UP_X})
        wf = WaveFunction(reg, (b, b))
        with pytest.raises(ValueError, match="not normalized"):
            sample_initial(wf, SamplingPlan(10, 1))

    def test_rejection_path_matches_exact_density(self):
        # two same-spin branches 3 sigma apart interfere; branch+Gaussian
        # sampling would be wrong, the rejection path must kick in
        reg = ParticleRegistry((Particle("P", 1.0, 1, True),))
        amp = 1.0 / math.sqrt(2.0 * (1.0 + math.exp(-9.0 / 8.0)))
        wf = WaveFunction(
            reg,
            (
                Branch(amp, (GaussianPacket(-1.5, 0.0, 1.0),), {"P": SpinLabel.UP_X}),
                Branch(amp, (GaussianPacket(+1.5, 0.0, 1.0),), {"P": SpinLabel.UP_X}),
            ),
        )
        n = 20_000
        qs = sample_initial(wf, SamplingPlan(n, 17))[:, 0]
        xs = np.linspace(-8, 8, 4001)
        rho = wf.at(0.0).density(xs[:, None])
        cdf = np.concatenate([[0.0], np.cumsum((rho[1:] + rho[:-1]) / 2 * np.diff(xs))])
        cdf /= cdf[-1]
        ks = stats.kstest(qs, lambda x: np.interp(x, xs, cdf))
        assert ks.statistic < 1.63 / math.sqrt(n)


class TestEquivariance:
    def test_passes_at_sampling_time(self):
        compiled = compile_scenario(builtin_scenario("EXP1"))
        wf = compiled.wavefunction_at(0.0)
        for seed in (1, 2, 3):
            qs = sample_initial(wf, SamplingPlan(4000, seed), 0.0)
            stat = equivariance_check(qs[:, 1], wf, 0.0, 1)
            assert stat.p_value > 0.01

    def test_biased_sampler_detected(self):
        wf = single_gaussian_wf(center=0.0, sigma0=2.0)
        rng = np.random.default_rng(0)
        bad = biased_gaussian_samples(rng, 10_000, 0.0, 2.0, inflate=1.5)
        stat = equivariance_check(bad, wf, 0.0, 0)
        assert stat.p_value < 1e-4

    def test_too_few_samples_rejected_with_requirement(self):
        wf = single_gaussian_wf()
        with pytest.raises(ValueError, match="at least 40"):
            equivariance_check(np.zeros(30), wf, 0.0, 0)

    def test_expected_counts_at_least_twenty(self):
        wf = single_gaussian_wf()
        qs = sample_initial(wf, SamplingPlan(200, 2))[:, 0]
        stat = equivariance_check(qs, wf, 0.0, 0, bins=50)
        assert all(e >= 20.0 for e in stat.expected)
        assert sum(stat.observed) == 200


class TestRunEnsemble:
    def test_counts_cover_everything_not_aborted(self):
        compiled = compile_scenario(builtin_scenario("EXP2", n=60))
        rep = run_ensemble(compiled, SamplingPlan(60, 21), checkpoints=[0.32])
        assert sum(rep.counts.values()) == 60 - rep.aborted_count
        assert len(rep.outcomes) == 60

    def test_reports_identical_across_worker_counts(self):
        compiled = compile_scenario(builtin_scenario("EXP3", n=40))
        reports = [
            run_ensemble(compiled, SamplingPlan(40, 9), checkpoints=[0.64], workers=w)
            for w in (1, 3, 8)
        ]
        assert reports[0] == reports[1] == reports[2]

    def test_checkpoint_outside_span_rejected(self):
        compiled = compile_scenario(builtin_scenario("EXP1", n=10))
        with pytest.raises(ValueError, match="checkpoint"):
            run_ensemble(compiled, SamplingPlan(10, 1), checkpoints=[2.0])

    def test_reliability_violations_zero_for_exp2(self):
        compiled = compile_scenario(builtin_scenario("EXP2", n=150))
        rep = run_ensemble(compiled, SamplingPlan(150, 33))
        assert rep.reliability_violations() == 0
        assert rep.aborted_count == 0


class TestComparisons:
    def test_identical_scenarios_have_zero_delta(self):
        compiled = compile_scenario(builtin_scenario("EXP3", n=50))
        rep1 = run_ensemble(compiled, SamplingPlan(50, 4))
        rep2 = run_ensemble(compiled, SamplingPlan(50, 4))
        cmp = no_signaling_compare(rep1, rep2)
        assert cmp.delta == 0.0
        assert cmp.flip_fraction == 0.0
        assert cmp.passed

    def test_interfere_vs_blocked_flips_every_flag(self):
        plan = SamplingPlan(60, 12)
        rep_i = run_ensemble(
            compile_scenario(builtin_scenario("EXP4", n=60, seed=12)), plan
        )
        rep_b = run_ensemble(
            compile_scenario(builtin_scenario("EXP4", n=60, seed=12, interfere=False)), plan
        )
        cmp = no_signaling_compare(rep_i, rep_b)
        assert cmp.same_seed
        assert cmp.flip_fraction == 1.0

    def test_mismatched_sizes_rejected(self):
        rep1 = run_ensemble(compile_scenario(builtin_scenario("EXP3", n=20)), SamplingPlan(20, 1))
        rep2 = run_ensemble(compile_scenario(builtin_scenario("EXP3", n=30)), SamplingPlan(30, 1))
        with pytest.raises(ValueError, match="differ"):
            no_signaling_compare(rep1, rep2)


class TestFlipTest:
    def test_interfering_flip_is_total(self):
        spec = builtin_scenario("EXP4", n=40)
        res = delayed_choice_flip_test(spec, 0.1, 1.1, SamplingPlan(40, 8))
        assert res.flip_fraction == 1.0
        assert res.n_compared == 40

    def test_equal_times_never_flip(self):
        spec = builtin_scenario("EXP4", n=25)
        res = delayed_choice_flip_test(spec, 1.1, 1.1, SamplingPlan(25, 8))
        assert res.flip_fraction == 0.0

    def test_blocked_variant_never_flips(self):
        spec = builtin_scenario("EXP4", n=40, interfere=False)
        res = delayed_choice_flip_test(spec, 0.1, 1.1, SamplingPlan(40, 8))
        assert res.flip_fraction == 0.0

    def test_bad_ordering_rejected(self):
        spec = builtin_scenario("EXP4", n=10)
        with pytest.raises(ValueError, match="tc_early"):
            delayed_choice_flip_test(spec, 1.1, 0.1, SamplingPlan(10, 8))
