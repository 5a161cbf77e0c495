import math

import numpy as np
import pytest
from scipy import stats

from nbbm.core import ParticleEnsemble, empirical_cdf, max_radius
from nbbm.sim import (BbmForest, ResourceError, SimParams, advance_bbm, advance_nbbm,
                      coupled_run, killed_survival_density, replica_rng,
                      spherically_ordered_pair, spherically_ordered_pairs,
                      survival_curve)


def origin_ensemble(n, d):
    return ParticleEnsemble(d, np.zeros((n, d)))


class TestAdvanceNbbm:
    def test_population_and_clock(self):
        params = SimParams(dim=2, population=50)
        ens = origin_ensemble(50, 2)
        out, log = advance_nbbm(params, ens, 0.7, replica_rng(1, 0))
        assert out.population == 50
        assert out.clock == pytest.approx(0.7)
        assert len(log.times) == len(log.branching) == len(log.removed)

    def test_zero_duration_identity(self):
        params = SimParams(dim=1, population=10)
        ens = ParticleEnsemble(1, replica_rng(2, 0).standard_normal((10, 1)))
        out, log = advance_nbbm(params, ens, 0.0, replica_rng(2, 1))
        assert np.array_equal(out.positions, ens.positions)
        assert len(log) == 0

    def test_single_particle_marginal(self):
        # with N = 1 every event is a no-op, so the law at t is N(0, 2t I)
        params = SimParams(dim=2, population=1)
        xs = np.array([advance_nbbm(params, origin_ensemble(1, 2), 0.5,
                                    replica_rng(3, rep))[0].positions[0]
                       for rep in range(3000)])
        assert np.abs(xs.mean(axis=0)).max() < 4 * math.sqrt(1.0 / 3000)
        assert np.abs(xs.var(axis=0) - 1.0).max() < 0.1

    def test_event_rate(self):
        # branch events arrive at rate N: mean count over [0, t] is N t
        params = SimParams(dim=1, population=100)
        total = sum(len(advance_nbbm(params, origin_ensemble(100, 1), 2.0,
                                     replica_rng(4, rep))[1])
                    for rep in range(25))
        mean = total / 25
        assert abs(mean - 200.0) < 4 * math.sqrt(200.0 / 25)

    def test_bit_identical_replay(self):
        params = SimParams(dim=3, population=40)
        ens = ParticleEnsemble(3, replica_rng(5, 0).standard_normal((40, 3)))
        a, loga = advance_nbbm(params, ens, 1.0, replica_rng(5, 7))
        b, logb = advance_nbbm(params, ens, 1.0, replica_rng(5, 7))
        assert np.array_equal(a.positions, b.positions)
        assert loga.times == logb.times and loga.removed == logb.removed

    def test_label_exchangeability(self):
        # the removal/relabelling rule is label-symmetric in distribution
        params = SimParams(dim=1, population=6)
        reps = 1500
        norms = np.empty((reps, 6))
        for rep in range(reps):
            out, _ = advance_nbbm(params, origin_ensemble(6, 1), 1.5,
                                  replica_rng(6, rep))
            norms[rep] = out.norms()
        pooled = norms.ravel()
        bins = np.quantile(pooled, np.linspace(0, 1, 7)[1:-1])
        table = np.array([np.histogram(norms[:, k], bins=np.concatenate(
            ([-np.inf], bins, [np.inf])))[0] for k in range(6)])
        _, p, _, _ = stats.chi2_contingency(table)
        assert p > 0.001

    def test_frozen_batch_mode_runs(self):
        params = SimParams(dim=1, population=200, mode="frozen-batch", batch_dt=0.05)
        out, log = advance_nbbm(params, origin_ensemble(200, 1), 1.0, replica_rng(7, 0))
        assert out.population == 200
        assert abs(len(log) - 200) < 4 * math.sqrt(200)

    def test_population_mismatch_rejected(self):
        params = SimParams(dim=1, population=5)
        with pytest.raises(ValueError):
            advance_nbbm(params, origin_ensemble(6, 1), 0.1, replica_rng(8, 0))


class TestAdvanceBbm:
    def test_zero_duration_identity(self):
        f = BbmForest.from_ensemble(origin_ensemble(3, 2))
        out = advance_bbm(SimParams(dim=2, population=3), f, 0.0, replica_rng(9, 0))
        assert out.population == 3
        assert np.array_equal(out.positions, f.positions)

    def test_yule_population_moments(self):
        # population from one ancestor is geometric: mean e^t, var e^2t - e^t
        params = SimParams(dim=1, population=1)
        t = 2.0
        pops = np.array([advance_bbm(params, BbmForest.from_ensemble(
            origin_ensemble(1, 1)), t, replica_rng(10, rep)).population
            for rep in range(2500)])
        mean, var = math.exp(t), math.exp(2 * t) - math.exp(t)
        assert abs(pops.mean() - mean) < 4 * math.sqrt(var / 2500)

    def test_mean_from_m_particles(self):
        params = SimParams(dim=1, population=5)
        t = 1.0
        pops = np.array([advance_bbm(params, BbmForest.from_ensemble(
            origin_ensemble(5, 1)), t, replica_rng(11, rep)).population
            for rep in range(800)])
        mean = 5 * math.exp(t)
        var = 5 * (math.exp(2 * t) - math.exp(t))
        assert abs(pops.mean() - mean) < 4 * math.sqrt(var / 800)

    def test_ulam_harris_labels(self):
        f = BbmForest.from_ensemble(origin_ensemble(2, 1))
        out = advance_bbm(SimParams(dim=1, population=2), f, 3.0, replica_rng(12, 0))
        labels = set(out.labels)
        assert len(labels) == out.population  # prefix-free at a fixed time
        for lab in labels:
            assert lab[0] in (1, 2)
            assert all(c in (1, 2) for c in lab[1:])
            for k in range(1, len(lab)):
                assert lab[:k] not in labels

    def test_population_cap(self):
        f = BbmForest.from_ensemble(origin_ensemble(4, 1))
        with pytest.raises(ResourceError):
            advance_bbm(SimParams(dim=1, population=4), f, 6.0, replica_rng(13, 0),
                        population_cap=20)


class TestCoupledRun:
    def test_domination_and_blue_count(self):
        params = SimParams(dim=2, population=100, record_schedule=(0.5, 1.0, 1.5))
        ens = ParticleEnsemble(2, replica_rng(14, 0).uniform(-1, 1, (100, 2)))
        res = coupled_run(params, ens, 1.5, replica_rng(14, 1))
        assert res.domination_ok
        assert res.reconstruction_ok
        assert all(o.blue_count == 100 for o in res.observations)
        assert all(o.dominated for o in res.observations)
        assert res.blue_final.population == 100

    def test_no_event_window_keeps_initial_labels(self):
        params = SimParams(dim=1, population=10)
        ens = ParticleEnsemble(1, replica_rng(15, 0).standard_normal((10, 1)))
        for rep in range(60):  # condition on no branching by rejection
            res = coupled_run(params, ens, 0.02, replica_rng(15, rep))
            if res.events == 0:
                assert res.forest_final.population == 10
                assert all(len(lab) == 1 for lab in res.forest_final.labels)
                break
        else:
            pytest.fail("no event-free window found (probability ~ 0.8 each)")

    def test_blue_subset_of_forest(self):
        params = SimParams(dim=1, population=30)
        ens = ParticleEnsemble(1, replica_rng(16, 0).standard_normal((30, 1)))
        res = coupled_run(params, ens, 1.0, replica_rng(16, 1))
        assert int(res.forest_final.blue.sum()) == 30
        assert res.forest_final.population >= 30


class TestSphericallyOrderedPairs:
    def test_identical_starts_stay_identical(self):
        x = np.array([0.5, 0.5])
        p, pp, coupled = spherically_ordered_pair(x, x, 1.0,
                                                  np.linspace(0.1, 1.0, 10),
                                                  replica_rng(17, 0))
        assert coupled
        assert np.allclose(p, pp)

    def test_ordering_every_sample_time(self):
        n = 2000
        rng = replica_rng(18, 0)
        x = rng.uniform(-0.3, 0.3, (n, 3))
        xp = x * 4.0
        times = np.linspace(0.05, 1.0, 20)
        p, pp, _ = spherically_ordered_pairs(x, xp, times, rng)
        nr = np.sqrt((p ** 2).sum(-1))
        nrp = np.sqrt((pp ** 2).sum(-1))
        assert np.all(nr <= nrp + 1e-10)

    def test_marginals_brownian(self):
        n = 8000
        x = np.zeros((n, 2))
        xp = np.tile([2.5, 0.0], (n, 1))
        times = np.linspace(1 / 64, 1.0, 64)
        p, pp, _ = spherically_ordered_pairs(x, xp, times, replica_rng(19, 0))
        for arr in (p, pp):
            for coord in range(2):
                inc = arr[:, -1, coord] - arr[:, 0, coord]
                ks = stats.kstest(inc, "norm", args=(0.0, math.sqrt(2.0)))
                assert ks.pvalue > 0.001

    def test_precondition(self):
        with pytest.raises(ValueError):
            spherically_ordered_pair(np.array([2.0, 0.0]), np.array([1.0, 0.0]),
                                     1.0, [0.5, 1.0], replica_rng(20, 0))


class TestKilledSurvival:
    def test_infinite_boundary_exact(self):
        est, se = killed_survival_density(2, [0.1, 0.0], math.inf, 0.75, 500,
                                          replica_rng(21, 0))
        assert est == pytest.approx(math.exp(0.75), rel=1e-12)
        assert se < 1e-6

    def test_short_time_continuity(self):
        est, _ = killed_survival_density(1, [0.0], math.pi / 2, 1e-3, 4000,
                                         replica_rng(22, 0))
        assert est == pytest.approx(1.0, abs=0.01)

    def test_indicator_restriction(self):
        # with A the right half-space and no killing, the estimate is e^t / 2
        est, _ = killed_survival_density(2, [0.0, 0.0], math.inf, 0.5, 20000,
                                         replica_rng(23, 0),
                                         indicator=lambda x: x[:, 0] > 0.0)
        assert est == pytest.approx(0.5 * math.exp(0.5), rel=0.05)

    def test_survival_decay_rate_light(self):
        tg = np.linspace(2.0, 5.0, 7)
        surv = survival_curve(1, [0.0], math.pi / 2, tg, 12000,
                              replica_rng(24, 0), dt=2e-3)
        slope = np.polyfit(tg, np.log(surv), 1)[0]
        assert slope == pytest.approx(-1.0, abs=0.15)
