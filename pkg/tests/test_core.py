import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nbbm.core import (ParticleEnsemble, RadialProfile, empirical_cdf, in_gamma,
                       max_radius, measure_of_set)
from nbbm.experiments import StationarySampler
from nbbm.sim import replica_rng


def ens(points, dim=None):
    arr = np.atleast_2d(np.asarray(points, dtype=float))
    return ParticleEnsemble(dim or arr.shape[1], arr)


# ---------------------------------------------------------------------------
# RadialProfile
# ---------------------------------------------------------------------------

class TestRadialProfile:
    def test_step_convention_pre_jump(self):
        f = RadialProfile.from_jumps([0.5, 1.5], [0.5, 1.0])
        assert f(0.5) == 0.0          # value at the jump is the pre-jump value
        assert f(0.5000001) == 0.5
        assert f(1.5) == 0.5
        assert f(2.0) == 1.0
        assert f(0.0) == 0.0

    def test_constant_beyond_domain_cap(self):
        f = RadialProfile.from_jumps([1.0], [0.7], domain_cap=5.0)
        assert f(4.9) == 0.7
        assert f(1e9) == 0.7

    def test_jump_at_zero_allowed_with_pre_value_zero(self):
        f = RadialProfile.from_jumps([0.0], [1.0])
        assert f(0.0) == 0.0
        assert f(1e-12) == 1.0

    def test_rejects_bad_jumps(self):
        with pytest.raises(ValueError):
            RadialProfile.from_jumps([1.0, 1.0], [0.2, 0.4])
        with pytest.raises(ValueError):
            RadialProfile.from_jumps([1.0, 2.0], [0.5, 0.3])
        with pytest.raises(ValueError):
            RadialProfile.from_jumps([1.0], [1.5])
        with pytest.raises(ValueError):
            RadialProfile.from_jumps([-0.1], [0.5])

    def test_sup_distance_exact_on_steps(self):
        f = RadialProfile.from_jumps([1.0], [1.0])
        g = RadialProfile.from_jumps([2.0], [1.0])
        assert f.sup_distance(g) == 1.0
        assert f.sup_distance(f) == 0.0

    def test_clipped(self):
        f = RadialProfile.from_jumps([0.5, 1.0, 2.0], [0.2, 0.6, 1.0])
        g = f.clipped(0.6)
        assert g(3.0) == 0.6 and g(0.7) == 0.2
        assert f.clipped(1.0) is f
        assert f.clipped(0.0).final_value == 0.0

    def test_csv_round_trip(self):
        f = RadialProfile.from_jumps([0.25, 1.5], [0.5, 1.0], domain_cap=9.0, dim=2)
        g = RadialProfile.from_csv(f.to_csv(), dim=2)
        assert np.array_equal(f.locations, g.locations)
        assert np.array_equal(f.values, g.values)
        assert g.domain_cap == 9.0

    def test_json_round_trip(self):
        f = RadialProfile.from_jumps([0.25, 1.5], [0.5, 1.0], dim=3)
        g = RadialProfile.from_json_obj(json.loads(json.dumps(f.to_json_obj())))
        assert np.array_equal(f.locations, g.locations)
        assert g.dim == 3


# ---------------------------------------------------------------------------
# empirical_cdf
# ---------------------------------------------------------------------------

class TestEmpiricalCdf:
    def test_all_at_origin(self):
        f = empirical_cdf(ens(np.zeros((4, 2))))
        assert f(0.0) == 0.0
        assert f(1e-9) == 1.0 and f(10.0) == 1.0

    def test_two_particles_d1(self):
        f = empirical_cdf(ens([[0.5], [-1.5]]))
        assert np.allclose(f.locations, [0.5, 1.5])
        assert np.allclose(f.values, [0.5, 1.0])

    def test_strict_inequality_at_max(self):
        e = ens([[0.3], [0.9]])
        f = empirical_cdf(e)
        m = max_radius(e)
        assert f(m) < 1.0
        assert f(m + 1e-12) == 1.0

    def test_dkw_uniform_ball(self):
        # ||X|| of uniform(-1, 1) is uniform(0, 1): the sup distance to
        # min(r, 1) exceeds 0.062 with probability <= 2 exp(-2 N eps^2) < 1e-3
        n, failures, reps = 1000, 0, 300
        rng = replica_rng(2024, 0)
        for _ in range(reps):
            u = np.sort(np.abs(rng.uniform(-1.0, 1.0, n)))
            i = np.arange(1, n + 1)
            d_stat = max(np.max(i / n - u), np.max(u - (i - 1) / n))
            failures += d_stat > 0.062
        assert failures <= 15  # 5% of replicas, far above the DKW rate

    def test_output_is_valid_profile(self):
        rng = replica_rng(5, 1)
        f = empirical_cdf(ens(rng.standard_normal((50, 3))))
        assert np.all(np.diff(f.locations) > 0)
        assert np.all(np.diff(f.values) > 0)
        assert f.values[-1] == 1.0


# ---------------------------------------------------------------------------
# max_radius / in_gamma / measure_of_set
# ---------------------------------------------------------------------------

def test_max_radius_examples():
    assert max_radius(ens(np.zeros((3, 2)))) == 0.0
    assert max_radius(ens([[3.0, 4.0], [0.0, 1.0]])) == 5.0


def test_in_gamma_threshold():
    pts = np.zeros((10, 1))
    pts[3:, 0] = 5.0  # 3 particles inside B(1)
    e = ens(pts)
    assert in_gamma(e, 1.0, 0.3)
    assert not in_gamma(e, 1.0, 0.31)
    assert in_gamma(ens(np.zeros((5, 2))), 0.1, 1.0)
    with pytest.raises(ValueError):
        in_gamma(e, 0.0, 0.5)


@settings(max_examples=40, deadline=None)
@given(k1=st.floats(0.1, 5.0), dk=st.floats(0.0, 5.0),
       c1=st.floats(0.01, 1.0), dc=st.floats(0.0, 0.5))
def test_in_gamma_monotone(k1, dk, c1, dc):
    rng = np.random.default_rng(99)
    e = ens(rng.standard_normal((40, 2)))
    c2 = max(c1 - dc, 1e-6)
    if in_gamma(e, k1, c1):
        assert in_gamma(e, k1 + dk, c1)
        assert in_gamma(e, k1, c2)


def test_in_gamma_stationary_support():
    sampler = StationarySampler(1)
    for rep in range(5):
        pts = sampler.sample(200, replica_rng(31, rep))
        e = ens(pts)
        assert max_radius(e) < math.pi / 2
        assert in_gamma(e, math.pi / 2, 1.0)


class TestMeasureOfSet:
    def test_full_space(self):
        e = ens(np.random.default_rng(0).standard_normal((20, 2)))
        assert measure_of_set(e, lambda x: np.ones(len(x), dtype=bool)) == 1.0

    def test_ball_matches_cdf(self):
        e = ens(np.random.default_rng(1).standard_normal((50, 3)))
        f = empirical_cdf(e)
        for r in (0.5, 1.0, 2.0):
            ball = measure_of_set(e, lambda x, r=r: np.einsum("ij,ij->i", x, x) < r * r)
            assert ball == pytest.approx(f(r))

    def test_additive_over_disjoint(self):
        e = ens(np.random.default_rng(2).standard_normal((64, 2)))
        left = measure_of_set(e, lambda x: x[:, 0] > 0.0)
        right = measure_of_set(e, lambda x: x[:, 0] <= 0.0)
        assert left + right == pytest.approx(1.0)

    def test_half_space_of_stationary_cloud(self):
        # U is spherically symmetric, so half-space mass pools to 1/2
        sampler = StationarySampler(2)
        total, m = 0.0, 0
        for rep in range(20):
            pts = sampler.sample(500, replica_rng(7, rep))
            total += float((pts[:, 0] > 0.0).sum())
            m += 500
        assert abs(total / m - 0.5) < 3.0 * 0.5 / math.sqrt(m)
