"""Desk-scale experiment drivers: hydrodynamics, boundary, selection, mixing.

Each driver runs replicas of the particle system against the certified
obstacle solver (or the known stationary state) and emits ReportRow
records.  Tolerances are desk-scale budgets recorded in the rows
themselves, so reports are self-describing; every run is reproducible
bit-for-bit from (config, seed base) because replica r always draws from
the Philox stream keyed by (seed, r) regardless of scheduling.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import ParticleEnsemble, RadialProfile, SandwichPair, empirical_cdf, \
    in_gamma, max_radius, measure_of_set
from .obstacle import SandwichSolver, SolveRequest, solve_sandwich, stationary_state
from .sim import SimParams, advance_nbbm, replica_rng

__all__ = [
    "ReportRow",
    "PointMassSampler",
    "UniformBallSampler",
    "StationarySampler",
    "bracket_distance",
    "sup_distance_to_fn",
    "hydrodynamic_report",
    "boundary_report",
    "selection_report",
    "stationarity_report",
    "rows_to_csv",
]

_MIN_POPULATION = 100  # experiments refuse degenerate particle counts


@dataclass(frozen=True)
class ReportRow:
    experiment: str
    statistic: str
    value: float
    tolerance: float
    passed: bool
    N: int
    d: int
    t: float
    replicas: int
    seed: int

    @staticmethod
    def make(experiment: str, statistic: str, value: float, tolerance: float,
             N: int, d: int, t: float, replicas: int, seed: int) -> "ReportRow":
        return ReportRow(experiment, statistic, float(value), float(tolerance),
                         bool(value <= tolerance), N, d, t, replicas, seed)


def rows_to_csv(rows: list[ReportRow]) -> str:
    out = ["experiment,statistic,value,tolerance,passed,N,d,t,replicas,seed"]
    for r in rows:
        out.append(f"{r.experiment},{r.statistic},{r.value!r},{r.tolerance!r},"
                   f"{int(r.passed)},{r.N},{r.d},{r.t!r},{r.replicas},{r.seed}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Initial-condition samplers
# ---------------------------------------------------------------------------

def _unit_directions(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    nv = np.sqrt(np.einsum("ij,ij->i", v, v))
    nv[nv == 0.0] = 1.0
    return v / nv[:, None]


@dataclass(frozen=True)
class PointMassSampler:
    """All particles start at the origin."""

    dim: int
    name: str = "origin"

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.zeros((n, self.dim))

    def limit_profile(self, mode: str = "nearest") -> RadialProfile | None:
        return None  # an atom at radius 0 is not a valid solver input


@dataclass(frozen=True)
class UniformBallSampler:
    """I.i.d. uniform on the centred ball; in d = 1 this is uniform(-R, R)."""

    dim: int
    radius: float = 1.0
    name: str = "uniform-ball"

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        r = self.radius * rng.random(n) ** (1.0 / self.dim)
        return _unit_directions(n, self.dim, rng) * r[:, None]

    def cdf(self, r):
        return np.clip(np.asarray(r, dtype=float) / self.radius, 0.0, 1.0) ** self.dim

    def limit_profile(self, mode: str = "nearest", n_nodes: int = 4001) -> RadialProfile:
        return _profile_from_cdf(self.cdf, self.radius, n_nodes, mode, self.dim)


@dataclass(frozen=True)
class StationarySampler:
    """I.i.d. from the stationary density: radius by inverting V, uniform direction."""

    dim: int
    name: str = "stationary"

    @cached_property
    def _inverse_table(self):
        state = stationary_state(self.dim)
        r = np.linspace(0.0, state.r_infinity, 20001)
        return state.V(r), r

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        v, r = self._inverse_table
        radii = np.interp(rng.random(n), v, r)
        return _unit_directions(n, self.dim, rng) * radii[:, None]

    def limit_profile(self, mode: str = "nearest", n_nodes: int = 4001) -> RadialProfile:
        return stationary_state(self.dim).as_profile(n_nodes, mode)


def _profile_from_cdf(fn, r_max: float, n_nodes: int, mode: str,
                      dim: int | None) -> RadialProfile:
    grid = np.linspace(0.0, r_max, n_nodes)
    v = np.clip(np.asarray(fn(grid), dtype=float), 0.0, 1.0)
    v[-1] = float(fn(r_max))
    if mode == "upper":
        loc, val = np.concatenate(([0.0], grid[1:-1])), v[1:]
    elif mode == "lower":
        loc, val = grid[1:], v[1:]
    else:
        loc, val = grid[1:], v[1:]
    keep = np.diff(val, prepend=0.0) > 0.0
    return RadialProfile.from_jumps(loc[keep], val[keep], dim=dim)


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------

def bracket_distance(f: RadialProfile, pair: SandwichPair) -> float:
    """sup_r of how far f pokes outside [lower, upper]; 0 when inside."""
    pts = np.union1d(np.union1d(f.locations, pair.lower.locations),
                     pair.upper.locations)
    if not pts.size:
        return 0.0
    below = np.maximum(pair.lower(pts) - f(pts),
                       pair.lower.value_right(pts) - f.value_right(pts))
    above = np.maximum(f(pts) - pair.upper(pts),
                       f.value_right(pts) - pair.upper.value_right(pts))
    return float(max(0.0, below.max(), above.max()))


def sup_distance_to_fn(f: RadialProfile, fn, r_hi: float) -> float:
    """sup_r |f - fn| for a step profile against a continuous monotone fn."""
    pts = np.unique(np.concatenate((f.locations, [0.0, r_hi])))
    g = np.asarray(fn(pts), dtype=float)
    return float(max(np.abs(f(pts) - g).max(), np.abs(f.value_right(pts) - g).max()))


# ---------------------------------------------------------------------------
# Replica plumbing
# ---------------------------------------------------------------------------

def _run_replicas(fn, n_replicas: int, workers: int, args: tuple) -> list:
    """Execute fn(rep, *args) for each replica, deterministically ordered."""
    if workers <= 1:
        return [fn(rep, *args) for rep in range(n_replicas)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, rep, *args) for rep in range(n_replicas)]
        return [f.result() for f in futures]


def _hydro_replica(rep: int, seed: int, N: int, d: int, t: float, sampler,
                   delta: float, grid_step: float | None):
    rng = replica_rng(seed, rep)
    ens = ParticleEnsemble(d, sampler.sample(N, rng))
    f0 = empirical_cdf(ens)
    pair = solve_sandwich(SolveRequest(dim=d, initial=f0, horizon=t,
                                       step_size=delta, grid_step=grid_step))
    final, _ = advance_nbbm(SimParams(dim=d, population=N), ens, t, rng)
    f1 = empirical_cdf(final)
    return bracket_distance(f1, pair), pair.analytic_gap + pair.grid_gap, \
        final.positions


def hydrodynamic_report(N: int, d: int, t: float, sampler, replicas: int,
                        seed: int, delta: float = 0.01,
                        grid_step: float | None = None,
                        tolerance_q90: float = 0.05,
                        workers: int = 1, return_snapshots: bool = False):
    """Distance from the realized empirical CDF at time t to the certified
    bracket solved from the realized initial CDF, per replica."""
    if t <= 0.0:
        raise ValueError("t must be positive")
    if N < _MIN_POPULATION:
        raise ValueError(f"hydrodynamic check needs N >= {_MIN_POPULATION}")
    res = _run_replicas(_hydro_replica, replicas, workers,
                        (seed, N, d, t, sampler, delta, grid_step))
    dists = np.array([r[0] for r in res])
    widths = np.array([r[1] for r in res])
    rows = [ReportRow.make("hydro", f"bracket_distance_rep{i}", dist, math.inf,
                           N, d, t, replicas, seed)
            for i, dist in enumerate(dists)]
    rows.append(ReportRow.make("hydro", "bracket_distance_q90",
                               float(np.percentile(dists, 90.0)), tolerance_q90,
                               N, d, t, replicas, seed))
    rows.append(ReportRow.make("hydro", "mean_bracket_width",
                               float(widths.mean()), math.inf, N, d, t, replicas, seed))
    if return_snapshots:
        return rows, [r[2] for r in res]
    return rows


def _boundary_replica(rep: int, seed: int, N: int, d: int, T: float, eta: float,
                      sampler, snap_times: tuple, r_upper: tuple):
    rng = replica_rng(seed, rep)
    ens = ParticleEnsemble(d, sampler.sample(N, rng))
    params = SimParams(dim=d, population=N)
    now = 0.0
    exceeded = False
    for s, r_t in zip(snap_times, r_upper):
        ens, _ = advance_nbbm(params, ens, s - now, rng)
        now = s
        if max_radius(ens) > r_t + eta:
            exceeded = True
    return exceeded


def boundary_report(N: int, d: int, T: float, eta: float, sampler,
                    replicas: int, seed: int, delta: float = 0.01,
                    grid_step: float | None = None, snapshot_dt: float = 0.05,
                    tolerance: float = 0.1, workers: int = 1) -> list[ReportRow]:
    """Fraction of replicas whose max particle radius ever exceeds the
    solver's boundary trajectory by eta on snapshots within [eta, T]."""
    if not (0.0 < eta < T):
        raise ValueError("need 0 < eta < T")
    if N < _MIN_POPULATION:
        raise ValueError(f"boundary check needs N >= {_MIN_POPULATION}")
    limit = sampler.limit_profile("nearest")
    if limit is None:
        raise ValueError("sampler has no solver-compatible limit profile")
    k = round(T / delta)
    solver = SandwichSolver(d, limit, T / k, grid_step, horizon_hint=T)
    solver.advance(k)
    trace = solver.trace
    times = np.asarray(trace.times)
    snap_times = tuple(float(s) for s in np.arange(eta, T + 1e-9, snapshot_dt))
    # conservative upper end of the boundary interval at each snapshot
    r_upper = tuple(float(trace.boundary_hi[int(np.argmin(np.abs(times - s)))])
                    for s in snap_times)
    flags = _run_replicas(_boundary_replica, replicas, workers,
                          (seed, N, d, T, eta, sampler, snap_times, r_upper))
    frac = float(np.mean(flags))
    return [ReportRow.make("boundary", "exceedance_fraction", frac, tolerance,
                           N, d, T, replicas, seed)]


def _selection_replica(rep: int, seed: int, N: int, d: int, t: float, K: float,
                       c: float, sampler, window_dt: float, r_inf: float):
    rng = replica_rng(seed, rep)
    ens = ParticleEnsemble(d, sampler.sample(N, rng))
    if not in_gamma(ens, K, c):
        raise ValueError(f"replica {rep}: initial configuration not in Gamma({K}, {c})")
    params = SimParams(dim=d, population=N)
    ens, _ = advance_nbbm(params, ens, t, rng)
    state = stationary_state(d)
    f = empirical_cdf(ens)
    sup_v = sup_distance_to_fn(f, state.V, state.r_infinity)
    m_t = max_radius(ens)
    running_max = m_t
    cur = ens
    for _ in np.arange(window_dt, 1.0 + 1e-9, window_dt):
        cur, _ = advance_nbbm(params, cur, window_dt, rng)
        running_max = max(running_max, max_radius(cur))
    ball = float((np.sqrt(np.einsum("ij,ij->i", ens.positions, ens.positions))
                  < r_inf).mean())
    half = measure_of_set(ens, lambda x: x[:, 0] > 0.0)
    return sup_v, m_t, running_max, ball, half, ens.positions


def selection_report(N: int, d: int, t: float, K: float, c: float, sampler,
                     replicas: int, seed: int, window_dt: float = 0.05,
                     sup_tol: float = 0.07, m_tol: float = 0.15,
                     mass_tol: float = 0.05, good_fraction: float = 0.9,
                     workers: int = 1, return_snapshots: bool = False,
                     extra_sets=()):
    """Long-time statistics against the stationary state (U, R_inf, V).

    ``extra_sets`` takes (name, indicator, expected_mass) triples to compare
    the empirical measure of further sets against their stationary mass, on
    top of the built-in ball-of-R_inf and half-space checks.
    """
    if N < _MIN_POPULATION:
        raise ValueError(f"selection check needs N >= {_MIN_POPULATION}")
    state = stationary_state(d)
    res = _run_replicas(_selection_replica, replicas, workers,
                        (seed, N, d, t, K, c, sampler, window_dt, state.r_infinity))
    sup_v = np.array([r[0] for r in res])
    m_t = np.array([r[1] for r in res])
    run_max = np.array([r[2] for r in res])
    ball = np.array([r[3] for r in res])
    half = np.array([r[4] for r in res])
    rows = []
    for i in range(replicas):
        rows.append(ReportRow.make("selection", f"sup_F_to_V_rep{i}", sup_v[i],
                                   math.inf, N, d, t, replicas, seed))
        rows.append(ReportRow.make("selection", f"abs_M_to_Rinf_rep{i}",
                                   abs(m_t[i] - state.r_infinity), math.inf,
                                   N, d, t, replicas, seed))
        rows.append(ReportRow.make("selection", f"window_excess_rep{i}",
                                   run_max[i] - state.r_infinity, math.inf,
                                   N, d, t, replicas, seed))
    good = (sup_v <= sup_tol) & (np.abs(m_t - state.r_infinity) <= m_tol)
    rows.append(ReportRow.make("selection", "fraction_outside_tolerance",
                               1.0 - float(good.mean()), 1.0 - good_fraction,
                               N, d, t, replicas, seed))
    rows.append(ReportRow.make("selection", "ball_mass_error",
                               abs(float(ball.mean()) - 1.0), mass_tol,
                               N, d, t, replicas, seed))
    rows.append(ReportRow.make("selection", "half_space_mass_error",
                               abs(float(half.mean()) - 0.5), mass_tol,
                               N, d, t, replicas, seed))
    for name, indicator, expected in extra_sets:
        # evaluated in-process on the returned snapshots, so indicators
        # need not survive a trip through the worker pool
        mean_mass = float(np.mean([np.asarray(indicator(r[5]), dtype=bool).mean()
                                   for r in res]))
        rows.append(ReportRow.make("selection", f"set_mass_error_{name}",
                                   abs(mean_mass - expected), mass_tol,
                                   N, d, t, replicas, seed))
    if return_snapshots:
        return rows, [r[5] for r in res]
    return rows


def stationarity_report(N: int, d: int, burn_in: float, window: float,
                        n_windows: int, seed: int, snapshot_dt: float = 0.25,
                        pairwise_tol: float = 0.05,
                        workers: int = 1) -> list[ReportRow]:
    """Mixing diagnostic: time-averaged CDFs over successive windows of one
    long trajectory, compared pairwise and against V."""
    if burn_in <= 0.0 or window <= 0.0:
        raise ValueError("burn_in and window must be positive")
    if N < _MIN_POPULATION:
        raise ValueError(f"stationarity check needs N >= {_MIN_POPULATION}")
    state = stationary_state(d)
    rng = replica_rng(seed, 0)
    params = SimParams(dim=d, population=N)
    ens = ParticleEnsemble(d, np.zeros((N, d)))
    ens, _ = advance_nbbm(params, ens, burn_in, rng)
    r_grid = np.linspace(0.0, state.r_infinity + 1.0, 2001)
    averages = []
    per_window = max(1, round(window / snapshot_dt))
    for _ in range(n_windows):
        acc = np.zeros_like(r_grid)
        for _ in range(per_window):
            ens, _ = advance_nbbm(params, ens, snapshot_dt, rng)
            acc += empirical_cdf(ens)(r_grid)
        averages.append(acc / per_window)
    rows = []
    worst = 0.0
    for i in range(n_windows):
        for j in range(i + 1, n_windows):
            worst = max(worst, float(np.abs(averages[i] - averages[j]).max()))
    rows.append(ReportRow.make("stationarity", "max_pairwise_window_distance",
                               worst, pairwise_tol, N, d,
                               burn_in + n_windows * window, 1, seed))
    v_ref = state.V(r_grid)
    for i, avg in enumerate(averages):
        rows.append(ReportRow.make("stationarity", f"window{i}_to_V",
                                   float(np.abs(avg - v_ref).max()), math.inf,
                                   N, d, burn_in + (i + 1) * window, 1, seed))
    return rows
