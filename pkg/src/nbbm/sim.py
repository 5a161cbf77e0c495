"""Event-driven simulation of the selection particle system and its couplings.

The N-particle system: each of N particles diffuses independently with
diffusivity sqrt(2) (per-coordinate variance 2*dt) and branches at rate 1,
so branch events arrive as a Poisson process with rate N.  At an event a
uniformly chosen label k duplicates and the particle furthest from the
origin (lowest index on ties) is removed: its slot is overwritten with the
position of particle k, keeping the population at N.

Also here: the plain branching Brownian motion (no selection) with
Ulam-Harris labels, the red/blue coupling realizing the N-particle system
as the blue subset of the free BBM, spherically ordered Brownian pairs,
and killed-Brownian-motion survival estimates.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .core import ParticleEnsemble

__all__ = [
    "SimParams",
    "EventLog",
    "BbmForest",
    "CoupledObservation",
    "CoupledRunResult",
    "SimulationError",
    "ResourceError",
    "replica_rng",
    "advance_nbbm",
    "advance_bbm",
    "coupled_run",
    "spherically_ordered_pair",
    "spherically_ordered_pairs",
    "killed_survival_density",
    "survival_curve",
]


class SimulationError(RuntimeError):
    pass


class ResourceError(RuntimeError):
    pass


def replica_rng(seed: int, replica: int = 0) -> np.random.Generator:
    """Counter-based Philox stream keyed by (seed, replica).

    Distinct replicas get statistically independent streams and the mapping
    is reproducible regardless of how replicas are scheduled across workers.
    """
    key = np.array([seed, replica], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class SimParams:
    """Run parameters; ``seed`` is the base that orchestration mixes with a
    replica index to derive the Philox stream (see :func:`replica_rng`)."""

    dim: int
    population: int
    seed: int = 0
    mode: str = "exact"          # "exact" or "frozen-batch"
    batch_dt: float = 0.01       # frozen-batch window width
    record_schedule: tuple[float, ...] = ()

    def __post_init__(self):
        if self.population < 1:
            raise ValueError("population must be >= 1")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.mode not in ("exact", "frozen-batch"):
            raise ValueError("mode must be 'exact' or 'frozen-batch'")
        sched = tuple(float(s) for s in self.record_schedule)
        if any(s < 0.0 for s in sched) or any(
                b <= a for a, b in zip(sched, sched[1:])):
            raise ValueError("record_schedule must be strictly increasing and nonnegative")
        object.__setattr__(self, "record_schedule", sched)


@dataclass
class EventLog:
    times: list[float] = field(default_factory=list)
    branching: list[int] = field(default_factory=list)
    removed: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.times)


def _diffuse(pos: np.ndarray, dt: float, rng: np.random.Generator):
    if dt > 0.0:
        pos += rng.standard_normal(pos.shape) * math.sqrt(2.0 * dt)


def advance_nbbm(params: SimParams, state: ParticleEnsemble, duration: float,
                 rng: np.random.Generator) -> tuple[ParticleEnsemble, EventLog]:
    """Evolve the N-particle system for ``duration``, exactly by default.

    Exact mode draws Exponential(N) gaps, diffuses every particle across
    each gap, and applies the duplicate/remove rule at the event.  The
    frozen-batch mode diffuses once per ``batch_dt`` window and replays the
    window's Poisson(N*batch_dt) events against frozen positions; it is a
    documented O(batch_dt)-bias approximation intended for profiling only.
    """
    if duration < 0.0:
        raise ValueError("duration must be nonnegative")
    n = params.population
    if state.population != n:
        raise ValueError(f"state has {state.population} particles, params say {n}")
    pos = state.positions.copy()
    log = EventLog()
    if params.mode == "exact":
        t_done = 0.0
        while True:
            gap = rng.exponential(1.0 / n)
            if t_done + gap >= duration:
                _diffuse(pos, duration - t_done, rng)
                break
            _diffuse(pos, gap, rng)
            t_done += gap
            _apply_event(pos, state.clock + t_done, log, rng)
    else:
        t_done = 0.0
        while t_done < duration - 1e-15:
            dt = min(params.batch_dt, duration - t_done)
            _diffuse(pos, dt, rng)
            t_done += dt
            for _ in range(rng.poisson(n * dt)):
                _apply_event(pos, state.clock + t_done, log, rng)
    return state.with_positions(pos, state.clock + duration), log


def _apply_event(pos: np.ndarray, when: float, log: EventLog,
                 rng: np.random.Generator):
    sq = np.einsum("ij,ij->i", pos, pos)
    if not np.all(np.isfinite(sq)):
        raise SimulationError(f"nonfinite position at event {len(log)} (t={when:.6g})")
    k = int(rng.integers(pos.shape[0]))
    furthest = int(np.argmax(sq))  # ties resolve to the lowest index
    pos[furthest] = pos[k]
    log.times.append(when)
    log.branching.append(k)
    log.removed.append(furthest)


# ---------------------------------------------------------------------------
# Free branching Brownian motion with Ulam-Harris labels
# ---------------------------------------------------------------------------

@dataclass
class BbmForest:
    """Particles of a free BBM: Ulam-Harris labels, positions, colours.

    Children of a particle labelled u are u + (1,) and u + (2,).  When the
    red/blue coupling is active, ``blue`` marks the selected subpopulation
    of fixed size N.
    """

    dim: int
    labels: list[tuple[int, ...]]
    positions: np.ndarray
    clock: float = 0.0
    blue: np.ndarray | None = None

    @staticmethod
    def from_ensemble(ens: ParticleEnsemble, coloured: bool = False) -> "BbmForest":
        labels = [(i + 1,) for i in range(ens.population)]
        blue = np.ones(ens.population, dtype=bool) if coloured else None
        return BbmForest(ens.dim, labels, ens.positions.copy(), ens.clock, blue)

    @property
    def population(self) -> int:
        return self.positions.shape[0]

    def norms(self) -> np.ndarray:
        return np.sqrt(np.einsum("ij,ij->i", self.positions, self.positions))


_POPULATION_CAP = 10_000_000


def advance_bbm(params: SimParams, forest: BbmForest, duration: float,
                rng: np.random.Generator,
                population_cap: int = _POPULATION_CAP) -> BbmForest:
    """Evolve the free BBM: rate-1 binary branching, no selection."""
    if duration < 0.0:
        raise ValueError("duration must be nonnegative")
    pos = forest.positions.copy()
    labels = list(forest.labels)
    heap = [(forest.clock + rng.exponential(1.0), i) for i in range(len(labels))]
    heapq.heapify(heap)
    now = forest.clock
    end = forest.clock + duration
    while heap and heap[0][0] < end:
        when, idx = heapq.heappop(heap)
        _diffuse(pos, when - now, rng)
        now = when
        parent = labels[idx]
        labels[idx] = parent + (1,)
        labels.append(parent + (2,))
        pos = np.vstack((pos, pos[idx][None, :]))
        if pos.shape[0] > population_cap:
            raise ResourceError(f"BBM population exceeded cap {population_cap}")
        heapq.heappush(heap, (now + rng.exponential(1.0), idx))
        heapq.heappush(heap, (now + rng.exponential(1.0), pos.shape[0] - 1))
    _diffuse(pos, end - now, rng)
    return BbmForest(forest.dim, labels, pos, end, None)


# ---------------------------------------------------------------------------
# Red/blue coupling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoupledObservation:
    time: float
    blue_norms: np.ndarray
    all_norms: np.ndarray
    dominated: bool          # F^N <= C_1 F^+ over all radii
    blue_count: int


@dataclass(frozen=True)
class CoupledRunResult:
    observations: list[CoupledObservation]
    blue_final: ParticleEnsemble
    forest_final: BbmForest
    events: int
    domination_ok: bool
    reconstruction_ok: bool
    tie_flips: int


def _dominated(blue_norms: np.ndarray, all_norms: np.ndarray, n: int) -> bool:
    """Check count_blue(< r) <= min(count_all(< r), N) for every r."""
    radii = np.unique(np.concatenate((blue_norms, all_norms))) + 1e-12
    f_blue = np.searchsorted(np.sort(blue_norms), radii, side="left")
    f_all = np.searchsorted(np.sort(all_norms), radii, side="left")
    return bool(np.all(f_blue <= np.minimum(f_all, n)))


def coupled_run(params: SimParams, initial: ParticleEnsemble, duration: float,
                rng: np.random.Generator,
                population_cap: int = _POPULATION_CAP) -> CoupledRunResult:
    """One BBM driving both processes: blue subset evolves as the N-system.

    When a blue particle branches both offspring are blue and the furthest
    blue turns red; red particles breed red.  Records at each observation
    time whether the blue empirical CDF is dominated by the clipped BBM CDF
    (a pathwise identity under this coupling), and verifies at event times
    that the blue set equals the set of particles whose paths never
    exceeded the running blue maximum -- excluding lineages that tied the
    maximum exactly at their flip event, where the event-time check is
    inconclusive by construction.
    """
    n = params.population
    if initial.population != n:
        raise ValueError("initial population must equal params.population")
    d = initial.dim
    pos = initial.positions.copy()
    labels = [(i + 1,) for i in range(n)]
    blue = np.ones(n, dtype=bool)
    exceeded = np.zeros(n, dtype=bool)   # ever strictly above the blue max
    tie_lineage = np.zeros(n, dtype=bool)
    tie_flips = 0

    heap = [(initial.clock + rng.exponential(1.0), i) for i in range(n)]
    heapq.heapify(heap)
    now = initial.clock
    end = initial.clock + duration
    schedule = [s for s in params.record_schedule
                if initial.clock <= s <= end + 1e-12]
    obs: list[CoupledObservation] = []
    events = 0
    domination_ok = True
    reconstruction_ok = True

    def observe(at: float):
        nonlocal domination_ok
        norms = np.sqrt(np.einsum("ij,ij->i", pos, pos))
        ok = _dominated(norms[blue], norms, n)
        domination_ok = domination_ok and ok
        obs.append(CoupledObservation(at, np.sort(norms[blue]), np.sort(norms),
                                      ok, int(blue.sum())))

    while True:
        next_event = heap[0][0] if heap else math.inf
        if schedule and schedule[0] <= min(next_event, end):
            target = schedule.pop(0)
            _diffuse(pos, target - now, rng)
            now = target
            observe(now)
            continue
        if next_event >= end:
            _diffuse(pos, end - now, rng)
            now = end
            break
        when, idx = heapq.heappop(heap)
        _diffuse(pos, when - now, rng)
        now = when
        events += 1
        parent_blue = bool(blue[idx])
        parent_tie = bool(tie_lineage[idx])
        labels.append(labels[idx] + (2,))
        labels[idx] = labels[idx] + (1,)
        pos = np.vstack((pos, pos[idx][None, :]))
        blue = np.append(blue, parent_blue)
        exceeded = np.append(exceeded, exceeded[idx])
        tie_lineage = np.append(tie_lineage, parent_tie)
        if pos.shape[0] > population_cap:
            raise ResourceError(f"coupled BBM population exceeded cap {population_cap}")
        heapq.heappush(heap, (now + rng.exponential(1.0), idx))
        heapq.heappush(heap, (now + rng.exponential(1.0), pos.shape[0] - 1))

        norms = np.sqrt(np.einsum("ij,ij->i", pos, pos))
        if not np.all(np.isfinite(norms)):
            raise SimulationError(f"nonfinite position at event {events}")
        if parent_blue:
            blue_idx = np.nonzero(blue)[0]
            flip = blue_idx[int(np.argmax(norms[blue_idx]))]
            blue[flip] = False
            m_blue = float(norms[blue].max())
            if norms[flip] <= m_blue + 1e-15:
                tie_lineage[flip] = True
                tie_flips += 1
        else:
            m_blue = float(norms[blue].max())
        exceeded |= norms > m_blue
        # blue particles never exceed the blue maximum; a mismatch on a
        # non-tie lineage means the bookkeeping (not randomness) is wrong
        rec_blue = ~exceeded
        check = tie_lineage | (rec_blue == blue)
        reconstruction_ok = reconstruction_ok and bool(np.all(check))

    while schedule:
        target = schedule.pop(0)
        if target > now + 1e-12:
            break
        observe(target)

    final_blue = ParticleEnsemble(d, pos[blue], now)
    forest = BbmForest(d, labels, pos, now, blue)
    return CoupledRunResult(obs, final_blue, forest, events,
                            domination_ok, reconstruction_ok, tie_flips)


# ---------------------------------------------------------------------------
# Spherically ordered Brownian pairs
# ---------------------------------------------------------------------------

def spherically_ordered_pairs(x: np.ndarray, x_plus: np.ndarray,
                              sample_times: np.ndarray,
                              rng: np.random.Generator
                              ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Evolve pairs (B, B+) with ||B|| <= ||B+|| at every sample time.

    The pairs move independently until the first sample step whose
    proposed increments would cross the norms.  The crossing is then
    attributed to the step interior ("bridged" detection at sample
    resolution): the inner point keeps its proposed direction, its norm is
    set equal to the outer one, and from then on the inner path is the
    outer path mapped through the orthogonal reflection aligning the two,
    so both norms agree forever after.  The outer path is exactly Brownian
    throughout; the inner one takes a one-sided O(sqrt(dt)) norm clamp at
    its crossing step only.

    Returns arrays of shape (n_pairs, n_times + 1, d) for both paths and a
    boolean array flagging which pairs coupled.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xp = np.atleast_2d(np.asarray(x_plus, dtype=float))
    if x.shape != xp.shape:
        raise ValueError("x and x_plus must have matching shapes")
    if np.any(_norms(x) > _norms(xp) + 1e-12):
        raise ValueError("need ||x|| <= ||x_plus|| pairwise")
    n, d = x.shape
    times = np.concatenate(([0.0], np.asarray(sample_times, dtype=float)))
    if np.any(np.diff(times) <= 0.0):
        raise ValueError("sample times must be strictly increasing and positive")
    path = np.empty((n, times.size, d))
    path_p = np.empty((n, times.size, d))
    path[:, 0], path_p[:, 0] = x, xp
    b, bp = x.copy(), xp.copy()
    coupled = _norms(b) >= _norms(bp) - 1e-15
    reflect = np.tile(np.eye(d), (n, 1, 1))
    _align_reflections(reflect, b, bp, coupled)
    for i in range(1, times.size):
        dt = times[i] - times[i - 1]
        step_p = rng.standard_normal((n, d)) * math.sqrt(2.0 * dt)
        step_i = rng.standard_normal((n, d)) * math.sqrt(2.0 * dt)
        bp = bp + step_p
        free = ~coupled
        b_free = b[free] + step_i[free]
        cross = _norms(b_free) > _norms(bp[free])
        if cross.any():
            sel = np.nonzero(free)[0][cross]
            tgt = _norms(bp[sel])
            src = _norms(b_free[cross])
            scale = np.where(src > 0.0, tgt / np.maximum(src, 1e-300), 0.0)
            b_free[cross] *= scale[:, None]
            coupled[sel] = True
        b[free] = b_free
        newly = np.zeros(n, dtype=bool)
        if cross.any():
            newly[np.nonzero(free)[0][cross]] = True
            _align_reflections(reflect, b, bp, newly)
        old_coupled = coupled & ~newly
        if old_coupled.any():
            b[old_coupled] = np.einsum("nij,nj->ni", reflect[old_coupled],
                                       bp[old_coupled])
        path[:, i], path_p[:, i] = b, bp
    return path, path_p, coupled


def _norms(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("...i,...i->...", a, a))


def _align_reflections(reflect: np.ndarray, b: np.ndarray, bp: np.ndarray,
                       mask: np.ndarray):
    """Set reflect[mask] to the orthogonal map taking bp to b (equal norms)."""
    idx = np.nonzero(mask)[0]
    if not idx.size:
        return
    d = b.shape[1]
    for i in idx:
        u = bp[i]
        v = b[i]
        diff = u - v
        nd = np.linalg.norm(diff)
        if nd < 1e-14:
            reflect[i] = np.eye(d)
        else:
            w = diff / nd
            reflect[i] = np.eye(d) - 2.0 * np.outer(w, w)


def spherically_ordered_pair(x, x_plus, horizon: float, sample_times,
                             rng: np.random.Generator):
    """Single-pair wrapper around :func:`spherically_ordered_pairs`."""
    times = np.asarray(sample_times, dtype=float)
    if times.size and times[-1] > horizon + 1e-12:
        raise ValueError("sample times must not exceed the horizon")
    p, pp, coupled = spherically_ordered_pairs(
        np.asarray(x, dtype=float)[None, :], np.asarray(x_plus, dtype=float)[None, :],
        times, rng)
    return p[0], pp[0], bool(coupled[0])


# ---------------------------------------------------------------------------
# Killed Brownian motion
# ---------------------------------------------------------------------------

def _boundary_fn(boundary):
    if callable(boundary):
        return boundary
    level = float(boundary)
    return lambda s: level


def survival_curve(dim: int, x: np.ndarray, boundary, t_grid: np.ndarray,
                   n_samples: int, rng: np.random.Generator,
                   dt: float | None = None) -> np.ndarray:
    """Fraction of Brownian paths from x never leaving the moving ball.

    Killing is checked at grid times only, so survival is overestimated by
    a one-sided O(sqrt(dt)) discretization bias.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    t_end = float(t_grid[-1])
    if dt is None:
        dt = 1e-3 * t_end
    r_of = _boundary_fn(boundary)
    steps = int(round(t_end / dt))
    out = np.zeros(t_grid.size)
    record = {int(round(t / dt)): i for i, t in enumerate(t_grid)}
    chunk = max(1, min(n_samples, int(4e6 // max(steps, 1)) or 1, 100_000))
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        pos = np.tile(np.asarray(x, dtype=float), (m, 1))
        alive = np.ones(m, dtype=bool)
        for k in range(1, steps + 1):
            live_idx = np.nonzero(alive)[0]
            if not live_idx.size:
                break
            pos[live_idx] += rng.standard_normal((live_idx.size, dim)) * math.sqrt(2.0 * dt)
            r_lim = r_of(k * dt)
            if math.isfinite(r_lim):
                dead = _norms(pos[live_idx]) >= r_lim
                alive[live_idx[dead]] = False
            if k in record:
                out[record[k]] += float(alive.sum())
        done += m
    return out / n_samples


def killed_survival_density(dim: int, x, boundary, t: float, n_samples: int,
                            rng: np.random.Generator, indicator=None,
                            dt: float | None = None) -> tuple[float, float]:
    """Estimate e^t * P(B_t in A, ||B_s|| < R_s for grid s in (0, t]).

    Returns (estimate, binomial standard error).  With an infinite boundary
    and full-space A this is exactly e^t.  The grid-time killing bias is
    one-sided: survival is never underestimated.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if dt is None:
        dt = 1e-3 * t
    steps = max(1, int(round(t / dt)))
    dt = t / steps
    r_of = _boundary_fn(boundary)
    hits = 0
    done = 0
    chunk = max(1, min(n_samples, int(4e6 // steps) or 1, 100_000))
    scale = math.exp(t)
    while done < n_samples:
        m = min(chunk, n_samples - done)
        pos = np.tile(np.asarray(x, dtype=float), (m, 1))
        alive = np.ones(m, dtype=bool)
        for k in range(1, steps + 1):
            live_idx = np.nonzero(alive)[0]
            if not live_idx.size:
                break
            pos[live_idx] += rng.standard_normal((live_idx.size, dim)) * math.sqrt(2.0 * dt)
            r_lim = r_of(k * dt)
            if math.isfinite(r_lim):
                dead = _norms(pos[live_idx]) >= r_lim
                alive[live_idx[dead]] = False
        if indicator is None:
            hits += int(alive.sum())
        else:
            live_idx = np.nonzero(alive)[0]
            if live_idx.size:
                hits += int(np.asarray(indicator(pos[live_idx]), dtype=bool).sum())
        done += m
    p = hits / n_samples
    return scale * p, scale * math.sqrt(max(p * (1.0 - p), 1e-300) / n_samples)
