"""Radial transition kernels of d-dimensional Brownian motion (diffusivity sqrt 2).

Objects implemented here, all conditional on the starting radius y:

* ``radial_cdf``  w(y, r, t) = P(||B_t|| < r | ||B_0|| = y)
* ``bessel_density``  g = dw/dr, the Bessel transition density
* ``kernel_G``  G = -dw/dy, the fundamental solution of
  dG/dt = d^2G/dr^2 - ((d-1)/r) dG/dr with G(y, 0, t) = 0

The computational route: ||B_t||^2 / (2t) follows a noncentral chi-squared
law with d degrees of freedom and noncentrality y^2 / (2t), so

    w(y, r, t) = sum_m  Poisson(m; y^2/(4t)) * P(d/2 + m, r^2/(4t))

with P the regularized lower incomplete gamma function.  The Poisson tail
gives an explicit truncation bound, so every evaluation carries a certified
absolute error.  Differentiating the series in the noncentrality shifts the
degrees of freedom by two, giving the closed forms

    g(y, r, t) = (r/t) * f_ncx2(r^2/2t; d,   y^2/2t)
    G(y, r, t) = (y/t) * f_ncx2(r^2/2t; d+2, y^2/2t).

For d = 1 and d = 3 everything reduces to Gaussian image formulas, which the
grid engine exploits: applying G_t to a step profile is a finite mixture
sum_j c_j w(a_j, r, t), computed either by lattice convolutions (d = 1, 3)
or by collapsing the Poisson weights of all jumps into one vector and
sweeping the shared incomplete-gamma basis once (any d).  Both routes are
exact finite sums up to the stated tolerance; no quadrature is involved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import fft
from scipy.special import erf, gammainc, gammaln, ive
from scipy.stats import poisson as _poisson

from .core import RadialProfile

__all__ = [
    "KernelContext",
    "EvaluationError",
    "GridFunction",
    "radial_cdf",
    "bessel_density",
    "kernel_G",
    "apply_Gt",
    "cutoff",
    "linear_evolve",
    "mixture_node_values",
]

_SQRT_PI = math.sqrt(math.pi)


class EvaluationError(RuntimeError):
    """Series evaluation failed to converge within the tolerance budget."""


@dataclass(frozen=True)
class KernelContext:
    """Dimension and target absolute accuracy for kernel evaluations."""

    dim: int
    tolerance: float = 1e-10

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if not (0.0 < self.tolerance <= 1e-6):
            raise ValueError("tolerance must lie in (0, 1e-6]")


def _check_time(t: float):
    if not (t > 0.0) or not math.isfinite(t):
        raise ValueError(f"t must be positive and finite, got {t}")


def support_band(t: float, tol: float = 1e-15, dim: int = 3) -> float:
    """Radial displacement beyond which transition mass is below tol."""
    return math.sqrt(4.0 * t * max(math.log(2.0 * dim / tol), 1.0)) + 4.0 * math.sqrt(t / dim)


# ---------------------------------------------------------------------------
# Noncentral chi-squared machinery (explicit truncation bound)
# ---------------------------------------------------------------------------

def _poisson_term_count(mu_max: float, tol: float) -> int:
    """Smallest index M with the Poisson(mu) tail beyond M below tol, verified.

    This is an index bound, not an evaluation cost: windowed callers only
    sweep O(sqrt(mu)) terms around the mode.  The hard cap guards integer
    and special-function overflow.
    """
    m = int(mu_max + 12.0 * math.sqrt(mu_max + 4.0) + 30.0)
    while True:
        if m > 10 ** 15:
            raise EvaluationError(
                f"noncentral series index overflow at {m} terms "
                f"(noncentrality/2 = {mu_max:.3g}, tol = {tol:.1e})")
        if _poisson.sf(m, mu_max) <= tol:
            return m
        m = int(1.3 * m) + 10


def _poisson_mixture_weights(sizes: np.ndarray, mu: np.ndarray, m_terms: int) -> np.ndarray:
    """q[m] = sum_j sizes_j * PoissonPMF(m; mu_j), shape (m_terms + 1,)."""
    q = np.zeros(m_terms + 1)
    small = mu <= 650.0  # exp(-mu) representable: plain pmf recurrence
    if small.any():
        p = sizes[small] * np.exp(-mu[small])
        z = mu[small]
        q[0] += p.sum()
        for m in range(1, m_terms + 1):
            p *= z
            p /= m
            q[m] += p.sum()
    if (~small).any():
        mm = np.arange(m_terms + 1)
        mu_b = mu[~small][:, None]
        log_a = mm[None, :] * np.log(mu_b) - mu_b - gammaln(mm + 1)[None, :]
        q += sizes[~small] @ np.exp(log_a)
    return q


def _chi2_basis_sweep(q: np.ndarray, dim: int, z: np.ndarray) -> np.ndarray:
    """sum_m q[m] * P(dim/2 + m, z) via the incomplete-gamma recurrence."""
    a = 0.5 * dim
    basis = gammainc(a, z)
    out = q[0] * basis
    with np.errstate(divide="ignore"):
        log_z = np.where(z > 0.0, np.log(np.maximum(z, 1e-300)), -np.inf)
    term = np.exp(a * log_z - z - gammaln(a + 1.0))
    for m in range(1, q.size):
        basis = np.maximum(basis - term, 0.0)
        out += q[m] * basis
        term *= z
        term /= a + m
    return out


def _ncx2_cdf(x: np.ndarray, dim: int, lam: float, tol: float) -> np.ndarray:
    """Noncentral chi-squared CDF with certified truncation error <= tol.

    The Poisson mixture is summed over a window around its mode, so the
    term count scales with sqrt(noncentrality) rather than the
    noncentrality itself; both tails of the window are below tol/2.
    """
    x = np.asarray(x, dtype=float)
    mu = 0.5 * lam
    if mu == 0.0:
        return gammainc(0.5 * dim, 0.5 * x)
    half_width = 12.0 * math.sqrt(mu + 4.0) + 30.0
    m_lo = max(0, int(mu - half_width))
    m_hi = _poisson_term_count(mu, 0.25 * tol)
    if m_lo > 0:
        # verified lower tail below the window
        while _poisson.cdf(m_lo - 1, mu) > 0.25 * tol:
            m_lo = max(0, m_lo - int(half_width))
            if m_lo == 0:
                break
    n_terms = m_hi - m_lo + 1
    if n_terms > 5_000_000:
        raise EvaluationError(
            f"noncentral series window has {n_terms} terms "
            f"(noncentrality/2 = {mu:.3g}, tol = {tol:.1e})")
    # multiplicative recurrence from the mode, then normalize over the
    # window: avoids the exponent cancellation of the direct log formula
    mode = min(max(int(mu), m_lo), m_hi)
    q = np.empty(m_hi - m_lo + 1)
    q[mode - m_lo] = 1.0
    for mm in range(mode + 1, m_hi + 1):
        q[mm - m_lo] = q[mm - 1 - m_lo] * (mu / mm)
    for mm in range(mode - 1, m_lo - 1, -1):
        q[mm - m_lo] = q[mm + 1 - m_lo] * ((mm + 1) / mu)
    q /= q.sum()  # window tail mass below tol/2 by construction
    a0 = 0.5 * dim + m_lo
    z = 0.5 * x
    basis = gammainc(a0, z)
    out = q[0] * basis
    with np.errstate(divide="ignore"):
        log_z = np.where(z > 0.0, np.log(np.maximum(z, 1e-300)), -np.inf)
    term = np.exp(a0 * log_z - z - gammaln(a0 + 1.0))
    for i in range(1, n_terms):
        basis = np.maximum(basis - term, 0.0)
        out += q[i] * basis
        term *= z
        term /= a0 + i
    return out


def _ncx2_pdf(x, dim: int, lam: float):
    """Noncentral chi-squared density (Bessel form, overflow-safe)."""
    x = np.asarray(x, dtype=float)
    if lam == 0.0:
        a = 0.5 * dim
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(x > 0.0,
                           np.exp((a - 1.0) * np.log(np.maximum(x, 1e-300))
                                  - 0.5 * x - a * math.log(2.0) - gammaln(a)),
                           0.0)
        return out
    nu = 0.5 * dim - 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(x * lam)
        out = np.where(
            x > 0.0,
            0.5 * np.exp(-0.5 * (np.sqrt(x) - math.sqrt(lam)) ** 2)
            * np.where(x > 0, (x / lam), 1.0) ** (0.5 * nu) * ive(nu, sq),
            0.0,
        )
    return out


# ---------------------------------------------------------------------------
# Pointwise kernels
# ---------------------------------------------------------------------------

def radial_cdf(ctx: KernelContext, y: float, r, t: float):
    """w(y, r, t) = P(||B_t|| < r | ||B_0|| = y); vectorized in r."""
    _check_time(t)
    if y < 0.0:
        raise ValueError("y must be nonnegative")
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0.0):
        raise ValueError("r must be nonnegative")
    d = ctx.dim
    s2 = 2.0 * math.sqrt(t)
    if d == 1:
        out = 0.5 * (erf((r_arr - y) / s2) + erf((r_arr + y) / s2))
    elif d == 3 and y > 0.0:
        expm = np.exp(-((r_arr - y) ** 2) / (4.0 * t))
        expp = np.exp(-((r_arr + y) ** 2) / (4.0 * t))
        out = (0.5 * (erf((r_arr - y) / s2) + erf((r_arr + y) / s2))
               - math.sqrt(t / math.pi) / y * (expm - expp))
    else:
        out = _ncx2_cdf(r_arr * r_arr / (2.0 * t), d, y * y / (2.0 * t), ctx.tolerance)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if np.isscalar(r) or r_arr.ndim == 0 else out


def bessel_density(ctx: KernelContext, y: float, r, t: float):
    """g(y, r, t) = dw/dr, the radial transition density.

    The y = 0 case is the continuity limit: the chi distribution with d
    degrees of freedom scaled by sqrt(2t).
    """
    _check_time(t)
    if y < 0.0:
        raise ValueError("y must be nonnegative")
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0.0):
        raise ValueError("r must be nonnegative")
    out = (r_arr / t) * _ncx2_pdf(r_arr * r_arr / (2.0 * t), ctx.dim, y * y / (2.0 * t))
    return float(out) if np.isscalar(r) or r_arr.ndim == 0 else out


def kernel_G(ctx: KernelContext, y: float, r, t: float, method: str = "analytic"):
    """G(y, r, t) = -dw/dy, evaluated analytically or by Richardson differences.

    The analytic route uses that differentiating the noncentral series in
    its noncentrality shifts the degrees of freedom by two:
    G = (y/t) * f_ncx2(r^2/2t; d+2, y^2/2t).
    """
    _check_time(t)
    if y < 0.0:
        raise ValueError("y must be nonnegative")
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0.0):
        raise ValueError("r must be nonnegative")
    if method == "analytic":
        out = (y / t) * _ncx2_pdf(r_arr * r_arr / (2.0 * t), ctx.dim + 2, y * y / (2.0 * t))
    elif method == "fd":
        h = max(1e-5, 1e-3 * y)
        if y < h:
            h = 0.5 * y if y > 0 else 1e-6
        def diff(step):
            return -(radial_cdf(ctx, y + step, r_arr, t)
                     - radial_cdf(ctx, max(y - step, 0.0), r_arr, t)) / (2.0 * step)
        d1, d2 = diff(h), diff(0.5 * h)
        out = (4.0 * np.asarray(d2) - np.asarray(d1)) / 3.0
    else:
        raise ValueError(f"unknown method {method!r}")
    out = np.maximum(out, -ctx.tolerance)
    return float(out) if np.isscalar(r) or r_arr.ndim == 0 else out


# ---------------------------------------------------------------------------
# Grid engine: G_t applied to a step profile
# ---------------------------------------------------------------------------

def _maxwell_cdf(r: np.ndarray, t: float) -> np.ndarray:
    """w(0, r, t) in d = 3 (Maxwell law of ||N(0, 2t I_3)||)."""
    q = r / (2.0 * math.sqrt(t))
    return erf(q) - (2.0 / _SQRT_PI) * q * np.exp(-q * q)


def _mixture_series(dim: int, t: float, locs: np.ndarray, sizes: np.ndarray,
                    r_nodes: np.ndarray, tol: float) -> tuple[np.ndarray, float]:
    """sum_j sizes_j * w(locs_j, r, t) via the collapsed Poisson mixture.

    The jumps span noncentralities from 0 up, so the full range 0..M is
    swept (no mode window applies); M is capped to keep the sweep feasible.
    """
    mu = locs * locs / (4.0 * t)
    total = sizes.sum()
    m_terms = _poisson_term_count(float(mu.max(initial=0.0)), 0.5 * tol / max(total, 1e-300))
    if m_terms > 2_000_000:
        raise EvaluationError(
            f"profile mixture needs {m_terms} series terms; the largest jump "
            f"radius is too far out for this time step (max mu = {mu.max():.3g})")
    q = _poisson_mixture_weights(sizes, mu, m_terms)
    z = r_nodes * r_nodes / (4.0 * t)
    vals = _chi2_basis_sweep(q, dim, z)
    eval_err = tol + 1e-15 * m_terms
    return np.clip(vals, 0.0, total), eval_err


class _ImageEngine:
    """Cached FFT plans for lattice mixtures in d = 1 or 3.

    For jumps and outputs on the common lattice i*h, the image formulas
    reduce the mixture to convolutions sum_j c_j K[i-j] and correlations
    sum_j c_j K[i+j] against fixed kernel tables: exact finite sums.  All
    terms share one padded length, the reversed-input transforms come from
    the conjugate-phase identity, and everything is summed in the spectral
    domain, so one apply costs one forward and one inverse real FFT per
    weight vector.
    """

    def __init__(self, dim: int, t: float, h: float, n: int):
        self.dim, self.t, self.h, self.n = dim, t, h, n
        m = np.arange(-(n - 1), 2 * n - 1)  # offsets needed by conv and corr
        self.n_fft = fft.next_fast_len(4 * n - 3)
        freqs = np.arange(self.n_fft // 2 + 1)
        # rfft of the reversed, zero-padded c equals conj(rfft(c)) * phase
        self.rev_phase = np.exp(-2j * math.pi * freqs * (n - 1) / self.n_fft)
        k_erf = erf(m * h / (2.0 * math.sqrt(t)))
        self.erf_conv = fft.rfft(k_erf, self.n_fft)
        self.erf_corr = fft.rfft(k_erf[n - 1:], self.n_fft)
        if dim == 3:
            k_exp = np.exp(-((m * h) ** 2) / (4.0 * t))
            self.exp_conv = fft.rfft(k_exp, self.n_fft)
            self.exp_corr = fft.rfft(k_exp[n - 1:], self.n_fft)
            lat = np.arange(n) * h
            self.maxwell_origin = _maxwell_cdf(lat, t) - erf(lat / (2.0 * math.sqrt(t)))

    def apply(self, c: np.ndarray) -> np.ndarray:
        c_hat = fft.rfft(c, self.n_fft)
        c_rev_hat = np.conj(c_hat) * self.rev_phase
        spec = 0.5 * (c_hat * self.erf_conv + c_rev_hat * self.erf_corr)
        if self.dim == 3:
            w2 = np.zeros_like(c)
            w2[1:] = c[1:] / (np.arange(1, self.n) * self.h)
            w_hat = fft.rfft(w2, self.n_fft)
            w_rev_hat = np.conj(w_hat) * self.rev_phase
            spec -= math.sqrt(self.t / math.pi) * (
                w_hat * self.exp_conv - w_rev_hat * self.exp_corr)
        vals = fft.irfft(spec, self.n_fft)[self.n - 1: 2 * self.n - 1]
        if self.dim == 3 and c[0] != 0.0:
            # a jump at the origin follows the Maxwell limit; the image
            # terms above already cancel there (w2[0] = 0)
            vals += c[0] * self.maxwell_origin
        return vals


_IMAGE_CACHE: dict[tuple, _ImageEngine] = {}
_IMAGE_PAD = 256  # lattice sizes are bucketed so the kernel FFTs get reused


def _mixture_images_lattice(dim: int, t: float, c: np.ndarray, h: float
                            ) -> tuple[np.ndarray, float]:
    """Mixture on the lattice r_i = i*h for d in {1, 3} via image formulas."""
    n_out = c.size
    n = min(-(-n_out // _IMAGE_PAD) * _IMAGE_PAD, max(n_out, 1) + _IMAGE_PAD)
    key = (dim, float(t), float(h), n)
    engine = _IMAGE_CACHE.get(key)
    if engine is None:
        if len(_IMAGE_CACHE) > 32:
            _IMAGE_CACHE.clear()
        engine = _ImageEngine(dim, float(t), float(h), n)
        _IMAGE_CACHE[key] = engine
    c_pad = np.zeros(n)
    c_pad[:n_out] = c
    vals = engine.apply(c_pad)[:n_out]
    eval_err = 64.0 * np.finfo(float).eps * max(n, 1)
    return np.clip(vals, 0.0, c.sum()), eval_err


def mixture_node_values(dim: int, t: float, locs: np.ndarray, sizes: np.ndarray,
                        r_nodes: np.ndarray, tol: float = 1e-12,
                        lattice_h: float | None = None) -> tuple[np.ndarray, float]:
    """Evaluate sum_j sizes_j * w(locs_j, r, t) at the given nodes.

    When ``lattice_h`` is given, ``locs`` and ``r_nodes`` must both be the
    lattice i*lattice_h for i = 0..n-1; d in {1, 3} then uses the fast image
    route.  Returns (values, certified absolute evaluation error).
    """
    _check_time(t)
    locs = np.asarray(locs, dtype=float)
    sizes = np.asarray(sizes, dtype=float)
    if locs.size == 0:
        return np.zeros_like(np.asarray(r_nodes, dtype=float)), 0.0
    if lattice_h is not None and dim in (1, 3):
        n = np.asarray(r_nodes).size
        c = np.zeros(n)
        idx = np.rint(locs / lattice_h).astype(int)
        np.add.at(c, idx, sizes)
        return _mixture_images_lattice(dim, t, c, lattice_h)
    return _mixture_series(dim, t, locs, sizes, np.asarray(r_nodes, dtype=float), tol)


# ---------------------------------------------------------------------------
# Operators on profiles
# ---------------------------------------------------------------------------

def cutoff(f: RadialProfile, m: float) -> RadialProfile:
    """C_m f = pointwise min(f, m), preserving the step structure."""
    return f.clipped(m)


def _default_grid(f: RadialProfile, t: float, spacing: float | None) -> np.ndarray:
    r_scale = max(1.0, f.locations[-1] if f.locations.size else 1.0)
    h = spacing if spacing is not None else 2e-3 * r_scale
    hi = min(f.domain_cap, (f.locations[-1] if f.locations.size else 0.0)
             + support_band(t) + 1.0)
    grid = np.arange(0.0, hi + h, h)
    if f.locations.size:
        grid = np.union1d(grid, f.locations)
    return grid


def apply_Gt(ctx: KernelContext, f: RadialProfile, t: float, mode: str = "upper",
             grid: np.ndarray | None = None, spacing: float | None = None) -> RadialProfile:
    """G_t f as a step profile, rounded up or down onto the output grid.

    A step profile is a finite mixture of unit steps, and integrating G
    against a unit step at a gives w(a, r, t), so G_t f(r) =
    sum_j c_j w(a_j, r, t) with c_j the jump sizes.  ``mode='upper'`` rounds
    node values up across each grid cell, ``mode='lower'`` rounds down, so
    the two modes bracket the exact operator image pointwise.
    """
    _check_time(t)
    if mode not in ("upper", "lower"):
        raise ValueError("mode must be 'upper' or 'lower'")
    if grid is None:
        grid = _default_grid(f, t, spacing)
    grid = np.unique(np.asarray(grid, dtype=float))
    if grid[0] != 0.0:
        grid = np.concatenate(([0.0], grid))
    vals, _ = mixture_node_values(ctx.dim, t, f.locations, f.jump_sizes, grid,
                                  tol=ctx.tolerance)
    vals = np.maximum.accumulate(vals)  # enforce monotonicity against roundoff
    tail = float(f.final_value)
    out_cap = f.domain_cap + support_band(t)
    if mode == "upper":
        loc = grid
        val = np.concatenate((vals[1:], [tail]))
    else:
        loc = grid[1:]
        val = vals[1:]
    keep = np.diff(val, prepend=0.0) > 0.0
    return RadialProfile(loc[keep], np.clip(val[keep], 0.0, 1.0), out_cap, ctx.dim)


@dataclass(frozen=True)
class GridFunction:
    """Plain sampled function on radius nodes; values may exceed 1."""

    nodes: np.ndarray
    values: np.ndarray
    clamped: bool = False

    def __call__(self, r):
        return np.interp(r, self.nodes, self.values)

    @property
    def sup(self) -> float:
        return float(self.values.max()) if self.values.size else 0.0


def linear_evolve(ctx: KernelContext, f0: RadialProfile, t: float,
                  grid: np.ndarray | None = None, spacing: float | None = None
                  ) -> GridFunction:
    """e^t * (G_t f0): the growing linear evolution, returned unclamped."""
    _check_time(t)
    if grid is None:
        grid = _default_grid(f0, t, spacing)
    grid = np.unique(np.asarray(grid, dtype=float))
    vals, _ = mixture_node_values(ctx.dim, t, f0.locations, f0.jump_sizes, grid,
                                  tol=ctx.tolerance)
    return GridFunction(grid, math.exp(t) * vals, clamped=False)
