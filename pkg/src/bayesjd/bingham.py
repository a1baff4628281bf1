"""Vector Bingham sampling, ``p(x) ∝ exp(x^T S x)`` on the unit sphere.

The sampler works in the eigenbasis of ``S`` where the density only
depends on the squared coordinates ``y_i^2``.  Each coordinate update
redraws ``theta = y_i^2`` from

    p(theta) ∝ theta^(-1/2) (1 - theta)^((M-3)/2) exp(lam_i theta + (1 - theta) r_i),

with ``r_i = sum_{j != i} lam_j y_j^2 / (1 - y_i^2)``, keeps the relative
proportions of the other coordinates, and draws a fresh sign for ``y_i``.

Three ways of drawing ``theta`` are available: an exact rejection sampler,
a stepping-out slice sampler and a midpoint grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special

SCHEMES = ("rejection", "slice", "grid")
MAX_REJECTIONS = 10**6
_DEGENERATE = 1e-14


class SamplingError(RuntimeError):
    """Raised when a sampler cannot produce a draw (pathological parameters)."""


@dataclass(frozen=True)
class ThetaScheme:
    tag: str = "rejection"
    grid_size: int = 1000
    slice_width: float = 0.25
    random_scan: bool = False

    def __post_init__(self):
        if self.tag not in SCHEMES:
            raise ValueError(f"unknown scheme {self.tag!r}; choose from {SCHEMES}")
        if self.grid_size < 10:
            raise ValueError("grid_size must be at least 10")
        if not self.slice_width > 0:
            raise ValueError("slice_width must be positive")


@dataclass(frozen=True)
class BinghamParams:
    sigma: np.ndarray
    eigvecs: np.ndarray
    eigvals: np.ndarray

    @classmethod
    def from_sigma(cls, sigma) -> "BinghamParams":
        u, lam = eigendecompose(sigma)
        return cls(np.asarray(sigma, dtype=float), u, lam)


def eigendecompose(sigma, atol: float = 1e-10):
    """Return ``(U, lam)`` with ``sigma = U diag(lam) U^T``, ``lam`` descending."""
    s = np.asarray(sigma, dtype=float)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError("sigma must be square")
    scale = max(1.0, float(np.max(np.abs(s)))) if s.size else 1.0
    if np.max(np.abs(s - s.T), initial=0.0) > atol * scale:
        raise ValueError("sigma must be symmetric")
    lam, u = np.linalg.eigh(0.5 * (s + s.T))
    return u[:, ::-1], lam[::-1]


def theta_log_density(theta, lambda_i, rest_term, m):
    """Unnormalized log density of ``theta = y_i^2`` given the other proportions."""
    theta = np.asarray(theta, dtype=float)
    if m < 2:
        raise ValueError("m must be at least 2")
    if np.any((theta <= 0) | (theta >= 1)):
        raise ValueError("theta must lie in (0, 1)")
    out = (
        -0.5 * np.log(theta)
        + 0.5 * (m - 3) * np.log1p(-theta)
        + lambda_i * theta
        + (1.0 - theta) * rest_term
    )
    return float(out) if out.ndim == 0 else out


# -- rejection ---------------------------------------------------------------


def _log_lower_gamma(a, r, x):
    """log of int_0^x t^(a-1) exp(-r t) dt."""
    if r < 1e-8:
        return a * math.log(x) - math.log(a) - r * x * a / (a + 1)
    return math.lgamma(a) - a * math.log(r) + math.log(special.gammainc(a, r * x))


def _truncated_gamma(a, r, upper, rng):
    """Draw from density ∝ t^(a-1) exp(-r t) on (0, upper)."""
    if r < 1e-8:
        return upper * rng.random() ** (1.0 / a)
    p_upper = special.gammainc(a, r * upper)
    if p_upper > 0.5:
        while True:
            t = rng.standard_gamma(a) / r
            if t < upper:
                return t
    t = special.gammaincinv(a, rng.random() * p_upper) / r
    return min(t, upper)


def _log_max_on_upper_half(a, d):
    """max over x in [1/2, 1] of (a-1) log x - d x."""
    if a <= 1:
        x = 0.5
    else:
        x = 1.0 if d <= 0 else min(1.0, max(0.5, (a - 1) / d))
    return (a - 1) * math.log(x) - d * x


def _tilted_beta(a, b, d, rng):
    """Exact draw from ``x^(a-1) (1-x)^(b-1) exp(-d x)`` on (0, 1), d >= 0.

    Returns ``(x, 1 - x)`` so callers keep precision near either end.

    The interval is split at 1/2.  On the lower half the ``(1-x)`` factor is
    bounded (by ``exp(-(b-1)x)`` when ``b >= 1``, by ``2^(1-b)`` otherwise)
    and the envelope is a truncated Gamma; on the upper half the ``x`` factor
    is bounded by its maximum and the envelope is a power law in ``1 - x``.
    """
    if b >= 1:
        r_lo = d + (b - 1)
        log_k_lo = 0.0
    else:
        r_lo = d
        log_k_lo = (1 - b) * math.log(2.0)
    log_z_lo = log_k_lo + _log_lower_gamma(a, r_lo, 0.5)
    log_k_hi = _log_max_on_upper_half(a, d)
    log_z_hi = log_k_hi + b * math.log(0.5) - math.log(b)
    p_lo = 1.0 / (1.0 + math.exp(min(700.0, log_z_hi - log_z_lo)))

    for _ in range(MAX_REJECTIONS):
        if rng.random() < p_lo:
            x = _truncated_gamma(a, r_lo, 0.5, rng)
            if x <= 0.0:
                continue
            if b >= 1:
                log_acc = (b - 1) * (math.log1p(-x) + x)
            else:
                log_acc = (b - 1) * math.log1p(-x) - log_k_lo
            if math.log(rng.random()) < log_acc:
                return x, 1.0 - x
        else:
            y = 0.5 * rng.random() ** (1.0 / b)
            if y <= 0.0:
                continue
            x = 1.0 - y
            log_acc = (a - 1) * math.log(x) - d * x - log_k_hi
            if math.log(rng.random()) < log_acc:
                return x, y
    raise SamplingError(
        f"rejection sampler exceeded {MAX_REJECTIONS} attempts (a={a}, b={b}, d={d})"
    )


def _theta_rejection(lambda_i, rest_term, m, rng):
    c = lambda_i - rest_term
    a, b = 0.5, 0.5 * (m - 1)
    if c > 0:
        one_minus, theta = _tilted_beta(b, a, c, rng)
        return theta, one_minus
    return _tilted_beta(a, b, -c, rng)


# -- slice -------------------------------------------------------------------


def _theta_slice(lambda_i, rest_term, m, width, current, rng):
    def logf(t):
        return (
            -0.5 * math.log(t)
            + 0.5 * (m - 3) * math.log1p(-t)
            + lambda_i * t
            + (1.0 - t) * rest_term
        )

    x0 = current
    if not 0.0 < x0 < 1.0:
        raise ValueError("slice sampling needs a current theta in (0, 1)")
    log_y = logf(x0) + math.log(rng.random())
    left = x0 - width * rng.random()
    right = left + width
    while left > 0.0 and logf(left) > log_y:
        left -= width
    while right < 1.0 and logf(right) > log_y:
        right += width
    left, right = max(left, 0.0), min(right, 1.0)
    while True:
        x1 = left + (right - left) * rng.random()
        if 0.0 < x1 < 1.0 and logf(x1) > log_y:
            return x1, 1.0 - x1
        if x1 < x0:
            left = x1
        else:
            right = x1
        if right - left < 1e-300:
            return x0, 1.0 - x0


# -- grid --------------------------------------------------------------------


@lru_cache(maxsize=8)
def _grid(size):
    theta = (np.arange(size) + 0.5) / size
    return theta, np.log(theta), np.log1p(-theta)


def _theta_grid(lambda_i, rest_term, m, size, rng):
    theta, log_t, log_1mt = _grid(size)
    lp = -0.5 * log_t + 0.5 * (m - 3) * log_1mt + (lambda_i - rest_term) * theta
    w = np.exp(lp - lp.max())
    cdf = np.cumsum(w)
    j = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    j = min(j, size - 1)
    return theta[j], (size - j - 0.5) / size


def _draw_theta(lambda_i, rest_term, m, scheme, rng, current=None):
    if m < 2:
        raise ValueError("m must be at least 2")
    if scheme.tag == "rejection":
        return _theta_rejection(lambda_i, rest_term, m, rng)
    if scheme.tag == "grid":
        return _theta_grid(lambda_i, rest_term, m, scheme.grid_size, rng)
    if current is None:
        # no chain state to continue from: warm up a short slice chain
        t = 0.5
        for _ in range(25):
            t, _ = _theta_slice(lambda_i, rest_term, m, scheme.slice_width, t, rng)
        current = t
    return _theta_slice(lambda_i, rest_term, m, scheme.slice_width, current, rng)


def sample_theta(lambda_i, rest_term, m, scheme, rng, current=None) -> float:
    """Draw ``theta`` in (0, 1) from ``exp(theta_log_density)``.

    ``current`` is the present value of ``theta``; the slice scheme is a
    Markov move from it, the other two schemes ignore it.
    """
    return _draw_theta(lambda_i, rest_term, m, scheme, rng, current)[0]


# -- sweeps ------------------------------------------------------------------


def gibbs_sweep(y, lam, scheme, rng) -> np.ndarray:
    """One pass of coordinate updates for ``p(y) ∝ exp(sum lam_i y_i^2)``."""
    y = np.array(y, dtype=float)
    lam = np.asarray(lam, dtype=float)
    m = y.size
    if m == 1:
        return np.array([1.0 if rng.random() < 0.5 else -1.0])
    order = rng.permutation(m) if scheme.random_scan else range(m)
    for i in order:
        y2 = y * y
        rest_mass = y2.sum() - y2[i]
        if rest_mass < _DEGENERATE:
            continue
        rest = (lam @ y2 - lam[i] * y2[i]) / rest_mass
        cur = y2[i] / (y2[i] + rest_mass)
        if not 0.0 < cur < 1.0:
            cur = None
        theta, one_minus = _draw_theta(lam[i], rest, m, scheme, rng, cur)
        y *= math.sqrt(one_minus / rest_mass)
        y[i] = math.sqrt(theta) if rng.random() < 0.5 else -math.sqrt(theta)
    return y / np.sqrt(y @ y)


def random_unit_vector(m, rng) -> np.ndarray:
    z = rng.standard_normal(m)
    return z / np.linalg.norm(z)


def bingham_step(x, sigma_or_params, scheme, rng) -> np.ndarray:
    """One Gibbs sweep for ``exp(x^T S x)`` started at ``x`` (original frame)."""
    p = (
        sigma_or_params
        if isinstance(sigma_or_params, BinghamParams)
        else BinghamParams.from_sigma(sigma_or_params)
    )
    y = p.eigvecs.T @ np.asarray(x, dtype=float)
    y = gibbs_sweep(y / np.linalg.norm(y), p.eigvals, scheme, rng)
    return p.eigvecs @ y


def sample_vector_bingham(sigma, n_samples, burn_in=0, scheme=None, rng=None, x0=None):
    """Run the Gibbs sampler and return an ``(n_samples, M)`` array of unit vectors."""
    scheme = scheme or ThetaScheme()
    rng = rng if rng is not None else np.random.default_rng()
    params = BinghamParams.from_sigma(sigma)
    m = params.eigvals.size
    if x0 is None:
        y = random_unit_vector(m, rng)
    else:
        y = params.eigvecs.T @ np.asarray(x0, dtype=float)
        y /= np.linalg.norm(y)
    for _ in range(burn_in):
        y = gibbs_sweep(y, params.eigvals, scheme, rng)
    out = np.empty((n_samples, m))
    for t in range(n_samples):
        y = gibbs_sweep(y, params.eigvals, scheme, rng)
        out[t] = params.eigvecs @ y
    return out
