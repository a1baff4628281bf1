"""Convergence and accuracy diagnostics."""

from __future__ import annotations

import math

import numpy as np

from bayesjd.model import MatrixSet, log_likelihood


def _as_series(series, min_len=100) -> np.ndarray:
    x = np.asarray(series, dtype=float).ravel()
    if x.size < min_len:
        raise ValueError(f"series needs at least {min_len} values, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("series contains non-finite values")
    return x


def autocorrelation(x) -> np.ndarray:
    """Sample autocorrelation at all lags (FFT, biased normalisation)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    if acov[0] <= 0:
        return np.zeros(n)
    return acov / acov[0]


def ess(series) -> float:
    """Effective sample size ``n / (1 + 2 sum rho_t)``.

    The sum runs over lags ``t = 1, 2, ...`` and stops before the first
    ``t`` with ``rho_t + rho_{t+1} <= 0``.  Result clamped to ``[1, n]``;
    a constant series gets ``n``.
    """
    x = _as_series(series)
    n = x.size
    if np.ptp(x) == 0:
        return float(n)
    rho = autocorrelation(x)
    total = 0.0
    for t in range(1, n - 1):
        if rho[t] + rho[t + 1] <= 0:
            break
        total += rho[t]
    return float(min(max(n / (1.0 + 2.0 * total), 1.0), n))


def gelman_rubin(series_per_chain, second_half: bool = True) -> float:
    """Potential scale reduction ``sqrt(V / W)`` over several chains.

    With ``second_half`` (the default) only the latter half of each chain
    enters the computation.  Values are floored at 1.
    """
    chains = [np.asarray(s, dtype=float).ravel() for s in series_per_chain]
    if len(chains) < 2:
        raise ValueError("need at least two chains")
    lengths = {c.size for c in chains}
    if len(lengths) != 1:
        raise ValueError("chains must have equal lengths")
    length = lengths.pop()
    if length < 100:
        raise ValueError("chains need at least 100 values")
    x = np.stack(chains)
    if second_half:
        x = x[:, length // 2 :]
    if not np.all(np.isfinite(x)):
        raise ValueError("series contains non-finite values")
    n = x.shape[1]
    means = x.mean(axis=1)
    w = float(np.mean(x.var(axis=1, ddof=1)))
    b = n * float(np.var(means, ddof=1))
    if w == 0:
        return 1.0 if np.ptp(means) == 0 else math.inf
    v = (n - 1) / n * w + b / n
    # with no between-chain spread the ratio is (n-1)/n; report that as 1
    return max(1.0, math.sqrt(v / w))


def comparison_matrix(b_hat, b_true) -> np.ndarray:
    """``P = pinv(B_hat) B_true``."""
    b_hat = np.asarray(b_hat, dtype=float)
    b_true = np.asarray(b_true, dtype=float)
    if b_hat.shape[0] != b_true.shape[0]:
        raise ValueError("estimate and truth have different row counts")
    return np.linalg.pinv(b_hat) @ b_true


def amari_index(p) -> float:
    """Amari performance index of ``P``; zero iff ``P`` is a scaled permutation."""
    a = np.abs(np.asarray(p, dtype=float))
    if a.ndim != 2:
        raise ValueError("P must be a matrix")
    row_max = a.max(axis=1)
    col_max = a.max(axis=0)
    if np.any(row_max == 0) or np.any(col_max == 0):
        raise ValueError("P has an all-zero row or column")
    rows = np.sum(a.sum(axis=1) / row_max - 1.0)
    cols = np.sum(a.sum(axis=0) / col_max - 1.0)
    return float(rows + cols)


def api(b_hat, b_true) -> float:
    return amari_index(comparison_matrix(b_hat, b_true))


def bic_dimension(n, m, k) -> int:
    """Free parameters: K*M eigenvalues, K noise variances and the Stiefel dimension of B."""
    return k * m + k + (n * m - m * (m + 1) // 2)


def bic_log_marginal(c, theta_map, m=None) -> float:
    """``log L(theta_map) - (d / 2) log(K N^2)``."""
    mats = c.matrices if isinstance(c, MatrixSet) else np.asarray(c, dtype=float)
    k, n, _ = mats.shape
    m = theta_map.m if m is None else m
    if theta_map.m != m:
        raise ValueError("state does not have m columns")
    ll = log_likelihood(mats, theta_map.b, theta_map.u, theta_map.sigma2)
    return ll - 0.5 * bic_dimension(n, m, k) * math.log(k * n * n)


def model_select(c, m_range, config=None):
    """Fit each ``m`` with the Gibbs sampler and score its MAP state by BIC.

    Returns ``(best_m, scores)`` with scores in the order of ``m_range``.
    """
    from bayesjd.gibbs import SamplerConfig, map_estimate, run_chains

    config = config or SamplerConfig()
    ms = list(m_range)
    scores = []
    for m in ms:
        traces = run_chains(c, m, config)
        scores.append(bic_log_marginal(c, map_estimate(traces), m))
    best = ms[int(np.argmax(scores))]
    return best, scores


def summarize(values) -> dict:
    v = np.asarray(values, dtype=float)
    return {
        "min": float(v.min()),
        "mean": float(v.mean()),
        "std": float(v.std(ddof=1)) if v.size > 1 else 0.0,
        "max": float(v.max()),
    }


def ess_table(samples) -> dict:
    """Per-coordinate ESS of an ``(n, M)`` sample array summarized as min/median/mean/max."""
    vals = np.array([ess(samples[:, j]) for j in range(samples.shape[1])])
    return {
        "min": float(vals.min()),
        "median": float(np.median(vals)),
        "mean": float(vals.mean()),
        "max": float(vals.max()),
    }
