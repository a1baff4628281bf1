"""Synthetic data: planted joint-diagonalization sets, a sine-source BSS
pipeline (mixing, whitening, lagged covariances) and two-class CSP data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bayesjd.model import MatrixSet, reconstruct


@dataclass(frozen=True)
class PlantedInstance:
    c: MatrixSet
    b_true: np.ndarray
    u_true: np.ndarray
    sigma2_true: float

    def truth_dict(self, seed=None) -> dict:
        n, m = self.b_true.shape
        return {
            "n": n,
            "m": m,
            "b_true": self.b_true.ravel().tolist(),
            "u_true": self.u_true.tolist(),
            "sigma2": float(self.sigma2_true),
            "seed": seed,
        }


def random_stiefel(n, m, rng) -> np.ndarray:
    """Haar-distributed ``n x m`` matrix with orthonormal columns.

    QR of a Gaussian matrix with the diagonal of ``R`` made positive.
    """
    if not 1 <= m <= n:
        raise ValueError("need 1 <= m <= n")
    q, r = np.linalg.qr(rng.standard_normal((n, m)))
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    return q * d


def gen_jd_dataset(n, m, k, sigma2, rng) -> PlantedInstance:
    """``C_k = B diag(u_k) B^T + E_k`` with N(0, 1) eigenvalues and N(0, sigma2) noise."""
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    b = random_stiefel(n, m, rng)
    u = rng.standard_normal((k, m))
    noise = np.sqrt(sigma2) * rng.standard_normal((k, n, n))
    c = np.stack([reconstruct(b, u[i]) for i in range(k)]) + noise
    return PlantedInstance(MatrixSet(c), b, u, float(sigma2))


def gen_sine_sources(n_sources, n_samples) -> np.ndarray:
    """Deterministic bank of sines, source i at ``2 + 3i`` cycles per record with phase ``i pi / 7``."""
    if n_sources < 1:
        raise ValueError("need at least one source")
    t = np.arange(n_samples)
    i = np.arange(n_sources)[:, None]
    freq = 2 + 3 * i
    return np.sin(2 * np.pi * freq * t / n_samples + i * np.pi / 7)


def mix_and_noise(s, a, sigma, rng) -> np.ndarray:
    """``X = A S + E`` with ``E`` i.i.d. N(0, sigma^2)."""
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float)
    if a.shape != (s.shape[0], s.shape[0]):
        raise ValueError("mixing matrix must be channels x channels")
    if np.linalg.matrix_rank(a) < a.shape[0]:
        raise ValueError("mixing matrix is singular")
    return a @ s + sigma * rng.standard_normal(s.shape)


def whiten(x, eps: float = 1e-12):
    """Eigen square-root whitening of mean-centred data.

    Returns ``(W, X_tilde, mean)`` where ``W = D^-1/2 U^T`` and
    ``X_tilde = W (X - mean)`` has identity sample covariance.
    """
    x = np.asarray(x, dtype=float)
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    cov = xc @ xc.T / x.shape[1]
    d, u = np.linalg.eigh(cov)
    if d.min() < eps:
        raise np.linalg.LinAlgError(f"covariance is rank deficient (smallest eigenvalue {d.min():.3g})")
    w = (u / np.sqrt(d)).T
    return w, w @ xc, mean


def lagged_covariances(x_tilde, max_lag) -> MatrixSet:
    """``C(tau)[i, j] = mean_t X(t + tau)_i X(t)_j`` for ``tau = 1..max_lag``."""
    x = np.asarray(x_tilde, dtype=float)
    t = x.shape[1]
    if not 1 <= max_lag < t:
        raise ValueError("need 1 <= max_lag < number of samples")
    mats = [x[:, tau:] @ x[:, : t - tau].T / (t - tau) for tau in range(1, max_lag + 1)]
    return MatrixSet(np.stack(mats))


def random_mixing(n, rng, min_cond: float = 1e-3) -> np.ndarray:
    """Gaussian ``n x n`` matrix, redrawn until comfortably nonsingular."""
    while True:
        a = rng.standard_normal((n, n))
        if 1.0 / np.linalg.cond(a) > min_cond:
            return a


@dataclass(frozen=True)
class BSSProblem:
    sources: np.ndarray
    mixing: np.ndarray
    mixtures: np.ndarray
    w: np.ndarray
    whitened: np.ndarray
    c: MatrixSet

    @property
    def global_truth(self) -> np.ndarray:
        """``W A``: the matrix a perfect separating ``B`` reproduces up to permutation and sign."""
        return self.w @ self.mixing


def gen_bss_problem(rng, n_sources=10, n_samples=1000, sigma=0.1, max_lag=100) -> BSSProblem:
    s = gen_sine_sources(n_sources, n_samples)
    a = random_mixing(n_sources, rng)
    x = mix_and_noise(s, a, sigma, rng)
    w, xt, _ = whiten(x)
    return BSSProblem(s, a, x, w, xt, lagged_covariances(xt, max_lag))


CSPA_CLASS_VARIANCES = ((0.1, 0.9), (0.9, 0.1))


def gen_cspa_dataset(rng, n_per_class=200, a=None):
    """Two classes ``Y^j = A S^j`` with ``S^1 ~ N(0, diag(.1, .9))``, ``S^2 ~ N(0, diag(.9, .1))``."""
    if n_per_class < 2:
        raise ValueError("need at least two samples per class")
    if a is None:
        a = random_mixing(2, rng)
    ys = []
    for var in CSPA_CLASS_VARIANCES:
        s = np.sqrt(np.asarray(var))[:, None] * rng.standard_normal((2, n_per_class))
        ys.append(a @ s)
    return ys[0], ys[1], a


def class_covariances(y1, y2):
    """Whiten the pooled data and return ``(W, mean, MatrixSet of the two class covariances)``."""
    w, _, mean = whiten(np.hstack([y1, y2]))
    covs = []
    for y in (y1, y2):
        z = w @ (y - mean)
        covs.append(z @ z.T / z.shape[1])
    return w, mean, MatrixSet(np.stack(covs))


def csp_filter(b, w, y, mean=None) -> np.ndarray:
    """Filtered data ``B^T W (Y - mean)``."""
    y = np.asarray(y, dtype=float)
    if mean is None:
        mean = np.zeros((y.shape[0], 1))
    return np.asarray(b).T @ np.asarray(w) @ (y - mean)
