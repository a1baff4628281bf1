"""Conditional draws of the orthonormal factor ``B``.

Given eigenvalues and noise variances, the conditional posterior of ``B``
is a matrix Langevin-Bingham density

    p(B) ∝ prod_m exp(b_m^T G_m b_m),   G_m = sum_k lam_m^k Y_k,
    Y_k = (C_k^T + C_k) / (2 sigma2_k).

With ``M < N`` each column is redrawn from a vector Bingham on the
orthogonal complement of the other columns.  With ``M == N`` that
complement is one-dimensional, so columns are redrawn in pairs: the pair
is a rotation of the current two columns inside their own span.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bayesjd.bingham import BinghamParams, ThetaScheme, bingham_step

_RANK_TOL = 1e-10


@dataclass(frozen=True)
class LBContext:
    """Scaled symmetric parts ``Y_k`` (shape ``(K, N, N)``) and eigenvalues ``(K, M)``."""

    sym_scaled: np.ndarray
    lambdas: np.ndarray

    @classmethod
    def from_data(cls, c, sigma2, lambdas) -> "LBContext":
        c = np.asarray(c, dtype=float)
        sigma2 = np.asarray(sigma2, dtype=float)
        sym = (c + np.transpose(c, (0, 2, 1))) / (2.0 * sigma2)[:, None, None]
        return cls(sym, np.atleast_2d(np.asarray(lambdas, dtype=float)))


def build_column_field(ctx: LBContext, m: int) -> np.ndarray:
    """``G_m = sum_k lam_m^k Y_k``."""
    g = np.tensordot(ctx.lambdas[:, m], ctx.sym_scaled, axes=1)
    return 0.5 * (g + g.T)


def null_space_basis(b_minus) -> np.ndarray:
    """Orthonormal basis of the orthogonal complement of ``span(b_minus)``.

    ``b_minus`` is ``N x r`` with orthonormal columns; the result is
    ``N x (N - r)``.
    """
    b_minus = np.asarray(b_minus, dtype=float)
    n, r = b_minus.shape
    if r == 0:
        return np.eye(n)
    if r >= n:
        raise ValueError("complement is empty: b_minus already spans R^N")
    q, rr = np.linalg.qr(b_minus, mode="complete")
    if np.min(np.abs(np.diag(rr))) < _RANK_TOL:
        raise ValueError("b_minus is rank deficient")
    return q[:, r:]


def update_column(b, i, ctx: LBContext, scheme: ThetaScheme, rng) -> np.ndarray:
    """Redraw column ``i`` of ``b`` (requires ``M < N``); returns a new array."""
    b = np.array(b, dtype=float)
    n, m = b.shape
    if m >= n:
        raise ValueError("single-column updates need M < N; use update_column_pair")
    q = null_space_basis(np.delete(b, i, axis=1))
    g = build_column_field(ctx, i)
    g_tilde = q.T @ g @ q
    beta = q.T @ b[:, i]
    beta /= np.linalg.norm(beta)
    beta = bingham_step(beta, BinghamParams.from_sigma(0.5 * (g_tilde + g_tilde.T)), scheme, rng)
    b[:, i] = q @ beta
    return b


def update_column_pair(b, i, j, ctx: LBContext, rng, scheme: ThetaScheme | None = None) -> np.ndarray:
    """Redraw columns ``i`` and ``j`` jointly (the ``M == N`` case).

    With ``Q = [b_i, b_j]`` spanning the complement of the other columns,
    the new pair is ``Q Z`` with ``Z = [z, s z_perp]``.  Because
    ``z_perp^T A z_perp = tr(A) - z^T A z`` for 2x2 symmetric ``A``, ``z``
    follows a circular Bingham with parameter ``A_i - A_j`` and the sign
    ``s`` is uniform.
    """
    if i == j:
        raise ValueError("column indices must differ")
    scheme = scheme or ThetaScheme()
    b = np.array(b, dtype=float)
    q = b[:, [i, j]]
    w = ctx.lambdas[:, i] - ctx.lambdas[:, j]
    h = np.tensordot(w, ctx.sym_scaled, axes=1)
    diff = q.T @ h @ q
    diff = 0.5 * (diff + diff.T)
    z = bingham_step(np.array([1.0, 0.0]), BinghamParams.from_sigma(diff), scheme, rng)
    z /= np.linalg.norm(z)
    s = 1.0 if rng.random() < 0.5 else -1.0
    zmat = np.array([[z[0], -s * z[1]], [z[1], s * z[0]]])
    b[:, [i, j]] = q @ zmat
    return b


def column_pairs(n: int, rng) -> list[tuple[int, int]]:
    """Random pairing of ``n`` columns; with odd ``n`` the last one gets a random earlier partner."""
    perm = rng.permutation(n)
    pairs = [(int(perm[t]), int(perm[t + 1])) for t in range(0, n - 1, 2)]
    if n % 2 == 1 and n > 1:
        partner = perm[rng.integers(n - 1)]
        pairs.append((int(perm[-1]), int(partner)))
    return pairs


def sample_B_step(b, ctx: LBContext, scheme: ThetaScheme, rng) -> np.ndarray:
    """One sweep over all columns of ``b``."""
    b = np.array(b, dtype=float)
    n, m = b.shape
    if m < n:
        for i in rng.permutation(m):
            b = update_column(b, int(i), ctx, scheme, rng)
        return b
    if n == 1:
        return b if rng.random() < 0.5 else -b
    for i, j in column_pairs(n, rng):
        b = update_column_pair(b, i, j, ctx, rng, scheme)
    return b


def log_lb_density(b, ctx: LBContext) -> float:
    """Unnormalized log density ``sum_m b_m^T G_m b_m``."""
    b = np.asarray(b, dtype=float)
    proj = np.einsum("nm,knp,pm->km", b, ctx.sym_scaled, b)
    return float(np.sum(ctx.lambdas * proj))
