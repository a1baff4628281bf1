"""Orthogonal joint diagonalization by Jacobi (Givens) rotations."""

from __future__ import annotations

import math

import numpy as np

from bayesjd.model import MatrixSet


def off_diagonal(c) -> float:
    """``sum_k sum_{i != j} C_k[i, j]^2``."""
    c = np.asarray(c, dtype=float)
    return float(np.sum(c**2) - np.sum(np.diagonal(c, axis1=1, axis2=2) ** 2))


def jacobi_jd(c, tol: float = 1e-8, max_sweeps: int = 100, return_info: bool = False):
    """Orthogonal ``V`` making every ``V^T C_k V`` as diagonal as possible.

    Inputs are symmetrized first.  Each sweep visits all pairs ``(p, q)``
    and applies the Givens rotation that maximizes the summed squared
    diagonal, stopping after the first sweep in which every rotation has
    ``|sin| < tol``.
    """
    mats = c.matrices if isinstance(c, MatrixSet) else np.asarray(c, dtype=float)
    if mats.ndim == 2:
        mats = mats[None]
    a = 0.5 * (mats + np.transpose(mats, (0, 2, 1)))
    a = np.array(a)
    n = a.shape[1]
    v = np.eye(n)
    history = [off_diagonal(a)]
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                h1 = a[:, p, p] - a[:, q, q]
                h2 = a[:, p, q] + a[:, q, p]
                g00 = h1 @ h1
                g11 = h2 @ h2
                g01 = h1 @ h2
                ton = g00 - g11
                toff = 2.0 * g01
                theta = 0.5 * math.atan2(toff, ton + math.hypot(ton, toff))
                cs, sn = math.cos(theta), math.sin(theta)
                if sn == 0.0:
                    continue
                # sub-tolerance rotations are still applied, they just do not extend the loop
                rotated = rotated or abs(sn) >= tol
                # columns: new_p = c*p + s*q, new_q = -s*p + c*q
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p], v[:, q] = cs * vp + sn * vq, cs * vq - sn * vp
                ap, aq = a[:, :, p].copy(), a[:, :, q].copy()
                a[:, :, p], a[:, :, q] = cs * ap + sn * aq, cs * aq - sn * ap
                ap, aq = a[:, p, :].copy(), a[:, q, :].copy()
                a[:, p, :], a[:, q, :] = cs * ap + sn * aq, cs * aq - sn * ap
        history.append(off_diagonal(a))
        if not rotated:
            break
    if return_info:
        return v, {"sweeps": sweeps, "off_diagonal": history, "diagonalized": a}
    return v


def select_columns(v, c, m) -> np.ndarray:
    """The ``m`` columns of ``v`` with the largest ``sum_k (v_i^T C_k v_i)^2``."""
    mats = c.matrices if isinstance(c, MatrixSet) else np.asarray(c, dtype=float)
    diag = np.einsum("ni,knp,pi->ki", v, mats, v)
    energy = np.sum(diag**2, axis=0)
    order = np.argsort(-energy, kind="stable")[:m]
    return v[:, order]
