"""Generative model ``C_k = B diag(u_k) B^T + E_k`` and its likelihood.

Conventions used throughout the package:

* ``B`` is an ``(N, M)`` array with orthonormal columns (a Stiefel point).
* Eigenvalues are stored as a ``(K, M)`` array, row ``k`` being ``u_k``.
* Noise variances ``sigma2`` and prior scales ``v2`` are length-``K`` arrays.
* ``vec`` is column-major, so column ``m`` of the design matrix is
  ``kron(b_m, b_m)``.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

STIEFEL_ATOL = 1e-8


@dataclass(frozen=True)
class MatrixSet:
    """``K`` real ``N x N`` matrices stored as a ``(K, N, N)`` array."""

    matrices: np.ndarray

    def __post_init__(self):
        c = np.array(self.matrices, dtype=float)
        if c.ndim == 2:
            c = c[None]
        if c.ndim != 3 or c.shape[1] != c.shape[2]:
            raise ValueError(f"expected K square matrices, got shape {c.shape}")
        if c.shape[0] < 1 or c.shape[1] < 1:
            raise ValueError("need at least one non-empty matrix")
        if not np.all(np.isfinite(c)):
            raise ValueError("matrices contain non-finite entries")
        c.setflags(write=False)
        object.__setattr__(self, "matrices", c)

    @property
    def k(self) -> int:
        return self.matrices.shape[0]

    @property
    def n(self) -> int:
        return self.matrices.shape[1]

    def vectors(self) -> np.ndarray:
        """Return the ``(K, N*N)`` array whose rows are ``vec(C_k)``."""
        return np.stack([vectorize(c) for c in self.matrices])

    def symmetrized(self) -> np.ndarray:
        return 0.5 * (self.matrices + np.transpose(self.matrices, (0, 2, 1)))

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "k": self.k,
            "matrices": [c.ravel(order="C").tolist() for c in self.matrices],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MatrixSet":
        n, k = int(d["n"]), int(d["k"])
        mats = np.asarray(d["matrices"], dtype=float)
        if mats.shape != (k, n * n):
            raise ValueError(
                f"matrix payload has shape {mats.shape}, expected {(k, n * n)}"
            )
        return cls(mats.reshape(k, n, n))

    def to_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)
            f.write("\n")

    @classmethod
    def from_json(cls, path) -> "MatrixSet":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_csv_files(self, directory, prefix: str = "C") -> list[str]:
        """Write one CSV per matrix (N rows of N values); return the paths."""
        os.makedirs(directory, exist_ok=True)
        width = len(str(self.k))
        paths = []
        for i, c in enumerate(self.matrices, start=1):
            path = os.path.join(directory, f"{prefix}{i:0{width}d}.csv")
            with open(path, "w", newline="") as f:
                csv.writer(f).writerows([[repr(float(v)) for v in row] for row in c])
            paths.append(path)
        return paths

    @classmethod
    def from_csv_files(cls, paths: Sequence) -> "MatrixSet":
        mats = [np.loadtxt(p, delimiter=",", ndmin=2) for p in paths]
        return cls(np.stack(mats))


@dataclass(frozen=True)
class HyperParams:
    """Inverse-Gamma shape ``a_k`` and scale ``b_k`` for sigma2_k and v2_k."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.a, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if a.shape != b.shape:
            raise ValueError("a and b must have the same length")
        if np.any(a <= 0) or np.any(b <= 0):
            raise ValueError("hyperparameters must be positive")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @classmethod
    def default(cls, k: int, a: float = 1e-3, b: float = 1e-3) -> "HyperParams":
        return cls(np.full(k, a), np.full(k, b))

    def for_k(self, k: int) -> "HyperParams":
        """Broadcast scalar hyperparameters to ``k`` matrices."""
        if self.a.size == k:
            return self
        if self.a.size == 1:
            return HyperParams(np.full(k, self.a[0]), np.full(k, self.b[0]))
        raise ValueError(f"hyperparameters have length {self.a.size}, need {k}")


def check_stiefel(b, atol: float = STIEFEL_ATOL) -> np.ndarray:
    """Validate that ``b`` has orthonormal columns and return it as an array."""
    b = np.asarray(b, dtype=float)
    if b.ndim != 2 or b.shape[1] > b.shape[0] or b.shape[1] < 1:
        raise ValueError(f"a Stiefel point must be N x M with 1 <= M <= N, got {b.shape}")
    err = np.max(np.abs(b.T @ b - np.eye(b.shape[1])))
    if not err <= atol:
        raise ValueError(f"columns are not orthonormal (max deviation {err:.3g})")
    return b


def vectorize(c) -> np.ndarray:
    """Column-major ``vec``: ``out[i + j*N] = c[i, j]``."""
    return np.asarray(c, dtype=float).ravel(order="F")


def unvectorize(x, n: int) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape((n, n), order="F")


def build_design_matrix(b) -> np.ndarray:
    """Design matrix ``A`` whose column ``m`` is ``vec(b_m b_m^T)``.

    ``A = (B kron 1) * (1 kron B)`` elementwise, so ``x_k = A u_k`` is the
    vectorized noiseless model and ``A^T A = I_M`` when ``B^T B = I_M``.
    """
    b = check_stiefel(b)
    n, m = b.shape
    ones = np.ones((n, 1))
    return np.kron(b, ones) * np.kron(ones, b)


def reconstruct(b, u_k) -> np.ndarray:
    """Noiseless part ``B diag(u_k) B^T`` (symmetric)."""
    b = np.asarray(b, dtype=float)
    u_k = np.asarray(u_k, dtype=float)
    if u_k.shape != (b.shape[1],):
        raise ValueError("u_k must have one entry per column of B")
    out = (b * u_k) @ b.T
    return 0.5 * (out + out.T)


def residual_sq_norms(c: np.ndarray, b: np.ndarray, u: np.ndarray) -> np.ndarray:
    """``||C_k - B diag(u_k) B^T||_F^2`` for every k, computed directly."""
    recon = np.einsum("nm,km,pm->knp", b, u, b)
    return np.sum((c - recon) ** 2, axis=(1, 2))


def log_likelihood(c, b, u, sigma2) -> float:
    """Gaussian log-likelihood of the matrix set.

    Sum over k of ``-(N^2/2) log(2 pi sigma2_k) - ||C_k - B L_k B^T||_F^2 / (2 sigma2_k)``.
    """
    mats = c.matrices if isinstance(c, MatrixSet) else np.asarray(c, dtype=float)
    b = np.asarray(b, dtype=float)
    u = np.atleast_2d(np.asarray(u, dtype=float))
    sigma2 = np.atleast_1d(np.asarray(sigma2, dtype=float))
    if np.any(sigma2 <= 0):
        raise ValueError("noise variances must be positive")
    k, n, _ = mats.shape
    if u.shape != (k, b.shape[1]) or sigma2.shape != (k,):
        raise ValueError("dimension mismatch between data and parameters")
    r = residual_sq_norms(mats, b, u)
    return float(np.sum(-0.5 * n * n * np.log(2 * np.pi * sigma2) - r / (2 * sigma2)))
