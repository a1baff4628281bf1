"""Gibbs sampler over ``(B, u_k, sigma2_k, v2_k)``.

Each iteration draws, for every matrix k, the eigenvalues ``u_k`` from
their Gaussian conditional, the noise variance ``sigma2_k`` and the prior
scale ``v2_k`` from inverse-Gamma conditionals, and then sweeps once over
the columns of ``B``.

Priors: ``u_k ~ N(0, sigma2_k v2_k I)``, ``sigma2_k ~ IG(a_k, b_k)``,
``v2_k ~ IG(a_k, b_k)`` and ``B`` uniform on the Stiefel manifold.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from bayesjd.bingham import ThetaScheme
from bayesjd.matrix_lb import LBContext, sample_B_step
from bayesjd.model import HyperParams, MatrixSet, residual_sq_norms

logger = logging.getLogger(__name__)

REORTH_TOL = 1e-10
INIT_METHODS = ("jacobi", "eigen", "random")


class NumericalAbort(RuntimeError):
    """Non-finite likelihood during sampling; ``dump`` holds the offending state."""

    def __init__(self, message, dump):
        super().__init__(message)
        self.dump = dump


@dataclass(frozen=True)
class ChainState:
    b: np.ndarray
    u: np.ndarray
    sigma2: np.ndarray
    v2: np.ndarray

    def __post_init__(self):
        n, m = self.b.shape
        k = self.sigma2.shape[0]
        if self.u.shape != (k, m) or self.v2.shape != (k,):
            raise ValueError("inconsistent (N, M, K) dimensions in chain state")

    @property
    def m(self) -> int:
        return self.b.shape[1]

    def to_dict(self) -> dict:
        return {
            "b": self.b.ravel().tolist(),
            "u": self.u.tolist(),
            "sigma2": self.sigma2.tolist(),
            "v2": self.v2.tolist(),
        }


@dataclass(frozen=True)
class SamplerConfig:
    n_samples: int = 5000
    burn_in: int = 2500
    thin: int = 1
    scheme: ThetaScheme = field(default_factory=ThetaScheme)
    hyper: HyperParams | None = None
    seed: int = 0
    n_chains: int = 1
    init: str = "jacobi"
    n_jobs: int = 1

    def __post_init__(self):
        if not 0 <= self.burn_in < self.n_samples:
            raise ValueError("need 0 <= burn_in < n_samples")
        if self.thin < 1 or self.n_chains < 1:
            raise ValueError("thin and n_chains must be at least 1")
        if self.init not in INIT_METHODS:
            raise ValueError(f"init must be one of {INIT_METHODS}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def hyper_for(self, k: int) -> HyperParams:
        return (self.hyper or HyperParams.default(1)).for_k(k)


@dataclass
class ChainTrace:
    chain: int
    states: list
    iters: list
    state_logpost: list
    loglik: np.ndarray
    logpost: np.ndarray
    sigma2: np.ndarray
    reorth_count: int = 0


def chain_seed_sequence(seed: int, chain_index: int) -> np.random.SeedSequence:
    """Independent stream for chain ``chain_index`` split off ``seed``."""
    return np.random.SeedSequence(seed, spawn_key=(chain_index,))


def chain_rng(seed: int, chain_index: int) -> np.random.Generator:
    return np.random.default_rng(chain_seed_sequence(seed, chain_index))


def _data(c) -> np.ndarray:
    return c.matrices if isinstance(c, MatrixSet) else np.asarray(c, dtype=float)


# -- conditional draws -------------------------------------------------------


def u_posterior(x_k, a, v2_k):
    """Mean and unit-noise covariance of ``u_k | rest`` (general formula)."""
    a = np.asarray(a, dtype=float)
    prec = np.eye(a.shape[1]) / v2_k + a.T @ a
    cov = np.linalg.inv(prec)
    return cov @ (a.T @ np.asarray(x_k, dtype=float)), cov


def sample_u_k(x_k, a, sigma2_k, v2_k, rng) -> np.ndarray:
    """Draw ``u_k ~ N(mu, sigma2_k Sigma)``, ``Sigma = (I/v2_k + A^T A)^-1``."""
    if sigma2_k <= 0 or v2_k <= 0:
        raise ValueError("variances must be positive")
    mu, cov = u_posterior(x_k, a, v2_k)
    chol = np.linalg.cholesky(cov)
    return mu + math.sqrt(sigma2_k) * chol @ rng.standard_normal(mu.size)


def sigma2_posterior_params(x_k, a, u_k, v2_k, hyper_k):
    """Inverse-Gamma shape and scale of ``sigma2_k | rest``."""
    a_k, b_k = hyper_k
    x_k = np.asarray(x_k, dtype=float)
    u_k = np.asarray(u_k, dtype=float)
    resid = x_k - np.asarray(a, dtype=float) @ u_k
    shape = a_k + 0.5 * x_k.size + 0.5 * u_k.size
    scale = b_k + 0.5 * resid @ resid + 0.5 * (u_k @ u_k) / v2_k
    return shape, scale


def sample_sigma2_k(x_k, a, u_k, v2_k, hyper_k, rng) -> float:
    shape, scale = sigma2_posterior_params(x_k, a, u_k, v2_k, hyper_k)
    if not scale > 0:
        raise ValueError("non-positive posterior scale")
    return 1.0 / rng.gamma(shape, 1.0 / scale)


def v2_posterior_params(u_k, sigma2_k, hyper_k):
    a_k, b_k = hyper_k
    u_k = np.asarray(u_k, dtype=float)
    return a_k + 0.5 * u_k.size, b_k + 0.5 * (u_k @ u_k) / sigma2_k


def sample_v2_k(u_k, sigma2_k, hyper_k, rng) -> float:
    if sigma2_k <= 0:
        raise ValueError("sigma2_k must be positive")
    shape, scale = v2_posterior_params(u_k, sigma2_k, hyper_k)
    if not scale > 0:
        raise ValueError("non-positive posterior scale")
    return 1.0 / rng.gamma(shape, 1.0 / scale)


def _conditional_sweep(c, b, state_sigma2, state_v2, hyper, rng):
    """u, sigma2, v2 for all k at once given ``B``.

    Uses ``A^T A = I`` so ``A^T x_k = diag(B^T C_k B)`` and the u-covariance
    is ``I / (1 + 1/v2_k)``.  The matrices are conditionally independent
    given ``B``, so drawing all u_k, then all sigma2_k, then all v2_k is
    the same transition as looping over k.
    """
    k, n, _ = c.shape
    m = b.shape[1]
    proj = np.einsum("nm,knp,pm->km", b, c, b)
    shrink = 1.0 / (1.0 + 1.0 / state_v2)
    u = shrink[:, None] * proj + np.sqrt(state_sigma2 * shrink)[:, None] * rng.standard_normal((k, m))
    resid = residual_sq_norms(c, b, u)
    uu = np.sum(u * u, axis=1)
    shape = hyper.a + 0.5 * n * n + 0.5 * m
    scale = hyper.b + 0.5 * resid + 0.5 * uu / state_v2
    sigma2 = 1.0 / rng.gamma(shape, 1.0 / scale)
    shape_v = hyper.a + 0.5 * m
    scale_v = hyper.b + 0.5 * uu / sigma2
    v2 = 1.0 / rng.gamma(shape_v, 1.0 / scale_v)
    return u, sigma2, v2, resid


def _log_invgamma(x, a, b):
    return a * np.log(b) - np.vectorize(math.lgamma)(a) - (a + 1) * np.log(x) - b / x


def log_posterior(c, state: ChainState, hyper: HyperParams, resid=None) -> tuple[float, float]:
    """Return ``(log-likelihood, log joint density up to a constant)``."""
    c = _data(c)
    k, n, _ = c.shape
    hyper = hyper.for_k(k)
    if resid is None:
        resid = residual_sq_norms(c, state.b, state.u)
    s2, v2, m = state.sigma2, state.v2, state.m
    ll = float(np.sum(-0.5 * n * n * np.log(2 * np.pi * s2) - resid / (2 * s2)))
    uu = np.sum(state.u**2, axis=1)
    lp_u = -0.5 * m * np.log(2 * np.pi * s2 * v2) - uu / (2 * s2 * v2)
    lp = ll + float(np.sum(lp_u + _log_invgamma(s2, hyper.a, hyper.b) + _log_invgamma(v2, hyper.a, hyper.b)))
    return ll, lp


# -- initialisation ------------------------------------------------------------


def _orthonormalize(b):
    q, r = np.linalg.qr(b)
    sign = np.sign(np.diag(r))
    sign[sign == 0] = 1.0
    return q * sign


def init_state(c, m, hyper: HyperParams | None = None, rng=None, method: str = "jacobi") -> ChainState:
    """Starting state for a chain.

    ``B`` comes from one of

    * ``"jacobi"``: the ``m`` most energetic columns of the Jacobi joint
      diagonalizer of the symmetrized matrices,
    * ``"eigen"``: top-|eigenvalue| eigenvectors of the averaged symmetric part,
    * ``"random"``: a Haar-random Stiefel point.

    Eigenvalues are the least-squares fit ``diag(B^T C_k B)``, noise
    variances the mean squared residual (at least 1e-6), and ``v2_k = 1``.
    Column updates only rotate ``B`` inside the signal subspace through
    small excursions out of it, so the eigen start can take thousands of
    sweeps to settle; the Jacobi start avoids that burn-in.
    """
    from bayesjd.baseline import jacobi_jd, select_columns
    from bayesjd.synth import random_stiefel

    c = _data(c)
    k, n, _ = c.shape
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= N, got m={m}, N={n}")
    if method == "eigen":
        avg = np.mean(0.5 * (c + np.transpose(c, (0, 2, 1))), axis=0)
        lam, vec = np.linalg.eigh(avg)
        order = np.argsort(-np.abs(lam), kind="stable")[:m]
        b = vec[:, order]
    elif method == "jacobi":
        b = select_columns(jacobi_jd(c), c, m)
    elif method == "random":
        rng = rng if rng is not None else np.random.default_rng()
        b = random_stiefel(n, m, rng)
    else:
        raise ValueError(f"unknown init method {method!r}")
    u = np.einsum("nm,knp,pm->km", b, c, b)
    resid = residual_sq_norms(c, b, u)
    sigma2 = np.maximum(resid / (n * n), 1e-6)
    return ChainState(b, u, sigma2, np.ones(k))


# -- chains --------------------------------------------------------------------


def _step(c, state: ChainState, hyper: HyperParams, scheme: ThetaScheme, rng):
    u, s2, v2, _ = _conditional_sweep(c, state.b, state.sigma2, state.v2, hyper, rng)
    ctx = LBContext.from_data(c, s2, u)
    b = sample_B_step(state.b, ctx, scheme, rng)
    fixed = np.max(np.abs(b.T @ b - np.eye(b.shape[1]))) > REORTH_TOL
    if fixed:
        b = _orthonormalize(b)
    return ChainState(b, u, s2, v2), int(fixed)


def gibbs_step(c, state: ChainState, hyper: HyperParams, scheme: ThetaScheme | None = None, rng=None) -> ChainState:
    """One full iteration: u, sigma2, v2 for every k, then one sweep over ``B``."""
    c = _data(c)
    rng = rng if rng is not None else np.random.default_rng()
    return _step(c, state, hyper.for_k(c.shape[0]), scheme or ThetaScheme(), rng)[0]


def run_chain(c, m, config: SamplerConfig | None = None, rng=None, chain_index: int = 0) -> ChainTrace:
    """Run one chain; ``rng`` defaults to the stream derived from ``config.seed``."""
    config = config or SamplerConfig()
    c = _data(c)
    k, n, _ = c.shape
    hyper = config.hyper_for(k)
    rng = rng if rng is not None else chain_rng(config.seed, chain_index)
    current = init_state(c, m, hyper, rng, method=config.init)
    loglik = np.empty(config.n_samples)
    logpost = np.empty(config.n_samples)
    sig_trace = np.empty((config.n_samples, k))
    states, iters, state_lp = [], [], []
    reorth = 0
    for t in range(config.n_samples):
        current, fixed = _step(c, current, hyper, config.scheme, rng)
        reorth += fixed
        ll, lp = log_posterior(c, current, hyper)
        if not (math.isfinite(ll) and math.isfinite(lp)):
            dump = {"chain": chain_index, "iter": t, "loglik": ll, "logpost": lp, **current.to_dict()}
            raise NumericalAbort(f"non-finite log-likelihood at iteration {t} of chain {chain_index}", dump)
        loglik[t], logpost[t], sig_trace[t] = ll, lp, current.sigma2
        if t >= config.burn_in and (t - config.burn_in) % config.thin == 0:
            states.append(current)
            iters.append(t)
            state_lp.append(lp)
    if reorth:
        logger.info("chain %d: re-orthonormalized B %d times", chain_index, reorth)
    return ChainTrace(chain_index, states, iters, state_lp, loglik, logpost, sig_trace, reorth)


def _run_one(args):
    c, m, config, idx = args
    return run_chain(c, m, config, chain_index=idx)


def run_chains(c, m, config: SamplerConfig | None = None) -> list[ChainTrace]:
    """Run ``config.n_chains`` independent chains, returned in chain order."""
    config = config or SamplerConfig()
    c = _data(c)
    jobs = [(c, m, config, i) for i in range(config.n_chains)]
    if config.n_jobs > 1 and config.n_chains > 1:
        with ProcessPoolExecutor(max_workers=config.n_jobs) as pool:
            return list(pool.map(_run_one, jobs))
    return [_run_one(j) for j in jobs]


def map_estimate(traces) -> ChainState:
    """Retained state with the highest log joint density; ties go to the earliest."""
    best, best_lp = None, -math.inf
    for tr in traces:
        for st, lp in zip(tr.states, tr.state_logpost):
            if best is None or lp > best_lp:
                best, best_lp = st, lp
    if best is None:
        raise ValueError("no retained states to choose from")
    return best


def with_seed(config: SamplerConfig, seed: int) -> SamplerConfig:
    return replace(config, seed=seed)


# -- export ----------------------------------------------------------------------


def write_trace_csv(traces, path) -> None:
    k = traces[0].sigma2.shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["chain", "iter", "loglik", "logpost"] + [f"sigma2_{i + 1}" for i in range(k)])
        for tr in traces:
            for t in range(tr.loglik.size):
                w.writerow(
                    [tr.chain, t, repr(float(tr.loglik[t])), repr(float(tr.logpost[t]))]
                    + [repr(float(s)) for s in tr.sigma2[t]]
                )


def read_trace_csv(path) -> dict:
    """Return ``{chain: {"loglik": array, "logpost": array, "sigma2": array}}``."""
    out: dict = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        n_sig = len(header) - 4
        rows: dict = {}
        for row in reader:
            rows.setdefault(int(row[0]), []).append([float(v) for v in row[2:]])
    for ch, vals in sorted(rows.items()):
        arr = np.asarray(vals)
        out[ch] = {"loglik": arr[:, 0], "logpost": arr[:, 1], "sigma2": arr[:, 2 : 2 + n_sig]}
    return out


def write_states_jsonl(traces, path) -> None:
    with open(path, "w") as f:
        for tr in traces:
            for st, t, lp in zip(tr.states, tr.iters, tr.state_logpost):
                rec = {"chain": tr.chain, "iter": t, **st.to_dict(), "logpost": float(lp)}
                f.write(json.dumps(rec) + "\n")


def read_states_jsonl(path, n: int | None = None) -> list[dict]:
    """Parse a states file; each record gets ``state`` (a ChainState) added."""
    recs = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            u = np.asarray(rec["u"], dtype=float)
            m = u.shape[1]
            b = np.asarray(rec["b"], dtype=float).reshape(-1, m)
            if n is not None and b.shape[0] != n:
                raise ValueError("state dimension does not match data")
            sigma2 = np.asarray(rec.get("sigma2", np.ones(u.shape[0])), dtype=float)
            v2 = np.asarray(rec.get("v2", np.ones(u.shape[0])), dtype=float)
            rec["state"] = ChainState(b, u, sigma2, v2)
            recs.append(rec)
    return recs
