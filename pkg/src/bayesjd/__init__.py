"""Bayesian approximate joint diagonalization by Gibbs sampling.

The model is ``C_k = B diag(u_k) B^T + E_k`` with ``B`` an ``N x M``
matrix with orthonormal columns shared by all ``K`` matrices, ``u_k``
per-matrix eigenvalues and ``E_k`` i.i.d. Gaussian noise of variance
``sigma2_k``.
"""

from bayesjd.model import (
    HyperParams,
    MatrixSet,
    build_design_matrix,
    check_stiefel,
    log_likelihood,
    reconstruct,
    vectorize,
)
from bayesjd.bingham import ThetaScheme, sample_vector_bingham
from bayesjd.gibbs import (
    ChainState,
    ChainTrace,
    SamplerConfig,
    gibbs_step,
    init_state,
    map_estimate,
    run_chain,
    run_chains,
)
from bayesjd.diagnostics import (
    amari_index,
    api,
    bic_log_marginal,
    comparison_matrix,
    ess,
    gelman_rubin,
    model_select,
)
from bayesjd.baseline import jacobi_jd
from bayesjd.synth import gen_bss_problem, gen_cspa_dataset, gen_jd_dataset

__all__ = [
    "HyperParams",
    "MatrixSet",
    "build_design_matrix",
    "check_stiefel",
    "log_likelihood",
    "reconstruct",
    "vectorize",
    "ThetaScheme",
    "sample_vector_bingham",
    "ChainState",
    "ChainTrace",
    "SamplerConfig",
    "gibbs_step",
    "init_state",
    "map_estimate",
    "run_chain",
    "run_chains",
    "amari_index",
    "api",
    "bic_log_marginal",
    "comparison_matrix",
    "ess",
    "gelman_rubin",
    "model_select",
    "jacobi_jd",
    "gen_bss_problem",
    "gen_cspa_dataset",
    "gen_jd_dataset",
]

__version__ = "0.1.0"
