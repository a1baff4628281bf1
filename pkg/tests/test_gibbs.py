import math

import numpy as np
import pytest
from scipy import linalg, special, stats

from bayesjd import gibbs
from bayesjd.bingham import ThetaScheme
from bayesjd.diagnostics import api, ess
from bayesjd.gibbs import (
    ChainState,
    ChainTrace,
    NumericalAbort,
    SamplerConfig,
    chain_rng,
    gibbs_step,
    init_state,
    log_posterior,
    map_estimate,
    read_states_jsonl,
    read_trace_csv,
    run_chain,
    run_chains,
    sample_sigma2_k,
    sample_u_k,
    sample_v2_k,
    sigma2_posterior_params,
    u_posterior,
    v2_posterior_params,
    write_states_jsonl,
    write_trace_csv,
)
from bayesjd.model import HyperParams, build_design_matrix, log_likelihood, reconstruct, vectorize
from bayesjd.synth import gen_jd_dataset, random_stiefel

N_DRAWS = 100_000


@pytest.fixture(scope="module")
def design():
    rng = np.random.default_rng(0)
    b = random_stiefel(6, 3, rng)
    a = build_design_matrix(b)
    x = a @ np.array([3.0, -2.0, 4.0]) + 0.3 * rng.standard_normal(36)
    return b, a, x


@pytest.fixture(scope="module")
def planted():
    return gen_jd_dataset(10, 5, 100, 0.01, np.random.default_rng(1))


@pytest.fixture(scope="module")
def short_trace(planted):
    return run_chain(planted.c, 5, SamplerConfig(n_samples=1000, burn_in=500, seed=1))


class TestUConditional:
    def test_moments(self, design):
        _, a, x = design
        rng = np.random.default_rng(1)
        mu = (a.T @ x) / 2.0
        draws = np.array([sample_u_k(x, a, 2.0, 1.0, rng) for _ in range(N_DRAWS)])
        np.testing.assert_allclose(draws.mean(axis=0), mu, rtol=0.01)
        cov = np.cov(draws.T)
        np.testing.assert_allclose(np.diag(cov), 1.0, rtol=0.01)
        assert np.max(np.abs(cov - np.diag(np.diag(cov)))) < 0.01

    def test_scalar_shortcut(self, design):
        b, a, x = design
        for v2 in [0.1, 1.0, 37.0]:
            mu, cov = u_posterior(x, a, v2)
            shrink = 1.0 / (1.0 + 1.0 / v2)
            np.testing.assert_allclose(cov, shrink * np.eye(3), atol=1e-12)
            c = x.reshape(6, 6, order="F")
            np.testing.assert_allclose(mu, shrink * np.diag(b.T @ c @ b), atol=1e-12)

    def test_ridge_limit(self, design):
        _, a, x = design
        mu, _ = u_posterior(x, a, 1e12)
        np.testing.assert_allclose(mu, a.T @ x, atol=1e-9)

    def test_vanishing_noise(self, design):
        _, a, x = design
        mu, _ = u_posterior(x, a, 1.0)
        draw = sample_u_k(x, a, 1e-12, 1.0, np.random.default_rng(2))
        assert np.max(np.abs(draw - mu)) < 1e-4

    def test_gaussian_skewness(self, design):
        _, a, x = design
        rng = np.random.default_rng(3)
        draws = np.array([sample_u_k(x, a, 0.7, 2.0, rng) for _ in range(N_DRAWS)])
        assert np.all(np.abs(stats.skew(draws, axis=0)) < 0.05)

    @pytest.mark.parametrize("s2,v2", [(0.0, 1.0), (1.0, -1.0)])
    def test_rejects_bad_variances(self, design, s2, v2):
        _, a, x = design
        with pytest.raises(ValueError):
            sample_u_k(x, a, s2, v2, np.random.default_rng(0))

    def test_one_by_one_shrinkage(self):
        mu, _ = u_posterior([3.0], np.eye(1), 4.0)
        assert mu[0] == pytest.approx(3.0 / 1.25)


class TestVarianceConditionals:
    def test_sigma2_shape(self):
        shape, _ = sigma2_posterior_params(np.zeros(100), np.zeros((100, 5)), np.zeros(5), 1.0, (1e-3, 1e-3))
        assert shape == pytest.approx(52.501)

    def test_sigma2_empty_scale(self):
        _, scale = sigma2_posterior_params(np.zeros(9), np.zeros((9, 2)), np.zeros(2), 1.0, (1e-3, 0.25))
        assert scale == 0.25

    def test_sigma2_precision_mean(self, design):
        _, a, x = design
        u = np.array([2.5, -1.5, 3.5])
        shape, scale = sigma2_posterior_params(x, a, u, 0.8, (1e-3, 1e-3))
        rng = np.random.default_rng(4)
        draws = np.array([sample_sigma2_k(x, a, u, 0.8, (1e-3, 1e-3), rng) for _ in range(N_DRAWS)])
        assert np.mean(1.0 / draws) == pytest.approx(shape / scale, rel=0.01)
        assert np.mean(draws) == pytest.approx(scale / (shape - 1), rel=0.01)

    def test_v2_shape_and_scale(self):
        shape, scale = v2_posterior_params(np.zeros(5), 1.0, (1e-3, 0.5))
        assert shape == pytest.approx(2.501) and scale == 0.5

    def test_v2_precision_mean(self):
        u = np.array([1.0, -2.0, 0.5, 3.0, 1.5])
        shape, scale = v2_posterior_params(u, 0.4, (1e-3, 1e-3))
        rng = np.random.default_rng(5)
        draws = np.array([sample_v2_k(u, 0.4, (1e-3, 1e-3), rng) for _ in range(N_DRAWS)])
        assert np.mean(1.0 / draws) == pytest.approx(shape / scale, rel=0.01)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            sample_v2_k(np.ones(2), 0.0, (1.0, 1.0), np.random.default_rng(0))


class TestInit:
    def test_diag_example(self):
        c = np.diag([5.0, 1.0])[None]
        for method in ["eigen", "jacobi"]:
            st = init_state(c, 1, method=method)
            np.testing.assert_allclose(np.abs(st.b[:, 0]), [1, 0], atol=1e-12)
            assert st.u[0, 0] == pytest.approx(5.0)
            assert st.sigma2[0] == pytest.approx(1 / 4)
            np.testing.assert_array_equal(st.v2, [1.0])

    @pytest.mark.parametrize("method", ["eigen", "jacobi"])
    def test_noiseless_span(self, method):
        inst = gen_jd_dataset(8, 3, 20, 0.0, np.random.default_rng(2))
        st = init_state(inst.c, 3, method=method)
        angles = linalg.subspace_angles(st.b, inst.b_true)
        assert np.max(angles) < 1e-6
        assert np.all(st.sigma2 == 1e-6)

    def test_beats_random_stiefel(self, planted):
        st = init_state(planted.c, 5)
        base = log_likelihood(planted.c, st.b, st.u, st.sigma2)
        rng = np.random.default_rng(3)
        for _ in range(100):
            other = init_state(planted.c, 5, rng=rng, method="random")
            assert base >= log_likelihood(planted.c, other.b, other.u, other.sigma2)

    def test_rejects_bad_m(self):
        with pytest.raises(ValueError):
            init_state(np.zeros((1, 3, 3)), 4)


class TestRunChain:
    def test_lengths_and_states(self, short_trace):
        assert short_trace.loglik.shape == (1000,) and short_trace.logpost.shape == (1000,)
        assert len(short_trace.states) == 500
        assert short_trace.iters[0] == 500 and short_trace.iters[-1] == 999
        for st in short_trace.states[::50]:
            np.testing.assert_allclose(st.b.T @ st.b, np.eye(5), atol=1e-10)
            assert np.all(st.sigma2 > 0) and np.all(st.v2 > 0)
        assert np.all(np.isfinite(short_trace.loglik))

    def test_thinning(self, planted):
        tr = run_chain(planted.c, 5, SamplerConfig(n_samples=10, burn_in=5, seed=2))
        assert len(tr.states) == 5
        tr = run_chain(planted.c, 5, SamplerConfig(n_samples=20, burn_in=5, thin=4, seed=2))
        assert tr.iters == [5, 9, 13, 17]

    def test_deterministic(self, planted):
        cfg = SamplerConfig(n_samples=50, burn_in=10, seed=9)
        a = run_chain(planted.c, 5, cfg)
        b = run_chain(planted.c, 5, cfg)
        np.testing.assert_array_equal(a.loglik, b.loglik)

    def test_loglik_near_planted_truth(self, planted, short_trace):
        truth = log_likelihood(planted.c, planted.b_true, planted.u_true, np.full(100, planted.sigma2_true))
        tail = short_trace.loglik[500:]
        assert abs(tail.mean() - truth) < 3 * tail.std()

    def test_map_within_posterior_spread(self, planted, short_trace):
        apis = np.array([api(s.b, planted.b_true) for s in short_trace.states])
        map_api = api(map_estimate([short_trace]).b, planted.b_true)
        assert apis.min() <= map_api <= apis.mean() + 3 * apis.std()

    @pytest.mark.xfail(reason="posterior is tight; the top-density sample is not systematically closer to the truth", strict=False)
    def test_map_not_worse_than_mean(self, planted, short_trace):
        apis = [api(s.b, planted.b_true) for s in short_trace.states]
        assert api(map_estimate([short_trace]).b, planted.b_true) <= np.mean(apis)

    def test_scalar_case(self):
        tr = run_chain(np.array([[[3.0]]]), 1, SamplerConfig(n_samples=400, burn_in=100, seed=3))
        assert all(abs(s.b[0, 0]) == 1.0 for s in tr.states)
        u = np.array([s.u[0, 0] for s in tr.states])
        assert np.all(np.isfinite(u))

    def test_square_case(self):
        # estimation error scales like sigma / |lambda|, so low noise pins B down
        inst = gen_jd_dataset(4, 4, 20, 1e-4, np.random.default_rng(4))
        tr = run_chain(inst.c, 4, SamplerConfig(n_samples=200, burn_in=100, seed=4))
        assert api(map_estimate([tr]).b, inst.b_true) < 0.1

    def test_numerical_abort(self, planted, monkeypatch):
        monkeypatch.setattr(gibbs, "log_posterior", lambda *a, **k: (math.nan, math.nan))
        with pytest.raises(NumericalAbort) as err:
            run_chain(planted.c, 5, SamplerConfig(n_samples=5, burn_in=1))
        assert err.value.dump["iter"] == 0 and len(err.value.dump["b"]) == 50

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SamplerConfig(n_samples=10, burn_in=10)
        with pytest.raises(ValueError):
            SamplerConfig(thin=0)
        with pytest.raises(ValueError):
            SamplerConfig(init="pca")
        with pytest.raises(ValueError):
            SamplerConfig(seed=-1)


class TestRunChains:
    def test_single_chain_matches_run_chain(self, planted):
        cfg = SamplerConfig(n_samples=30, burn_in=10, seed=5)
        (tr,) = run_chains(planted.c, 5, cfg)
        ref = run_chain(planted.c, 5, cfg, rng=chain_rng(5, 0))
        np.testing.assert_array_equal(tr.loglik, ref.loglik)

    def test_parallel_matches_serial(self, planted):
        cfg = SamplerConfig(n_samples=30, burn_in=10, seed=6, n_chains=3)
        serial = run_chains(planted.c, 5, cfg)
        par = run_chains(planted.c, 5, SamplerConfig(n_samples=30, burn_in=10, seed=6, n_chains=3, n_jobs=3))
        assert [t.chain for t in par] == [0, 1, 2]
        for s, p in zip(serial, par):
            np.testing.assert_array_equal(s.loglik, p.loglik)
        assert not np.array_equal(serial[0].loglik, serial[1].loglik)


def _state(val):
    return ChainState(np.eye(2)[:, :1] * val, np.zeros((1, 1)), np.ones(1), np.ones(1))


def _trace(chain, lps):
    states = [_state(1.0) for _ in lps]
    return ChainTrace(chain, states, list(range(len(lps))), list(lps), np.zeros(1), np.zeros(1), np.zeros((1, 1)))


class TestMapEstimate:
    def test_single_state(self):
        tr = _trace(0, [-3.0])
        assert map_estimate([tr]) is tr.states[0]

    def test_tie_goes_to_earliest(self):
        a, b = _trace(0, [-5.0, -1.0, -1.0]), _trace(1, [-1.0])
        assert map_estimate([a, b]) is a.states[1]

    def test_highest_wins(self):
        a, b = _trace(0, [-5.0, -2.0]), _trace(1, [-1.5])
        assert map_estimate([a, b]) is b.states[0]

    def test_empty(self):
        with pytest.raises(ValueError):
            map_estimate([_trace(0, [])])


class TestLogPosterior:
    def test_matches_scipy_densities(self):
        rng = np.random.default_rng(7)
        b = random_stiefel(3, 2, rng)
        st = ChainState(b, rng.standard_normal((2, 2)), np.array([0.5, 1.5]), np.array([2.0, 0.3]))
        c = rng.standard_normal((2, 3, 3))
        hyper = HyperParams([2.0, 3.0], [1.0, 0.5])
        ll, lp = log_posterior(c, st, hyper)
        prior = 0.0
        for k in range(2):
            ig = stats.invgamma(hyper.a[k], scale=hyper.b[k])
            prior += ig.logpdf(st.sigma2[k]) + ig.logpdf(st.v2[k])
            prior += stats.norm(0, math.sqrt(st.sigma2[k] * st.v2[k])).logpdf(st.u[k]).sum()
        assert ll == pytest.approx(log_likelihood(c, b, st.u, st.sigma2), rel=1e-12)
        assert lp == pytest.approx(ll + prior, rel=1e-12)


class TestGettingItRight:
    """Alternate posterior transitions with fresh data draws; the parameter
    marginals must stay at the prior."""

    A, B = 3.0, 2.0

    def test_variance_marginals(self):
        rng = np.random.default_rng(8)
        n, m, k = 3, 2, 2
        hyper = HyperParams([self.A] * k, [self.B] * k)

        def inv_gamma(size):
            return 1.0 / rng.gamma(self.A, 1.0 / self.B, size)

        s2, v2 = inv_gamma(k), inv_gamma(k)
        u = rng.standard_normal((k, m)) * np.sqrt(s2 * v2)[:, None]
        st = ChainState(random_stiefel(n, m, rng), u, s2, v2)
        n_iter = 20_000
        log_s2 = np.empty((n_iter, k))
        log_v2 = np.empty((n_iter, k))
        for t in range(n_iter):
            noise = rng.standard_normal((k, n, n)) * np.sqrt(st.sigma2)[:, None, None]
            c = np.stack([reconstruct(st.b, st.u[j]) for j in range(k)]) + noise
            st = gibbs_step(c, st, hyper, ThetaScheme(), rng)
            log_s2[t], log_v2[t] = np.log(st.sigma2), np.log(st.v2)
        # log of IG(a, b): mean log b - digamma(a), variance trigamma(a)
        mean = math.log(self.B) - special.digamma(self.A)
        sd = math.sqrt(special.polygamma(1, self.A))
        for series in [*log_s2.T, *log_v2.T]:
            se = sd / math.sqrt(ess(series))
            assert abs(series.mean() - mean) < 3 * se


class TestExport:
    def test_trace_csv_round_trip(self, tmp_path, planted):
        traces = run_chains(planted.c, 5, SamplerConfig(n_samples=20, burn_in=10, n_chains=2, seed=1))
        path = tmp_path / "trace.csv"
        write_trace_csv(traces, path)
        header = path.read_text().splitlines()[0].split(",")
        assert header[:4] == ["chain", "iter", "loglik", "logpost"] and header[-1] == "sigma2_100"
        back = read_trace_csv(path)
        for tr in traces:
            np.testing.assert_array_equal(back[tr.chain]["loglik"], tr.loglik)
            np.testing.assert_array_equal(back[tr.chain]["sigma2"], tr.sigma2)

    def test_states_round_trip(self, tmp_path, planted):
        traces = run_chains(planted.c, 5, SamplerConfig(n_samples=20, burn_in=15, n_chains=2, seed=1))
        path = tmp_path / "states.jsonl"
        write_states_jsonl(traces, path)
        recs = read_states_jsonl(path, n=10)
        assert len(recs) == 10 and recs[0]["chain"] == 0 and recs[-1]["chain"] == 1
        np.testing.assert_array_equal(recs[0]["state"].b, traces[0].states[0].b)
        np.testing.assert_array_equal(recs[0]["b"], traces[0].states[0].b.ravel())
        with pytest.raises(ValueError):
            read_states_jsonl(path, n=9)


def test_vectorized_conditionals_match_per_k(planted):
    # batched sweep equals the per-k formulas with the same random numbers
    c = planted.c.matrices[:3]
    b = planted.b_true
    s2, v2 = np.array([0.5, 1.0, 2.0]), np.array([1.0, 3.0, 0.2])
    hyper = HyperParams.default(3)
    u, s2_new, v2_new, _ = gibbs._conditional_sweep(c, b, s2, v2, hyper, np.random.default_rng(0))
    a = build_design_matrix(b)
    rng = np.random.default_rng(0)
    z = rng.standard_normal((3, 5))
    for k in range(3):
        mu, cov = u_posterior(vectorize(c[k]), a, v2[k])
        np.testing.assert_allclose(u[k], mu + math.sqrt(s2[k]) * np.sqrt(np.diag(cov)) * z[k], atol=1e-10)
        shape, scale = sigma2_posterior_params(vectorize(c[k]), a, u[k], v2[k], (1e-3, 1e-3))
        assert shape == pytest.approx(hyper.a[k] + 50 + 2.5)
    g = rng.gamma(np.full(3, hyper.a[0] + 50 + 2.5), 1.0)
    np.testing.assert_allclose(
        s2_new,
        [1.0 / (g[k] / sigma2_posterior_params(vectorize(c[k]), a, u[k], v2[k], (1e-3, 1e-3))[1]) for k in range(3)],
        rtol=1e-12,
    )
