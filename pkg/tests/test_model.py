import math

import numpy as np
import pytest
from scipy.stats import norm

from hmlrcast.model import (
    ALL_SPECS,
    BASELINE,
    HMLR_SPECS,
    BaselineParams,
    DesignMatrix,
    HierParams,
    ModelSpec,
    Posterior,
    layout,
    lkj_log_density,
    lkj_log_normalizer,
    log_likelihood,
    log_pmf,
    log_posterior_and_grad,
    log_prior,
    log_prior_terms,
    param_dim,
    parse_specs,
    transform,
    untransform,
)
from hmlrcast.model.transform import corr_cholesky

from .helpers import fd_gradient, toy_counts


def test_taxonomy():
    codes = [s.code for s in HMLR_SPECS]
    assert codes == ["SLM", "SLD", "SCM", "SCD", "ILM", "ILD", "ICM", "ICD", "CLM", "CLD", "CCM", "CCD"]
    assert len(ALL_SPECS) == 13 and ALL_SPECS[-1] is BASELINE
    assert all(ModelSpec.parse(s.code) == s for s in ALL_SPECS)
    assert ModelSpec.parse("CCD").P == 4 and ModelSpec.parse("CCD").is_dm
    assert [s.code for s in parse_specs("SLM, baseline,SLM")] == ["SLM", "baseline"]
    assert len(parse_specs("all")) == 13 and len(parse_specs("hmlr")) == 12
    for bad in ("SLX", "XX", ""):
        with pytest.raises(ValueError):
            ModelSpec.parse(bad)


def test_design_matrix():
    dm = DesignMatrix.for_window(151, 4)
    X = dm.X
    assert X.shape == (151, 4)
    assert np.all(X[:, 0] == 1)
    assert X[0, 1] == -1 and X[-1, 1] == 1 and X[75, 1] == 0
    assert np.allclose(X[:, 3], X[:, 1] ** 3)
    ahead = dm.at([150, 160])
    assert ahead.scaled_time[1] == pytest.approx(1 + 10 / 75)
    assert np.array_equal(dm.with_degree(2).X, X[:, :2])


@pytest.mark.parametrize("code,L,V,dim", [("SLM", 52, 10, 956), ("baseline", 1, 10, 18), ("CCD", 2, 3, 36),
                                          ("ILM", 3, 4, 3 * 3 * 2 + 3 * 2 + 3 * 2),
                                          ("CLD", 3, 4, 3 * 3 * 2 + 3 * 2 + 3 * 2 + 2 * 3)])
def test_param_dim(code, L, V, dim):
    assert param_dim(ModelSpec.parse(code), L, V) == dim


def _constrained_vector(params, spec):
    """Flatten constrained parameters, keeping only the free off-diagonal correlations."""
    parts = [np.ravel(params.gamma), np.ravel(params.mu), np.ravel(params.sigma2)]
    if params.omega_chol is not None:
        K = params.omega_chol.shape[-1]
        r, c = np.tril_indices(K, -1)
        parts.append(params.omega[:, r, c].ravel())
    return np.concatenate(parts)


class TestTransform:
    def test_zero_point(self):
        spec = ModelSpec.parse("CCM")
        params, lj = transform(np.zeros(param_dim(spec, 2, 4)), spec, 2, 4)
        assert np.all(params.sigma2 == 1.0)
        assert np.allclose(params.omega, np.eye(3))
        assert lj == 0.0

    @pytest.mark.parametrize("code,V", [("SLM", 3), ("ICD", 4), ("CCD", 3), ("CLM", 5)])
    def test_jacobian_matches_finite_differences(self, code, V):
        spec = ModelSpec.parse(code)
        L = 2
        rng = np.random.default_rng(4)
        u = rng.normal(scale=0.7, size=param_dim(spec, L, V))
        f = lambda x: _constrained_vector(transform(x, spec, L, V)[0], spec)  # noqa: E731
        h = 1e-6
        J = np.empty((len(u), len(u)))
        for i in range(len(u)):
            e = np.zeros_like(u)
            e[i] = h
            J[:, i] = (f(u + e) - f(u - e)) / (2 * h)
        sign, logdet = np.linalg.slogdet(J)
        assert sign > 0
        _, lj = transform(u, spec, L, V)
        assert math.exp(logdet) == pytest.approx(math.exp(lj), rel=1e-6)

    @pytest.mark.parametrize("spec", ALL_SPECS, ids=str)
    def test_round_trip(self, spec):
        rng = np.random.default_rng(1)
        u = rng.normal(size=param_dim(spec, 3, 4))
        params, _ = transform(u, spec, 3, 4)
        assert np.max(np.abs(untransform(params, spec) - u)) < 1e-12

    def test_correlation_matrices_valid(self):
        rng = np.random.default_rng(2)
        chol, _, _ = corr_cholesky(rng.normal(size=(5, 10)), 5)
        omega = chol @ np.swapaxes(chol, -1, -2)
        assert np.allclose(np.diagonal(omega, axis1=-2, axis2=-1), 1.0)
        assert np.allclose(omega, np.swapaxes(omega, -1, -2))
        assert np.all(np.diagonal(chol, axis1=-2, axis2=-1) > 0)
        assert np.all(np.linalg.eigvalsh(omega) > 0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            transform(np.zeros(5), ModelSpec.parse("SLM"), 2, 3)
        with pytest.raises(ValueError):
            layout(ModelSpec.parse("SLM"), 2, 1)


class TestPrior:
    def test_baseline_flat(self):
        assert log_prior(BaselineParams(np.ones((3, 2))), BASELINE) == 0.0

    def test_slm_at_means(self):
        L, K, P = 4, 2, 2
        params = HierParams(np.zeros((L, K, P)), np.zeros((P, K)), np.ones(P))
        terms = log_prior_terms(params, ModelSpec.parse("SLM"))
        assert terms["gamma"] == pytest.approx(-L * P * K * 0.5 * math.log(2 * math.pi), rel=1e-14)
        hyper_mu = P * K * norm.logpdf(0, 0, 400)
        hyper_s2 = P * (norm.logpdf(1, 1, 400) - norm.logcdf(1 / 400))
        assert terms["mu"] == pytest.approx(hyper_mu, rel=1e-14)
        assert terms["sigma2"] == pytest.approx(hyper_s2, rel=1e-14)
        assert log_prior(params, ModelSpec.parse("SLM")) == pytest.approx(sum(terms.values()))

    def test_hierarchical_term_against_mvn(self):
        from scipy.stats import multivariate_normal

        rng = np.random.default_rng(5)
        spec = ModelSpec.parse("CCM")
        params, _ = transform(rng.normal(size=param_dim(spec, 3, 4)), spec, 3, 4)
        cov = params.covariance()
        expected = sum(multivariate_normal(params.mu[p], cov[p]).logpdf(params.gamma[l, :, p])
                       for l in range(3) for p in range(4))
        assert log_prior_terms(params, spec)["gamma"] == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("K", [2, 3])
    def test_lkj_normalizer_brute_force(self, K):
        if K == 2:
            r = np.linspace(-1, 1, 400001)
            mid = (r[1:] + r[:-1]) / 2
            brute = np.sum(1 - mid**2) * (r[1] - r[0])
        else:
            m = 240
            g = (np.arange(m) + 0.5) / m * 2 - 1
            a, b, c = np.meshgrid(g, g, g, indexing="ij", sparse=True)
            det = 1 - a**2 - b**2 - c**2 + 2 * a * b * c
            brute = np.sum(np.clip(det, 0, None)) * (2 / m) ** 3
        assert math.exp(lkj_log_normalizer(K, 2.0)) == pytest.approx(brute, rel=2e-3)
        # at the identity the density is the reciprocal normaliser
        assert lkj_log_density(np.eye(K)) == pytest.approx(-lkj_log_normalizer(K, 2.0), abs=1e-14)

    def test_lkj_known_values(self):
        assert math.exp(lkj_log_normalizer(2, 2.0)) == pytest.approx(4 / 3)
        assert math.exp(lkj_log_normalizer(3, 2.0)) == pytest.approx(3 * math.pi**2 / 16)
        assert math.exp(lkj_log_normalizer(3, 1.0)) == pytest.approx(math.pi**2 / 2)

    def test_nesting_shared_individual(self):
        rng = np.random.default_rng(6)
        L, K, P = 3, 3, 2
        gamma, mu = rng.normal(size=(L, K, P)), rng.normal(size=(P, K))
        s2 = np.array([0.4, 2.0])
        shared = log_prior_terms(HierParams(gamma, mu, s2), ModelSpec.parse("SLM"))
        indiv = log_prior_terms(HierParams(gamma, mu, np.repeat(s2[:, None], K, 1)), ModelSpec.parse("ILM"))
        corr = log_prior_terms(HierParams(gamma, mu, np.repeat(s2[:, None], K, 1),
                                          np.broadcast_to(np.eye(K), (P, K, K)).copy()), ModelSpec.parse("CLM"))
        assert shared["gamma"] == pytest.approx(indiv["gamma"], rel=1e-14)
        assert corr["gamma"] == pytest.approx(indiv["gamma"], rel=1e-14)
        assert shared["sigma2"] != pytest.approx(indiv["sigma2"])

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            log_prior(HierParams(np.zeros((1, 1, 2)), np.zeros((2, 1)), np.array([1.0, -1.0])), ModelSpec.parse("SLM"))


class TestLikelihood:
    def one_cell(self, counts):
        return np.asarray(counts)[None, None, :]

    def test_trivial_values(self):
        data = self.one_cell([1, 1])
        params = HierParams(np.zeros((1, 1, 2)), np.zeros((2, 1)), np.ones(2))
        assert log_likelihood(params, ModelSpec.parse("SLM"), data) == pytest.approx(math.log(0.5), abs=1e-14)
        assert log_likelihood(params, ModelSpec.parse("SLD"), data) == pytest.approx(math.log(1 / 3), abs=1e-14)
        assert log_likelihood(BaselineParams(np.zeros((1, 2))), BASELINE, data) == pytest.approx(math.log(0.5))

    def test_matches_pmf(self):
        rng = np.random.default_rng(7)
        counts = rng.integers(0, 6, size=(2, 5, 3))
        counts[0, 2] = 0
        for code in ("SCM", "SCD"):
            spec = ModelSpec.parse(code)
            params, _ = transform(rng.normal(size=param_dim(spec, 2, 3)), spec, 2, 3)
            X = DesignMatrix.for_window(5, 4).X
            eta = np.einsum("lkp,tp->ltk", params.gamma, X)
            theta = np.concatenate([np.exp(eta), np.ones((2, 5, 1))], axis=-1)
            flat, keep = counts.reshape(-1, 3), counts.reshape(-1, 3).sum(1) > 0
            if spec.is_dm:
                expected = log_pmf(flat[keep], alpha=theta.reshape(-1, 3)[keep]).sum()
            else:
                pi = theta / theta.sum(-1, keepdims=True)
                expected = log_pmf(flat[keep], probs=pi.reshape(-1, 3)[keep]).sum()
            assert log_likelihood(params, spec, counts) == pytest.approx(expected, rel=1e-12)

    def test_dm_limit(self):
        rng = np.random.default_rng(8)
        pi = rng.dirichlet(np.ones(4), size=50)
        counts = np.array([rng.multinomial(30, p) for p in pi])
        assert np.max(np.abs(log_pmf(counts, alpha=1e6 * pi) - log_pmf(counts, probs=pi))) < 1e-3

    def test_dm_variance_decreases_with_concentration(self):
        n = 12
        x = np.arange(n + 1)
        counts = np.column_stack([x, n - x])
        variances = []
        for s in (0.5, 2.0, 10.0, 100.0):
            p = np.exp(log_pmf(counts, alpha=np.tile([0.3 * s, 0.7 * s], (n + 1, 1))))
            assert p.sum() == pytest.approx(1.0)
            mean = (p * x).sum()
            assert mean == pytest.approx(0.3 * n)
            variances.append((p * (x - mean) ** 2).sum())
        assert all(a >= b for a, b in zip(variances, variances[1:]))

    def test_split_cell_invariance(self):
        spec = ModelSpec.parse("SLM")
        rng = np.random.default_rng(9)
        u = rng.normal(size=param_dim(spec, 1, 3))
        x = DesignMatrix.for_window(10, 2).X[[3]]
        one = Posterior(spec, np.array([[[5, 2, 4]]]), x)
        two = Posterior(spec, np.array([[[2, 2, 1], [3, 0, 3]]]), np.vstack([x, x]))
        (va, ga), (vb, gb) = one(u), two(u)
        const = (math.lgamma(12) - math.lgamma(6) - math.lgamma(3) - math.lgamma(5)) - (
            (math.lgamma(6) - math.lgamma(3) - math.lgamma(3) - math.lgamma(2))
            + (math.lgamma(7) - math.lgamma(4) - math.lgamma(1) - math.lgamma(4)))
        assert va - vb == pytest.approx(const, abs=1e-10)
        assert np.allclose(ga, gb, atol=1e-12)

    def test_log_odds_reconstruction(self):
        from hmlrcast.predict import prevalence_from_params

        rng = np.random.default_rng(10)
        params = HierParams(rng.normal(size=(2, 3, 4)), np.zeros((4, 3)), np.ones(4))
        dm = DesignMatrix.for_window(20, 4)
        pi = prevalence_from_params(params, ModelSpec.parse("SCM"), dm)
        lhs = np.log(pi[..., :-1]) - np.log(pi[..., -1:])
        rhs = np.einsum("lkp,tp->ltk", params.gamma, dm.X)
        assert np.allclose(lhs, rhs, atol=1e-12)

    def test_nan_rejected(self):
        spec = ModelSpec.parse("SLM")
        post = Posterior(spec, toy_counts(seed=0))
        u = np.zeros(post.dim)
        u[0] = np.nan
        with pytest.raises(ValueError):
            post(u)

    def test_extreme_values_stay_finite(self):
        spec = ModelSpec.parse("SLD")
        post = Posterior(spec, toy_counts(seed=0))
        u = np.zeros(post.dim)
        u[: post.layout.gamma.stop] = 300.0
        value, grad = post(u)
        assert np.isfinite(grad).all() and (np.isfinite(value) or value == -np.inf)


class TestPosterior:
    @pytest.mark.parametrize("spec", ALL_SPECS, ids=str)
    def test_gradient_finite_differences(self, spec):
        counts = toy_counts(seed=1)
        post = Posterior(spec, counts)
        rng = np.random.default_rng(11)
        for _ in range(3):
            u = rng.uniform(-1, 1, post.dim)
            _, grad = post(u)
            fd = fd_gradient(post.value, u)
            assert np.allclose(grad, fd, rtol=1e-5, atol=1e-7)

    @pytest.mark.parametrize("spec", ALL_SPECS, ids=str)
    def test_value_is_prior_plus_likelihood_plus_jacobian(self, spec):
        counts = toy_counts(seed=2)
        rng = np.random.default_rng(12)
        u = rng.normal(scale=0.5, size=param_dim(spec, 3, 3))
        params, lj = transform(u, spec, 3, 3)
        expected = log_prior(params, spec) + log_likelihood(params, spec, counts) + lj
        value, _ = log_posterior_and_grad(u, spec, counts)
        assert value == pytest.approx(expected, rel=1e-12)

    def test_baseline_symmetric_gradient(self):
        counts = np.zeros((2, 6, 2), dtype=int)
        counts[:, :, :] = 7
        _, grad = log_posterior_and_grad(np.zeros(2), BASELINE, counts)
        assert grad[0] == pytest.approx(0.0, abs=1e-12)

    def test_empty_data_prior_only(self):
        spec = ModelSpec.parse("ILM")
        empty = np.zeros((2, 10, 3), dtype=int)
        u = np.random.default_rng(0).normal(size=param_dim(spec, 2, 3))
        params, lj = transform(u, spec, 2, 3)
        assert Posterior(spec, empty).value(u) == pytest.approx(log_prior(params, spec) + lj)
