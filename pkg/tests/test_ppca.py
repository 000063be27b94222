import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from vlae import laplace
from vlae.network import linearize
from vlae.ppca import LinearModel, exact_posterior, marginal_loglik

import oracles


def random_model(r, n=None, d=None):
    d = d or int(r.integers(1, 9))
    n = n or int(r.integers(d, 17))
    return LinearModel(r.standard_normal((n, d)), r.standard_normal(n), float(r.uniform(0.05, 2)))


class TestExactPosterior:
    def test_zero_weights_give_prior(self, rng):
        m = LinearModel(np.zeros((4, 3)), rng.standard_normal(4), 0.7)
        q = exact_posterior(m, rng.standard_normal(4))
        np.testing.assert_array_equal(q.mu, 0.0)
        np.testing.assert_allclose(q.sigma, np.eye(3), atol=1e-15)

    def test_identity_model(self, rng):
        x = rng.standard_normal(3)
        q = exact_posterior(LinearModel(np.eye(3), np.zeros(3), 1.0), x)
        np.testing.assert_allclose(q.sigma, 0.5 * np.eye(3), atol=1e-15)
        np.testing.assert_allclose(q.mu, 0.5 * x, atol=1e-15)

    def test_quadrature(self):
        r = np.random.default_rng(5)
        m = LinearModel(r.standard_normal((3, 2)), r.standard_normal(3), 0.8)
        x = r.standard_normal(3)
        grid = np.linspace(-6, 6, 401)
        z1, z2 = np.meshgrid(grid, grid, indexing="ij")
        z = np.stack([z1.ravel(), z2.ravel()], axis=1)
        resid = x - z @ m.w.T - m.b
        logp = -0.5 * (resid ** 2).sum(1) / m.sigma2 - 0.5 * (z ** 2).sum(1)
        p = np.exp(logp - logp.max())
        p /= p.sum()
        mean = p @ z
        cov = (z - mean).T @ ((z - mean) * p[:, None])
        q = exact_posterior(m, x)
        np.testing.assert_allclose(q.mu, mean, atol=1e-3)
        np.testing.assert_allclose(q.sigma, cov, atol=1e-3)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_matches_dense_inverse(self, seed):
        r = np.random.default_rng(seed)
        m = random_model(r)
        x = r.standard_normal(m.n)
        mu, cov = oracles.ppca_posterior_dense(m.w, m.b, m.sigma2, x)
        q = exact_posterior(m, x)
        np.testing.assert_allclose(q.mu, mu, atol=1e-9)
        np.testing.assert_allclose(q.sigma, cov, atol=1e-9)
        np.testing.assert_allclose(q.chol @ q.chol.T, q.sigma, atol=1e-12)

    def test_covariance_bounded_by_identity(self, rng):
        for _ in range(50):
            m = random_model(rng)
            q = exact_posterior(m, rng.standard_normal(m.n))
            assert np.linalg.eigvalsh(q.sigma).max() <= 1 + 1e-9

    def test_orthogonal_equivariance(self, rng):
        for _ in range(10):
            m = random_model(rng, d=4, n=7)
            x = rng.standard_normal(7)
            qmat = ortho_group.rvs(4, random_state=int(rng.integers(2**31)))
            base = exact_posterior(m, x)
            rot = exact_posterior(LinearModel(m.w @ qmat, m.b, m.sigma2), x)
            np.testing.assert_allclose(rot.mu, qmat.T @ base.mu, atol=1e-9)
            np.testing.assert_allclose(rot.sigma, qmat.T @ base.sigma @ qmat, atol=1e-9)

    def test_mode_step_fixed_point(self, rng):
        m = random_model(rng, d=3, n=6)
        x = rng.standard_normal(6)
        q = exact_posterior(m, x)
        lin = linearize(m.as_decoder(), q.mu)
        np.testing.assert_allclose(laplace.gaussian_mode_step(x, lin, m.sigma2), q.mu,
                                   atol=1e-12)

    def test_batched(self, rng):
        m = random_model(rng, d=2, n=5)
        x = rng.standard_normal((6, 5))
        q = exact_posterior(m, x)
        for i in range(6):
            np.testing.assert_allclose(q.mu[i], exact_posterior(m, x[i]).mu, atol=1e-14)

    def test_invalid_sigma2(self):
        with pytest.raises(ValueError):
            LinearModel(np.zeros((2, 1)), np.zeros(2), 0.0)


class TestMarginal:
    def test_scalar(self):
        m = LinearModel(np.zeros((1, 1)), np.zeros(1), 1.0)
        assert marginal_loglik(m, np.zeros(1)) == pytest.approx(-0.5 * np.log(2 * np.pi),
                                                                abs=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_matches_dense(self, seed):
        r = np.random.default_rng(seed)
        m = random_model(r)
        x = r.standard_normal(m.n)
        assert marginal_loglik(m, x) == pytest.approx(
            oracles.ppca_marginal_dense(m.w, m.b, m.sigma2, x), abs=1e-9)

    def test_equals_analytic_elbo_at_exact_posterior(self, rng):
        for _ in range(20):
            m = random_model(rng)
            x = rng.standard_normal(m.n)
            q = exact_posterior(m, x)
            r = x - m.w @ q.mu - m.b
            e_loglik = -0.5 * (m.n * np.log(2 * np.pi * m.sigma2)
                               + (r @ r + np.trace(m.w @ q.sigma @ m.w.T)) / m.sigma2)
            e_prior = -0.5 * (m.d * np.log(2 * np.pi) + q.mu @ q.mu + np.trace(q.sigma))
            entropy = 0.5 * np.linalg.slogdet(2 * np.pi * np.e * q.sigma)[1]
            assert e_loglik + e_prior + entropy == pytest.approx(marginal_loglik(m, x), abs=1e-9)

    def test_monte_carlo(self):
        r = np.random.default_rng(11)
        m = LinearModel(np.array([[1.2], [-0.7]]), np.array([0.3, 0.1]), 0.5)
        x = np.array([0.9, -0.4])
        z = r.standard_normal((1_000_000, 1))
        resid = x - z @ m.w.T - m.b
        p = np.exp(-0.5 * (resid ** 2).sum(1) / m.sigma2) / (2 * np.pi * m.sigma2)
        est = np.log(p.mean())
        se = p.std() / np.sqrt(len(p)) / p.mean()
        assert abs(est - marginal_loglik(m, x)) < 3 * se

    def test_decoder_round_trip(self, rng):
        m = random_model(rng, d=2, n=3)
        back = LinearModel.from_decoder(m.as_decoder())
        np.testing.assert_array_equal(back.w, m.w)
        assert back.sigma2 == pytest.approx(m.sigma2, rel=1e-15)

    def test_nonlinear_decoder_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            LinearModel.from_decoder(oracles.relu_net(rng, [2, 3, 4]))


def test_batched_marginal(rng):
    m = random_model(rng, d=2, n=4)
    x = rng.standard_normal((5, 4))
    np.testing.assert_allclose(marginal_loglik(m, x),
                               [marginal_loglik(m, xi) for xi in x], atol=1e-12)

