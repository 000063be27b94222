import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlae import laplace
from vlae.laplace import (GaussianPosterior, ModeSchedule, bernoulli_mode_step, cg_mode_seek,
                          gaussian_mode_step, gradient_mode_seek, infer_bernoulli,
                          infer_gaussian, precision_power_approx, reparam_sample)
from vlae.linalg import NotPositiveDefinite, make_rng
from vlae.network import Linearization, MlpParams, linearize
from vlae.ppca import LinearModel, exact_posterior

import oracles

UNIT = ModeSchedule(steps=1, decay="unit")


def linear_model(rng, d=3, n=6, sigma2=0.5):
    return LinearModel(rng.standard_normal((n, d)), rng.standard_normal(n), sigma2)


def toy_instance(rng, sizes=(2, 16, 2), sigma2=0.1, noise=0.3):
    net = oracles.relu_net(rng, list(sizes), log_sigma2=np.log(sigma2))
    x = oracles.naive_forward(net, rng.standard_normal(sizes[0]))[0]
    return net, x + noise * rng.standard_normal(sizes[-1])


def bare_lin(w, b=None):
    w = np.asarray(w, dtype=np.float64)
    b = np.zeros(w.shape[0]) if b is None else np.asarray(b, dtype=np.float64)
    return Linearization(w, b, [], np.zeros(w.shape[1]), b)


class TestSchedule:
    def test_default_decay(self):
        s = ModeSchedule()
        assert [s.alpha(t) for t in range(3)] == [0.5, 0.25, 0.5 / 3]
        assert s.steps == 4 and s.jitter == 1e-8

    def test_mu0_gain(self):
        s = ModeSchedule(steps=3)
        assert s.mu0_gain() == pytest.approx(0.5 * 0.75 * (1 - 0.5 / 3))
        assert ModeSchedule(steps=2, decay="unit").mu0_gain() == 0.0

    def test_negative_steps(self):
        with pytest.raises(ValueError):
            ModeSchedule(steps=-1)

    def test_unknown_decay(self):
        with pytest.raises(ValueError):
            ModeSchedule(decay="cosine")


class TestGaussianModeStep:
    def test_linear_decoder_gives_exact_mean(self, rng):
        m = linear_model(rng)
        x = rng.standard_normal(6)
        ref = exact_posterior(m, x).mu
        for _ in range(3):
            lin = linearize(m.as_decoder(), rng.standard_normal(3))
            np.testing.assert_allclose(gaussian_mode_step(x, lin, m.sigma2), ref, atol=1e-12)

    def test_prior_dominance(self, rng):
        w = rng.standard_normal((5, 2))
        mu = gaussian_mode_step(rng.standard_normal(5), bare_lin(w), 1e8)
        assert np.linalg.norm(mu) < 1e-6

    def test_hand_set_network(self):
        # one hidden layer; at z = (1, 0.5) unit 2 is off, so W_z = w1[:, :1] @ w0[:1]
        w0 = np.array([[1.0, 0.0], [-1.0, -1.0]])
        b0 = np.array([0.0, 0.0])
        w1 = np.array([[2.0, 1.0], [0.5, 3.0], [1.0, 1.0]])
        b1 = np.array([0.1, -0.2, 0.0])
        net = MlpParams([w0, w1], [b0, b1], "gaussian", 0.0)
        lin = linearize(net, np.array([1.0, 0.5]))
        wz = np.array([[2.0, 0.0], [0.5, 0.0], [1.0, 0.0]])
        np.testing.assert_array_equal(lin.w, wz)
        np.testing.assert_array_equal(lin.b, b1)
        x = np.array([1.0, 2.0, -1.0])
        # normal equations (W^T W + I) mu = W^T (x - b): first row 6.25 mu1 = 2*0.9 + 0.5*2.2 - 1
        mu = gaussian_mode_step(x, lin, 1.0)
        np.testing.assert_allclose(mu, [1.9 / 6.25, 0.0], atol=1e-15)


class TestInferGaussian:
    def test_zero_steps(self, rng):
        net, x = toy_instance(rng)
        mu0 = rng.standard_normal(2)
        q, trace = infer_gaussian(net, x, mu0, ModeSchedule(steps=0))
        np.testing.assert_array_equal(q.mu, mu0)
        lin = linearize(net, mu0)
        sigma = np.linalg.inv(lin.w.T @ lin.w / net.sigma2 + np.eye(2))
        np.testing.assert_allclose(q.sigma, sigma, atol=1e-12)
        assert len(trace.mus) == 1 and len(trace.objectives) == 1

    def test_linear_one_unit_step_is_exact(self, rng):
        for _ in range(20):
            m = linear_model(rng, d=int(rng.integers(1, 9)), n=12, sigma2=float(rng.uniform(.1, 2)))
            x = rng.standard_normal(12)
            q, _ = infer_gaussian(m.as_decoder(), x, rng.standard_normal(m.d), UNIT)
            ref = exact_posterior(m, x)
            np.testing.assert_allclose(q.mu, ref.mu, atol=1e-10)
            np.testing.assert_allclose(q.sigma, ref.sigma, atol=1e-10)

    def test_trace_length(self, rng):
        net, x = toy_instance(rng)
        _, trace = infer_gaussian(net, x, np.zeros(2), ModeSchedule(steps=5))
        assert len(trace.mus) == 6 and len(trace.objectives) == 6

    def test_damped_contraction_on_linear_decoder(self, rng):
        # distance to the mode shrinks by exactly prod(1 - alpha_t)
        m = linear_model(rng)
        x = rng.standard_normal(6)
        mu0 = rng.standard_normal(3)
        ref = exact_posterior(m, x).mu
        sched = ModeSchedule(steps=8)
        q, _ = infer_gaussian(m.as_decoder(), x, mu0, sched)
        np.testing.assert_allclose(q.mu - ref, sched.mu0_gain() * (mu0 - ref), atol=1e-12)
        assert sched.mu0_gain() == pytest.approx(0.196380615234375)

    def test_gradient_norm_drop_undamped(self):
        r = np.random.default_rng(0)
        ratios = []
        for _ in range(30):
            net, x = toy_instance(r)
            mu0 = r.standard_normal(2)
            g0 = np.linalg.norm(laplace.grad_log_joint(net, x, mu0))
            q, _ = infer_gaussian(net, x, mu0, ModeSchedule(steps=8, decay="unit"))
            ratios.append(g0 / max(np.linalg.norm(laplace.grad_log_joint(net, x, q.mu)), 1e-300))
        assert np.median(ratios) >= 10

    def test_region_stationarity(self, rng):
        hits = 0
        for _ in range(40):
            net, x = toy_instance(rng)
            mu0 = rng.standard_normal(2)
            step = gaussian_mode_step(x, linearize(net, mu0), net.sigma2)
            if oracles.masks_equal(net, mu0, step):
                hits += 1
                again = gaussian_mode_step(x, linearize(net, step), net.sigma2)
                np.testing.assert_allclose(again, step, atol=1e-10)
        assert hits > 0

    def test_batched_matches_single(self, rng):
        net, _ = toy_instance(rng, sizes=(3, 8, 8, 4))
        x, mu0 = rng.standard_normal((5, 4)), rng.standard_normal((5, 3))
        q, _ = infer_gaussian(net, x, mu0)
        for i in range(5):
            qi, _ = infer_gaussian(net, x[i], mu0[i])
            np.testing.assert_allclose(q.mu[i], qi.mu, atol=1e-12)
            np.testing.assert_allclose(q.sigma[i], qi.sigma, atol=1e-12)

    def test_wrong_head(self, rng):
        net = oracles.relu_net(rng, [2, 3], "bernoulli")
        with pytest.raises(ValueError):
            infer_gaussian(net, np.zeros(3), np.zeros(2))

    def test_hessian_matches_finite_differences(self, rng):
        for _ in range(10):
            d = int(rng.integers(1, 5))
            net, x = toy_instance(rng, sizes=(d, 12, 12, 5), sigma2=0.5)
            q, _ = infer_gaussian(net, x, rng.standard_normal(d))
            z = q.mu
            if not oracles.masks_equal(net, z, z + 1e-3):
                z = oracles.stable_point(rng, net, d, 1e-4)
            ref = -oracles.fd_hessian(lambda v: oracles.log_joint(net, x, v), z)
            prec = laplace.laplace_precision(net, x, z)
            assert np.abs(prec - ref).max() / np.abs(ref).max() < 1e-4


class TestBernoulli:
    def test_zero_weights_step(self, rng):
        mu = bernoulli_mode_step(rng.uniform(size=4), bare_lin(np.zeros((4, 2))),
                                 rng.standard_normal(2))
        np.testing.assert_array_equal(mu, 0.0)

    def test_scalar_hand_arithmetic(self):
        mu = bernoulli_mode_step(np.array([1.0]), bare_lin([[1.0]]), np.array([0.0]))
        np.testing.assert_allclose(mu, [0.4], atol=1e-15)

    def test_fixed_point_is_stationary(self, rng):
        w, b = rng.standard_normal((6, 2)), rng.standard_normal(6)
        net = MlpParams([w], [b], "bernoulli")
        x = (rng.uniform(size=6) < 0.5).astype(float)
        q, _ = infer_bernoulli(net, x, np.zeros(2), ModeSchedule(steps=30, decay="unit"))
        grad = w.T @ (x - 1 / (1 + np.exp(-(w @ q.mu + b)))) - q.mu
        assert np.abs(grad).max() < 1e-6

    def test_zero_steps_zero_weights(self, rng):
        net = MlpParams([np.zeros((4, 3))], [np.zeros(4)], "bernoulli")
        q, _ = infer_bernoulli(net, rng.uniform(size=4), np.zeros(3), ModeSchedule(steps=0))
        np.testing.assert_array_equal(q.mu, 0.0)
        np.testing.assert_allclose(q.sigma, np.eye(3), atol=1e-15)

    def test_covariance_matches_finite_difference_curvature(self, rng):
        for _ in range(5):
            w, b = rng.standard_normal((5, 1)), rng.standard_normal(5)
            net = MlpParams([w], [b], "bernoulli")
            x = (rng.uniform(size=5) < 0.5).astype(float)
            q, _ = infer_bernoulli(net, x, np.zeros(1), ModeSchedule(steps=6))
            h = 1e-4
            f = lambda z: oracles.log_joint(net, x, z)
            z = q.mu
            curv = (f(z + h) - 2 * f(z) + f(z - h)) / h**2
            assert abs(q.sigma[0, 0] - (-1 / curv)) / q.sigma[0, 0] < 1e-4

    def test_covariance_bounded(self, rng):
        for _ in range(20):
            net = oracles.relu_net(rng, [3, 8, 6], "bernoulli")
            q, _ = infer_bernoulli(net, rng.uniform(size=6), rng.standard_normal(3))
            assert np.linalg.eigvalsh(q.sigma).max() <= 1 + 1e-12

    def test_relu_hessian(self, rng):
        for _ in range(8):
            net = oracles.relu_net(rng, [3, 10, 10, 6], "bernoulli")
            x = (rng.uniform(size=6) < 0.5).astype(float)
            z = oracles.stable_point(rng, net, 3, 1e-4)
            ref = -oracles.fd_hessian(lambda v: oracles.log_joint(net, x, v), z)
            prec = laplace.laplace_precision(net, x, z)
            assert np.abs(prec - ref).max() / np.abs(ref).max() < 1e-4


class TestGradientModeSeek:
    def test_quadratic_halving(self):
        seen = []

        def logp(z):
            seen.append(z.copy())
            return -0.5 * z @ z, -z

        gradient_mode_seek(logp, np.array([1.0, 0.0]), 4, 0.5)
        np.testing.assert_allclose([s[0] for s in seen], [1.0, 0.5, 0.25, 0.125])

    def test_linear_model_converges(self, rng):
        m = linear_model(rng, sigma2=1.0)
        x = rng.standard_normal(6)
        dec = m.as_decoder()
        lam_max = np.linalg.eigvalsh(m.w.T @ m.w / m.sigma2 + np.eye(3)).max()
        z = gradient_mode_seek(lambda z: laplace.log_joint_and_grad(dec, x, z),
                               np.zeros(3), 5000, 1.0 / lam_max)
        np.testing.assert_allclose(z, exact_posterior(m, x).mu, atol=1e-4)

    def test_zero_gradient(self):
        z0 = np.array([0.3, -0.1])
        z = gradient_mode_seek(lambda z: (0.0, np.zeros_like(z)), z0, 10, 0.1)
        np.testing.assert_array_equal(z, z0)


class TestCG:
    def test_linear_exact_within_d_plus_2(self, rng):
        for d in (1, 2, 4, 8):
            m = linear_model(rng, d=d, n=12, sigma2=0.3)
            x = rng.standard_normal(12)
            z = cg_mode_seek(m.as_decoder(), x, rng.standard_normal(d), max_iters=d + 2)
            np.testing.assert_allclose(z, exact_posterior(m, x).mu, atol=1e-6)

    def test_start_at_mode(self, rng):
        m = linear_model(rng)
        x = rng.standard_normal(6)
        mode = exact_posterior(m, x).mu
        np.testing.assert_array_equal(cg_mode_seek(m.as_decoder(), x, mode, tol=1e-6), mode)

    def test_beats_gradient_ascent_with_equal_budget(self):
        r = np.random.default_rng(3)
        wins = 0
        for _ in range(20):
            net, x = toy_instance(r)
            z0 = r.standard_normal(2)
            obj = lambda z: float(laplace.log_joint(net, x, z))
            z_cg = cg_mode_seek(net, x, z0, max_iters=10)
            z_gd = gradient_mode_seek(lambda z: laplace.log_joint_and_grad(net, x, z),
                                      z0, 10, 1e-3)
            wins += obj(z_cg) >= obj(z_gd)
        assert wins == 20

    def test_never_decreases_objective(self, rng):
        for _ in range(20):
            net, x = toy_instance(rng)
            z0 = rng.standard_normal(2)
            z = cg_mode_seek(net, x, z0, max_iters=20)
            assert laplace.log_joint(net, x, z) >= laplace.log_joint(net, x, z0)

    def test_batched(self, rng):
        net, _ = toy_instance(rng)
        x, z0 = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
        z = cg_mode_seek(net, x, z0, max_iters=5)
        for i in range(4):
            np.testing.assert_allclose(z[i], cg_mode_seek(net, x[i], z0[i], max_iters=5),
                                       atol=1e-12)


class TestPowerApprox:
    def test_full_rank_matches_dense(self, rng):
        w = rng.standard_normal((8, 4))
        approx = precision_power_approx(bare_lin(w), 0.5, 4, 5000, make_rng(0)).dense()
        dense = w.T @ w / 0.5 + np.eye(4)
        assert np.linalg.norm(approx - dense) / np.linalg.norm(dense) < 1e-4

    def test_dominant_direction(self, rng):
        u = np.linalg.qr(rng.standard_normal((8, 4)))[0]
        v = np.linalg.qr(rng.standard_normal((4, 4)))[0]
        w = u @ np.diag([30.0, 0.5, 0.3, 0.1]) @ v.T
        approx = precision_power_approx(bare_lin(w), 1.0, 1, 500, make_rng(1)).dense()
        full = w.T @ w
        captured = 1 - np.linalg.norm(full - (approx - np.eye(4))) / np.linalg.norm(full)
        assert captured >= 0.99

    def test_zero_weights(self):
        approx = precision_power_approx(bare_lin(np.zeros((5, 3))), 1.0, 2, 50, make_rng(2))
        np.testing.assert_allclose(approx.dense(), np.eye(3), atol=1e-15)

    def test_matvec_agrees_with_dense(self, rng):
        approx = precision_power_approx(bare_lin(rng.standard_normal((6, 3))), 0.7, 2, 500,
                                        make_rng(3))
        u = rng.standard_normal(3)
        np.testing.assert_allclose(approx.matvec(u), approx.dense() @ u, atol=1e-12)


class TestReparam:
    def test_zero_noise(self, rng):
        q = GaussianPosterior.from_covariance(rng.standard_normal(3), oracles.random_spd(rng, 3))
        np.testing.assert_array_equal(reparam_sample(q, np.zeros(3)), q.mu)

    def test_standard_posterior(self, rng):
        q = GaussianPosterior(np.zeros(3), np.eye(3), np.eye(3))
        eps = rng.standard_normal(3)
        np.testing.assert_array_equal(reparam_sample(q, eps), eps)

    def test_moments(self):
        r = np.random.default_rng(7)
        q = GaussianPosterior.from_covariance(r.standard_normal(4),
                                              np.linalg.inv(oracles.random_spd(r, 4)))
        z = reparam_sample(q, r.standard_normal((100_000, 4)))
        assert np.linalg.norm(np.cov(z.T) - q.sigma) / np.linalg.norm(q.sigma) < 0.05
        np.testing.assert_allclose(z.mean(0), q.mu, atol=0.02)


class TestPosteriorConstruction:
    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 10))
    def test_chol_invariant(self, seed, d):
        r = np.random.default_rng(seed)
        prec = oracles.random_spd(r, d)
        q = laplace.posterior_from_precision(r.standard_normal(d), prec)
        np.testing.assert_allclose(q.chol @ q.chol.T, q.sigma, atol=1e-8)
        np.testing.assert_allclose(q.sigma, q.sigma.T, atol=0)
        np.testing.assert_allclose(q.sigma @ prec, np.eye(d), atol=1e-8)

    def test_jitter_retry(self):
        # singular by one rounding step: the retry with jitter succeeds
        a = np.array([[1.0, 1.0], [1.0, 1.0]])
        l = laplace._cholesky_jitter(a, 1e-8)
        np.testing.assert_allclose(l @ l.T, a + 1e-8 * np.eye(2), atol=1e-12)

    def test_jitter_retry_fails(self):
        with pytest.raises(NotPositiveDefinite):
            laplace._cholesky_jitter(-np.eye(2), 1e-8)
