"""Laplace posteriors over the latent code of piecewise-linear decoders.

The decoder prior is p(z) = N(0, I).  Around the current mode estimate the
ReLU decoder is exactly affine, ``g(z) = W_t z + b_t``, so the Gaussian head
reduces to probabilistic PCA and the mode update is a linear solve:

    mu' = (W_t^T W_t / s2 + I)^{-1} W_t^T (x - b_t) / s2

The Bernoulli head uses a first-order expansion of the sigmoid, giving the
same form with curvature ``S_t = diag(y (1 - y))``.  Updates are damped by a
decay schedule, and the final covariance is the inverse of the precision
``Lambda_T`` at the last linearization.

Everything below works on one sample (x of shape (n,)) or a batch (B, n).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import linalg
from .linalg import NotPositiveDefinite
from .network import (Linearization, MlpParams, decoder_loglik,
                      decoder_loglik_grad_out, forward_cache, backward,
                      linearize, sigmoid)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GaussianPosterior:
    """N(mu, sigma) with ``chol @ chol.T == sigma`` (lower triangular)."""

    mu: np.ndarray
    sigma: np.ndarray
    chol: np.ndarray

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    @classmethod
    def from_covariance(cls, mu, sigma, jitter: float = 1e-8) -> "GaussianPosterior":
        sigma = 0.5 * (sigma + np.swapaxes(sigma, -1, -2))
        return cls(np.asarray(mu, dtype=np.float64), sigma, _cholesky_jitter(sigma, jitter))

    @classmethod
    def diagonal(cls, mu, log_std) -> "GaussianPosterior":
        std = np.exp(log_std)
        chol = std[..., :, None] * np.eye(std.shape[-1])
        return cls(np.asarray(mu, dtype=np.float64), chol * std[..., None, :], chol)

    def __getitem__(self, idx) -> "GaussianPosterior":
        return GaussianPosterior(self.mu[idx], self.sigma[idx], self.chol[idx])


def _cholesky_jitter(a: np.ndarray, jitter: float) -> np.ndarray:
    # one retry with jitter * I; a second failure means a corrupted linearization
    try:
        return linalg.cholesky(a)
    except NotPositiveDefinite:
        return linalg.cholesky(a + jitter * np.eye(a.shape[-1]))


def posterior_from_precision(mu: np.ndarray, precision: np.ndarray,
                             jitter: float = 1e-8) -> GaussianPosterior:
    """Gaussian with covariance ``precision^{-1}`` applied through Cholesky solves."""
    l_prec = _cholesky_jitter(precision, jitter)
    eye = np.broadcast_to(np.eye(precision.shape[-1]), precision.shape)
    sigma = linalg.cho_solve(l_prec, eye)
    return GaussianPosterior.from_covariance(mu, sigma, jitter)


def decay_schedule(name: str) -> Callable[[int], float]:
    if name == "half_harmonic":
        return lambda t: 0.5 / (t + 1)
    if name == "unit":
        return lambda t: 1.0
    raise ValueError(f"unknown decay {name!r}")


@dataclass
class ModeSchedule:
    """Number of mode updates and the damping rule alpha_t.

    ``decay`` is ``"half_harmonic"`` (alpha_t = 0.5 / (t + 1)) or ``"unit"``
    (undamped, alpha_t = 1).
    """

    steps: int = 4
    decay: str = "half_harmonic"
    jitter: float = 1e-8

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        decay_schedule(self.decay)

    def alpha(self, t: int) -> float:
        a = decay_schedule(self.decay)(t)
        if not 0.0 < a <= 1.0:
            raise ValueError(f"alpha_{t} = {a} outside (0, 1]")
        return a

    def mu0_gain(self) -> float:
        """d mu_T / d mu_0 with the linearization held fixed: prod_t (1 - alpha_t)."""
        return float(np.prod([1.0 - self.alpha(t) for t in range(self.steps)]))


@dataclass
class ModeTrace:
    mus: list[np.ndarray] = field(default_factory=list)
    objectives: list[np.ndarray] = field(default_factory=list)


def log_prior(z: np.ndarray) -> np.ndarray:
    return -0.5 * (z.shape[-1] * LOG_2PI + (z * z).sum(-1))


def log_joint(decoder: MlpParams, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """ln p(x, z) = ln p(x|z) + ln N(z; 0, I) with a full forward pass."""
    cache = forward_cache(decoder, z)
    return decoder_loglik(decoder, x, cache.output) + log_prior(z)


def log_joint_and_grad(decoder: MlpParams, x: np.ndarray, z: np.ndarray
                       ) -> tuple[np.ndarray, np.ndarray]:
    """ln p(x, z) and its z-gradient (exact wherever z is inside a region)."""
    z = np.asarray(z, dtype=np.float64)
    cache = forward_cache(decoder, z)
    value = decoder_loglik(decoder, x, cache.output) + log_prior(z)
    _, g_z = backward(decoder, cache, decoder_loglik_grad_out(decoder, x, cache.output))
    return value, g_z - z


def grad_log_joint(decoder: MlpParams, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    return log_joint_and_grad(decoder, x, z)[1]


def _gram(w: np.ndarray, scale=None) -> np.ndarray:
    if scale is None:
        return np.einsum("...nd,...ne->...de", w, w)
    return np.einsum("...nd,...n,...ne->...de", w, scale, w)


def gaussian_precision(lin: Linearization, sigma2: float) -> np.ndarray:
    """Lambda = W^T W / sigma2 + I."""
    d = lin.w.shape[-1]
    return _gram(lin.w) / sigma2 + np.eye(d)


def gaussian_mode_step(x: np.ndarray, lin: Linearization, sigma2: float,
                       jitter: float = 1e-8) -> np.ndarray:
    """Posterior mean of the pPCA model given by the linearization."""
    precision = gaussian_precision(lin, sigma2)
    rhs = lin.rmatvec(x - lin.b) / sigma2
    return linalg.cho_solve(_cholesky_jitter(precision, jitter), rhs)


def bernoulli_terms(lin: Linearization, mu: np.ndarray):
    """Curvature ``s = y (1 - y)``, effective offset and precision at ``mu``."""
    y = sigmoid(lin(mu))
    s = y * (1.0 - y)
    b_eff = y - s * lin.matvec(mu)
    precision = _gram(lin.w, s) + np.eye(lin.w.shape[-1])
    return s, b_eff, precision


def bernoulli_mode_step(x: np.ndarray, lin: Linearization, mu_t: np.ndarray,
                        jitter: float = 1e-8) -> np.ndarray:
    """One linearized Newton solve for the Bernoulli-logit mode."""
    _, b_eff, precision = bernoulli_terms(lin, mu_t)
    rhs = lin.rmatvec(x - b_eff)
    return linalg.cho_solve(_cholesky_jitter(precision, jitter), rhs)


def laplace_precision(decoder: MlpParams, x: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Negative Hessian of ln p(x, z) at ``mu`` under the local linearization."""
    lin = linearize(decoder, mu)
    if decoder.head == "gaussian":
        return gaussian_precision(lin, decoder.sigma2)
    if decoder.head == "bernoulli":
        return bernoulli_terms(lin, mu)[2]
    raise ValueError(f"head {decoder.head!r} is not a decoder head")


def _infer(decoder: MlpParams, x, mu0, sched: ModeSchedule, step
           ) -> tuple[GaussianPosterior, ModeTrace]:
    x = np.asarray(x, dtype=np.float64)
    mu = np.array(mu0, dtype=np.float64)
    trace = ModeTrace([mu.copy()], [log_joint(decoder, x, mu)])
    for t in range(sched.steps):
        lin = linearize(decoder, mu)
        alpha = sched.alpha(t)
        mu = (1.0 - alpha) * mu + alpha * step(x, lin, mu)
        trace.mus.append(mu.copy())
        trace.objectives.append(log_joint(decoder, x, mu))
    precision = laplace_precision(decoder, x, mu)
    return posterior_from_precision(mu, precision, sched.jitter), trace


def infer_gaussian(decoder: MlpParams, x, mu0, sched: ModeSchedule | None = None
                   ) -> tuple[GaussianPosterior, ModeTrace]:
    """Damped piecewise-linear mode iteration and Laplace covariance, Gaussian head."""
    if decoder.head != "gaussian":
        raise ValueError("infer_gaussian needs a Gaussian-head decoder")
    sched = sched or ModeSchedule()
    s2 = decoder.sigma2
    return _infer(decoder, x, mu0, sched,
                  lambda x, lin, mu: gaussian_mode_step(x, lin, s2, sched.jitter))


def infer_bernoulli(decoder: MlpParams, x, mu0, sched: ModeSchedule | None = None
                    ) -> tuple[GaussianPosterior, ModeTrace]:
    """Same iteration for the Bernoulli head with one Newton step per linearization."""
    if decoder.head != "bernoulli":
        raise ValueError("infer_bernoulli needs a Bernoulli-head decoder")
    sched = sched or ModeSchedule()
    return _infer(decoder, x, mu0, sched,
                  lambda x, lin, mu: bernoulli_mode_step(x, lin, mu, sched.jitter))


def infer(decoder: MlpParams, x, mu0, sched: ModeSchedule | None = None):
    if decoder.head == "gaussian":
        return infer_gaussian(decoder, x, mu0, sched)
    return infer_bernoulli(decoder, x, mu0, sched)


def gradient_mode_seek(logp: Callable[[np.ndarray], tuple[float, np.ndarray]],
                       z0: np.ndarray, steps: int, lr: float) -> np.ndarray:
    """Plain gradient ascent; ``logp`` returns (value, gradient)."""
    z = np.array(z0, dtype=np.float64)
    for _ in range(steps):
        _, g = logp(z)
        z = z + lr * g
    return z


def _curvature_along(decoder: MlpParams, x, z, p) -> np.ndarray:
    # p^T Lambda p under the linearization at z; only W p products are needed
    lin = linearize(decoder, z)
    wp = lin.matvec(p)
    if decoder.head == "gaussian":
        quad = (wp * wp).sum(-1) / decoder.sigma2
    else:
        y = sigmoid(lin.output)
        quad = (y * (1.0 - y) * wp * wp).sum(-1)
    return quad + (p * p).sum(-1)


def cg_mode_seek(decoder: MlpParams, x, z0, max_iters: int = 50, tol: float = 1e-8,
                 armijo_c: float = 1e-4, max_backtracks: int = 30) -> np.ndarray:
    """Polak-Ribiere nonlinear CG ascent on ln p(x, z).

    beta is clipped at zero and the direction restarts to the gradient every
    d iterations or whenever it is not an ascent direction.  Each line search
    tries the step that maximizes the local quadratic model along the
    direction first, then halves it until the Armijo condition holds on the
    exact objective (at most ``max_backtracks`` halvings).  On a globally
    linear decoder the objective is quadratic and the first trial is the
    exact line maximizer, so CG terminates in at most d iterations.

    Accepts a batch; every row runs its own independent CG.
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.array(z0, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z, x = z[None], x[None]
    d = z.shape[-1]
    f, g = log_joint_and_grad(decoder, x, z)
    p = g.copy()
    since_restart = np.zeros(len(z), dtype=int)
    active = np.linalg.norm(g, axis=-1) >= tol
    for _ in range(max_iters):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        za, xa, pa, ga, fa = z[idx], x[idx], p[idx], g[idx], f[idx]
        slope = (ga * pa).sum(-1)
        curv = _curvature_along(decoder, xa, za, pa)
        step = slope / curv
        pending = np.ones(len(idx), dtype=bool)
        z_new, f_new = za.copy(), fa.copy()
        for _ in range(max_backtracks + 1):
            trial = za + step[:, None] * pa
            f_trial = log_joint(decoder, xa, trial)
            ok = pending & (f_trial >= fa + armijo_c * step * slope)
            z_new[ok], f_new[ok] = trial[ok], f_trial[ok]
            pending &= ~ok
            if not pending.any():
                break
            step = np.where(pending, 0.5 * step, step)
        f_new, g_new = log_joint_and_grad(decoder, xa, z_new)
        # a failed line search keeps the iterate; it ends the row if the
        # direction was already the gradient, otherwise restarts it
        was_gradient = since_restart[idx] == 0
        g_new = np.where(pending[:, None], ga, g_new)
        f_new = np.where(pending, fa, f_new)
        beta = np.maximum(0.0, (g_new * (g_new - ga)).sum(-1) / (ga * ga).sum(-1))
        since_restart[idx] += 1
        restart = pending | (since_restart[idx] >= d)
        beta = np.where(restart, 0.0, beta)
        p_new = g_new + beta[:, None] * pa
        non_ascent = (p_new * g_new).sum(-1) <= 0.0
        p_new[non_ascent] = g_new[non_ascent]
        since_restart[idx[restart | non_ascent]] = 0
        z[idx], f[idx], g[idx], p[idx] = z_new, f_new, g_new, p_new
        active[idx] = (np.linalg.norm(g_new, axis=-1) >= tol) & ~(pending & was_gradient)
    return z[0] if single else z


@dataclass
class LowRankPrecision:
    """Lambda_hat = I + V diag(eigenvalues) V^T."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def dense(self) -> np.ndarray:
        v = self.eigenvectors
        return np.eye(v.shape[0]) + (v * self.eigenvalues) @ v.T

    def matvec(self, u: np.ndarray) -> np.ndarray:
        v = self.eigenvectors
        return u + v @ (self.eigenvalues * (v.T @ u))


def precision_power_approx(lin: Linearization, sigma2: float, k: int, iters: int,
                           rng: np.random.Generator) -> LowRankPrecision:
    """Rank-k approximation of W^T W / sigma2 + I from W and W^T products only."""
    d = lin.w.shape[-1]

    def apply(v):
        return lin.rmatvec(lin.matvec(v)) / sigma2

    vals, vecs = linalg.power_topk(apply, d, k, iters, rng)
    return LowRankPrecision(vals, vecs)


def reparam_sample(q: GaussianPosterior, eps: np.ndarray) -> np.ndarray:
    """z = mu + L eps; eps may carry extra leading sample axes."""
    return q.mu + np.einsum("...de,...e->...d", q.chol, eps)
