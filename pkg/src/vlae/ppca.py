"""Closed-form posterior and evidence of the linear-Gaussian latent model.

    p(z) = N(0, I),   p(x|z) = N(W z + b, sigma2 I)

The posterior is N(Sigma W^T (x - b) / sigma2, Sigma) with
Sigma = (W^T W / sigma2 + I)^{-1}, and the evidence is N(x; b, W W^T + sigma2 I).
Used both as a model and as the reference for the piecewise-linear inference.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import laplace, linalg
from .laplace import GaussianPosterior
from .network import MlpParams

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class LinearModel:
    w: np.ndarray
    b: np.ndarray
    sigma2: float

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise ValueError(f"w {self.w.shape} and b {self.b.shape} do not match")

    @property
    def n(self) -> int:
        return self.w.shape[0]

    @property
    def d(self) -> int:
        return self.w.shape[1]

    def as_decoder(self) -> MlpParams:
        """The same model as a hidden-layer-free Gaussian-head network."""
        return MlpParams([self.w.copy()], [self.b.copy()], "gaussian", np.log(self.sigma2))

    @classmethod
    def from_decoder(cls, decoder: MlpParams) -> "LinearModel":
        if decoder.hidden or decoder.head != "gaussian":
            raise ValueError("only a linear Gaussian-head decoder maps to a LinearModel")
        return cls(decoder.weights[0], decoder.biases[0], decoder.sigma2)


def exact_posterior(m: LinearModel, x: np.ndarray) -> GaussianPosterior:
    x = np.asarray(x, dtype=np.float64)
    precision = m.w.T @ m.w / m.sigma2 + np.eye(m.d)
    rhs = (x - m.b) @ m.w / m.sigma2
    mu = linalg.solve_spd(np.broadcast_to(precision, rhs.shape[:-1] + precision.shape), rhs)
    return laplace.posterior_from_precision(mu, np.broadcast_to(precision, mu.shape[:-1] + precision.shape))


def marginal_loglik(m: LinearModel, x: np.ndarray) -> np.ndarray | float:
    """ln N(x; b, W W^T + sigma2 I) via the Cholesky factor of the n x n covariance."""
    x = np.asarray(x, dtype=np.float64)
    cov = m.w @ m.w.T + m.sigma2 * np.eye(m.n)
    chol = linalg.cholesky(cov)
    r = _whiten(chol, x - m.b)
    return -0.5 * (m.n * LOG_2PI + linalg.logdet_from_chol(chol) + (r * r).sum(-1))


def _whiten(chol: np.ndarray, r: np.ndarray) -> np.ndarray:
    # L^{-1} r for every row of r
    if r.ndim == 1:
        return linalg.solve_triangular(chol, r)
    return linalg.solve_triangular(chol, r.T).T
