"""Dense SPD linear algebra and seeded sampling.

Every routine accepts either a single operand or a stack of operands along
leading axes, so the same code path serves per-sample and batched inference.
Arrays are float64 throughout.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

SYMMETRY_RTOL = 1e-9


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a Cholesky pivot is not strictly positive."""


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox 4x64) seeded with a 64-bit integer.

    Philox is keyed by the seed and advances a 256-bit counter, so the
    stream for a given seed is fixed across platforms for a given numpy
    bit-generator version.
    """
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def sample_standard_normal(rng: np.random.Generator, d: int) -> np.ndarray:
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    return rng.standard_normal(d)


def _check_square(a: np.ndarray) -> None:
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected square matrix (stack), got shape {a.shape}")


def cholesky(a: np.ndarray) -> np.ndarray:
    """Lower-triangular L with L @ L.T == a.

    Raises
    ------
    ValueError
        If ``a`` is not symmetric to a relative tolerance of 1e-9.
    NotPositiveDefinite
        If a pivot is not strictly positive.
    """
    a = np.asarray(a, dtype=np.float64)
    _check_square(a)
    asym = np.abs(a - np.swapaxes(a, -1, -2)).max(initial=0.0)
    if asym > SYMMETRY_RTOL * max(np.abs(a).max(initial=0.0), 1.0):
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    if not np.all(np.isfinite(a)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None


def solve_triangular(l: np.ndarray, b: np.ndarray, lower: bool = True,
                     trans: bool = False) -> np.ndarray:
    """Solve ``l x = b`` (or ``l.T x = b``) by substitution.

    ``l`` has shape (..., d, d) and ``b`` shape (..., d) or (..., d, m); the
    loop runs over d and is vectorized across the batch and right-hand sides.
    """
    l = np.asarray(l, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    vector = b.ndim == l.ndim - 1
    if vector:
        b = b[..., None]
    if trans:
        l = np.swapaxes(l, -1, -2)
        lower = not lower
    d = l.shape[-1]
    shape = np.broadcast_shapes(l.shape[:-2], b.shape[:-2]) + b.shape[-2:]
    x = np.zeros(shape)
    order = range(d) if lower else range(d - 1, -1, -1)
    for i in order:
        acc = b[..., i, :] - (l[..., i:i + 1, :] @ x)[..., 0, :]
        x[..., i, :] = acc / l[..., i, i, None]
    return x[..., 0] if vector else x


def cho_solve(chol: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a x = b`` given the lower Cholesky factor of ``a``."""
    y = solve_triangular(chol, b, lower=True)
    return solve_triangular(chol, y, lower=True, trans=True)


def solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a x = b`` for SPD ``a`` through its Cholesky factor."""
    return cho_solve(cholesky(a), b)


def logdet_from_chol(chol: np.ndarray) -> np.ndarray | float:
    return 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)


def logdet_spd(a: np.ndarray) -> np.ndarray | float:
    """ln det(a) as twice the sum of log Cholesky pivots."""
    return logdet_from_chol(cholesky(a))


def power_topk(apply: Callable[[np.ndarray], np.ndarray], d: int, k: int,
               iters: int, rng: np.random.Generator,
               tol: float = 1e-13) -> tuple[np.ndarray, np.ndarray]:
    """Top-k eigenpairs of a symmetric PSD operator by deflated power iteration.

    Parameters
    ----------
    apply : callable
        Matrix-vector product ``v -> A v``.
    d : int
        Operator dimension.
    k : int
        Number of eigenpairs, ``k <= d``.
    iters : int
        Maximum power iterations per component.
    rng : Generator
        Source of the random start vectors.
    tol : float
        Relative change of the Rayleigh quotient below which a component
        is taken as converged.

    Returns
    -------
    eigenvalues : (k,) array, sorted descending
    eigenvectors : (d, k) array with orthonormal columns
    """
    if not 0 <= k <= d:
        raise ValueError(f"need 0 <= k <= d, got k={k}, d={d}")
    vals: list[float] = []
    vecs: list[np.ndarray] = []

    def deflated(v: np.ndarray) -> np.ndarray:
        w = np.asarray(apply(v), dtype=np.float64)
        for lam, u in zip(vals, vecs):
            w = w - lam * u * (u @ v)
        return w

    def project_out(v: np.ndarray) -> np.ndarray:
        # two passes of Gram-Schmidt keep the basis orthonormal to ~eps
        for _ in range(2):
            for u in vecs:
                v = v - u * (u @ v)
        return v

    for _ in range(k):
        v = project_out(rng.standard_normal(d))
        v /= np.linalg.norm(v)
        lam = v @ deflated(v)
        for _ in range(iters):
            w = project_out(deflated(v))
            norm = np.linalg.norm(w)
            if norm == 0.0:
                break
            v = w / norm
            new_lam = v @ deflated(v)
            done = abs(new_lam - lam) <= tol * max(abs(new_lam), 1e-300)
            lam = new_lam
            if done:
                break
        vals.append(float(lam))
        vecs.append(v)

    order = np.argsort(vals, kind="stable")[::-1]
    eigvals = np.asarray(vals)[order]
    eigvecs = np.stack(vecs, axis=1)[:, order] if vecs else np.zeros((d, 0))
    return eigvals, eigvecs
