"""Oracle battery run by ``vlae check``.

Each suite compares a library routine against an independent reference
(closed-form linear-Gaussian algebra, finite differences, dense
eigensolves) and returns a :class:`SuiteResult`.  Fault injection swaps a
routine for a deliberately broken one so the battery can be shown to bite.
"""
from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import laplace, linalg, models, network, ppca
from .laplace import ModeSchedule
from .network import MlpParams, forward, he_init, linearize, mlp_template

SEED = 20240917


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


# ---------------------------------------------------------------------------
# fault injection


@contextlib.contextmanager
def _flip_mode_sign() -> Iterator[None]:
    original = laplace.gaussian_mode_step

    def flipped(x, lin, sigma2, jitter=1e-8):
        return -original(x, lin, sigma2, jitter)

    laplace.gaussian_mode_step = flipped
    try:
        yield
    finally:
        laplace.gaussian_mode_step = original


FAULTS: dict[str, Callable[[], contextlib.AbstractContextManager]] = {
    "flip_mode_sign": _flip_mode_sign,
}


@contextlib.contextmanager
def covariance_watch(tol: float = 1e-9) -> Iterator[list[float]]:
    """Record the top eigenvalue of every covariance built from a precision."""
    original = laplace.posterior_from_precision
    seen: list[float] = []

    def watched(mu, precision, jitter=1e-8):
        q = original(mu, precision, jitter)
        seen.append(float(np.linalg.eigvalsh(q.sigma).max(initial=0.0)))
        return q

    laplace.posterior_from_precision = watched
    try:
        yield seen
    finally:
        laplace.posterior_from_precision = original


# ---------------------------------------------------------------------------
# helpers


def random_linear_model(rng: np.random.Generator, d: int, n: int) -> ppca.LinearModel:
    w = rng.standard_normal((n, d)) * rng.uniform(0.2, 2.0)
    return ppca.LinearModel(w, rng.standard_normal(n), float(rng.uniform(0.05, 2.0)))


def random_relu_net(rng: np.random.Generator, sizes: list[int], head: str,
                    bias_scale: float = 0.5) -> MlpParams:
    net = he_init(mlp_template(sizes, head), rng)
    biases = [bias_scale * rng.standard_normal(b.shape) for b in net.biases]
    log_s2 = float(rng.uniform(-1.0, 0.5)) if head == "gaussian" else 0.0
    return MlpParams(net.weights, biases, head, log_s2)


def _pre_activations(params: MlpParams, z: np.ndarray) -> list[np.ndarray]:
    # naive re-evaluation that keeps the pre-activations
    h, pres = z, []
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        pre = w @ h + b
        pres.append(pre)
        h = np.maximum(pre, 0.0)
    return pres


def region_margin(params: MlpParams, z: np.ndarray) -> float:
    """Smallest |pre-activation| at ``z``; large margins mean a stable mask."""
    pres = _pre_activations(params, z)
    return min((float(np.abs(p).min()) for p in pres), default=np.inf)


def mask_stable(params: MlpParams, z: np.ndarray, h: float, radius: float = 2.0) -> bool:
    """Masks identical at every point of the (+-radius*h) box corners along axes."""
    _, ref = forward(params, z)
    d = len(z)
    for i in range(d):
        for j in range(i, d):
            for si in (-1, 1):
                for sj in (-1, 1):
                    zz = z.copy()
                    zz[i] += si * radius * h
                    zz[j] += sj * radius * h
                    _, m = forward(params, zz)
                    if any(not np.array_equal(a, b) for a, b in zip(ref, m)):
                        return False
    return True


def fd_jacobian(f: Callable[[np.ndarray], np.ndarray], z: np.ndarray, h: float) -> np.ndarray:
    cols = []
    for i in range(len(z)):
        e = np.zeros_like(z)
        e[i] = h
        cols.append((f(z + e) - f(z - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def fd_hessian(f: Callable[[np.ndarray], float], z: np.ndarray, h: float) -> np.ndarray:
    """Second-order central differences of a scalar function."""
    d = len(z)
    hess = np.zeros((d, d))
    eye = np.eye(d) * h
    f0 = f(z)
    for i in range(d):
        hess[i, i] = (f(z + eye[i]) - 2 * f0 + f(z - eye[i])) / h**2
        for j in range(i + 1, d):
            val = (f(z + eye[i] + eye[j]) - f(z + eye[i] - eye[j])
                   - f(z - eye[i] + eye[j]) + f(z - eye[i] - eye[j])) / (4 * h**2)
            hess[i, j] = hess[j, i] = val
    return hess


def _stable_point(rng, net: MlpParams, d: int, h: float, tries: int = 200) -> np.ndarray | None:
    for _ in range(tries):
        z = rng.standard_normal(d)
        if region_margin(net, z) > 1e3 * h and mask_stable(net, z, h):
            return z
    return None


# ---------------------------------------------------------------------------
# suites


def suite_ppca(rng: np.random.Generator, n_models: int = 100) -> tuple[bool, str]:
    """Linearized inference with one undamped step against the closed form."""
    worst_mu = worst_sigma = worst_gap = 0.0
    unit = ModeSchedule(steps=1, decay="unit")
    for _ in range(n_models):
        d = int(rng.integers(1, 9))
        m = random_linear_model(rng, d, int(rng.integers(d, 17)))
        x = rng.standard_normal(m.n) * 2.0
        q, _ = laplace.infer_gaussian(m.as_decoder(), x, rng.standard_normal(d), unit)
        ref = ppca.exact_posterior(m, x)
        worst_mu = max(worst_mu, float(np.abs(q.mu - ref.mu).max()))
        worst_sigma = max(worst_sigma, float(np.abs(q.sigma - ref.sigma).max()))
        elbo = models.elbo_single_sample(m.as_decoder(), q, x, rng.standard_normal(d)).value
        worst_gap = max(worst_gap, abs(float(elbo) - float(ppca.marginal_loglik(m, x))))
    ok = worst_mu < 1e-10 and worst_sigma < 1e-10 and worst_gap < 1e-9
    return ok, f"max|dmu|={worst_mu:.2e} max|dSigma|={worst_sigma:.2e} max|gap|={worst_gap:.2e}"


def suite_jacobian(rng: np.random.Generator, n_nets: int = 100) -> tuple[bool, str]:
    """Linearization against central differences and within-region exactness."""
    h = 1e-5
    worst_jac = worst_region = 0.0
    skipped = 0
    for _ in range(n_nets):
        d, n = int(rng.integers(1, 6)), int(rng.integers(1, 8))
        widths = [int(rng.integers(2, 65)) for _ in range(2)]
        net = random_relu_net(rng, [d, *widths, n], "gaussian")
        z = _stable_point(rng, net, d, h)
        if z is None:
            skipped += 1
            continue
        lin = linearize(net, z)
        jac = fd_jacobian(lambda v: forward(net, v)[0], z, h)
        worst_jac = max(worst_jac, float(np.abs(jac - lin.w).max()))
        # move inside the region: a step smaller than the activation margin
        step = rng.standard_normal(d)
        step *= 0.5 * region_margin(net, z) / (np.linalg.norm(step) * _lipschitz(net))
        zz = z + step
        worst_region = max(worst_region, float(np.abs(forward(net, zz)[0] - lin(zz)).max()))
    ok = worst_jac < 1e-5 and worst_region < 1e-10 and skipped < n_nets // 2
    return ok, f"max|J-Jfd|={worst_jac:.2e} region={worst_region:.2e} skipped={skipped}"


def _lipschitz(net: MlpParams) -> float:
    # bound on how fast any pre-activation moves with z
    bound, acc = 1.0, 1.0
    for w in net.weights[:-1]:
        acc *= np.linalg.norm(w, 2)
        bound = max(bound, acc)
    return bound


def _fd_param_grads(net: MlpParams, x, z, h: float = 1e-6) -> list[np.ndarray]:
    arrays = net.arrays()
    out = []
    for k, a in enumerate(arrays):
        g = np.zeros(np.shape(a))
        flat = np.array(a, dtype=np.float64).ravel()
        for i in range(flat.size):
            vals = []
            for sign in (1, -1):
                pert = flat.copy()
                pert[i] += sign * h
                arr = [np.array(b) for b in arrays]
                arr[k] = pert.reshape(np.shape(a))
                p = net.with_arrays(arr)
                vals.append(float(network.decoder_loglik(p, x, forward(p, z)[0])))
            g.ravel()[i] = (vals[0] - vals[1]) / (2 * h)
        out.append(g)
    return out


def suite_gradient(rng: np.random.Generator, n_nets: int = 6) -> tuple[bool, str]:
    """Reverse-mode parameter gradients against central differences, both heads."""
    worst = 0.0
    for trial in range(n_nets):
        head = "gaussian" if trial % 2 == 0 else "bernoulli"
        net = random_relu_net(rng, [3, 4, 5], head)
        z = _stable_point(rng, net, 3, 1e-6)
        if z is None:
            return False, "no mask-stable point found"
        x = rng.standard_normal(5) if head == "gaussian" else rng.uniform(0, 1, 5)
        grads = network.decoder_logp_grad_params(net, x, z).arrays()
        for g, ref in zip(grads, _fd_param_grads(net, x, z)):
            scale = max(float(np.abs(ref).max()), 1e-3)
            worst = max(worst, float(np.abs(np.asarray(g) - ref).max()) / scale)
    return worst < 1e-4, f"max rel err={worst:.2e}"


def suite_hessian(rng: np.random.Generator, n_nets: int = 20) -> tuple[bool, str]:
    """Laplace precision against the finite-difference Hessian of ln p(x, z)."""
    h = 1e-4
    worst = 0.0
    for trial in range(n_nets):
        head = "gaussian" if trial % 2 == 0 else "bernoulli"
        d = int(rng.integers(1, 5))
        net = random_relu_net(rng, [d, 16, 16, 6], head)
        x = rng.standard_normal(6) if head == "gaussian" else (rng.uniform(size=6) < 0.5) * 1.0
        q, _ = laplace.infer(net, x, rng.standard_normal(d), ModeSchedule(steps=4))
        z = q.mu
        if not (region_margin(net, z) > 1e2 * h and mask_stable(net, z, h)):
            z = _stable_point(rng, net, d, h)
            if z is None:
                return False, "no mask-stable point found"
        prec = laplace.laplace_precision(net, x, z)
        ref = -fd_hessian(lambda v: float(laplace.log_joint(net, x, v)), z, h)
        worst = max(worst, float(np.abs(prec - ref).max() / np.abs(ref).max()))
    return worst < 1e-4, f"max rel err={worst:.2e}"


def suite_power(rng: np.random.Generator, n_models: int = 10) -> tuple[bool, str]:
    """Power-iteration precision against the dense construction."""
    worst = 0.0
    for _ in range(n_models):
        d = int(rng.integers(1, 7))
        w = rng.standard_normal((10, d))
        lin = network.Linearization(w, np.zeros(10), [], np.zeros(d), np.zeros(10))
        approx = laplace.precision_power_approx(lin, 0.5, d, 5000, rng).dense()
        dense = w.T @ w / 0.5 + np.eye(d)
        worst = max(worst, float(np.linalg.norm(approx - dense) / np.linalg.norm(dense)))
    return worst < 1e-4, f"max rel Frobenius err={worst:.2e}"


SUITES: dict[str, Callable[[np.random.Generator], tuple[bool, str]]] = {
    "ppca": suite_ppca,
    "jacobian": suite_jacobian,
    "gradient": suite_gradient,
    "hessian": suite_hessian,
    "power": suite_power,
}


def run_checks(fault: str | None = None, seed: int = SEED) -> list[SuiteResult]:
    """Run every suite (under ``fault`` if given) plus the covariance bound."""
    if fault is not None and fault not in FAULTS:
        raise KeyError(f"unknown fault {fault!r}; known: {sorted(FAULTS)}")
    results = []
    ctx = FAULTS[fault]() if fault else contextlib.nullcontext()
    with ctx, covariance_watch() as seen:
        for name, suite in SUITES.items():
            start = time.perf_counter()
            try:
                ok, detail = suite(linalg.make_rng(seed + len(results)))
            except Exception as exc:  # a crashing suite is a failing suite
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            results.append(SuiteResult(name, bool(ok), detail, time.perf_counter() - start))
    top = max(seen, default=0.0)
    results.append(SuiteResult("covariance_bound", top <= 1 + 1e-9,
                               f"max eig(Sigma)={top:.12f} over {len(seen)} calls"))
    return results
