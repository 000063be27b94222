"""Training and evaluation of VAE, SA-VAE and Laplace-posterior autoencoders.

Model kinds
-----------
vae
    Amortized diagonal Gaussian q, analytic KL plus a one-sample
    reconstruction term.
savae
    The VAE encoder's prediction refined by a few clipped SGD steps on the
    per-datum ELBO.  The decoder trains on the refined posterior, the
    encoder on its own (unrefined) prediction.
vlae
    Encoder predicts the starting mode; damped piecewise-linear mode updates
    and the Laplace covariance give a full-covariance q.
vlae_cg
    As vlae, with Polak-Ribiere CG ascent replacing the mode updates.

All per-sample quantities are vectorized over a batch axis.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from . import laplace, linalg
from .data import Dataset, dynamic_binarize
from .laplace import GaussianPosterior, ModeSchedule
from .network import (AdamState, MlpParams, adam_step, backward, decoder_logp_grad,
                      encoder_forward, forward_cache, he_init, mlp_template)

log = logging.getLogger(__name__)

KINDS = ("vae", "savae", "vlae", "vlae_cg")
LOG_2PI = np.log(2.0 * np.pi)
LOG_STD_MIN, LOG_STD_MAX = -7.0, 3.0


class Divergence(RuntimeError):
    """A training step produced a non-finite loss or gradient."""


@dataclass
class VariationalParams:
    """Diagonal Gaussian (mu, log std); log std clamped to [-7, 3]."""

    mu: np.ndarray
    log_sigma_diag: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_sigma_diag = np.clip(np.asarray(self.log_sigma_diag, dtype=np.float64),
                                      LOG_STD_MIN, LOG_STD_MAX)

    def posterior(self) -> GaussianPosterior:
        return GaussianPosterior.diagonal(self.mu, self.log_sigma_diag)


@dataclass
class TrainConfig:
    kind: str = "vlae"
    head: str = "gaussian"
    latent_dim: int = 16
    hidden: tuple[int, ...] = (256,)
    steps: int = 4
    decay: str = "half_harmonic"
    batch_size: int = 128
    lr: float = 5e-4
    epochs: int = 100
    seed: int = 0
    iwae_k: int = 100
    savae_alpha: float = 5e-4
    savae_clip: float = 5.0
    cg_tol: float = 1e-8
    patience: int = 0
    eval_chunk: int = 100

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.head not in ("gaussian", "bernoulli"):
            raise ValueError(f"head must be gaussian or bernoulli, got {self.head!r}")
        for name in ("latent_dim", "batch_size", "epochs", "iwae_k", "eval_chunk"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.steps < 0 or self.patience < 0 or any(h < 1 for h in self.hidden):
            raise ValueError("steps, patience and hidden widths must be non-negative/positive")
        if not (self.lr > 0 and self.savae_alpha > 0 and self.savae_clip > 0):
            raise ValueError("lr, savae_alpha and savae_clip must be positive")
        laplace.decay_schedule(self.decay)

    @property
    def schedule(self) -> ModeSchedule:
        return ModeSchedule(self.steps, self.decay)


@dataclass
class Metrics:
    epoch: int
    train_elbo: float
    val_elbo: float
    val_iwae: float
    sigma2: float
    wall_clock_seconds: float


METRIC_FIELDS = tuple(f.name for f in fields(Metrics))


# ---------------------------------------------------------------------------
# densities and bounds


def log_density_full_gaussian(q: GaussianPosterior, z: np.ndarray) -> np.ndarray:
    """ln N(z; mu, Sigma) using triangular solves against the Cholesky factor."""
    # explicit column: z may carry sample axes in front of the batch axes
    r = linalg.solve_triangular(q.chol, (z - q.mu)[..., None])[..., 0]
    logdet = linalg.logdet_from_chol(q.chol)
    return -0.5 * (q.dim * LOG_2PI + logdet + (r * r).sum(-1))


def kl_diag_gaussian_prior(mu: np.ndarray, log_sigma_diag: np.ndarray) -> np.ndarray:
    """KL(N(mu, diag sigma^2) || N(0, I)); ``log_sigma_diag`` is log std."""
    var = np.exp(2.0 * log_sigma_diag)
    return 0.5 * (var + mu * mu - 1.0 - 2.0 * log_sigma_diag).sum(-1)


@dataclass
class ElboSample:
    value: np.ndarray            # ln p(x, z) - ln q(z|x), per sample
    z: np.ndarray
    grad_z: np.ndarray           # d/dz ln p(x, z) at the sample
    decoder_grads: MlpParams     # d/dtheta ln p(x|z), summed over the batch


def elbo_single_sample(decoder: MlpParams, q: GaussianPosterior, x: np.ndarray,
                       eps: np.ndarray) -> ElboSample:
    """One-draw ELBO estimate with z = mu + L eps.

    ``grad_z`` is the derivative with respect to the posterior mean with L
    and eps fixed (ln q at a reparameterized sample does not depend on mu).
    """
    z = laplace.reparam_sample(q, eps)
    logpx, grads, g_z = decoder_logp_grad(decoder, x, z)
    value = logpx + laplace.log_prior(z) - log_density_full_gaussian(q, z)
    return ElboSample(value, z, g_z - z, grads)


def iwae_loglik(decoder: MlpParams, q: GaussianPosterior, x: np.ndarray, k: int,
                rng: np.random.Generator) -> np.ndarray:
    """Importance-weighted bound with k draws from q, stabilized log-mean-exp."""
    if k < 1:
        raise ValueError("k must be >= 1")
    eps = rng.standard_normal((k,) + np.shape(q.mu))
    z = laplace.reparam_sample(q, eps)
    log_w = laplace.log_joint(decoder, x, z) - log_density_full_gaussian(q, z)
    return logsumexp(log_w, axis=0) - np.log(k)


def clip_by_norm(g: np.ndarray, clip: float) -> np.ndarray:
    """Rescale each row so its Euclidean norm is at most ``clip``."""
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    return g * np.minimum(1.0, clip / np.maximum(norm, 1e-300))


def _diag_elbo_grads(decoder: MlpParams, x, lam: VariationalParams, eps):
    """Analytic-KL ELBO, its (mu, log std) gradients and the decoder pieces."""
    std = np.exp(lam.log_sigma_diag)
    z = lam.mu + std * eps
    logpx, dec_grads, g_z = decoder_logp_grad(decoder, x, z)
    elbo = logpx - kl_diag_gaussian_prior(lam.mu, lam.log_sigma_diag)
    g_mu = g_z - lam.mu
    g_ls = g_z * std * eps - (std * std - 1.0)
    return elbo, g_mu, g_ls, dec_grads


def savae_refine(decoder: MlpParams, x: np.ndarray, lambda0: VariationalParams,
                 steps: int, alpha: float | Callable[[int], float], clip: float,
                 rng: np.random.Generator) -> VariationalParams:
    """``steps`` single-sample SGD ascent steps on the diagonal-Gaussian ELBO.

    The joint (mu, log std) gradient of each datum is clipped to norm ``clip``
    before the step.  ``alpha`` is a constant or a function of the step index.
    """
    lam = VariationalParams(lambda0.mu.copy(), lambda0.log_sigma_diag.copy())
    d = lam.mu.shape[-1]
    for t in range(steps):
        eps = rng.standard_normal(lam.mu.shape)
        _, g_mu, g_ls, _ = _diag_elbo_grads(decoder, x, lam, eps)
        g = clip_by_norm(np.concatenate([g_mu, g_ls], axis=-1), clip)
        a = alpha(t) if callable(alpha) else alpha
        lam = VariationalParams(lam.mu + a * g[..., :d], lam.log_sigma_diag + a * g[..., d:])
    return lam


# ---------------------------------------------------------------------------
# models


@dataclass
class Model:
    config: TrainConfig
    decoder: MlpParams
    encoder: MlpParams
    dec_opt: AdamState
    enc_opt: AdamState


def init_model(config: TrainConfig, data_dim: int, rng: np.random.Generator) -> Model:
    """He-initialized encoder/decoder pair; the decoder mirrors the encoder."""
    d = config.latent_dim
    enc_out, enc_head = (2 * d, "mean_logstd") if config.kind in ("vae", "savae") else (d, "mean")
    encoder = he_init(mlp_template([data_dim, *config.hidden, enc_out], enc_head), rng)
    decoder = he_init(mlp_template([d, *reversed(config.hidden), data_dim], config.head), rng)
    return Model(config, decoder, encoder, AdamState.zeros_like(decoder),
                 AdamState.zeros_like(encoder))


def _clip_mask(log_std_raw: np.ndarray) -> np.ndarray:
    return (log_std_raw >= LOG_STD_MIN) & (log_std_raw <= LOG_STD_MAX)


def laplace_posterior(model: Model, x: np.ndarray, mu0: np.ndarray) -> GaussianPosterior:
    cfg, dec = model.config, model.decoder
    if cfg.kind == "vlae_cg":
        mu = laplace.cg_mode_seek(dec, x, mu0, max_iters=cfg.steps, tol=cfg.cg_tol)
        precision = laplace.laplace_precision(dec, x, mu)
        return laplace.posterior_from_precision(mu, precision, cfg.schedule.jitter)
    q, _ = laplace.infer(dec, x, mu0, cfg.schedule)
    return q


def posterior(model: Model, x: np.ndarray, rng: np.random.Generator) -> GaussianPosterior:
    """q(z|x) for every row of ``x``; ``rng`` is only consumed by SA-VAE refinement."""
    cfg = model.config
    if cfg.kind in ("vlae", "vlae_cg"):
        return laplace_posterior(model, x, encoder_forward(model.encoder, x))
    mu, log_std = encoder_forward(model.encoder, x)
    lam = VariationalParams(mu, log_std)
    if cfg.kind == "savae":
        lam = savae_refine(model.decoder, x, lam, cfg.steps, cfg.savae_alpha,
                           cfg.savae_clip, rng)
    return lam.posterior()


def _scaled(grads: MlpParams, factor: float) -> MlpParams:
    out = grads.with_arrays([factor * a for a in grads.arrays()])
    out.log_sigma2 = factor * grads.log_sigma2
    return out


def _check_finite(value, grads: list[MlpParams]) -> None:
    if not np.all(np.isfinite(value)) or not all(
            np.all(np.isfinite(a)) for g in grads for a in g.arrays()):
        raise Divergence("non-finite ELBO or gradient")


def train_step(model: Model, batch: np.ndarray, rng: np.random.Generator
               ) -> tuple[Model, float]:
    """One ADAM step on both networks; returns the new model and the batch-mean ELBO."""
    cfg = model.config
    batch = np.asarray(batch, dtype=np.float64)
    if len(batch) == 0:
        raise ValueError("empty batch")
    b = len(batch)
    enc_cache = forward_cache(model.encoder, batch)

    if cfg.kind in ("vlae", "vlae_cg"):
        q = laplace_posterior(model, batch, enc_cache.output)
        eps = rng.standard_normal(q.mu.shape)
        s = elbo_single_sample(model.decoder, q, batch, eps)
        elbo, dec_grads = s.value, s.decoder_grads
        # masks are piecewise constant in mu_0, so only the damping path carries gradient
        gain = 1.0 if cfg.kind == "vlae_cg" else cfg.schedule.mu0_gain()
        enc_grad_out = gain * s.grad_z
    else:
        d = cfg.latent_dim
        mu, raw_ls = enc_cache.output[:, :d], enc_cache.output[:, d:]
        lam0 = VariationalParams(mu, raw_ls)
        eps = rng.standard_normal(mu.shape)
        elbo, g_mu, g_ls, dec_grads = _diag_elbo_grads(model.decoder, batch, lam0, eps)
        enc_grad_out = np.concatenate([g_mu, g_ls * _clip_mask(raw_ls)], axis=-1)
        if cfg.kind == "savae":
            lam = savae_refine(model.decoder, batch, lam0, cfg.steps, cfg.savae_alpha,
                               cfg.savae_clip, rng)
            eps = rng.standard_normal(mu.shape)
            elbo, _, _, dec_grads = _diag_elbo_grads(model.decoder, batch, lam, eps)

    enc_grads, _ = backward(model.encoder, enc_cache, enc_grad_out)
    _check_finite(elbo, [dec_grads, enc_grads])
    # loss = -mean ELBO
    decoder, dec_opt = adam_step(model.dec_opt, model.decoder, _scaled(dec_grads, -1.0 / b), cfg.lr)
    encoder, enc_opt = adam_step(model.enc_opt, model.encoder, _scaled(enc_grads, -1.0 / b), cfg.lr)
    return Model(cfg, decoder, encoder, dec_opt, enc_opt), float(np.mean(elbo))


@dataclass
class EvalResult:
    elbo: np.ndarray
    iwae: np.ndarray

    @property
    def elbo_mean(self) -> float:
        return float(np.mean(self.elbo))

    @property
    def iwae_mean(self) -> float:
        return float(np.mean(self.iwae))


def evaluate(model: Model, x: np.ndarray, seed: int, k: int | None = None) -> EvalResult:
    """Per-item one-sample ELBO and IWAE-k on ``x``.

    The ELBO and the IWAE draws come from two generators seeded identically,
    so IWAE with k = 1 reuses the ELBO's draws exactly.
    """
    k = k or model.config.iwae_k
    chunk = model.config.eval_chunk
    rng_post, rng_elbo, rng_iwae = (linalg.make_rng(seed) for _ in range(3))
    elbos, iwaes = [], []
    for start in range(0, len(x), chunk):
        xc = np.asarray(x[start:start + chunk], dtype=np.float64)
        q = posterior(model, xc, rng_post)
        eps = rng_elbo.standard_normal(q.mu.shape)
        elbos.append(elbo_single_sample(model.decoder, q, xc, eps).value)
        iwaes.append(iwae_loglik(model.decoder, q, xc, k, rng_iwae))
    return EvalResult(np.concatenate(elbos), np.concatenate(iwaes))


# ---------------------------------------------------------------------------
# training loop


EVAL_SEED_OFFSET = 0x5EED
BINARIZE_SEED_OFFSET = 0xB1A


@dataclass
class TrainState:
    """Everything needed to resume a run bitwise."""

    model: Model
    rng: np.random.Generator
    epoch: int = 0
    history: list[Metrics] = field(default_factory=list)
    best: Model | None = None
    best_val_elbo: float = -np.inf
    best_epoch: int = 0
    bad_epochs: int = 0

    @property
    def done(self) -> bool:
        cfg = self.model.config
        stopped = cfg.patience > 0 and self.bad_epochs >= cfg.patience
        return self.epoch >= cfg.epochs or stopped


def eval_seed(config: TrainConfig) -> int:
    return config.seed + EVAL_SEED_OFFSET


def prepare_eval_items(config: TrainConfig, items: np.ndarray, split: str) -> np.ndarray:
    """Bernoulli runs evaluate on one fixed binarization per split."""
    if config.head != "bernoulli":
        return items
    offset = {"train": 0, "val": 1, "test": 2}[split]
    return dynamic_binarize(items, linalg.make_rng(config.seed + BINARIZE_SEED_OFFSET + offset))


def new_train_state(config: TrainConfig, data_dim: int) -> TrainState:
    rng = linalg.make_rng(config.seed)
    return TrainState(init_model(config, data_dim, rng), rng)


def _check_data(config: TrainConfig, dataset: Dataset) -> None:
    if config.head == "bernoulli":
        if dataset.feature_scale != 1.0 or np.any(dataset.items < 0) or np.any(dataset.items > 1):
            raise ValueError("Bernoulli runs need raw intensities in [0, 1]")
    elif set(np.unique(dataset.items)) <= {0.0, 1.0}:
        raise ValueError("Gaussian runs never use binarized data")


def run_epoch(state: TrainState, dataset: Dataset) -> Metrics:
    """Train one epoch, evaluate on the validation split and update best tracking."""
    cfg = state.model.config
    start = time.perf_counter()
    train = dataset.split("train")
    if cfg.head == "bernoulli":
        train = dynamic_binarize(train, state.rng)
    order = state.rng.permutation(len(train))
    model, total = state.model, 0.0
    for i in range(0, len(order), cfg.batch_size):
        batch = train[order[i:i + cfg.batch_size]]
        model, elbo = train_step(model, batch, state.rng)
        total += elbo * len(batch)
    state.model = model
    state.epoch += 1

    val = prepare_eval_items(cfg, dataset.split("val"), "val")
    if len(val):
        res = evaluate(model, val, eval_seed(cfg))
        val_elbo, val_iwae = res.elbo_mean, res.iwae_mean
    else:
        val_elbo = val_iwae = float("nan")
    sigma2 = model.decoder.sigma2 if cfg.head == "gaussian" else float("nan")
    metrics = Metrics(state.epoch, total / len(train), val_elbo, val_iwae, sigma2,
                      time.perf_counter() - start)
    state.history.append(metrics)
    if state.best is None or val_elbo > state.best_val_elbo:
        state.best, state.best_val_elbo, state.best_epoch = model, val_elbo, state.epoch
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
    return metrics


def train(config: TrainConfig, dataset: Dataset, state: TrainState | None = None,
          on_epoch: Callable[[TrainState, Metrics], None] | None = None) -> TrainState:
    """Run (or resume) training until ``config.epochs`` or early stopping."""
    _check_data(config, dataset)
    state = state or new_train_state(config, dataset.n_features)
    while not state.done:
        metrics = run_epoch(state, dataset)
        log.info("epoch %d: %s", metrics.epoch, asdict(metrics))
        if on_epoch is not None:
            on_epoch(state, metrics)
    return state
