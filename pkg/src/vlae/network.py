"""ReLU multilayer perceptrons with exact local linearization.

A network ``y = W_L h_L + b_L`` with ``h_{l+1} = relu(W_l h_l + b_l)`` is
affine on every region of input space that shares an activation pattern.
:func:`linearize` returns that affine map; :func:`backward` does manual
reverse-mode accumulation for parameter and input gradients.

All functions accept a single input vector of shape (d,) or a batch of
shape (..., d).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

LOG_SIGMA2_MIN = -10.0
LOG_SIGMA2_MAX = 5.0
HE_GAIN = 2.0 ** (1.0 / 3.0)

HEADS = ("gaussian", "bernoulli", "mean", "mean_logstd")
LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class MlpParams:
    """Weights, biases and output head of a ReLU MLP.

    ``head`` is one of

    - ``"gaussian"``: decoder, p(x|z) = N(y, sigma2 I), global learned log sigma2
    - ``"bernoulli"``: decoder, y are logits
    - ``"mean"``: encoder emitting a latent mean only
    - ``"mean_logstd"``: encoder whose output splits into (mean, log std)
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head: str = "gaussian"
    log_sigma2: float = 0.0

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if not self.weights or len(self.weights) != len(self.biases):
            raise ValueError("need at least one layer and one bias per weight")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {l}: weight {w.shape} / bias {b.shape}")
            if l and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l} input {w.shape[1]} does not chain")
        self.log_sigma2 = float(self.log_sigma2)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def hidden(self) -> list[int]:
        return [w.shape[0] for w in self.weights[:-1]]

    @property
    def sigma2(self) -> float:
        return float(np.exp(self.log_sigma2))

    def arrays(self) -> list[np.ndarray]:
        """Flat parameter list; the Gaussian head appends log sigma2 as a 0-d array."""
        out = [a for pair in zip(self.weights, self.biases) for a in pair]
        if self.head == "gaussian":
            out.append(np.asarray(self.log_sigma2))
        return out

    def with_arrays(self, arrays: list[np.ndarray]) -> "MlpParams":
        n = len(self.weights)
        weights = [np.array(a, dtype=np.float64) for a in arrays[0:2 * n:2]]
        biases = [np.array(a, dtype=np.float64) for a in arrays[1:2 * n:2]]
        log_sigma2 = float(arrays[2 * n]) if self.head == "gaussian" else self.log_sigma2
        return MlpParams(weights, biases, self.head, log_sigma2)

    def copy(self) -> "MlpParams":
        return self.with_arrays([np.array(a) for a in self.arrays()])


def clamp_log_sigma2(value: float) -> float:
    return float(np.clip(value, LOG_SIGMA2_MIN, LOG_SIGMA2_MAX))


def mlp_template(sizes: list[int], head: str) -> MlpParams:
    """Zero-initialized network with layer widths ``sizes`` (input first)."""
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    weights = [np.zeros((m, k)) for k, m in zip(sizes[:-1], sizes[1:])]
    biases = [np.zeros(m) for m in sizes[1:]]
    return MlpParams(weights, biases, head)


def he_init(params: MlpParams, rng: np.random.Generator,
            gain: float = HE_GAIN) -> MlpParams:
    """Weights ~ N(0, gain^2 * 2 / fan_in), biases zero, log sigma2 zero."""
    weights = [rng.standard_normal(w.shape) * gain * np.sqrt(2.0 / w.shape[1])
               for w in params.weights]
    biases = [np.zeros_like(b) for b in params.biases]
    return MlpParams(weights, biases, params.head, 0.0)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]   # input to each layer, h_0 = z
    masks: list[np.ndarray]    # boolean activation pattern per hidden layer
    output: np.ndarray


def _check_input(params: MlpParams, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1:] != (params.in_dim,):
        raise ValueError(f"input has trailing dim {z.shape[-1:]}, expected {params.in_dim}")
    return z


def forward_cache(params: MlpParams, z: np.ndarray) -> ForwardCache:
    h = _check_input(params, z)
    inputs, masks = [], []
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        inputs.append(h)
        pre = h @ w.T + b
        mask = pre > 0.0
        masks.append(mask)
        h = np.where(mask, pre, 0.0)
    inputs.append(h)
    out = h @ params.weights[-1].T + params.biases[-1]
    return ForwardCache(inputs, masks, out)


def forward(params: MlpParams, z: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Pre-head output and the activation masks (1 iff pre-activation > 0)."""
    cache = forward_cache(params, z)
    return cache.output, cache.masks


@dataclass
class Linearization:
    """Affine map ``g(z') = w z' + b`` valid on the activation region of ``anchor``."""

    w: np.ndarray
    b: np.ndarray
    masks: list[np.ndarray]
    anchor: np.ndarray
    output: np.ndarray = field(repr=False, default=None)

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return np.einsum("...nd,...d->...n", self.w, z) + self.b

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return np.einsum("...nd,...d->...n", self.w, v)

    def rmatvec(self, u: np.ndarray) -> np.ndarray:
        return np.einsum("...nd,...n->...d", self.w, u)


def linearize(params: MlpParams, z: np.ndarray) -> Linearization:
    """Jacobian ``W_z`` and offset ``b_z`` of the network at ``z``.

    ``W_z = W_L O_{L-1} W_{L-1} ... O_0 W_0`` is built by pushing the masks
    through the weight products; the offset follows the same recursion with
    the biases, so it depends on ``z`` only through the masks.
    """
    cache = forward_cache(params, z)
    batch = cache.output.shape[:-1]
    jac = np.broadcast_to(params.weights[0], batch + params.weights[0].shape)
    off = np.broadcast_to(params.biases[0], batch + params.biases[0].shape)
    for l, mask in enumerate(cache.masks):
        w_next, b_next = params.weights[l + 1], params.biases[l + 1]
        jac = w_next @ (mask[..., :, None] * jac)
        off = (mask * off) @ w_next.T + b_next
    return Linearization(np.array(jac), np.array(off), cache.masks,
                         np.array(cache.inputs[0]), cache.output)


def backward(params: MlpParams, cache: ForwardCache,
             grad_out: np.ndarray) -> tuple[MlpParams, np.ndarray]:
    """Reverse-mode pass for an upstream gradient on the pre-head output.

    Returns a gradient bundle shaped like ``params`` (summed over any batch
    axes, ``log_sigma2`` slot zero) and the per-sample input gradient.
    """
    n_layers = len(params.weights)
    g = np.asarray(grad_out, dtype=np.float64)
    gw: list[np.ndarray] = [None] * n_layers
    gb: list[np.ndarray] = [None] * n_layers
    for l in range(n_layers - 1, -1, -1):
        h = cache.inputs[l]
        g2 = g.reshape(-1, g.shape[-1])
        gw[l] = g2.T @ h.reshape(-1, h.shape[-1])
        gb[l] = g2.sum(axis=0)
        g = g @ params.weights[l]
        if l > 0:
            g = np.where(cache.masks[l - 1], g, 0.0)
    return MlpParams(gw, gb, params.head, 0.0), g


def sigmoid(a: np.ndarray) -> np.ndarray:
    return expit(a)


def decoder_loglik(params: MlpParams, x: np.ndarray, out: np.ndarray) -> np.ndarray:
    """ln p(x|z) given the pre-head output ``out = g(z)``; sums the last axis."""
    if params.head == "gaussian":
        r = x - out
        n = out.shape[-1]
        return -0.5 * (n * (LOG_2PI + params.log_sigma2) + (r * r).sum(-1) / params.sigma2)
    if params.head == "bernoulli":
        # x*a - softplus(a), stable for large |a|
        return (x * out - np.logaddexp(0.0, out)).sum(-1)
    raise ValueError(f"head {params.head!r} is not a decoder head")


def decoder_loglik_grad_out(params: MlpParams, x: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Gradient of ln p(x|z) with respect to the pre-head output."""
    if params.head == "gaussian":
        return (x - out) / params.sigma2
    if params.head == "bernoulli":
        return x - sigmoid(out)
    raise ValueError(f"head {params.head!r} is not a decoder head")


def _dlogp_dlog_sigma2(params: MlpParams, x: np.ndarray, out: np.ndarray) -> float:
    r = x - out
    n = out.shape[-1]
    per = -0.5 * n + 0.5 * (r * r).sum(-1) / params.sigma2
    return float(np.sum(per))


def decoder_logp_grad(params: MlpParams, x: np.ndarray, z: np.ndarray
                      ) -> tuple[np.ndarray, MlpParams, np.ndarray]:
    """ln p(x|z), its parameter gradient bundle (batch-summed) and its z-gradient."""
    cache = forward_cache(params, z)
    if params.head == "bernoulli" and (np.any(x < 0) or np.any(x > 1)):
        raise ValueError("Bernoulli head requires x in [0, 1]")
    logp = decoder_loglik(params, x, cache.output)
    g_out = decoder_loglik_grad_out(params, x, cache.output)
    grads, g_z = backward(params, cache, g_out)
    if params.head == "gaussian":
        grads.log_sigma2 = _dlogp_dlog_sigma2(params, x, cache.output)
    return logp, grads, g_z


def decoder_logp_grad_params(params: MlpParams, x: np.ndarray, z: np.ndarray) -> MlpParams:
    """Gradient of ln p_theta(x|z) with respect to every decoder parameter."""
    return decoder_logp_grad(params, x, z)[1]


def encoder_forward(params: MlpParams, x: np.ndarray):
    """Encoder output: ``mu0`` for a ``"mean"`` head, ``(mu, log_std)`` for ``"mean_logstd"``."""
    out, _ = forward(params, x)
    if params.head == "mean":
        return out
    if params.head == "mean_logstd":
        d = out.shape[-1] // 2
        return out[..., :d], out[..., d:]
    raise ValueError(f"head {params.head!r} is not an encoder head")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "AdamState":
        arrays = params.arrays()
        return cls([np.zeros_like(a, dtype=np.float64) for a in arrays],
                   [np.zeros_like(a, dtype=np.float64) for a in arrays])


def adam_step(state: AdamState, params: MlpParams, grads: MlpParams,
              lr: float) -> tuple[MlpParams, AdamState]:
    """One bias-corrected ADAM descent step on ``grads`` (gradients of a loss)."""
    p_arr, g_arr = params.arrays(), grads.arrays()
    if len(p_arr) != len(g_arr) or len(p_arr) != len(state.m):
        raise ValueError("gradient bundle does not match parameters")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_arr, g_arr, state.m, state.v):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"shape mismatch {np.shape(p)} vs {np.shape(g)}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    out = params.with_arrays(new_p)
    out.log_sigma2 = clamp_log_sigma2(out.log_sigma2)
    return out, replace(state, m=new_m, v=new_v, step=t)
