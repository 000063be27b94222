"""Autoencoders with full-covariance Laplace posteriors for ReLU decoders,
plus amortized VAE and semi-amortized baselines."""
from . import data, laplace, linalg, models, network, ppca
from .laplace import GaussianPosterior, ModeSchedule, infer, infer_bernoulli, infer_gaussian
from .models import TrainConfig, evaluate, train
from .network import MlpParams, forward, linearize
from .ppca import LinearModel, exact_posterior, marginal_loglik

__version__ = "0.1.0"
