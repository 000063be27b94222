"""One undamped linearized step recovers the exact pPCA posterior.

For a linear decoder the Laplace posterior is exact, so the ELBO with that
posterior equals the marginal likelihood for every draw.
"""
import numpy as np

from vlae import laplace, models, ppca
from vlae.laplace import ModeSchedule

rng = np.random.default_rng(0)
m = ppca.LinearModel(rng.standard_normal((6, 3)), rng.standard_normal(6), 0.4)
x = rng.standard_normal(6)

q, _ = laplace.infer_gaussian(m.as_decoder(), x, np.zeros(3), ModeSchedule(1, "unit"))
exact = ppca.exact_posterior(m, x)
print("max |mu - mu_exact|      ", np.abs(q.mu - exact.mu).max())
print("max |Sigma - Sigma_exact|", np.abs(q.sigma - exact.sigma).max())

log_px = ppca.marginal_loglik(m, x)
for i in range(3):
    elbo = models.elbo_single_sample(m.as_decoder(), q, x, rng.standard_normal(3)).value
    print(f"draw {i}: ELBO {float(elbo):.12f}   ln p(x) {log_px:.12f}")
