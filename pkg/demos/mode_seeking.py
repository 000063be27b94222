"""Damped mode iteration versus nonlinear CG on a small ReLU decoder.

A single instance need not improve at every T because each step re-linearizes
in a new region; the median over many instances does decrease (see the
acceptance tests).
"""
import numpy as np

from vlae import check, laplace
from vlae.laplace import ModeSchedule
from vlae.network import MlpParams, forward

rng = np.random.default_rng(2)
net = check.random_relu_net(rng, [2, 16, 32], "gaussian")
net = MlpParams(net.weights, net.biases, "gaussian", float(np.log(0.1)))
x = forward(net, rng.standard_normal(2))[0] + np.sqrt(0.1) * rng.standard_normal(32)
mu0 = rng.standard_normal(2)

for steps in (0, 1, 2, 4, 8):
    q, _ = laplace.infer_gaussian(net, x, mu0, ModeSchedule(steps))
    g = np.linalg.norm(laplace.grad_log_joint(net, x, q.mu))
    print(f"T={steps}: |grad ln p(x, mu_T)| = {g:10.4f}   top eig(Sigma) = "
          f"{np.linalg.eigvalsh(q.sigma).max():.4f}")

z = laplace.cg_mode_seek(net, x, mu0)
# a maximum can sit on a region boundary where ln p is not differentiable;
# a tiny activation margin flags that case
print("CG mode", z, "|grad| =", np.linalg.norm(laplace.grad_log_joint(net, x, z)),
      "activation margin =", check.region_margin(net, z))
