"""Train a VAE and a VLAE on the toy curve and compare test IWAE-100.

Takes about 20 seconds per model with the default 100 epochs; pass a smaller
epoch count as the first argument for a quick look.
"""
import sys

from vlae import data, models
from vlae.linalg import make_rng

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 100
ds = data.normalize(data.gen_toy_curve(2000, 0.05, make_rng(1234)))
test = ds.split("test")
for kind in ("vae", "vlae"):
    cfg = models.TrainConfig(kind=kind, steps=4, latent_dim=8, hidden=(64,), epochs=epochs)
    state = models.train(cfg, ds)
    res = models.evaluate(state.best, test, seed=999, k=100)
    print(f"{kind:5s} best epoch {state.best_epoch:3d}  test ELBO {res.elbo_mean:.4f}  "
          f"IWAE-100 {res.iwae_mean:.4f}")
