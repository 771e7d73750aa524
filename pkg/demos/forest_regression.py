"""Fit a 200-tree forest to the jump function and compare with simple baselines."""

import numpy as np

from arborart.bart import MCMCConfig, ModelSpec, fit
from arborart.experiments import ExperimentConfig, generate_data
from arborart.priors import PriorConfig
from arborart.splitnet import regular_grid

cfg = ExperimentConfig(n=1000, p=2, sigma0=0.05)
rng = np.random.default_rng(7)
train = generate_data(cfg, "sim", rng)
test = generate_data(cfg, "sim", rng, n=500)

mcmc = MCMCConfig(iterations=500, burnin=250, update_eta=False, store_ensembles=False)
net = regular_grid(2, 100)
for T in (200, 1):
    post = fit(train.X, train.y, ModelSpec(center=True), net, PriorConfig(T=T), mcmc, x_pred=test.X)
    mean, lo, hi = post.pred_summary(0.9)
    rmse = np.sqrt(np.mean((mean - test.f) ** 2))
    cover = np.mean((lo <= test.f) & (test.f <= hi))
    print(f"T={T:3d}: error vs truth {rmse:.4f}, 90% band covers truth at {cover:.0%} of points")
    if T == 200:
        print(post.report())

print(f"constant predictor: {np.sqrt(np.mean((train.y.mean() - test.f) ** 2)):.4f}")
