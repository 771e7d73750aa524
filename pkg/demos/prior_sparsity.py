"""What the sparse Dirichlet prior on splitting proportions looks like in p = 50."""

import numpy as np

from arborart.priors import PriorConfig, check_dirichlet_lemma_grid, sample_eta

cfg = PriorConfig(zeta=1.0, xi=2.0)
rng = np.random.default_rng(0)
eta = sample_eta(50, cfg, rng, size=20_000)
top = np.sort(eta, axis=1)[:, ::-1].cumsum(axis=1)
for s in (1, 2, 3):
    print(f"mean mass on the {s} largest coordinates: {top[:, s - 1].mean():.3f}")

report = check_dirichlet_lemma_grid(50, (1, 2), (0.25, 0.5), cfg, 200_000, rng)
for (s, e), r in report.items():
    print(f"s={s} eps={e}: P1={r['P1']:.3g} (C1={r['C1']:.3f})  P2={r['P2']:.3g} (C2={r['C2']:.3f})")
