"""Geweke joint-distribution test: a correct sampler and one with a planted bug.

The broken update forgets to halve the residual sum of squares in the
inverse-gamma scale, which the log-sigma2 statistic flags immediately.
"""

import numpy as np

from arborart.bart import geweke_joint_test
from arborart.priors import PriorConfig
from arborart.splitnet import regular_grid

X = np.random.default_rng(0).random((20, 2))
net, prior = regular_grid(2, 4), PriorConfig(T=2, nu=0.45)


def broken(rng, shape, scale, n, ssr):
    return (scale + ssr) / rng.gamma(shape + n / 2)


for name, update in (("correct", None), ("broken", broken)):
    kw = {} if update is None else {"sigma2_update": update}
    z = geweke_joint_test(X, net, prior, trials=2000, seed=3, **kw)
    worst = max(z, key=lambda k: abs(z[k]))
    print(f"{name:8s} max |z| = {abs(z[worst]):6.2f} ({worst})")
