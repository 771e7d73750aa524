"""Sup-norm error of the anisotropic tree approximator as the depth grows.

f(x1, x2) = x1^(1/4) + x2^(1/2) is rougher along x1, so the k-d tree cuts x1
twice as often as x2 and the error decays like 2^(-L/6).
"""

import math

import numpy as np

from arborart.approx import build_approximator
from arborart.funcs import PowerPiece, smooth_spec
from arborart.splitnet import regular_grid

alpha = (0.25, 0.5)
spec = smooth_spec(PowerPiece((1.0, 1.0), alpha), alpha)
net = regular_grid(2, 512)

Ls = np.arange(6, 15)
errs = []
for L in Ls:
    a = build_approximator(spec, net, L0=int(L))
    errs.append(a.sup_error_leafwise(spec))
    print(f"L={L:2d}  leaves={a.n_leaves:6d}  sup error={errs[-1]:.4f}")

slope = np.polyfit(Ls, np.log(errs), 1)[0]
print(f"fitted slope of log error per level: {slope:.4f} (theory {-math.log(2) / 6:.4f})")
