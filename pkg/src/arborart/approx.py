"""Tree approximators of piecewise anisotropic functions, error metrics and rates.

The approximator snaps the true piece boundaries onto a split-net, grows an
anisotropic k-d tree of depth ``L0`` inside every snapped piece and assigns
each leaf the value of ``f0`` at an anchor point. Rate helpers use natural
logarithms and accept an explicit multiplicative constant (default 1).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import gammaln

from .akd import AkdResult, akd
from .geometry import SplitRecord, TreePartition, depth_of, intersect
from .funcs import PiecewiseAnisoSpec
from .splitnet import SplitNet, check_dense, nearest_point_in


# rates ----------------------------------------------------------------------


def choose_L0(n: float, d: int, lam: float, R: int, abar: float, C: float = 1.0) -> int:
    """Depth with ``2^L0 ~ C (lam^2 d^2 n / (R ln n))^(d/(2 abar + d))``, floored at 0."""
    if n < 3:
        raise ValueError("n must be at least 3")
    arg = C * (lam**2 * d**2 * n / (R * math.log(n))) ** (d / (2 * abar + d))
    return max(0, int(round(math.log2(arg)))) if arg > 0 else 0


def eps_bar(n: float, d: int, lam: float, R: int, abar: float, C: float = 1.0) -> float:
    """Approximation rate ``(lam d)^(d/(2abar+d)) (R ln n / n)^(abar/(2abar+d))``."""
    return C * (lam * d) ** (d / (2 * abar + d)) * (R * math.log(n) / n) ** (abar / (2 * abar + d))


def rate_eps(n: float, p: int, d: int, lam: float, R: int, abar: float, C: float = 1.0) -> float:
    """Contraction rate ``sqrt(d ln p / n) + eps_bar``."""
    if p < 2 or n < 3:
        raise ValueError("need p >= 2 and n >= 3")
    return C * (math.sqrt(d * math.log(p) / n) + eps_bar(n, d, lam, R, abar))


def rate_gamma(n: float, p: int, d: int, lam: float, abar: float, C: float = 1.0) -> float:
    """Minimax rate ``sqrt(ln binom(p, d) / n) + (lam^(d/abar) / n)^(abar/(2abar+d))``."""
    if d > p:
        raise ValueError("d must not exceed p")
    log_binom = gammaln(p + 1) - gammaln(d + 1) - gammaln(p - d + 1)
    first = math.sqrt(max(log_binom, 0.0) / n)
    return C * (first + (lam ** (d / abar) / n) ** (abar / (2 * abar + d)))


def rate_slope(xs, errs) -> float:
    """Least-squares slope of ``ln err`` against ``ln x``."""
    xs = np.asarray(xs, dtype=float)
    errs = np.asarray(errs, dtype=float)
    if xs.size < 3 or xs.size != errs.size:
        raise ValueError("need at least 3 matched pairs")
    if np.any(xs <= 0) or np.any(errs <= 0):
        raise ValueError("sizes and errors must be positive")
    return float(np.polyfit(np.log(xs), np.log(errs), 1)[0])


# approximator ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Approximator:
    """Step function on the tree ``tree`` with one height per leaf.

    Attributes
    ----------
    snapped : TreePartition
        Piece boundaries snapped to the net.
    akd_results : tuple of AkdResult
        One k-d tree per snapped piece.
    tree : TreePartition
        Snapped pieces refined by their k-d trees.
    heights : ndarray
        Leaf values in ``tree.leaf_nodes`` order.
    anchors : ndarray
        Points where ``f0`` was evaluated, same order.
    fallback : ndarray of bool
        True where no net point lay in leaf and piece, so the leaf center was used.
    piece_of_leaf : ndarray of int
        Snapped piece holding each leaf.
    c_n : float
        Divergence between the true and snapped piece boundaries.
    """

    snapped: TreePartition
    akd_results: tuple[AkdResult, ...]
    tree: TreePartition
    heights: np.ndarray
    anchors: np.ndarray
    fallback: np.ndarray
    piece_of_leaf: np.ndarray
    c_n: float
    L0: int

    @property
    def n_leaves(self) -> int:
        return self.tree.n_leaves

    @property
    def complete(self) -> bool:
        return all(r.complete for r in self.akd_results)

    def __call__(self, x) -> np.ndarray:
        return self.heights[self.tree.locate(x)]

    def leaf_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([b.lo for b in self.tree.leaves])
        hi = np.array([b.hi for b in self.tree.leaves])
        return lo, hi

    def sup_error_leafwise(self, f0: Callable, per_axis: int = 3) -> float:
        """Largest ``|f0 - height|`` over a ``per_axis^p`` grid of each closed leaf.

        The grid includes the leaf corners, so the value is exact when ``f0`` is
        monotone in each coordinate within every leaf.
        """
        lo, hi = self.leaf_bounds()
        p = lo.shape[1]
        t = np.linspace(0.0, 1.0, per_axis)
        worst = 0.0
        for offs in np.array(np.meshgrid(*([t] * p), indexing="ij")).reshape(p, -1).T:
            pts = lo + offs * (hi - lo)
            worst = max(worst, float(np.max(np.abs(f0(pts) - self.heights))))
        return worst


def build_approximator(
    spec: PiecewiseAnisoSpec,
    net: SplitNet,
    n: float | None = None,
    C_L0: float = 1.0,
    L0: int | None = None,
) -> Approximator:
    """Snap, refine and evaluate: the constructive tree approximator of ``spec``.

    Either ``n`` (to pick ``L0`` by :func:`choose_L0`) or ``L0`` must be given.
    If the net runs out of candidates a k-d tree stops early; check
    :attr:`Approximator.complete`.
    """
    if L0 is None:
        if n is None:
            raise ValueError("give n or L0")
        L0 = choose_L0(n, spec.d, spec.lam, spec.R, spec.abar, C_L0)
    target = spec.extended_partition()
    ok, snapped, achieved = check_dense(net, target, spec.cut_coordinates(), math.inf)
    if snapped is None:
        raise ValueError("piece boundaries cannot be snapped to this net")
    results = []
    splits = list(snapped.splits)
    anchors, fallback, pieces, leaf_ids = [], [], [], []
    for r, (node, piece_box) in enumerate(zip(snapped.leaf_nodes, snapped.leaves)):
        res = akd(piece_box, net, spec.alphas[r], L0, spec.S0)
        results.append(res)
        for s in res.partition.splits:
            dep = depth_of(s.node)
            splits.append(SplitRecord((node << dep) + s.node - (1 << dep), s.coord, s.tau))
        true_piece = target.box(node)
        for k, leaf in zip(res.partition.leaf_nodes, res.partition.leaves):
            dep = depth_of(k)
            leaf_ids.append((node << dep) + k - (1 << dep))
            region = intersect(leaf, true_piece)
            pt = None if region is None else nearest_point_in(net, region, leaf.center)
            fallback.append(pt is None)
            anchors.append(leaf.center if pt is None else pt)
            pieces.append(r)
    tree = TreePartition(snapped.root, tuple(splits))
    order = np.argsort(leaf_ids)
    anchors = np.array(anchors)[order]
    fallback = np.array(fallback)[order]
    pieces = np.array(pieces)[order]
    if np.any(np.array(leaf_ids)[order] != np.array(tree.leaf_nodes)):
        raise RuntimeError("leaf bookkeeping mismatch")
    if fallback.any():
        warnings.warn(f"{int(fallback.sum())} leaves hold no net point of their piece; using centers")
    heights = np.asarray(spec(anchors), dtype=float)
    return Approximator(snapped, tuple(results), tree, heights, anchors, fallback, pieces, float(achieved), int(L0))


# error metrics -------------------------------------------------------------


def _midpoint_grid(p: int, resolution: int) -> np.ndarray:
    axis = (np.arange(resolution) + 0.5) / resolution
    mesh = np.meshgrid(*([axis] * p), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def measure_error(
    f0: Callable,
    fhat: Callable,
    metric: str = "sup",
    v: float = 2.0,
    resolution: int = 256,
    points=None,
    p: int | None = None,
    mc_samples: int = 200_000,
    rng=None,
    return_se: bool = False,
):
    """Distance between ``f0`` and ``fhat`` on ``[0,1]^p``.

    Parameters
    ----------
    metric : {"sup", "Lv", "empirical"}
        ``sup``: maximum over a grid with ``resolution`` points per axis
        including the faces. ``Lv``: midpoint quadrature of ``|f0 - fhat|^v``
        (Monte Carlo with ``mc_samples`` draws when ``p > 2``). ``empirical``:
        average over ``points``.
    return_se : bool
        Also return a standard error (nonzero only for Monte Carlo).
    """
    if metric == "empirical":
        if points is None:
            raise ValueError("empirical metric needs points")
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        val = float(np.mean(np.abs(f0(pts) - fhat(pts)) ** v) ** (1 / v))
        return (val, 0.0) if return_se else val
    if p is None:
        p = np.atleast_2d(points).shape[1] if points is not None else 1
    if metric == "sup":
        axis = np.linspace(0.0, 1.0, resolution)
        mesh = np.meshgrid(*([axis] * p), indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        val = float(np.max(np.abs(f0(pts) - fhat(pts))))
        return (val, 0.0) if return_se else val
    if metric in ("Lv", "L2"):
        if metric == "L2":
            v = 2.0
        if p <= 2:
            pts = _midpoint_grid(p, resolution)
            val = float(np.mean(np.abs(f0(pts) - fhat(pts)) ** v) ** (1 / v))
            return (val, 0.0) if return_se else val
        rng = np.random.default_rng(rng)
        pts = rng.random((mc_samples, p))
        g = np.abs(f0(pts) - fhat(pts)) ** v
        m = g.mean()
        val = float(m ** (1 / v))
        # delta method for the v-th root
        se = float(g.std(ddof=1) / math.sqrt(mc_samples) * (m ** (1 / v - 1)) / v) if m > 0 else 0.0
        return (val, se) if return_se else val
    raise ValueError(f"unknown metric {metric!r}")


# conditions -----------------------------------------------------------------


def check_approximation_conditions(
    spec: PiecewiseAnisoSpec,
    c_n: float,
    v: float,
    norm_f0_sup: float,
    eps: float | None = None,
    n: float | None = None,
) -> dict:
    """Evaluate the boundary-snapping conditions of the approximation guarantee.

    Each entry reports ``lhs``, ``rhs``, ``ratio = lhs/rhs`` and ``satisfied``
    (``ratio <= 1``). Conditions:

    ``sup``      ``c_n^min(alpha) <= eps / (lam |S|)``
    ``Lv``       ``c_n <= (eps/||f0||_inf)^v * minlen / |S|``
    ``Lv_cont``  ``c_n^(1 + v min(alpha)) <= (eps/lam)^v * minlen / |S|^(v+1)``

    where ``|S|`` counts the coordinates along which pieces are separated and
    ``minlen`` is the shortest piece edge. With a single piece (``|S| = 0``)
    every condition is automatically satisfied.
    """
    if eps is None:
        if n is None:
            raise ValueError("give eps or n")
        eps = eps_bar(n, spec.d, spec.lam, spec.R, spec.abar)
    n_cut = len(spec.cut_coordinates())
    report = {"eps_bar": eps, "n_cut_coordinates": n_cut}
    if n_cut == 0:
        for key in ("sup", "Lv", "Lv_cont"):
            report[key] = {"applicable": False, "satisfied": True, "note": "automatically satisfied"}
        return report
    min_len = min(b.lengths.min() for b in spec.extended_partition().leaves)
    amin = float(spec.alphas.min())
    lam = spec.lam
    rows = {
        "sup": (c_n**amin, eps / (lam * n_cut)),
        "Lv": (c_n, (eps / norm_f0_sup) ** v * min_len / n_cut),
        "Lv_cont": (c_n ** (1 + v * amin), (eps / lam) ** v * min_len / n_cut ** (v + 1)),
    }
    for key, (lhs, rhs) in rows.items():
        ratio = lhs / rhs if rhs > 0 else math.inf
        report[key] = {"applicable": True, "lhs": lhs, "rhs": rhs, "ratio": ratio, "satisfied": ratio <= 1}
    return report
