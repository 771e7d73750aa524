"""Posterior sampling for sum-of-trees models.

Each tree is updated in turn (backfitting) by a Metropolis-Hastings move on
its topology (grow, prune or change), followed by a draw of its step heights.
In Gaussian regression without truncation the heights are integrated out of
the topology move and then drawn from their conjugate normal conditional;
every other setup keeps the heights in the move and updates them by
random-walk Metropolis. Noise variance and splitting proportions get Gibbs
(or independence Metropolis) updates once per sweep.

Trees inside the sampler use heap node ids and store, for every node, the
half-open range ``[lo_idx, hi_idx)`` of axis-candidate indices strictly inside
its box, so the number of admissible split points is ``hi_idx - lo_idx``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit, log_expit, ndtr, ndtri

from .geometry import Box, SplitRecord, TreePartition, depth_of
from .priors import PriorConfig, sample_eta, sample_heights, sample_log_dirichlet, sample_sigma2, sample_tree
from .splitnet import SplitNet

KINDS = ("reg-fixed", "reg-random", "density", "classify")
MAX_QUADRATURE_CELLS = 2_000_000


@dataclass(frozen=True)
class ModelSpec:
    """Statistical setup.

    Parameters
    ----------
    kind : str
        ``"reg-fixed"``, ``"reg-random"``, ``"density"`` or ``"classify"``.
    height_bound : float or None
        Heights are restricted to ``[-height_bound, height_bound]``.
    sigma2_bound : float or None
        Noise variance is restricted to ``[1/sigma2_bound, sigma2_bound]``.
    center : bool
        Regression only: subtract the response mean before fitting and add it
        back to every fitted value.
    """

    kind: str = "reg-fixed"
    height_bound: float | None = None
    sigma2_bound: float | None = None
    center: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        for name in ("height_bound", "sigma2_bound"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")
        if self.sigma2_bound is not None and self.sigma2_bound < 1:
            raise ValueError("sigma2_bound must be at least 1 so the interval is nonempty")

    @property
    def regression(self) -> bool:
        return self.kind in ("reg-fixed", "reg-random")

    @property
    def conjugate(self) -> bool:
        return self.regression and self.height_bound is None


@dataclass(frozen=True)
class MCMCConfig:
    """Chain settings.

    ``burnin`` sweeps are discarded, then ``iterations`` sweeps are run and
    every ``thin``-th one is stored.
    """

    iterations: int = 1000
    burnin: int = 500
    thin: int = 1
    seed: int | None = 0
    move_probs: tuple[float, float, float] = (0.4, 0.4, 0.2)
    update_topology: bool = True
    update_heights: bool = True
    update_sigma2: bool = True
    update_eta: bool = True
    likelihood: bool = True
    sigma2_init: float | None = None
    step_init: float = 0.3
    adapt_every: int = 50
    check_every: int = 100
    store_ensembles: bool = True

    def __post_init__(self):
        if self.iterations < 0 or self.burnin < 0 or self.thin < 1:
            raise ValueError("need iterations >= 0, burnin >= 0, thin >= 1")
        if len(self.move_probs) != 3 or min(self.move_probs) < 0 or sum(self.move_probs) <= 0:
            raise ValueError("move_probs needs three nonnegative weights")


# ensembles -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Sum of step functions, one per tree.

    ``heights[t][k]`` is the height on ``trees[t].leaf_nodes[k]``.
    """

    trees: tuple[TreePartition, ...]
    heights: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.trees) != len(self.heights):
            raise ValueError("one height vector per tree")
        for t, h in zip(self.trees, self.heights):
            if len(h) != t.n_leaves:
                raise ValueError("height vector length must equal the leaf count")

    @property
    def T(self) -> int:
        return len(self.trees)

    @property
    def n_leaves(self) -> np.ndarray:
        return np.array([t.n_leaves for t in self.trees])

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros(x.shape[0])
        for t, h in zip(self.trees, self.heights):
            out += np.asarray(h)[t.locate(x)]
        return out


def quadrature_cells(net_or_resolution, p: int | None = None):
    """Midpoints and volumes of a quadrature grid on ``[0, 1]^p``.

    With a :class:`SplitNet` the cells are bounded by consecutive axis values,
    so every cell lies inside one leaf of any tree on that net and midpoint
    quadrature of a tree ensemble is exact. With an integer ``r`` the cells
    form the regular ``r^p`` grid.
    """
    if isinstance(net_or_resolution, SplitNet):
        edges = [np.unique(np.concatenate([[0.0], a, [1.0]])) for a in net_or_resolution.axes]
    else:
        if p is None:
            raise ValueError("p is required with an integer resolution")
        r = int(net_or_resolution)
        edges = [np.linspace(0.0, 1.0, r + 1)] * p
    if np.prod([e.size - 1 for e in edges], dtype=float) > MAX_QUADRATURE_CELLS:
        raise MemoryError("quadrature grid too large")
    mids = [(e[1:] + e[:-1]) / 2 for e in edges]
    widths = [np.diff(e) for e in edges]
    pts = np.stack([m.ravel() for m in np.meshgrid(*mids, indexing="ij")], axis=1)
    vol = np.prod(np.stack([w.ravel() for w in np.meshgrid(*widths, indexing="ij")], axis=1), axis=1)
    return pts, vol


def density_normalizer(ensemble: Ensemble, net_resolution=None) -> float:
    """``int exp(f)`` over the unit cube.

    A single tree uses the closed form ``sum_k vol_k exp(height_k)``. Otherwise
    ``net_resolution`` is a :class:`SplitNet` (exact cells between net
    values) or an integer grid resolution for midpoint quadrature.
    """
    if ensemble.T == 1 and net_resolution is None:
        t, h = ensemble.trees[0], np.asarray(ensemble.heights[0])
        return float(np.sum([b.volume for b in t.leaves] * np.exp(h)))
    if net_resolution is None:
        raise ValueError("net_resolution is required for ensembles of more than one tree")
    pts, vol = quadrature_cells(net_resolution, ensemble.trees[0].dim)
    return float(vol @ np.exp(ensemble(pts)))


def log_density(ensemble: Ensemble, x, net_resolution=None) -> np.ndarray:
    """Normalized log density ``f(x) - ln int exp(f)`` of one ensemble draw."""
    return ensemble(x) - math.log(density_normalizer(ensemble, net_resolution))


# sampler trees ---------------------------------------------------------------


class _Tree:
    """Mutable tree with candidate-index boxes and per-point leaf labels."""

    __slots__ = ("split", "leaves", "ilo", "ihi", "height", "leaf_of")

    def __init__(self, root_lo: np.ndarray, root_hi: np.ndarray, n_points: list[int]):
        self.split: dict[int, tuple[int, int]] = {}
        self.leaves: list[int] = [1]
        self.ilo = {1: root_lo}
        self.ihi = {1: root_hi}
        self.height = {1: 0.0}
        self.leaf_of = [np.ones(n, dtype=np.int64) for n in n_points]

    def n_cand(self, node: int) -> np.ndarray:
        return self.ihi[node] - self.ilo[node]

    def prunable(self) -> list[int]:
        return [k for k in self.split if 2 * k not in self.split and 2 * k + 1 not in self.split]

    def child_ranges(self, node: int, j: int, c: int):
        lo, hi = self.ilo[node], self.ihi[node]
        lhi = hi.copy()
        lhi[j] = c
        rlo = lo.copy()
        rlo[j] = c + 1
        return (lo, lhi), (rlo, hi)


@dataclass
class Posterior:
    """Stored draws and chain diagnostics returned by :func:`fit`."""

    model: ModelSpec
    sigma2: np.ndarray
    eta: np.ndarray
    n_leaves: np.ndarray
    fit_mean: np.ndarray
    offset: float
    pred: np.ndarray | None = None
    ensembles: list[Ensemble] | None = None
    moves: dict = field(default_factory=dict)
    height_acceptance: float = float("nan")
    step: float = float("nan")
    truncation_rejections: int = 0
    truncation_proposals: int = 0

    @property
    def n_draws(self) -> int:
        return self.sigma2.shape[0]

    def acceptance_rates(self) -> dict[str, float]:
        return {k: (a / n if n else float("nan")) for k, (a, n) in self.moves.items()}

    def pred_summary(self, level: float = 0.9):
        """Posterior mean and central interval of the predictions made during the run."""
        if self.pred is None:
            raise ValueError("no prediction points were given to fit")
        return _summarize(self.pred, level)

    def report(self) -> str:
        lines = [f"model: {self.model.kind}", f"stored draws: {self.n_draws}"]
        for k, (a, n) in self.moves.items():
            rate = a / n if n else float("nan")
            lines.append(f"{k}: accepted {a} of {n} ({rate:.3f})")
        if not math.isnan(self.height_acceptance):
            lines.append(f"height random walk: acceptance {self.height_acceptance:.3f}, step {self.step:.4g}")
        if self.truncation_proposals:
            lines.append(
                f"truncation: {self.truncation_rejections} of {self.truncation_proposals} proposals rejected"
            )
        if self.model.regression:
            lines.append(f"sigma2 posterior mean: {self.sigma2.mean():.6g}")
        lines.append(f"mean leaves per tree: {self.n_leaves.mean():.3f}")
        return "\n".join(lines)


def _summarize(draws: np.ndarray, level: float):
    q = (1 - level) / 2
    lo, hi = np.quantile(draws, [q, 1 - q], axis=0)
    return draws.mean(axis=0), lo, hi


def predict(draws, x_points, level: float = 0.9):
    """Posterior mean and central ``level`` interval of the function at ``x_points``.

    ``draws`` is a :class:`Posterior` with stored ensembles or a sequence of
    :class:`Ensemble`. Classification returns probabilities and density
    estimation returns the unnormalized log density plus offset as stored.
    """
    offset = 0.0
    transform = None
    if isinstance(draws, Posterior):
        if not draws.ensembles:
            raise ValueError("posterior holds no ensembles; refit with store_ensembles=True")
        offset = draws.offset
        if draws.model.kind == "classify":
            transform = expit
        draws = draws.ensembles
    if len(draws) == 0:
        raise ValueError("need at least one draw")
    vals = np.stack([e(x_points) for e in draws]) + offset
    if transform is not None:
        vals = transform(vals)
    return _summarize(vals, level)


# the chain -------------------------------------------------------------------


def default_sigma2_update(rng, shape: float, scale: float, n: int, ssr: float) -> float:
    """Inverse-gamma conditional ``IG(shape + n/2, scale + ssr/2)``."""
    return (scale + ssr / 2) / rng.gamma(shape + n / 2)


def _log_gauss_ml(n, s, sigma2, tau2):
    """Log marginal likelihood of a leaf, up to terms that do not depend on the partition."""
    return -0.5 * np.log1p(n * tau2 / sigma2) + tau2 * s * s / (2 * sigma2 * (sigma2 + n * tau2))


class Chain:
    """One Markov chain for the sum-of-trees posterior.

    Parameters
    ----------
    X : ndarray, shape (n, p)
        Covariates (regression, classification) or observations (density).
    y : ndarray or None
        Responses; ``None`` for density estimation.
    model, net, prior, mcmc
        Setup, split-net, prior hyperparameters and chain settings.
    x_pred : ndarray or None
        Points at which the function is tracked for every stored draw.
    eta : ndarray or None
        Initial (or, with ``update_eta=False``, fixed) splitting proportions.
        Uniform when ``None``.
    sigma2_update : callable
        ``(rng, shape, scale, n, ssr) -> sigma2``; replaceable to test the
        sampler against deliberately wrong updates.
    """

    def __init__(
        self,
        X,
        y,
        model: ModelSpec,
        net: SplitNet,
        prior: PriorConfig,
        mcmc: MCMCConfig,
        x_pred=None,
        eta=None,
        sigma2_update: Callable = default_sigma2_update,
        rng=None,
    ):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[0] == 0:
            raise ValueError("empty data")
        if np.any(X < 0) or np.any(X > 1) or not np.all(np.isfinite(X)):
            raise ValueError("covariates must lie in the unit cube")
        if X.shape[1] != net.p:
            raise ValueError("net and data dimensions differ")
        self.model, self.net, self.prior, self.mcmc = model, net, prior, mcmc
        self.rng = np.random.default_rng(mcmc.seed if rng is None else rng)
        self.n, self.p = X.shape
        self.tau2 = prior.tau2
        self.sigma2_update = sigma2_update
        self.offset = 0.0
        if model.kind == "density":
            if y is not None:
                raise ValueError("density estimation takes no responses")
            self.y = None
        else:
            if y is None:
                raise ValueError("responses required")
            y = np.asarray(y, dtype=float).reshape(-1)
            if y.shape[0] != self.n:
                raise ValueError("X and y lengths differ")
            if model.kind == "classify" and not np.all((y == 0) | (y == 1)):
                raise ValueError("classification labels must be 0 or 1")
            if model.regression and model.center:
                self.offset = float(y.mean())
                y = y - self.offset
            self.y = y
        # point sets: 0 = data, then prediction points, then quadrature cells
        self.sets = [X]
        self.pred_set = None
        if x_pred is not None:
            xp = np.atleast_2d(np.asarray(x_pred, dtype=float))
            if np.any(xp < 0) or np.any(xp > 1):
                raise ValueError("prediction points must lie in the unit cube")
            self.pred_set = len(self.sets)
            self.sets.append(xp)
        self.quad_set = None
        if model.kind == "density" and prior.T > 1:
            pts, vol = quadrature_cells(net)
            self.quad_set = len(self.sets)
            self.sets.append(pts)
            self.quad_w = vol
        self.axes = net.axes
        self.root_lo = np.array([np.searchsorted(a, 0.0, side="right") for a in net.axes], dtype=np.int64)
        self.root_hi = np.array([np.searchsorted(a, 1.0, side="left") for a in net.axes], dtype=np.int64)
        sizes = [s.shape[0] for s in self.sets]
        self.trees = [_Tree(self.root_lo, self.root_hi, sizes) for _ in range(prior.T)]
        self.fits = [np.zeros(k) for k in sizes]
        self.tree_fit = [[np.zeros(k) for k in sizes] for _ in self.trees]
        self.cols = [np.ascontiguousarray(pts.T) for pts in self.sets]
        self.all_idx = np.arange(self.n)
        self.eta = np.full(self.p, 1.0 / self.p) if eta is None else np.asarray(eta, dtype=float)
        if self.eta.shape != (self.p,) or np.any(self.eta < 0) or not math.isclose(self.eta.sum(), 1.0):
            raise ValueError("eta must be a probability vector of length p")
        if mcmc.sigma2_init is not None:
            self.sigma2 = float(mcmc.sigma2_init)
        elif model.regression and self.n > 1:
            self.sigma2 = float(np.var(self.y)) or 1.0
        else:
            self.sigma2 = 1.0
        if model.sigma2_bound is not None:
            c = model.sigma2_bound
            self.sigma2 = min(max(self.sigma2, 1 / c), c)
        self.step = mcmc.step_init
        self.moves = {"grow": [0, 0], "prune": [0, 0], "change": [0, 0]}
        self.h_acc = [0, 0]
        self._h_window = [0, 0]
        self.trunc = [0, 0]
        self.iteration = 0

    # state in and out ------------------------------------------------------

    def set_state(self, trees: list[TreePartition], heights: list[np.ndarray], sigma2=None, eta=None):
        """Replace the ensemble (trees must use net candidates)."""
        if len(trees) != self.prior.T:
            raise ValueError("need one tree per ensemble member")
        if sigma2 is not None:
            self.sigma2 = float(sigma2)
        if eta is not None:
            self.eta = np.asarray(eta, dtype=float)
        sizes = [s.shape[0] for s in self.sets]
        for t, (tp, h) in enumerate(zip(trees, heights)):
            tr = _Tree(self.root_lo, self.root_hi, sizes)
            for s in sorted(tp.splits, key=lambda s: s.node):
                c = int(np.searchsorted(self.axes[s.coord], s.tau))
                if not tr.ilo[s.node][s.coord] <= c < tr.ihi[s.node][s.coord] or self.axes[s.coord][c] != s.tau:
                    raise ValueError(f"split point {s.tau} at node {s.node} is not an interior net candidate")
                self._apply_grow(tr, s.node, s.coord, c)
            for k, v in zip(tp.leaf_nodes, h):
                tr.height[k] = float(v)
            self.trees[t] = tr
        self._refresh_fits()

    def _refresh_fits(self):
        self.tree_fit = [self._tree_values(tr) for tr in self.trees]
        for s in range(len(self.sets)):
            self.fits[s] = sum(tf[s] for tf in self.tree_fit)

    def _tree_values(self, tr: _Tree) -> list[np.ndarray]:
        """The tree's step function at every point set."""
        ids = sorted(tr.leaves)
        h = np.array([tr.height[k] for k in ids])
        if len(ids) == 1:
            return [np.full(lab.size, h[0]) for lab in tr.leaf_of]
        ids = np.array(ids, dtype=np.int64)
        return [h[np.searchsorted(ids, lab)] for lab in tr.leaf_of]

    def tree_partition(self, tr: _Tree) -> TreePartition:
        splits = [SplitRecord(k, j, float(self.axes[j][c])) for k, (j, c) in tr.split.items()]
        return TreePartition(Box.unit(self.p), tuple(splits))

    def ensemble(self) -> Ensemble:
        trees, heights = [], []
        for tr in self.trees:
            tp = self.tree_partition(tr)
            trees.append(tp)
            heights.append(np.array([tr.height[k] for k in tp.leaf_nodes]))
        return Ensemble(tuple(trees), tuple(heights))

    def route(self, tr: _Tree, x: np.ndarray) -> np.ndarray:
        """Leaf id of each row of ``x``, found by descending from the root."""
        node = np.ones(x.shape[0], dtype=np.int64)
        active = np.ones(x.shape[0], dtype=bool)
        while active.any():
            for k in np.unique(node[active]):
                sel = node == k
                if int(k) in tr.split:
                    j, c = tr.split[int(k)]
                    node[sel] = 2 * k + (x[sel, j] > self.axes[j][c])
                else:
                    active &= ~sel
        return node

    def check_cache(self, atol: float = 1e-10):
        """Compare cached fits and leaf labels with a fresh evaluation."""
        for s, pts in enumerate(self.sets):
            fresh = np.zeros(pts.shape[0])
            for tr in self.trees:
                ids = self.route(tr, pts)
                if not np.array_equal(ids, tr.leaf_of[s]):
                    raise AssertionError("cached leaf labels are stale")
                fresh += np.array([tr.height[int(k)] for k in ids]) if ids.size else 0.0
            if not np.allclose(fresh, self.fits[s], rtol=0, atol=atol):
                raise AssertionError("cached fits drift from a fresh evaluation")

    # prior pieces ----------------------------------------------------------

    def _log_term(self, depth: int, nc: np.ndarray) -> float:
        if depth >= self.prior.max_depth:
            return 0.0
        return math.log1p(-self.prior.nu ** (depth + 1) * float(self.eta[nc > 0].sum()))

    def _growable(self, tr: _Tree, node: int) -> bool:
        return depth_of(node) < self.prior.max_depth and float(self.eta[tr.n_cand(node) > 0].sum()) > 0

    def _move_probs(self, n_growable: int, n_prunable: int) -> tuple[float, float, float]:
        wg, wp, wc = self.mcmc.move_probs
        wg = wg if n_growable else 0.0
        wp = wp if n_prunable else 0.0
        wc = wc if n_prunable else 0.0
        tot = wg + wp + wc
        if tot == 0:
            return 0.0, 0.0, 0.0
        return wg / tot, wp / tot, wc / tot

    def _draw_split(self, tr: _Tree, node: int):
        nc = tr.n_cand(node)
        if self.p == 1:
            j = 0
        else:
            cum = np.cumsum(np.where(nc > 0, self.eta, 0.0))
            j = int(np.searchsorted(cum, self.rng.random() * cum[-1], side="right"))
            # guard against landing past the last positive weight through round-off
            while j >= self.p or nc[j] == 0 or self.eta[j] == 0:
                j = (j - 1) % self.p
        c = int(tr.ilo[node][j] + self.rng.integers(nc[j]))
        return j, c

    def _height_prior_draw(self) -> float:
        sd = math.sqrt(self.tau2)
        C = self.model.height_bound
        if C is None:
            return self.rng.normal(0.0, sd)
        lo, hi = ndtr(-C / sd), ndtr(C / sd)
        return float(np.clip(sd * ndtri(lo + (hi - lo) * self.rng.random()), -C, C))

    def _log_height_prior(self, h: float) -> float:
        if self.model.height_bound is not None and abs(h) > self.model.height_bound:
            return -math.inf
        return -h * h / (2 * self.tau2)

    # structural edits ------------------------------------------------------

    def _apply_grow(self, tr: _Tree, node: int, j: int, c: int):
        tr.split[node] = (j, c)
        (llo, lhi), (rlo, rhi) = tr.child_ranges(node, j, c)
        tr.ilo[2 * node], tr.ihi[2 * node] = llo, lhi
        tr.ilo[2 * node + 1], tr.ihi[2 * node + 1] = rlo, rhi
        tr.leaves.remove(node)
        tr.leaves += [2 * node, 2 * node + 1]
        h = tr.height.pop(node, 0.0)
        tr.height[2 * node] = tr.height[2 * node + 1] = h
        tau = self.axes[j][c]
        for s, cols in enumerate(self.cols):
            lab = tr.leaf_of[s]
            idx = np.flatnonzero(lab == node)
            lab[idx] = 2 * node + (cols[j][idx] > tau)

    def _apply_prune(self, tr: _Tree, node: int):
        del tr.split[node]
        for ch in (2 * node, 2 * node + 1):
            tr.leaves.remove(ch)
            del tr.ilo[ch], tr.ihi[ch], tr.height[ch]
        tr.leaves.append(node)
        tr.height[node] = 0.0
        for lab in tr.leaf_of:
            lab[(lab >> 1) == node] = node

    def _apply_change(self, tr: _Tree, node: int, j: int, c: int):
        hl, hr = tr.height[2 * node], tr.height[2 * node + 1]
        self._apply_prune(tr, node)
        self._apply_grow(tr, node, j, c)
        tr.height[2 * node], tr.height[2 * node + 1] = hl, hr

    # likelihood pieces -----------------------------------------------------

    def _members(self, tr: _Tree, node: int) -> np.ndarray:
        if node == 1 and not tr.split:
            return self.all_idx
        return np.flatnonzero(tr.leaf_of[0] == node)

    def _split_members(self, idx: np.ndarray, j: int, c: int):
        right = self.cols[0][j][idx] > self.axes[j][c]
        return idx[~right], idx[right]

    def _leaf_ll(self, idx: np.ndarray, h: float, resid: np.ndarray, offs: np.ndarray) -> float:
        """Log-likelihood of the observations in a leaf at height ``h`` (non-conjugate)."""
        if not self.mcmc.likelihood or idx.size == 0:
            return 0.0
        if self.model.kind == "classify":
            f = offs[idx] + h
            y = self.y[idx]
            return float(np.sum(y * log_expit(f) + (1 - y) * log_expit(-f)))
        r = resid[idx]
        return float((h * r.sum() - 0.5 * idx.size * h * h) / self.sigma2)

    def _conj_ml(self, idx: np.ndarray, resid: np.ndarray) -> float:
        if not self.mcmc.likelihood:
            return 0.0
        return float(_log_gauss_ml(idx.size, resid[idx].sum() if idx.size else 0.0, self.sigma2, self.tau2))

    # density helpers: tree log-likelihood sum_k n_k h_k - N log sum_k A_k exp(h_k)

    def _density_mass(self, tr: _Tree, node_or_nodes, offs_q):
        """``A_k``: integral of ``exp(other trees)`` over each node's box."""
        if self.quad_set is None:
            out = []
            for k in node_or_nodes:
                lo = np.array([0.0 if tr.ilo[k][j] == self.root_lo[j] else self.axes[j][tr.ilo[k][j] - 1] for j in range(self.p)])
                hi = np.array([1.0 if tr.ihi[k][j] == self.root_hi[j] else self.axes[j][tr.ihi[k][j]] for j in range(self.p)])
                out.append(float(np.prod(hi - lo)))
            return np.array(out)
        lab = tr.leaf_of[self.quad_set]
        w = self.quad_w * np.exp(offs_q)
        return np.array([float(w[_in_subtree(lab, k)].sum()) for k in node_or_nodes])

    # one tree update -------------------------------------------------------

    def _update_tree(self, t: int):
        tr = self.trees[t]
        offs = [self.fits[s] - self.tree_fit[t][s] for s in range(len(self.sets))]
        resid = self.y - offs[0] if self.model.regression else None
        dens = self.model.kind == "density"
        offs_q = offs[self.quad_set] if self.quad_set is not None else None
        if self.mcmc.update_topology:
            self._topology_move(tr, resid, offs[0], offs_q)
        if self.mcmc.update_heights:
            if self.model.conjugate:
                self._draw_conjugate_heights(tr, resid)
            elif dens:
                self._density_height_walk(tr, offs_q)
            else:
                self._height_walk(tr, resid, offs[0])
        self.tree_fit[t] = self._tree_values(tr)
        for s in range(len(self.sets)):
            self.fits[s] = offs[s] + self.tree_fit[t][s]

    def _topology_move(self, tr, resid, offs, offs_q):
        leaves = tr.leaves
        growable = [k for k in leaves if self._growable(tr, k)]
        prunable = tr.prunable()
        pg, pp, pc = self._move_probs(len(growable), len(prunable))
        u = self.rng.random()
        if u < pg:
            self._grow(tr, growable, prunable, pg, resid, offs, offs_q)
        elif u < pg + pp:
            self._prune(tr, growable, prunable, resid, offs, offs_q)
        elif pc > 0:
            self._change(tr, prunable, resid, offs, offs_q)

    def _structure_log_ratio_grow(self, tr, node, j, c, growable, prunable, pg):
        """Log prior ratio times reverse/forward proposal ratio of a grow at ``node``."""
        nu = self.prior.nu
        d = depth_of(node)
        nc = tr.n_cand(node)
        F = float(self.eta[nc > 0].sum())
        (llo, lhi), (rlo, rhi) = tr.child_ranges(node, j, c)
        ncl, ncr = lhi - llo, rhi - rlo
        out = (d + 1) * math.log(nu) + math.log(F)
        out += self._log_term(d + 1, ncl) + self._log_term(d + 1, ncr) - self._log_term(d, nc)
        # reverse move from the grown tree
        n_grow_new = len(growable) - 1
        for cnc in (ncl, ncr):
            n_grow_new += d + 1 < self.prior.max_depth and float(self.eta[cnc > 0].sum()) > 0
        parent = node >> 1
        n_prune_new = len(prunable) + 1 - (parent in prunable)
        _, pp_new, _ = self._move_probs(n_grow_new, n_prune_new)
        out += math.log(pp_new) - math.log(n_prune_new) - math.log(pg) + math.log(len(growable))
        return out

    def _grow(self, tr, growable, prunable, pg, resid, offs, offs_q):
        node = growable[self.rng.integers(len(growable))]
        j, c = self._draw_split(tr, node)
        log_a = self._structure_log_ratio_grow(tr, node, j, c, growable, prunable, pg)
        idx = self._members(tr, node)
        il, ir = self._split_members(idx, j, c)
        new_h = None
        if self.model.conjugate:
            log_a += self._conj_ml(il, resid) + self._conj_ml(ir, resid) - self._conj_ml(idx, resid)
        else:
            hl, hr = self._height_prior_draw(), self._height_prior_draw()
            h = tr.height[node]
            if self.model.kind == "density":
                log_a += self._density_delta(tr, [node], [h], [(il.size, hl), (ir.size, hr)], node, j, c, offs_q)
            else:
                log_a += self._leaf_ll(il, hl, resid, offs) + self._leaf_ll(ir, hr, resid, offs) - self._leaf_ll(idx, h, resid, offs)
            new_h = (hl, hr)
        self.moves["grow"][1] += 1
        if math.log(self.rng.random()) < log_a:
            self.moves["grow"][0] += 1
            self._apply_grow(tr, node, j, c)
            if new_h is not None:
                tr.height[2 * node], tr.height[2 * node + 1] = new_h

    def _structure_log_ratio_prune(self, tr, node, growable, prunable) -> float:
        """Log prior ratio times proposal ratio of pruning ``node`` (the inverse grow)."""
        if not self._growable(tr, node):
            return -math.inf
        j, c = tr.split[node]
        # the pruned tree's growable and prunable sets
        g_after = [k for k in growable if k >> 1 != node] + [node]
        p_after = [k for k in prunable if k != node]
        if node > 1 and (node ^ 1) not in tr.split:
            p_after.append(node >> 1)
        pg_after, _, _ = self._move_probs(len(g_after), len(p_after))
        return -self._structure_log_ratio_grow(tr, node, j, c, g_after, p_after, pg_after)

    def _prune(self, tr, growable, prunable, resid, offs, offs_q):
        node = prunable[self.rng.integers(len(prunable))]
        log_a = self._structure_log_ratio_prune(tr, node, growable, prunable)
        il, ir = self._members(tr, 2 * node), self._members(tr, 2 * node + 1)
        idx = np.concatenate([il, ir])
        new_h = None
        if self.model.conjugate:
            log_a -= self._conj_ml(il, resid) + self._conj_ml(ir, resid) - self._conj_ml(idx, resid)
        else:
            h = self._height_prior_draw()
            hl, hr = tr.height[2 * node], tr.height[2 * node + 1]
            if self.model.kind == "density":
                log_a += self._density_delta(
                    tr, [2 * node, 2 * node + 1], [hl, hr], [(idx.size, h)], node, None, None, offs_q
                )
            else:
                log_a += self._leaf_ll(idx, h, resid, offs) - self._leaf_ll(il, hl, resid, offs) - self._leaf_ll(ir, hr, resid, offs)
            new_h = h
        self.moves["prune"][1] += 1
        if math.log(self.rng.random()) < log_a:
            self.moves["prune"][0] += 1
            self._apply_prune(tr, node)
            if new_h is not None:
                tr.height[node] = new_h

    def _change(self, tr, prunable, resid, offs, offs_q):
        node = prunable[self.rng.integers(len(prunable))]
        j0, c0 = tr.split[node]
        j, c = self._draw_split(tr, node)
        self.moves["change"][1] += 1
        if (j, c) == (j0, c0):
            self.moves["change"][0] += 1
            return
        d = depth_of(node)
        (a_lo, a_hi), (b_lo, b_hi) = tr.child_ranges(node, j0, c0)
        (e_lo, e_hi), (f_lo, f_hi) = tr.child_ranges(node, j, c)
        log_a = (
            self._log_term(d + 1, e_hi - e_lo)
            + self._log_term(d + 1, f_hi - f_lo)
            - self._log_term(d + 1, a_hi - a_lo)
            - self._log_term(d + 1, b_hi - b_lo)
        )
        ol, orr = self._members(tr, 2 * node), self._members(tr, 2 * node + 1)
        idx = np.concatenate([ol, orr])
        il, ir = self._split_members(idx, j, c)
        if self.model.conjugate:
            log_a += self._conj_ml(il, resid) + self._conj_ml(ir, resid) - self._conj_ml(ol, resid) - self._conj_ml(orr, resid)
        else:
            hl, hr = tr.height[2 * node], tr.height[2 * node + 1]
            if self.model.kind == "density":
                log_a += self._density_delta(
                    tr, [2 * node, 2 * node + 1], [hl, hr], [(il.size, hl), (ir.size, hr)], node, j, c, offs_q
                )
            else:
                log_a += (
                    self._leaf_ll(il, hl, resid, offs)
                    + self._leaf_ll(ir, hr, resid, offs)
                    - self._leaf_ll(ol, hl, resid, offs)
                    - self._leaf_ll(orr, hr, resid, offs)
                )
        if math.log(self.rng.random()) < log_a:
            self.moves["change"][0] += 1
            self._apply_change(tr, node, j, c)

    # density moves ----------------------------------------------------------

    def _density_delta(self, tr, old_nodes, old_h, new_leaves, parent, j, c, offs_q) -> float:
        """Change in the density log-likelihood when ``old_nodes`` are replaced.

        ``new_leaves`` lists ``(count, height)`` for the replacement: one leaf
        at ``parent`` (prune) or the two children of ``parent`` split at
        ``(j, c)`` (grow or change).
        """
        if not self.mcmc.likelihood:
            return 0.0
        N = self.n
        Z = self._density_Z(tr, offs_q)
        A_old = self._density_mass(tr, old_nodes, offs_q)
        if len(new_leaves) == 1:
            A_new = np.array([A_old.sum()])
        else:
            A_new = self._child_masses(tr, parent, j, c, offs_q)
        n_old = [np.count_nonzero(tr.leaf_of[0] == k) for k in old_nodes]
        h_new = np.array([h for _, h in new_leaves])
        n_new = np.array([m for m, _ in new_leaves])
        Z_new = Z - float(A_old @ np.exp(old_h)) + float(A_new @ np.exp(h_new))
        return float(n_new @ h_new - np.dot(n_old, old_h) - N * (math.log(Z_new) - math.log(Z)))

    def _density_Z(self, tr, offs_q) -> float:
        ids = sorted(tr.leaves)
        A = self._density_mass(tr, ids, offs_q)
        return float(A @ np.exp([tr.height[k] for k in ids]))

    def _child_masses(self, tr, node, j, c, offs_q) -> np.ndarray:
        tau = self.axes[j][c]
        if self.quad_set is None:
            lo = np.array([0.0 if tr.ilo[node][i] == self.root_lo[i] else self.axes[i][tr.ilo[node][i] - 1] for i in range(self.p)])
            hi = np.array([1.0 if tr.ihi[node][i] == self.root_hi[i] else self.axes[i][tr.ihi[node][i]] for i in range(self.p)])
            vol = float(np.prod(hi - lo))
            frac = (tau - lo[j]) / (hi[j] - lo[j])
            return np.array([vol * frac, vol * (1 - frac)])
        lab = tr.leaf_of[self.quad_set]
        sel = _in_subtree(lab, node)
        w = self.quad_w * np.exp(offs_q)
        right = self.sets[self.quad_set][:, j] > tau
        return np.array([w[sel & ~right].sum(), w[sel & right].sum()])

    def _density_height_walk(self, tr, offs_q):
        ids = sorted(tr.leaves)
        A = self._density_mass(tr, ids, offs_q)
        h = np.array([tr.height[k] for k in ids])
        cnt = np.array([np.count_nonzero(tr.leaf_of[0] == k) for k in ids])
        Z = float(A @ np.exp(h))
        for i, k in enumerate(ids):
            prop = h[i] + self.step * self.rng.normal()
            lp = self._log_height_prior(prop)
            self._count_trunc(lp)
            if lp == -math.inf:
                self._record_h(False)
                continue
            Zp = Z + A[i] * (math.exp(prop) - math.exp(h[i]))
            log_a = lp - self._log_height_prior(h[i])
            if self.mcmc.likelihood:
                log_a += cnt[i] * (prop - h[i]) - self.n * (math.log(Zp) - math.log(Z))
            ok = math.log(self.rng.random()) < log_a
            self._record_h(ok)
            if ok:
                h[i], Z = prop, Zp
                tr.height[k] = prop

    def _height_walk(self, tr, resid, offs):
        for k in list(tr.leaves):
            idx = self._members(tr, k)
            h = tr.height[k]
            prop = h + self.step * self.rng.normal()
            lp = self._log_height_prior(prop)
            self._count_trunc(lp)
            if lp == -math.inf:
                self._record_h(False)
                continue
            log_a = lp - self._log_height_prior(h) + self._leaf_ll(idx, prop, resid, offs) - self._leaf_ll(idx, h, resid, offs)
            ok = math.log(self.rng.random()) < log_a
            self._record_h(ok)
            if ok:
                tr.height[k] = prop

    def _count_trunc(self, lp):
        if self.model.height_bound is not None:
            self.trunc[1] += 1
            self.trunc[0] += lp == -math.inf

    def _record_h(self, ok: bool):
        self.h_acc[0] += ok
        self.h_acc[1] += 1
        self._h_window[0] += ok
        self._h_window[1] += 1

    def _draw_conjugate_heights(self, tr, resid):
        ids = np.array(sorted(tr.leaves), dtype=np.int64)
        if not self.mcmc.likelihood:
            cnt = S = np.zeros(ids.size)
        elif ids.size == 1:
            cnt, S = np.array([self.n]), np.array([resid.sum()])
        else:
            pos = np.searchsorted(ids, tr.leaf_of[0])
            cnt = np.bincount(pos, minlength=ids.size)
            S = np.bincount(pos, weights=resid, minlength=ids.size)
        denom = self.sigma2 + cnt * self.tau2
        mean = self.tau2 * S / denom
        sd = np.sqrt(self.tau2 * self.sigma2 / denom)
        draws = mean + sd * self.rng.standard_normal(ids.size)
        for k, v in zip(ids.tolist(), draws.tolist()):
            tr.height[k] = v

    # global updates ----------------------------------------------------------

    def _update_sigma2(self):
        a, b = self.prior.sigma_shape, self.prior.sigma_scale
        if not self.mcmc.likelihood:
            n, ssr = 0, 0.0
        else:
            n = self.n
            ssr = float(np.sum((self.y - self.fits[0]) ** 2))
        C = self.model.sigma2_bound
        if C is None:
            self.sigma2 = float(self.sigma2_update(self.rng, a, b, n, ssr))
            return
        # inverse-CDF draw of the truncated inverse gamma via the gamma law of 1/sigma2
        from scipy.stats import gamma as gamma_dist

        g = gamma_dist(a + n / 2, scale=1 / (b + ssr / 2))
        lo, hi = g.cdf(1 / C), g.cdf(C)
        if hi - lo <= 0:
            self.sigma2 = 1 / C if g.mean() > C else C
        else:
            self.sigma2 = float(1 / g.ppf(lo + (hi - lo) * self.rng.random()))
        self.sigma2 = min(max(self.sigma2, 1 / C), C)

    def _leaf_table(self):
        """Depths and feasibility masks of every leaf, plus split counts per coordinate."""
        depths, feas = [], []
        counts = np.zeros(self.p)
        for tr in self.trees:
            for k in tr.leaves:
                depths.append(depth_of(k))
                feas.append(tr.n_cand(k) > 0)
            for j, _ in tr.split.values():
                counts[j] += 1
        return np.array(depths), np.array(feas), counts

    def _update_eta(self):
        if self.p == 1:
            return
        depths, feas, counts = self._leaf_table()
        a = self.prior.dirichlet_shape(self.p)
        new = np.exp(sample_log_dirichlet(a + counts, self.rng))
        new /= new.sum()
        live = depths < self.prior.max_depth
        split_p = self.prior.nu ** (depths[live] + 1.0)

        def log_terms(eta):
            return float(np.sum(np.log1p(-split_p * (feas[live] @ eta))))

        if math.log(self.rng.random()) < log_terms(new) - log_terms(self.eta):
            self.eta = new

    def sweep(self):
        for t in range(self.prior.T):
            self._update_tree(t)
        if self.model.regression and self.mcmc.update_sigma2:
            self._update_sigma2()
        if self.mcmc.update_eta:
            self._update_eta()
        self.iteration += 1

    def _adapt(self):
        a, n = self._h_window
        if n:
            rate = a / n
            if rate < 0.30:
                self.step *= 0.8
            elif rate > 0.45:
                self.step *= 1.25
        self._h_window = [0, 0]

    def run(self) -> Posterior:
        cfg = self.mcmc
        for it in range(cfg.burnin):
            self.sweep()
            if (it + 1) % cfg.adapt_every == 0:
                self._adapt()
            self._maybe_check()
        self.h_acc = [0, 0]
        self.moves = {k: [0, 0] for k in self.moves}
        self.trunc = [0, 0]
        n_keep = cfg.iterations // cfg.thin
        sig = np.empty(n_keep)
        eta = np.empty((n_keep, self.p))
        leaves = np.empty((n_keep, self.prior.T), dtype=np.int64)
        fit_sum = np.zeros(self.n)
        pred = None if self.pred_set is None else np.empty((n_keep, self.sets[self.pred_set].shape[0]))
        ens = [] if cfg.store_ensembles else None
        k = 0
        for it in range(cfg.iterations):
            self.sweep()
            self._maybe_check()
            if (it + 1) % cfg.thin:
                continue
            if k >= n_keep:
                break
            sig[k] = self.sigma2
            eta[k] = self.eta
            leaves[k] = [len(tr.leaves) for tr in self.trees]
            fit_sum += self.fits[0]
            if pred is not None:
                pred[k] = self.fits[self.pred_set]
            if ens is not None:
                ens.append(self.ensemble())
            k += 1
        mean = fit_sum / max(k, 1) + self.offset
        if pred is not None:
            pred += self.offset
            if self.model.kind == "classify":
                pred = expit(pred)
        return Posterior(
            model=self.model,
            sigma2=sig,
            eta=eta,
            n_leaves=leaves,
            fit_mean=mean,
            offset=self.offset,
            pred=pred,
            ensembles=ens,
            moves={k_: tuple(v) for k_, v in self.moves.items()},
            height_acceptance=self.h_acc[0] / self.h_acc[1] if self.h_acc[1] else float("nan"),
            step=self.step,
            truncation_rejections=self.trunc[0],
            truncation_proposals=self.trunc[1],
        )

    def _maybe_check(self):
        if self.mcmc.check_every and self.iteration % self.mcmc.check_every == 0:
            self.check_cache()


def _in_subtree(labels: np.ndarray, node: int) -> np.ndarray:
    """Whether each heap id lies in the subtree rooted at ``node``."""
    # frexp exponent - 1 is the depth of each id, exact for ids below 2^53
    shift = np.frexp(labels.astype(float))[1] - 1 - (node.bit_length() - 1)
    ok = shift >= 0
    out = np.zeros(labels.size, dtype=bool)
    out[ok] = (labels[ok] >> shift[ok]) == node
    return out


def fit(
    X,
    y,
    model: ModelSpec,
    net: SplitNet,
    prior: PriorConfig,
    mcmc: MCMCConfig,
    x_pred=None,
    eta=None,
    sigma2_update: Callable = default_sigma2_update,
) -> Posterior:
    """Run one chain and return its stored draws.

    Parameters
    ----------
    X : ndarray, shape (n, p)
        Covariates in the unit cube, or the sample for density estimation.
    y : ndarray or None
        Responses (0/1 labels for classification); ``None`` for densities.
    model : ModelSpec
    net : SplitNet
        Admissible split points. For fixed designs this may be
        ``from_points(X)``.
    prior : PriorConfig
    mcmc : MCMCConfig
    x_pred : ndarray, optional
        Points whose function values are recorded at every stored draw.
    eta : ndarray, optional
        Starting splitting proportions; held fixed if ``mcmc.update_eta`` is
        false (uniform when omitted).
    """
    chain = Chain(X, y, model, net, prior, mcmc, x_pred=x_pred, eta=eta, sigma2_update=sigma2_update)
    return chain.run()


# Geweke joint-distribution test -------------------------------------------


def _prior_draw(chain: Chain, rng, fixed_eta=None):
    p, prior = chain.p, chain.prior
    eta = sample_eta(p, prior, rng) if fixed_eta is None else fixed_eta
    trees = [sample_tree(eta, prior, chain.net, rng) for _ in range(prior.T)]
    heights = [sample_heights([t.n_leaves], prior, rng) for t in trees]
    sigma2 = float(sample_sigma2(prior, rng))
    return trees, heights, sigma2, eta


def _geweke_stats(chain: Chain) -> dict[str, float]:
    heights = [h for tr in chain.trees for h in tr.height.values()]
    out = {
        "sigma2": chain.sigma2,
        "log_sigma2": math.log(chain.sigma2) if chain.sigma2 > 0 else -math.inf,
        "leaves_tree0": float(len(chain.trees[0].leaves)),
        "mean_height": float(np.mean(heights)),
        "mean_sq_height": float(np.mean(np.square(heights))),
        "f_x0": float(chain.fits[0][0]),
    }
    if chain.prior.T > 1:
        out["leaves_tree1"] = float(len(chain.trees[1].leaves))
    if chain.p > 1:
        out["eta0"] = float(chain.eta[0])
    return out


def geweke_joint_test(
    X,
    net: SplitNet,
    prior: PriorConfig,
    trials: int = 10_000,
    sweeps: int = 1,
    seed=0,
    sigma2_update: Callable = default_sigma2_update,
    update_eta: bool = True,
    chains: int = 50,
) -> dict[str, float]:
    """z-scores comparing two simulators of the joint law of parameters and data.

    The marginal-conditional simulator draws parameters from the prior and
    responses given them, ``trials`` times. The successive-conditional
    simulator alternates ``sweeps`` sampler sweeps with fresh responses; it
    runs ``chains`` independent chains of ``trials // chains`` rounds, each
    started from a prior draw. Both target the same joint law only when the
    sampler leaves the posterior invariant.

    Starting every chain at an exact prior draw makes it stationary from the
    first round, so the chain means are independent and their spread gives
    the standard error without modelling autocorrelation (small designs make
    the successive chain very sticky).

    With ``sweeps = 0`` the second simulator makes fresh prior draws from the
    same stream as the first, so every z-score is 0. A statistic whose
    successive-conditional values become non-finite gets ``z = inf``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    model = ModelSpec("reg-fixed")
    mcmc = MCMCConfig(iterations=0, burnin=0, check_every=0, update_eta=update_eta, store_ensembles=False)
    seeds = np.random.SeedSequence(seed).spawn(2)
    rng_mc = np.random.default_rng(seeds[0])
    # with no sweeps both simulators read the same stream
    rng_sc = np.random.default_rng(seeds[0] if sweeps == 0 else seeds[1])
    fixed_eta = None if update_eta else np.full(X.shape[1], 1.0 / X.shape[1])

    mc_chain = Chain(X, np.zeros(n), model, net, prior, mcmc, eta=fixed_eta, sigma2_update=sigma2_update, rng=rng_mc)
    mc = []
    for _ in range(trials):
        mc_chain.set_state(*_prior_draw(mc_chain, rng_mc, fixed_eta))
        mc.append(_geweke_stats(mc_chain))
    keys = list(mc[0])
    mc = np.array([[d[k] for k in keys] for d in mc])

    sc_chain = Chain(X, np.zeros(n), model, net, prior, mcmc, eta=fixed_eta, sigma2_update=sigma2_update, rng=rng_sc)
    chains = max(2, min(chains, trials))
    rounds = trials // chains
    means = np.empty((chains, len(keys)))
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for c in range(chains):
            vals = []
            if sweeps == 0:
                for _ in range(rounds):
                    sc_chain.set_state(*_prior_draw(sc_chain, rng_sc, fixed_eta))
                    vals.append(_geweke_stats(sc_chain))
            else:
                sc_chain.set_state(*_prior_draw(sc_chain, rng_sc, fixed_eta))
                for _ in range(rounds):
                    if not 0 < sc_chain.sigma2 < math.inf:
                        # a runaway chain; record the blow-up instead of iterating on inf
                        vals.append({k: math.inf for k in keys})
                        continue
                    sc_chain.y = sc_chain.fits[0] + math.sqrt(sc_chain.sigma2) * rng_sc.standard_normal(n)
                    for _ in range(sweeps):
                        sc_chain.sweep()
                    vals.append(_geweke_stats(sc_chain))
            means[c] = np.mean([[d[k] for k in keys] for d in vals], axis=0)

    z = {}
    for i, key in enumerate(keys):
        a, b = mc[:, i], means[:, i]
        if not np.all(np.isfinite(b)):
            z[key] = math.inf
            continue
        var = a.var(ddof=1) / a.size + b.var(ddof=1) / b.size
        diff = a.mean() - b.mean()
        z[key] = 0.0 if diff == 0 else float(diff / math.sqrt(var))
    return z
