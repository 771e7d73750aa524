"""Priors of the Bayesian forest: sparse Dirichlet splitting proportions,
depth-decaying split probabilities, Gaussian step heights and an
inverse-gamma noise variance. Also exact tree log-priors and Monte Carlo
checks of the prior concentration inequalities.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import comb, gammaln, logsumexp

from .geometry import Box, SplitRecord, TreePartition, depth_of
from .splitnet import SplitNet, candidates_in, n_candidates


@dataclass(frozen=True)
class PriorConfig:
    """Hyperparameters of the forest prior.

    Parameters
    ----------
    T : int
        Number of trees.
    nu : float
        Base split probability; a node at depth ``l`` splits with probability
        ``nu^(l+1)``. Must lie in ``(0, 1/2)``.
    zeta, xi : float
        Dirichlet concentration ``zeta / p^xi`` per coordinate; ``xi > 1``.
    height_var : float or None
        Variance of each step height, ``1/T`` when ``None``.
    sigma_shape, sigma_scale : float
        Inverse-gamma prior on the noise variance.
    max_depth : int
        Nodes at this depth are never split.
    """

    T: int = 1
    nu: float = 0.25
    zeta: float = 1.0
    xi: float = 2.0
    height_var: float | None = None
    sigma_shape: float = 3.0
    sigma_scale: float = 1.0
    max_depth: int = 40

    def __post_init__(self):
        if not 0 < self.nu < 0.5:
            raise ValueError("nu must lie in (0, 1/2)")
        if self.xi <= 1:
            raise ValueError("xi must exceed 1")
        if self.zeta <= 0:
            raise ValueError("zeta must be positive")
        if self.T < 1:
            raise ValueError("T must be at least 1")

    @property
    def tau2(self) -> float:
        return 1.0 / self.T if self.height_var is None else self.height_var

    def dirichlet_shape(self, p: int) -> float:
        return self.zeta / p**self.xi

    def split_prob(self, depth) -> np.ndarray:
        depth = np.asarray(depth)
        return np.where(depth < self.max_depth, self.nu ** (depth + 1.0), 0.0)


def sample_log_dirichlet(shape, rng, size=None) -> np.ndarray:
    """Log of Dirichlet draws, stable for tiny shape parameters.

    Uses ``G = G' U^(1/a)`` with ``G' ~ Gamma(a + 1)`` and ``U ~ U(0,1)``, so
    ``log G = log G' + log(U)/a`` never underflows.
    """
    shape = np.asarray(shape, dtype=float)
    out_shape = shape.shape if size is None else (size,) + shape.shape
    logg = np.log(rng.gamma(shape + 1.0, size=out_shape)) + np.log(rng.random(out_shape)) / shape
    return logg - logsumexp(logg, axis=-1, keepdims=True)


def sample_eta(p: int, config: PriorConfig, rng, size=None) -> np.ndarray:
    """Splitting proportions ``eta ~ Dir(zeta/p^xi, ..., zeta/p^xi)``."""
    if p == 1:
        return np.ones((1,) if size is None else (size, 1))
    eta = np.exp(sample_log_dirichlet(np.full(p, config.dirichlet_shape(p)), rng, size))
    # renormalize away the rounding of exp
    return eta / eta.sum(axis=-1, keepdims=True)


def sample_tree(eta, config: PriorConfig, net: SplitNet, rng, max_depth_guard: int | None = None) -> TreePartition:
    """Draw a tree from the topology prior.

    A node at depth ``l`` splits with probability ``nu^(l+1)``; the coordinate
    is drawn from ``eta`` and the split point uniformly among the node's
    interior candidates. A node whose drawn coordinate has no candidate stays
    a leaf.
    """
    eta = np.asarray(eta, dtype=float)
    guard = config.max_depth if max_depth_guard is None else min(max_depth_guard, config.max_depth)
    p = eta.size
    root = Box.unit(p)
    splits = []
    stack = [(1, root.lo.copy(), root.hi.copy())]
    while stack:
        node, lo, hi = stack.pop()
        dep = depth_of(node)
        if dep >= guard or rng.random() >= config.nu ** (dep + 1):
            continue
        j = int(rng.choice(p, p=eta))
        axis = net.axes[j]
        i0 = np.searchsorted(axis, lo[j], side="right")
        i1 = np.searchsorted(axis, hi[j], side="left")
        if i1 <= i0:
            continue
        tau = float(axis[rng.integers(i0, i1)])
        splits.append(SplitRecord(node, j, tau))
        left_hi = hi.copy()
        left_hi[j] = tau
        right_lo = lo.copy()
        right_lo[j] = tau
        stack.append((2 * node + 1, right_lo, hi))
        stack.append((2 * node, lo, left_hi))
    return TreePartition(root, tuple(splits))


def leaf_log_terminal(box: Box, depth: int, eta, config: PriorConfig, net: SplitNet) -> float:
    """Log-probability that a node stays a leaf.

    ``1 - nu^(l+1) * sum of eta_j over coordinates with a candidate in the box``.
    """
    if depth >= config.max_depth:
        return 0.0
    feasible = n_candidates(net, box.lo, box.hi) > 0
    return float(np.log1p(-config.nu ** (depth + 1) * np.sum(np.asarray(eta)[feasible])))


def tree_log_prior(tree: TreePartition, eta, config: PriorConfig, net: SplitNet) -> float:
    """Exact log-probability of ``tree`` under :func:`sample_tree` given ``eta``.

    Internal nodes contribute ``ln nu^(l+1) + ln eta_j - ln b~_j`` and leaves
    the log of their terminal probability.
    """
    eta = np.asarray(eta, dtype=float)
    total = 0.0
    for node, s in tree.internal.items():
        box = tree.box(node)
        dep = depth_of(node)
        if dep >= config.max_depth:
            raise ValueError(f"node {node} splits beyond the depth guard")
        cands = candidates_in(net, box, s.coord)
        if not np.any(cands == s.tau):
            raise ValueError(f"split point {s.tau} at node {node} is not an interior net candidate")
        with np.errstate(divide="ignore"):
            total += (dep + 1) * math.log(config.nu) + float(np.log(eta[s.coord])) - math.log(cands.size)
    for node, box in zip(tree.leaf_nodes, tree.leaves):
        total += leaf_log_terminal(box, depth_of(node), eta, config, net)
    return total


def enumerate_trees(net: SplitNet, max_depth: int, p: int | None = None):
    """Every tree on ``net`` with leaves at depth at most ``max_depth`` (test oracle)."""
    p = net.p if p is None else p

    def grow(node, box):
        yield ()
        if depth_of(node) >= max_depth:
            return
        for j in range(p):
            for tau in candidates_in(net, box, j):
                left, right = box.split(j, float(tau))
                for ls in list(grow(2 * node, left)):
                    for rs in grow(2 * node + 1, right):
                        yield (SplitRecord(node, j, float(tau)),) + ls + rs

    root = Box.unit(p)
    for splits in grow(1, root):
        yield TreePartition(root, splits)


def sample_heights(leaf_counts, config: PriorConfig, rng) -> np.ndarray:
    """Independent ``N(0, 1/T)`` step heights for trees with the given leaf counts."""
    counts = np.atleast_1d(np.asarray(leaf_counts, dtype=np.int64))
    if np.any(counts < 1):
        raise ValueError("leaf counts must be positive")
    return rng.normal(0.0, math.sqrt(config.tau2), int(counts.sum()))


def sample_sigma2(config: PriorConfig, rng, size=None):
    """Inverse-gamma draws of the noise variance."""
    return config.sigma_scale / rng.gamma(config.sigma_shape, size=size)


# prior concentration -------------------------------------------------------


def _split_counts(tree: TreePartition, p: int) -> np.ndarray:
    return np.bincount([s.coord for s in tree.splits], minlength=p).astype(float)


def _log_dirichlet_norm(a: np.ndarray) -> float:
    return float(np.sum(gammaln(a)) - gammaln(np.sum(a)))


def check_prior_concentration(
    That: TreePartition,
    n: float,
    p: int,
    d: int,
    config: PriorConfig,
    eta_star,
    net: SplitNet,
    mc_samples: int = 2000,
    rng=None,
) -> dict:
    """Compare the log prior of an ensemble with the bound ``-(K ln n + d ln p)``.

    The ensemble is ``That`` plus ``T - 1`` root-only trees. Reports the exact
    log prior given ``eta_star``, the constant ``C`` implied by
    ``log prior = -C (K ln n + d ln p)``, and an importance-sampling estimate
    of the log prior with ``eta`` integrated out.

    Notes
    -----
    Given ``eta`` the prior is ``prod_j eta_j^c_j`` times factors that only
    involve ``eta`` through leaf terminal probabilities, so drawing ``eta``
    from ``Dir(a + c)`` and averaging the leaf factors is exact when every
    coordinate has candidates in every leaf (and always when ``p = 1``).
    """
    rng = np.random.default_rng(rng)
    eta_star = np.asarray(eta_star, dtype=float)
    root = TreePartition(That.root)
    others = config.T - 1

    def log_prior_given(eta):
        return tree_log_prior(That, eta, config, net) + others * tree_log_prior(root, eta, config, net)

    exact = log_prior_given(eta_star)
    K = That.n_leaves
    scale = K * math.log(n) + d * math.log(p)
    bound = -scale

    a = np.full(p, config.dirichlet_shape(p))
    c = _split_counts(That, p)
    log_beta_ratio = _log_dirichlet_norm(a + c) - _log_dirichlet_norm(a)
    # split terms without eta: depth and candidate counts
    base = 0.0
    for node, s in That.internal.items():
        base += (depth_of(node) + 1) * math.log(config.nu) - math.log(candidates_in(net, That.box(node), s.coord).size)
    if p == 1:
        leaf_terms = np.array([log_prior_given(np.ones(1)) - base])
    else:
        draws = np.exp(sample_log_dirichlet(a + c, rng, size=mc_samples))
        draws /= draws.sum(axis=1, keepdims=True)
        leaf_terms = np.empty(mc_samples)
        for i, eta in enumerate(draws):
            split_part = float(np.sum(c[c > 0] * np.log(eta[c > 0])))
            leaf_terms[i] = log_prior_given(eta) - base - split_part
    m = logsumexp(leaf_terms) - math.log(leaf_terms.size)
    marginal = base + log_beta_ratio + m
    w = np.exp(leaf_terms - leaf_terms.max())
    se = float(w.std(ddof=1) / math.sqrt(w.size) / w.mean()) if w.size > 1 else 0.0
    return {
        "K": K,
        "log_prior_given_eta": exact,
        "bound": bound,
        "implied_C": -exact / scale,
        "holds_with_C1": exact >= bound,
        "log_prior_marginal": marginal,
        "log_prior_marginal_se": se,
        "implied_C_marginal": -marginal / scale,
    }


# Dirichlet concentration ---------------------------------------------------


def _qualifying_subset_counts(eta: np.ndarray, s: int, eps: float) -> np.ndarray:
    """Number of ``s``-subsets ``S`` with ``||eta - uniform_S||_1 <= eps``, per row.

    Every member ``j`` of a qualifying subset has ``eta_j >= 1/s - eps/2``,
    so only the largest ``floor(1/t)`` coordinates need to be tried.
    """
    t = 1.0 / s - eps / 2
    B, p = eta.shape
    K = p if t <= 0 else min(p, int(math.floor(1.0 / t)) + s)
    top = -np.sort(-np.partition(eta, p - K, axis=1)[:, p - K:], axis=1) if K < p else -np.sort(-eta, axis=1)
    rest_total = 1.0 - top.sum(axis=1)  # mass outside the candidates
    counts = np.zeros(B, dtype=np.int64)
    for S in itertools.combinations(range(top.shape[1]), s):
        S = list(S)
        inside = np.abs(top[:, S] - 1.0 / s).sum(axis=1)
        outside = top.sum(axis=1) - top[:, S].sum(axis=1) + rest_total
        counts += inside + outside <= eps
    return counts


def check_dirichlet_lemma(
    p: int,
    s: int,
    eps: float,
    config: PriorConfig,
    trials: int,
    rng=None,
    batch: int = 100_000,
) -> dict:
    """Monte Carlo check of the two Dirichlet concentration inequalities.

    ``P1 = P(||eta - eta*||_1 <= eps)`` with ``eta*`` uniform on ``s``
    coordinates, estimated by averaging over all ``s``-subsets (exchangeable
    coordinates). ``P2 = P(mass outside the top s coordinates >= eps)``.

    Implied constants:
    ``C1 = -ln P1 / (xi s ln(p/eps))`` (smallest C with ``P1 >= exp(-C xi s ln(p/eps))``),
    ``C2 = (-ln P2 - ln eps) / ((xi - 1) s ln p)`` (largest C with
    ``P2 <= exp(-C (xi-1) s ln p - ln eps)``). With zero hits the rule of three
    gives a one-sided bound ``P < 3/trials``.
    """
    return check_dirichlet_lemma_grid(p, [s], [eps], config, trials, rng, batch)[(s, eps)]


def _log_elementary_symmetric(logy: np.ndarray, kmax: int) -> np.ndarray:
    """``log e_k(y)`` for ``k = 0..kmax`` per row, by the standard recursion."""
    B, p = logy.shape
    out = np.full((B, kmax + 1), -np.inf)
    out[:, 0] = 0.0
    for j in range(p):
        out[:, 1:] = np.logaddexp(out[:, 1:], out[:, :-1] + logy[:, j : j + 1])
    return out


def _tail_mass_weighted(p: int, s: int, config: PriorConfig, rng, size: int, stay: float = 0.1, n_boost: int = 6):
    """Mass outside the top ``s`` coordinates under an importance proposal.

    Proposal: with probability ``stay`` the prior ``Dir(a, ..., a)``; otherwise
    pick ``k`` uniformly from ``s+1 .. s+n_boost`` and a uniform random
    ``k``-subset ``A``, and raise the shapes on ``A`` to 1. Summing the
    subset-specific densities gives ratio
    ``c_k / binom(p, k) * e_k(eta^(1 - a))`` to the prior, with ``e_k`` the
    elementary symmetric polynomial, so weights are bounded by ``1/stay``.
    Tiny-shape priors put almost all mass on one or two coordinates; the
    proposal makes spread-out draws, the rare event here, common.
    """
    a = config.dirichlet_shape(p)
    ks = np.arange(s + 1, min(p, s + n_boost) + 1)
    shapes_sum = ks * 1.0 + (p - ks) * a
    # log c_k = k lgamma(a) + lgamma(k + (p-k) a) - lgamma(p a)   (lgamma(1) = 0)
    log_c = ks * gammaln(a) + gammaln(shapes_sum) - gammaln(p * a)
    log_binom = gammaln(p + 1) - gammaln(ks + 1) - gammaln(p - ks + 1)

    boosted = rng.random(size) >= stay
    k_draw = rng.choice(ks, size=size)
    shape = np.full((size, p), a)
    order = np.argsort(rng.random((size, p)), axis=1)
    sel = np.arange(p)[None, :] < np.where(boosted, k_draw, 0)[:, None]
    rows = np.repeat(np.arange(size), p).reshape(size, p)
    shape[rows[sel], order[sel]] = 1.0
    logg = np.log(rng.gamma(shape + 1.0)) + np.log(rng.random((size, p))) / shape
    logeta = logg - logsumexp(logg, axis=1, keepdims=True)

    log_e = _log_elementary_symmetric((1.0 - a) * logeta, int(ks.max()))
    log_mix = logsumexp(log_c - log_binom + log_e[:, ks], axis=1) - math.log(ks.size)
    log_w = -np.logaddexp(math.log(stay), math.log1p(-stay) + log_mix)
    eta = np.exp(logeta)
    top = -np.sort(-eta, axis=1)[:, :s]
    return 1.0 - top.sum(axis=1), np.exp(log_w)


def check_dirichlet_lemma_grid(p, s_values, eps_values, config, trials, rng=None, batch=100_000) -> dict:
    """:func:`check_dirichlet_lemma` for several ``(s, eps)`` on shared draws.

    ``P1`` uses plain Dirichlet draws; ``P2`` uses importance sampling (see
    :func:`_tail_mass_weighted`) because its event is far rarer than
    ``1/trials`` for sparse priors.
    """
    rng = np.random.default_rng(rng)
    for s in s_values:
        if not 1 <= s <= p:
            raise ValueError("need 1 <= s <= p")
    keys = [(s, e) for s in s_values for e in eps_values]
    sums1 = {k: np.zeros(2) for k in keys}
    sums2 = {k: np.zeros(3) for k in keys}
    done = 0
    while done < trials:
        b = min(batch, trials - done)
        eta = sample_eta(p, config, rng, size=b)
        for s in s_values:
            if p > 1 and s < p:
                tail, w = _tail_mass_weighted(p, s, config, rng, b)
            else:
                tail, w = 1.0 - np.sort(eta, axis=1)[:, ::-1][:, :s].sum(axis=1), np.ones(b)
            for e in eps_values:
                c = _qualifying_subset_counts(eta, s, e).astype(float)
                sums1[(s, e)] += (c.sum(), (c * c).sum())
                hit = w * (tail >= e)
                sums2[(s, e)] += (hit.sum(), (hit * hit).sum(), np.count_nonzero(hit))
        done += b
    out = {}
    for s in s_values:
        n_sub = comb(p, s, exact=True)
        for e in eps_values:
            tot, sq = sums1[(s, e)]
            mean = tot / trials
            p1 = mean / n_sub
            se1 = math.sqrt(max(sq / trials - mean**2, 0.0) / trials) / n_sub
            tot2, sq2, nhit = sums2[(s, e)]
            p2 = tot2 / trials
            se2 = math.sqrt(max(sq2 / trials - p2**2, 0.0) / trials)
            out[(s, e)] = _lemma_report(p, s, e, config, trials, p1, se1, p2, se2, tot == 0, nhit == 0)
    return out


def _lemma_report(p, s, eps, config, trials, p1, se1, p2, se2, zero1, zero2) -> dict:
    xi = config.xi
    denom1 = xi * s * math.log(p / eps)
    denom2 = (xi - 1) * s * math.log(p) if p > 1 else 0.0
    upper = 3.0 / trials

    def c1_of(prob):
        num = -math.log(prob)
        if denom1 == 0:
            return 0.0 if num == 0 else math.inf
        return num / denom1

    def c2_of(prob):
        num = -math.log(prob) - math.log(eps)
        return math.inf if denom2 == 0 else num / denom2

    rep = {"p": p, "s": s, "eps": eps, "trials": trials, "P1": p1, "P1_se": se1, "P2": p2, "P2_se": se2}
    if zero1:
        rep["P1_upper"] = upper
        rep["C1"] = math.inf
        rep["C1_lower"] = c1_of(upper)
    else:
        rep["C1"] = c1_of(p1)
        lo, hi = max(p1 - 1.96 * se1, 1e-300), min(p1 + 1.96 * se1, 1.0)
        rep["C1_ci"] = (c1_of(hi), c1_of(lo))
    if zero2:
        rep["P2_upper"] = upper
        rep["C2"] = math.inf
        rep["C2_lower"] = c2_of(upper)
    else:
        rep["C2"] = c2_of(p2)
        lo, hi = max(p2 - 1.96 * se2, 1e-300), min(p2 + 1.96 * se2, 1.0)
        rep["C2_ci"] = (c2_of(hi), c2_of(lo))
    return rep
