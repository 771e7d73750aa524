"""Split-nets: the finite sets of admissible split locations.

A net keeps, for every coordinate, the sorted distinct projections of its
points. Tree partitions built on a net may only cut coordinate ``j`` at one of
those values lying strictly inside the current box.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .geometry import Box, BoxPartition, SplitRecord, TreePartition, is_s_chopped, partition_divergence

MAX_GRID_POINTS = 5_000_000


@dataclass(frozen=True, eq=False)
class SplitNet:
    """Candidate split points.

    Parameters
    ----------
    axes : tuple of ndarray
        Sorted, strictly increasing projections ``[Z]_j`` for each coordinate.
    points : ndarray or None
        The explicit ``(b_n, p)`` point set. ``None`` for product nets, whose
        points are every combination of axis values.
    """

    axes: tuple[np.ndarray, ...]
    points: np.ndarray | None = None

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        for a in axes:
            if a.ndim != 1 or a.size == 0:
                raise ValueError("each axis needs at least one value")
            if np.any(np.diff(a) <= 0):
                raise ValueError("axis values must be strictly increasing")
            a.setflags(write=False)
        object.__setattr__(self, "axes", axes)

    @property
    def p(self) -> int:
        return len(self.axes)

    @property
    def is_product(self) -> bool:
        return self.points is None

    @property
    def b_n(self) -> int:
        if self.points is None:
            return int(np.prod([a.size for a in self.axes], dtype=object))
        return self.points.shape[0]

    @property
    def b(self) -> np.ndarray:
        """Per-coordinate counts ``b_j(Z)``."""
        return np.array([a.size for a in self.axes])

    def point_array(self) -> np.ndarray:
        if self.points is not None:
            return self.points
        if self.b_n > MAX_GRID_POINTS:
            raise MemoryError(f"product net with {self.b_n} points is too large to expand")
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


def regular_grid(p: int, m: int) -> SplitNet:
    """Product net with axis values ``(i - 1/2)/m``, ``i = 1..m``."""
    if p < 1 or m < 1:
        raise ValueError("need p >= 1 and m >= 1")
    axis = (np.arange(1, m + 1) - 0.5) / m
    return SplitNet(tuple(axis.copy() for _ in range(p)))


def from_axes(axes: Sequence[Sequence[float]]) -> SplitNet:
    """Product net from arbitrary per-axis value lists (e.g. quantile grids)."""
    cleaned = []
    for a in axes:
        a = np.unique(np.asarray(a, dtype=float))
        if np.any(a < 0) or np.any(a > 1):
            raise ValueError("axis values must lie in [0, 1]")
        cleaned.append(a)
    return SplitNet(tuple(cleaned))


def from_points(points) -> SplitNet:
    """Net with an explicit point set, e.g. fixed design points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.size == 0:
        raise ValueError("empty point set")
    if np.any(pts < 0) or np.any(pts > 1):
        raise ValueError("point coordinates must lie in [0, 1]")
    pts = pts.copy()
    pts.setflags(write=False)
    return SplitNet(tuple(np.unique(pts[:, j]) for j in range(pts.shape[1])), pts)


def load_points_csv(path) -> SplitNet:
    """Read one point per row; a non-numeric first row is treated as a header."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    try:
        [float(v) for v in rows[0]]
    except ValueError:
        rows = rows[1:]
    return from_points(np.array(rows, dtype=float))


def candidates_in(net: SplitNet, box: Box, j: int) -> np.ndarray:
    """Values of ``[Z]_j`` strictly inside ``(lo_j, hi_j)``."""
    axis = net.axes[j]
    i0 = np.searchsorted(axis, box.lo[j], side="right")
    i1 = np.searchsorted(axis, box.hi[j], side="left")
    return axis[i0:max(i0, i1)]


def n_candidates(net: SplitNet, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Counts ``b~_j`` for every coordinate of the box ``[lo, hi]``."""
    out = np.empty(net.p, dtype=np.int64)
    for j, axis in enumerate(net.axes):
        i0 = np.searchsorted(axis, lo[j], side="right")
        i1 = np.searchsorted(axis, hi[j], side="left")
        out[j] = max(0, i1 - i0)
    return out


def nearest_point_in(net: SplitNet, box: Box, target) -> np.ndarray | None:
    """Net point inside ``box`` closest to ``target`` (``None`` if the box holds none).

    For product nets the per-axis nearest values give the nearest point in
    both the Euclidean and sup norms. Ties go to the smaller value.
    """
    target = np.asarray(target, dtype=float)
    if net.is_product:
        out = np.empty(net.p)
        for j, axis in enumerate(net.axes):
            side = "right" if box.lo_open[j] else "left"
            i0 = np.searchsorted(axis, box.lo[j], side=side)
            i1 = np.searchsorted(axis, box.hi[j], side="right")
            vals = axis[i0:i1]
            if vals.size == 0:
                return None
            out[j] = vals[np.argmin(np.abs(vals - target[j]))]
        return out
    pts = net.points[box.contains(net.points)]
    if pts.shape[0] == 0:
        return None
    # lexsort gives a deterministic winner among equidistant points
    dist = np.sum((pts - target) ** 2, axis=1)
    order = np.lexsort(tuple(pts[:, j] for j in reversed(range(net.p))) + (dist,))
    return pts[order[0]]


def snap_value(cands: np.ndarray, tau: float) -> float:
    """Nearest candidate to ``tau``; ties go to the smaller value."""
    k = int(np.argmin(np.abs(cands - tau)))  # argmin returns the first, i.e. smaller, on ties
    return float(cands[k])


def snap_tree(net: SplitNet, target: TreePartition) -> TreePartition | None:
    """Replay ``target``'s split history with every split point snapped to the net."""
    splits = []
    boxes = {1: target.root}
    for s in sorted(target.splits, key=lambda s: s.node):
        box = boxes[s.node]
        cands = candidates_in(net, box, s.coord)
        if cands.size == 0:
            return None
        tau = snap_value(cands, s.tau)
        boxes[2 * s.node], boxes[2 * s.node + 1] = box.split(s.coord, tau)
        splits.append(SplitRecord(s.node, s.coord, tau))
    return TreePartition(target.root, tuple(splits))


def check_dense(net: SplitNet, target: TreePartition, S: Iterable[int], c_n: float):
    """Constructive density check: snap ``target`` and measure the divergence.

    Returns
    -------
    ok : bool
        Whether the snapped partition is within ``c_n`` of the target.
    snapped : TreePartition or None
    achieved : float
        Divergence between target and snapped leaves (``inf`` if snapping
        failed).

    Notes
    -----
    Only an upper bound on the distance to the best net-based partition is
    certified; searching all such partitions is exponential.
    """
    S = set(S)
    if not is_s_chopped(BoxPartition(target.leaves, check=False), S):
        raise ValueError(f"target partition is not {sorted(S)}-chopped")
    snapped = snap_tree(net, target)
    if snapped is None:
        return False, None, float("inf")
    achieved = partition_divergence(target.leaves, snapped.leaves)
    return achieved <= c_n, snapped, achieved


def best_divergence_exhaustive_1d(net: SplitNet, target: TreePartition) -> float:
    """Minimum divergence from a 1-d target to any net partition of equal size.

    Test oracle for ``p = 1`` and few leaves. In one dimension the leaves of any
    tree with cut set ``C`` are the intervals between consecutive cuts.
    """
    if net.p != 1:
        raise ValueError("exhaustive search is one-dimensional only")
    J = target.n_leaves
    best = float("inf")
    for cuts in itertools.combinations(net.axes[0], J - 1):
        edges = np.concatenate([[0.0], cuts, [1.0]])
        boxes = [Box([a], [b], [k > 0]) for k, (a, b) in enumerate(zip(edges[:-1], edges[1:]))]
        best = min(best, partition_divergence(target.leaves, boxes))
    return best


def check_regular(net: SplitNet, box: Box, alpha, L: int, S: Sequence[int], C: float = 3.0):
    """Run the anisotropic k-d tree and test geometric leaf shrinkage.

    Returns ``(ok, counters, partition)`` where ``ok`` requires the full depth
    ``L`` and ``max_k len(leaf_k)_{s_j} <= C len(box)_{s_j} 2^{-l_j}`` for all j.
    """
    from .akd import akd

    res = akd(box, net, alpha, L, S)
    ok = res.depth == L
    if ok:
        widths = np.array([leaf.lengths[list(S)] for leaf in res.partition.leaves])
        bound = C * box.lengths[list(S)] * 2.0 ** (-res.counters)
        ok = bool(np.all(widths.max(axis=0) <= bound * (1 + 1e-12)))
    return ok, res.counters, res.partition
