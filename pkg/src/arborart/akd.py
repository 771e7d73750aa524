"""Anisotropic k-d trees built from midpoint splits on a split-net.

At every level the coordinate with the smallest ``l_j * alpha_j`` is chosen
(smallest index on ties) and every current leaf is cut at its middle
candidate along that coordinate. Rougher coordinates (small ``alpha_j``) are
therefore cut more often, roughly ``l_j ~ 1/alpha_j``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box, SplitRecord, TreePartition
from .splitnet import SplitNet, candidates_in

# relative slack when comparing l_j * alpha_j products for ties
TIE_RTOL = 1e-12


class SplitUnavailable(ValueError):
    """The box has no interior candidate along the requested coordinate."""


def midpoint_split(net: SplitNet, box: Box, j: int) -> tuple[Box, Box, float]:
    """Cut ``box`` at the ``ceil(b/2)``-th of its ``b`` interior candidates along ``j``."""
    cands = candidates_in(net, box, j)
    if cands.size == 0:
        raise SplitUnavailable(f"no interior candidate along coordinate {j} in {box}")
    tau = float(cands[-(-cands.size // 2) - 1])
    left, right = box.split(j, tau)
    return left, right, tau


@dataclass(frozen=True, eq=False)
class AkdResult:
    """Output of :func:`akd`.

    Attributes
    ----------
    counters : ndarray of int
        ``l_j``, number of levels cut along ``S[j]``.
    sequence : tuple of int
        Index ``j`` (into ``alpha``) chosen at each level.
    partition : TreePartition
        ``2**depth`` leaves rooted at the input box.
    leaf_lo, leaf_hi : ndarray
        Leaf bounds, rows in heap order (same order as ``partition.leaves``).
    """

    counters: np.ndarray
    sequence: tuple[int, ...]
    partition: TreePartition
    leaf_lo: np.ndarray
    leaf_hi: np.ndarray
    target_depth: int

    @property
    def depth(self) -> int:
        return int(self.counters.sum())

    @property
    def complete(self) -> bool:
        return self.depth == self.target_depth


def next_coordinate(counters: np.ndarray, alpha: np.ndarray) -> int:
    """Index minimizing ``l_j alpha_j``, smallest index among (near-)ties."""
    score = counters * alpha
    best = score.min()
    return int(np.flatnonzero(score <= best + TIE_RTOL * max(best, 1.0))[0])


def akd(box: Box, net: SplitNet, alpha: Sequence[float], L: int, S: Sequence[int]) -> AkdResult:
    """Anisotropic k-d tree of target depth ``L`` on ``box``.

    Parameters
    ----------
    box : Box
        Root box.
    net : SplitNet
    alpha : sequence of float
        Smoothness in ``(0, 1]`` for each coordinate of ``S``.
    L : int
        Target number of levels.
    S : sequence of int
        Coordinates that may be cut, ``len(S) == len(alpha)``.

    Returns
    -------
    AkdResult
        A level is only cut when every current leaf has a candidate along the
        chosen coordinate; otherwise the construction stops early with
        ``depth < L``.
    """
    alpha = np.asarray(alpha, dtype=float)
    S = [int(s) for s in S]
    if alpha.size != len(S):
        raise ValueError("alpha and S must have the same length")
    if np.any(alpha <= 0) or np.any(alpha > 1):
        raise ValueError("alpha entries must lie in (0, 1]")
    if L < 0:
        raise ValueError("L must be nonnegative")
    counters = np.zeros(alpha.size, dtype=np.int64)
    lo = box.lo[None, :].copy()
    hi = box.hi[None, :].copy()
    sequence = []
    splits = []
    level_start = 1
    while counters.sum() < L:
        j = next_coordinate(counters, alpha)
        coord = S[j]
        axis = net.axes[coord]
        i0 = np.searchsorted(axis, lo[:, coord], side="right")
        i1 = np.searchsorted(axis, hi[:, coord], side="left")
        count = i1 - i0
        if np.any(count <= 0):
            break
        tau = axis[i0 + (count + 1) // 2 - 1]
        for k in range(lo.shape[0]):
            splits.append(SplitRecord(level_start + k, coord, float(tau[k])))
        new_lo = np.repeat(lo, 2, axis=0)
        new_hi = np.repeat(hi, 2, axis=0)
        new_hi[0::2, coord] = tau
        new_lo[1::2, coord] = tau
        lo, hi = new_lo, new_hi
        level_start *= 2
        counters[j] += 1
        sequence.append(j)
    partition = TreePartition(box, tuple(splits))
    return AkdResult(counters, tuple(sequence), partition, lo, hi, int(L))
