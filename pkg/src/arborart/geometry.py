"""Axis-aligned boxes, box partitions and binary tree partitions of the unit cube.

Coordinates are 0-based throughout. A split ``(j, tau)`` of a box sends
``x_j <= tau`` to the left child and ``x_j > tau`` to the right child, so a
right child has an open lower face in coordinate ``j``; every upper face is
closed. Boxes store this per-face flag and membership tests honor it.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

VOLUME_TOL = 1e-12


class GeometryError(ValueError):
    """Invalid box, partition or split history."""


@dataclass(frozen=True, eq=False)
class Box:
    """Hyperrectangle ``prod_j [lo_j, hi_j]`` inside ``[0, 1]^p``.

    ``lo_open[j]`` marks a half-open lower face ``(lo_j, hi_j]``.
    """

    lo: np.ndarray
    hi: np.ndarray
    lo_open: np.ndarray = None

    def __post_init__(self):
        lo = np.array(self.lo, dtype=float).ravel()
        hi = np.array(self.hi, dtype=float).ravel()
        if lo.shape != hi.shape:
            raise GeometryError("lo and hi must have the same length")
        if np.any(lo > hi):
            raise GeometryError(f"lo must not exceed hi: {lo} > {hi}")
        if np.any(lo < 0) or np.any(hi > 1):
            raise GeometryError("box must lie inside the unit cube")
        if self.lo_open is None:
            lo_open = np.zeros(lo.shape, dtype=bool)
        else:
            lo_open = np.array(self.lo_open, dtype=bool).ravel()
            if lo_open.shape != lo.shape:
                raise GeometryError("lo_open must match the box dimension")
        for arr in (lo, hi, lo_open):
            arr.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "lo_open", lo_open)

    @classmethod
    def unit(cls, p: int) -> "Box":
        return cls(np.zeros(p), np.ones(p))

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def lengths(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, x) -> np.ndarray:
        """Membership of each row of ``x`` under the split boundary convention."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        above = np.where(self.lo_open, x > self.lo, x >= self.lo)
        return np.all(above & (x <= self.hi), axis=1)

    def split(self, j: int, tau: float) -> tuple["Box", "Box"]:
        """Cut along coordinate ``j`` at an interior point ``tau``."""
        if not self.lo[j] < tau < self.hi[j]:
            raise GeometryError(
                f"split point {tau} not interior to [{self.lo[j]}, {self.hi[j]}]"
            )
        left_hi = self.hi.copy()
        left_hi[j] = tau
        right_lo = self.lo.copy()
        right_lo[j] = tau
        right_open = self.lo_open.copy()
        right_open[j] = True
        return Box(self.lo, left_hi, self.lo_open), Box(right_lo, self.hi, right_open)

    def __eq__(self, other):
        if not isinstance(other, Box):
            return NotImplemented
        return (
            np.array_equal(self.lo, other.lo)
            and np.array_equal(self.hi, other.hi)
            and np.array_equal(self.lo_open, other.lo_open)
        )

    def __hash__(self):
        return hash((self.lo.tobytes(), self.hi.tobytes(), self.lo_open.tobytes()))

    def __repr__(self):
        parts = []
        for a, b, o in zip(self.lo, self.hi, self.lo_open):
            parts.append(f"{'(' if o else '['}{a:g},{b:g}]")
        return "Box(" + "x".join(parts) + ")"

    def to_dict(self) -> dict:
        d = {"lo": self.lo.tolist(), "hi": self.hi.tolist()}
        if self.lo_open.any():
            d["lo_open"] = self.lo_open.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Box":
        return cls(d["lo"], d["hi"], d.get("lo_open"))


@dataclass(frozen=True)
class BoxPartition:
    """An ordered finite cover of the unit cube by disjoint boxes."""

    boxes: tuple[Box, ...]
    check: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        boxes = tuple(self.boxes)
        object.__setattr__(self, "boxes", boxes)
        if not boxes:
            raise GeometryError("a partition needs at least one box")
        p = boxes[0].dim
        if any(b.dim != p for b in boxes):
            raise GeometryError("all boxes must share one dimension")
        if self.check:
            total = sum(b.volume for b in boxes)
            if abs(total - 1.0) > VOLUME_TOL * max(1, len(boxes)):
                raise GeometryError(f"box volumes sum to {total}, not 1")
            _check_disjoint(boxes)

    def __len__(self):
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)

    def __getitem__(self, i):
        return self.boxes[i]

    @property
    def dim(self) -> int:
        return self.boxes[0].dim

    def locate(self, x) -> np.ndarray:
        """Index of the box containing each row of ``x`` (-1 if none)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.full(x.shape[0], -1, dtype=np.int64)
        for r, b in enumerate(self.boxes):
            inside = b.contains(x) & (out < 0)
            out[inside] = r
        return out

    def to_json(self) -> str:
        return json.dumps([b.to_dict() for b in self.boxes])

    @classmethod
    def from_json(cls, text: str) -> "BoxPartition":
        return cls(tuple(Box.from_dict(d) for d in json.loads(text)))


def _check_disjoint(boxes: Sequence[Box]) -> None:
    # interiors must not overlap; touching faces are fine
    for a, b in itertools.combinations(boxes, 2):
        overlap = np.minimum(a.hi, b.hi) - np.maximum(a.lo, b.lo)
        if np.all(overlap > 0):
            raise GeometryError(f"boxes {a} and {b} overlap")


@dataclass(frozen=True)
class SplitRecord:
    node: int
    coord: int
    tau: float


def depth_of(node: int) -> int:
    """Depth of a heap-numbered node (root is node 1 at depth 0)."""
    return node.bit_length() - 1


@dataclass(frozen=True)
class TreePartition:
    """Leaves of a binary split history rooted at ``root``.

    Nodes use heap numbering: root ``1``, children of ``k`` are ``2k`` (left,
    ``x_j <= tau``) and ``2k + 1`` (right). Split records may come in any order.
    """

    root: Box
    splits: tuple[SplitRecord, ...] = ()

    def __post_init__(self):
        splits = tuple(
            s if isinstance(s, SplitRecord) else SplitRecord(int(s[0]), int(s[1]), float(s[2]))
            for s in self.splits
        )
        object.__setattr__(self, "splits", splits)
        self._build()

    def _build(self):
        boxes = {1: self.root}
        internal = {}
        # heap order guarantees parents precede children
        for s in sorted(self.splits, key=lambda s: s.node):
            if s.node not in boxes:
                raise GeometryError(f"split at node {s.node} whose parent was never created")
            if s.node in internal:
                raise GeometryError(f"node {s.node} split twice")
            if not 0 <= s.coord < self.root.dim:
                raise GeometryError(f"coordinate {s.coord} out of range")
            left, right = boxes[s.node].split(s.coord, s.tau)
            internal[s.node] = s
            boxes[2 * s.node] = left
            boxes[2 * s.node + 1] = right
        object.__setattr__(self, "_boxes", boxes)
        object.__setattr__(self, "_internal", internal)

    @property
    def dim(self) -> int:
        return self.root.dim

    def box(self, node: int) -> Box:
        return self._boxes[node]

    @property
    def internal(self) -> dict[int, SplitRecord]:
        return dict(self._internal)

    @cached_property
    def leaf_nodes(self) -> tuple[int, ...]:
        return tuple(sorted(k for k in self._boxes if k not in self._internal))

    @cached_property
    def leaves(self) -> tuple[Box, ...]:
        return tuple(self._boxes[k] for k in self.leaf_nodes)

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_nodes)

    def leaf_depths(self) -> np.ndarray:
        return np.array([depth_of(k) for k in self.leaf_nodes])

    def partition(self) -> BoxPartition:
        """Leaves as a :class:`BoxPartition` (requires ``root`` = unit cube)."""
        return BoxPartition(self.leaves)

    @cached_property
    def flat(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Array form ``(coord, tau, children, leaf_pos)`` indexed by compact node position.

        ``coord`` is -1 at leaves, ``children[0]``/``children[1]`` hold the left
        and right child positions and ``leaf_pos`` the position in
        :attr:`leaf_nodes` (-1 for internal nodes).
        """
        order = sorted(self._boxes)
        pos = {k: i for i, k in enumerate(order)}
        n = len(order)
        coord = np.full(n, -1, dtype=np.int64)
        tau = np.zeros(n)
        left = np.full(n, -1, dtype=np.int64)
        right = np.full(n, -1, dtype=np.int64)
        for k, s in self._internal.items():
            i = pos[k]
            coord[i], tau[i] = s.coord, s.tau
            left[i], right[i] = pos[2 * k], pos[2 * k + 1]
        leaf_pos = np.full(n, -1, dtype=np.int64)
        for r, k in enumerate(self.leaf_nodes):
            leaf_pos[pos[k]] = r
        return coord, tau, np.stack([left, right]), leaf_pos

    def locate(self, x) -> np.ndarray:
        """Position in :attr:`leaf_nodes` of the leaf holding each row of ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        coord, tau, children, leaf_pos = self.flat
        idx = np.zeros(x.shape[0], dtype=np.int64)
        rows = np.arange(x.shape[0])
        for _ in range(self.max_depth()):
            c = coord[idx]
            internal = c >= 0
            if not internal.any():
                break
            go_right = x[rows, np.maximum(c, 0)] > tau[idx]
            idx = np.where(internal, children[go_right.astype(np.int64), idx], idx)
        return leaf_pos[idx]

    def max_depth(self) -> int:
        return max((depth_of(k) for k in self.leaf_nodes), default=0)

    def split_coords(self) -> np.ndarray:
        return np.array([s.coord for s in self.splits], dtype=np.int64)

    def is_s_chopped(self, S: Iterable[int]) -> bool:
        return is_s_chopped(self.partition(), S)

    def to_json(self) -> str:
        return json.dumps(
            {
                "root": self.root.to_dict(),
                "splits": [{"node": s.node, "coord": s.coord, "tau": s.tau} for s in self.splits],
                "leaves": [b.to_dict() for b in self.leaves],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "TreePartition":
        d = json.loads(text)
        root = Box.from_dict(d["root"]) if "root" in d else None
        splits = tuple(SplitRecord(int(s["node"]), int(s["coord"]), float(s["tau"])) for s in d["splits"])
        if root is None:
            raise GeometryError("tree partition text needs a root box")
        return cls(root, splits)


def graft(base: TreePartition, node: int, subtree: TreePartition) -> TreePartition:
    """Replace leaf ``node`` of ``base`` by ``subtree`` (rooted at that leaf's box)."""
    if node not in base.leaf_nodes:
        raise GeometryError(f"node {node} is not a leaf")
    extra = []
    for s in subtree.splits:
        # relabel subtree heap ids under ``node``
        d = depth_of(s.node)
        offset = s.node - (1 << d)
        extra.append(SplitRecord((node << d) + offset, s.coord, s.tau))
    return TreePartition(base.root, base.splits + tuple(extra))


def is_s_chopped(partition: BoxPartition, S: Iterable[int]) -> bool:
    """True iff cuts happen only along coordinates in ``S``.

    Every box must have full length in each coordinate outside ``S`` and
    length below one in each coordinate of ``S``.
    """
    S = sorted(set(S))
    p = partition.dim
    outside = [j for j in range(p) if j not in S]
    for b in partition:
        lengths = b.lengths
        if S and not np.max(lengths[S]) < 1:
            return False
        if outside and not np.min(lengths[outside]) == 1:
            return False
    return True


def hausdorff_box(a: Box, b: Box) -> float:
    """Sup-norm Hausdorff distance between two boxes.

    For axis-aligned boxes this reduces to the largest endpoint displacement.
    """
    if a.dim != b.dim:
        raise GeometryError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return float(max(np.max(np.abs(a.lo - b.lo)), np.max(np.abs(a.hi - b.hi))))


def divergence_matrix(P1: Sequence[Box], P2: Sequence[Box]) -> np.ndarray:
    lo1 = np.array([b.lo for b in P1])
    hi1 = np.array([b.hi for b in P1])
    lo2 = np.array([b.lo for b in P2])
    hi2 = np.array([b.hi for b in P2])
    dlo = np.abs(lo1[:, None, :] - lo2[None, :, :]).max(axis=2)
    dhi = np.abs(hi1[:, None, :] - hi2[None, :, :]).max(axis=2)
    return np.maximum(dlo, dhi)


def _perfect_matching_exists(mask: np.ndarray) -> bool:
    match = maximum_bipartite_matching(csr_matrix(mask.astype(np.int8)), perm_type="column")
    return bool(np.all(match >= 0))


def bottleneck_assignment(D: np.ndarray) -> float:
    """min over permutations of max_r D[r, pi(r)], by threshold bisection."""
    D = np.asarray(D, dtype=float)
    values = np.unique(D)
    lo, hi = 0, values.size - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if _perfect_matching_exists(D <= values[mid]):
            hi = mid
        else:
            lo = mid + 1
    return float(values[lo])


def partition_divergence(P1, P2) -> float:
    """Bottleneck Hausdorff divergence between two partitions of equal size."""
    b1 = tuple(P1.leaves if isinstance(P1, TreePartition) else P1)
    b2 = tuple(P2.leaves if isinstance(P2, TreePartition) else P2)
    if len(b1) != len(b2):
        raise GeometryError(f"partitions have {len(b1)} and {len(b2)} boxes")
    if b1[0].dim != b2[0].dim:
        raise GeometryError("partitions live in different dimensions")
    return bottleneck_assignment(divergence_matrix(b1, b2))


def partition_divergence_bruteforce(P1, P2) -> float:
    """Enumerate all permutations. Only for small partitions."""
    b1 = tuple(P1.leaves if isinstance(P1, TreePartition) else P1)
    b2 = tuple(P2.leaves if isinstance(P2, TreePartition) else P2)
    if len(b1) != len(b2):
        raise GeometryError(f"partitions have {len(b1)} and {len(b2)} boxes")
    D = divergence_matrix(b1, b2)
    J = len(b1)
    rows = np.arange(J)
    return float(min(D[rows, list(perm)].max() for perm in itertools.permutations(range(J))))


def intersect(a: Box, b: Box) -> Box | None:
    """Intersection of two boxes, or ``None`` if it is empty."""
    lo = np.maximum(a.lo, b.lo)
    hi = np.minimum(a.hi, b.hi)
    lo_open = np.where(a.lo > b.lo, a.lo_open, np.where(b.lo > a.lo, b.lo_open, a.lo_open | b.lo_open))
    if np.any(lo > hi) or np.any((lo == hi) & lo_open):
        return None
    return Box(lo, hi, lo_open)
