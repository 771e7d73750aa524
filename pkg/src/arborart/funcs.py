"""Piecewise anisotropic target functions and synthetic generators.

A :class:`PiecewiseAnisoSpec` describes a function on ``[0, 1]^p`` that only
depends on the coordinates ``S0`` and is smooth (anisotropic Hölder with
exponents ``alphas[r]``) inside each box of a tree partition of ``[0, 1]^d``.
Jumps are allowed across box boundaries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import Box, SplitRecord, TreePartition

Piece = Callable[[np.ndarray], np.ndarray]


def harmonic_mean(alpha) -> float:
    """``d / sum_j 1/alpha_j``."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.size == 0:
        raise ValueError("empty smoothness vector")
    return float(alpha.size / np.sum(1.0 / alpha))


def sim_function(x, p: int | None = None) -> np.ndarray:
    """Test function with a jump across every coordinate hyperplane ``x_j = 1/2``.

    ``f(x) = 1 + (1/p) * (sum_j s_j 1{x_j >= 1/2}) * (sum_j (x_j - 1/2)^2)`` with
    alternating signs ``s_j = -1, +1, -1, ...``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if p is None:
        p = x.shape[1]
    if x.shape[1] != p:
        raise ValueError(f"expected {p} columns, got {x.shape[1]}")
    signs = np.where(np.arange(1, p + 1) % 2 == 0, 1.0, -1.0)
    jump = (x >= 0.5).astype(float) @ signs
    return 1.0 + jump * np.sum((x - 0.5) ** 2, axis=1) / p


def doppler(x) -> np.ndarray:
    """Spatially inhomogeneous 1-d test signal ``sqrt(x(1-x)) sin(2.1 pi/(x + 0.05))``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    return np.sqrt(x * (1 - x)) * np.sin(2.1 * np.pi / (x + 0.05))


def packing_kernel(x, d: int | None = None) -> np.ndarray:
    """Signed pyramid kernel on ``[-1, 1]^d``.

    Each orthant of the cube carries a pyramid of height 1/2 over its unit
    sub-cube, with sign ``(-1)^(number of negative coordinates)``. Zero outside
    the cube and on every orthant face.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if d is not None and x.shape[1] != d:
        raise ValueError(f"expected {d} columns, got {x.shape[1]}")
    y = np.abs(x)
    height = 0.5 - np.max(np.abs(y - 0.5), axis=1)
    sign = np.where(np.sum(x < 0, axis=1) % 2 == 0, 1.0, -1.0)
    inside = np.all(y <= 1.0, axis=1)
    return np.where(inside, sign * height, 0.0)


def kernel_integrals(d: int, n_per_axis: int = 256, chunk: int = 1 << 20) -> tuple[float, float]:
    """Midpoint-rule integrals of the packing kernel and its square over ``[-1, 1]^d``."""
    h = 2.0 / n_per_axis
    axis = -1.0 + h * (np.arange(n_per_axis) + 0.5)
    total = n_per_axis**d
    s1 = s2 = 0.0
    for start in range(0, total, chunk):
        idx = np.arange(start, min(total, start + chunk))
        pts = np.stack([axis[(idx // n_per_axis**k) % n_per_axis] for k in range(d)], axis=1)
        v = packing_kernel(pts)
        s1 += v.sum()
        s2 += (v * v).sum()
    return s1 * h**d, s2 * h**d


def kernel_square_integral(d: int) -> float:
    """Closed form ``2^d / (2 (d+1) (d+2))`` of the squared-kernel integral."""
    return 2.0**d / (2 * (d + 1) * (d + 2))


def sparse_embed(h: Piece, S: Sequence[int], p: int) -> Piece:
    """Lift ``h`` on ``[0,1]^d`` to ``x -> h(x[:, S])`` on ``[0,1]^p``."""
    S = [int(j) for j in S]
    if len(set(S)) != len(S) or any(not 0 <= j < p for j in S):
        raise ValueError(f"S={S} is not a set of coordinates of [0,1]^{p}")

    def lifted(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return h(x[:, S])

    return lifted


# built-in pieces --------------------------------------------------------------


@dataclass(frozen=True)
class ConstantPiece:
    value: float

    def __call__(self, x):
        return np.full(np.atleast_2d(x).shape[0], float(self.value))

    def to_dict(self):
        return {"type": "constant", "value": self.value}


@dataclass(frozen=True)
class PowerPiece:
    """``sum_j coef_j |x_j - shift_j|^exp_j``."""

    coef: tuple[float, ...]
    exp: tuple[float, ...]
    shift: tuple[float, ...] | None = None

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        shift = np.zeros(x.shape[1]) if self.shift is None else np.asarray(self.shift)
        return np.abs(x - shift) ** np.asarray(self.exp) @ np.asarray(self.coef, dtype=float)

    def to_dict(self):
        d = {"type": "power", "coef": list(self.coef), "exp": list(self.exp)}
        if self.shift is not None:
            d["shift"] = list(self.shift)
        return d


@dataclass(frozen=True)
class SimPiece:
    def __call__(self, x):
        return sim_function(x)

    def to_dict(self):
        return {"type": "sim"}


@dataclass(frozen=True)
class DopplerPiece:
    coord: int = 0

    def __call__(self, x):
        return doppler(np.atleast_2d(x)[:, self.coord])

    def to_dict(self):
        return {"type": "doppler", "coord": self.coord}


def piece_from_dict(d: dict) -> Piece:
    kind = d["type"]
    if kind == "constant":
        return ConstantPiece(float(d["value"]))
    if kind == "power":
        shift = tuple(d["shift"]) if "shift" in d else None
        return PowerPiece(tuple(d["coef"]), tuple(d["exp"]), shift)
    if kind == "sim":
        return SimPiece()
    if kind == "doppler":
        return DopplerPiece(int(d.get("coord", 0)))
    raise ValueError(f"unknown piece type {kind!r}")


# piecewise specification ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PiecewiseAnisoSpec:
    """Piecewise anisotropic function on ``[0,1]^p`` depending on ``x[:, S0]``.

    Parameters
    ----------
    p : int
        Ambient dimension.
    S0 : sequence of int
        Active coordinates, ``d = len(S0)``.
    partition : TreePartition
        Split history on ``[0,1]^d`` whose leaves are the pieces.
    alphas : array, shape (R, d)
        Smoothness vector of each piece, all with the same harmonic mean.
    lam : float
        Hölder coefficient.
    pieces : sequence of callables
        ``pieces[r]`` maps an ``(n, d)`` array of active coordinates to values;
        it is only evaluated on leaf ``r``.
    """

    p: int
    S0: tuple[int, ...]
    partition: TreePartition
    alphas: np.ndarray
    lam: float
    pieces: tuple[Piece, ...]

    def __post_init__(self):
        S0 = tuple(int(j) for j in self.S0)
        object.__setattr__(self, "S0", S0)
        object.__setattr__(self, "pieces", tuple(self.pieces))
        alphas = np.atleast_2d(np.asarray(self.alphas, dtype=float))
        object.__setattr__(self, "alphas", alphas)
        d = len(S0)
        if len(set(S0)) != d or any(not 0 <= j < self.p for j in S0):
            raise ValueError(f"S0={S0} is not a set of coordinates of [0,1]^{self.p}")
        if self.partition.dim != d:
            raise ValueError("partition dimension must equal |S0|")
        R = self.partition.n_leaves
        if alphas.shape != (R, d):
            raise ValueError(f"alphas must have shape ({R}, {d})")
        if np.any(alphas <= 0) or np.any(alphas > 1):
            raise ValueError("smoothness entries must lie in (0, 1]")
        means = [harmonic_mean(a) for a in alphas]
        if max(means) - min(means) > 1e-12:
            raise ValueError(f"pieces must share one harmonic-mean smoothness, got {means}")
        if len(self.pieces) != R:
            raise ValueError(f"need {R} piece functions")

    @property
    def d(self) -> int:
        return len(self.S0)

    @property
    def R(self) -> int:
        return self.partition.n_leaves

    @property
    def abar(self) -> float:
        return harmonic_mean(self.alphas[0])

    @property
    def boxes(self) -> tuple[Box, ...]:
        return self.partition.leaves

    def cut_coordinates(self) -> tuple[int, ...]:
        """Ambient coordinates along which the pieces are separated."""
        return tuple(sorted({self.S0[s.coord] for s in self.partition.splits}))

    def extended_partition(self) -> TreePartition:
        """The same split history lifted to ``[0,1]^p`` (full length off ``S0``)."""
        splits = tuple(SplitRecord(s.node, self.S0[s.coord], s.tau) for s in self.partition.splits)
        return TreePartition(Box.unit(self.p), splits)

    def piece_index(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.partition.locate(x[:, list(self.S0)])

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        xs = x[:, list(self.S0)]
        r = self.partition.locate(xs)
        out = np.empty(x.shape[0])
        for k in np.unique(r):
            sel = r == k
            out[sel] = self.pieces[k](xs[sel])
        return out

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "S0": list(self.S0),
            "lambda": self.lam,
            "splits": [{"node": s.node, "coord": s.coord, "tau": s.tau} for s in self.partition.splits],
            "alphas": self.alphas.tolist(),
            "pieces": [piece.to_dict() for piece in self.pieces],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PiecewiseAnisoSpec":
        S0 = tuple(d["S0"])
        splits = tuple(SplitRecord(int(s["node"]), int(s["coord"]), float(s["tau"])) for s in d.get("splits", []))
        partition = TreePartition(Box.unit(len(S0)), splits)
        pieces = tuple(piece_from_dict(q) for q in d["pieces"])
        return cls(int(d["p"]), S0, partition, np.asarray(d["alphas"]), float(d["lambda"]), pieces)


def save_spec(spec: PiecewiseAnisoSpec, path) -> None:
    with open(path, "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2)


def load_spec(path) -> PiecewiseAnisoSpec:
    with open(path) as fh:
        return PiecewiseAnisoSpec.from_dict(json.load(fh))


def smooth_spec(pieces: Piece, alpha, lam: float = 1.0, p: int | None = None, S0=None) -> PiecewiseAnisoSpec:
    """Single-piece spec (no internal boundaries)."""
    alpha = np.asarray(alpha, dtype=float)
    d = alpha.size
    S0 = tuple(range(d)) if S0 is None else tuple(S0)
    p = d if p is None else p
    return PiecewiseAnisoSpec(p, S0, TreePartition(Box.unit(d)), alpha[None, :], lam, (pieces,))


def sim_spec(p: int, lam: float = 1.0) -> PiecewiseAnisoSpec:
    """The simulation function as a piecewise spec on its 2^p orthants."""
    splits = []
    nodes = [1]
    for j in range(p):
        nxt = []
        for node in nodes:
            splits.append(SplitRecord(node, j, 0.5))
            nxt += [2 * node, 2 * node + 1]
        nodes = nxt
    partition = TreePartition(Box.unit(p), tuple(splits))
    R = partition.n_leaves
    return PiecewiseAnisoSpec(p, tuple(range(p)), partition, np.ones((R, p)), lam, (SimPiece(),) * R)


def validate_holder(spec: PiecewiseAnisoSpec, samples_per_box: int = 10_000, rng_seed=None):
    """Largest observed Hölder ratio over random pairs within each piece.

    Returns
    -------
    ratio : float
        ``max |h(x) - h(y)| / sum_j |x_j - y_j|^alpha_rj`` over sampled pairs.
    ok : bool
        ``ratio <= lam * (1 + 1e-9)``.
    """
    rng = np.random.default_rng(rng_seed)
    worst = 0.0
    for r, box in enumerate(spec.boxes):
        if np.any(box.lengths == 0):
            continue
        # right-open boxes exclude their lower face; sampling interiors avoids it
        x = box.lo + box.lengths * rng.random((samples_per_box, spec.d))
        y = box.lo + box.lengths * rng.random((samples_per_box, spec.d))
        num = np.abs(spec.pieces[r](x) - spec.pieces[r](y))
        den = np.sum(np.abs(x - y) ** spec.alphas[r], axis=1)
        good = den > 0
        if good.any():
            worst = max(worst, float(np.max(num[good] / den[good])))
    return worst, worst <= spec.lam * (1 + 1e-9)


# packing bumps ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BumpFamily:
    """Bumps of the packing kernel on a per-piece mesh.

    Piece ``r`` is cut into ``counts[r][j]`` equal cells along coordinate ``j``,
    of width ``mesh[r][j] = len_j / ceil(len_j * delta^(-1/alpha_rj))``. Each
    cell whose bit in ``omega`` is set carries
    ``(delta/4) K((x - center) / (mesh/2))``.
    """

    boxes: tuple[Box, ...]
    alphas: np.ndarray
    delta: float
    omega: np.ndarray = None
    counts: tuple[np.ndarray, ...] = field(init=False)
    mesh: tuple[np.ndarray, ...] = field(init=False)
    offsets: np.ndarray = field(init=False)

    def __post_init__(self):
        alphas = np.atleast_2d(np.asarray(self.alphas, dtype=float))
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")
        counts, mesh = [], []
        for box, a in zip(self.boxes, alphas):
            c = np.maximum(1, np.ceil(box.lengths * self.delta ** (-1.0 / a))).astype(np.int64)
            counts.append(c)
            mesh.append(box.lengths / c)
        sizes = np.array([int(np.prod(c)) for c in counts])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        omega = np.ones(offsets[-1], dtype=bool) if self.omega is None else np.asarray(self.omega, dtype=bool)
        if omega.size != offsets[-1]:
            raise ValueError(f"omega needs {offsets[-1]} bits, got {omega.size}")
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "counts", tuple(counts))
        object.__setattr__(self, "mesh", tuple(mesh))
        object.__setattr__(self, "offsets", offsets)

    @property
    def n_bumps(self) -> int:
        return int(self.offsets[-1])

    def cell_center(self, r: int, cell: Sequence[int]) -> np.ndarray:
        box = self.boxes[r]
        return box.lo + (2 * np.asarray(cell) + 1) * self.mesh[r] / 2


def bump_function(spec: BumpFamily, x) -> np.ndarray:
    """Sum of the active bumps at each row of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out = np.zeros(x.shape[0])
    for r, box in enumerate(spec.boxes):
        inside = box.contains(x)
        if not inside.any():
            continue
        xr = x[inside]
        u = spec.mesh[r]
        cell = np.clip(np.floor((xr - box.lo) / u).astype(np.int64), 0, spec.counts[r] - 1)
        flat = np.ravel_multi_index(tuple(cell.T), tuple(spec.counts[r]))
        active = spec.omega[spec.offsets[r] + flat]
        center = box.lo + (2 * cell + 1) * u / 2
        vals = spec.delta / 4 * packing_kernel((xr - center) / (u / 2))
        out[inside] = np.where(active, vals, 0.0)
    return out
