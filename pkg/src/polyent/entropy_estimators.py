"""Covering and separation counts over finite grids, growth-exponent fits
and the weighted-covering estimator of the weak exponent.

All counts work through ``BallOracle``: a d_N ball around a grid point is
found by querying a k-d tree built on a few checkpoint states of every
orbit (a superset, since d_N dominates the distance at each checkpoint)
and then filtering candidates with the exact d_N.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .dyn_core import DiscreteSystem, ProductPoint, SpaceSpec, base_distance, product_layout

__all__ = [
    "GridTooCoarseError",
    "SampleGrid",
    "CoveringRecord",
    "GrowthFit",
    "WeightedCovering",
    "WeakEstimate",
    "BallOracle",
    "greedy_cover_count",
    "greedy_separated_count",
    "diameter_cover_count",
    "fit_growth",
    "estimate_hpol",
    "weighted_cover_cost",
    "greedy_weighted_cover",
    "estimate_weak_delta",
    "estimate_weak_critical_s",
    "clear_count_cache",
]


class GridTooCoarseError(ValueError):
    """The grid spacing exceeds epsilon / 4."""


@dataclass(frozen=True, eq=False)
class SampleGrid:
    """Finite net of a space; ``resolution`` is the spacing per coordinate."""

    space: SpaceSpec
    resolution: tuple
    points: np.ndarray

    def __post_init__(self):
        pts = self.space.check_array(self.points)
        if pts.shape[0] == 0:
            raise ValueError("grid is empty")
        if len(self.resolution) != self.space.dim:
            raise ValueError("need one resolution per coordinate")
        pts = np.array(pts, dtype=float)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "resolution", tuple(float(v) for v in self.resolution))

    @classmethod
    def regular(cls, space: SpaceSpec, resolution, real_bounds=None) -> "SampleGrid":
        """Product grid with spacing at most ``resolution`` per coordinate.

        ``real_bounds`` restricts the real coordinates to a sub-box.
        """
        if np.isscalar(resolution):
            resolution = (float(resolution),) * space.dim
        bounds = space.real_bounds if real_bounds is None else tuple(real_bounds)
        axes, actual = [], []
        for j in range(space.n_angles):
            n = max(1, math.ceil(1.0 / resolution[j] - 1e-9))
            axes.append(np.arange(n) / n)
            actual.append(1.0 / n)
        for j, (lo, hi) in enumerate(bounds):
            d = resolution[space.n_angles + j]
            n = max(1, math.ceil((hi - lo) / d - 1e-9))
            axes.append(np.linspace(lo, hi, n + 1) if hi > lo else np.array([lo]))
            actual.append((hi - lo) / n if hi > lo else 0.0)
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1) if axes else np.zeros((1, 0))
        return cls(space, tuple(actual), pts)

    @classmethod
    def from_points(cls, space: SpaceSpec, points, resolution) -> "SampleGrid":
        if np.isscalar(resolution):
            resolution = (float(resolution),) * space.dim
        if points and isinstance(points[0], ProductPoint):
            points = np.stack([p.as_array() for p in points])
        return cls(space, tuple(resolution), np.asarray(points, float))

    def union(self, other: "SampleGrid") -> "SampleGrid":
        if other.space != self.space:
            raise ValueError("grids live in different spaces")
        res = tuple(max(a, b) for a, b in zip(self.resolution, other.resolution))
        return SampleGrid(self.space, res, np.concatenate([self.points, other.points]))

    def product(self, other: "SampleGrid") -> "SampleGrid":
        """All pairs of points, laid out in the space of the product system."""
        space, order = product_layout(self.space, other.space)
        a = np.repeat(self.points, other.size, axis=0)
        b = np.tile(other.points, (self.size, 1))
        res = np.array(self.resolution + other.resolution)[order]
        return SampleGrid(space, tuple(res), np.concatenate([a, b], axis=1)[:, order])

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def max_resolution(self) -> float:
        return max(self.resolution) if self.resolution else 0.0

    @property
    def key(self) -> str:
        h = hashlib.sha256(self.points.tobytes())
        h.update(repr(self.resolution).encode())
        return h.hexdigest()[:16]

    def net_gap(self, n: int = 256, seed: int = 0, real_bounds=None) -> float:
        """Largest base distance from random points to the grid (spot check)."""
        rng = np.random.default_rng(seed)
        bounds = self.space.real_bounds if real_bounds is None else real_bounds
        cols = [rng.random(n) for _ in range(self.space.n_angles)]
        cols += [lo + (hi - lo) * rng.random(n) for lo, hi in bounds]
        probe = np.stack(cols, axis=-1)
        tree = _make_tree(self.points, self.space.n_angles, bounds)
        d, _ = tree.query(_shift(probe, self.space.n_angles, bounds), p=np.inf)
        return float(d.max())

    def check_for(self, epsilon: float) -> None:
        if self.max_resolution > epsilon / 4 * (1 + 1e-9):
            raise GridTooCoarseError(
                f"grid spacing {self.max_resolution:.4g} exceeds epsilon/4 = {epsilon / 4:.4g}"
            )


def _shift(emb: np.ndarray, n_angles: int, bounds) -> np.ndarray:
    out = np.array(emb, dtype=float)
    for j, (lo, _) in enumerate(bounds):
        out[:, n_angles + j] -= lo
    return out


def _make_tree(points: np.ndarray, n_angles: int, bounds) -> cKDTree:
    box = [1.0] * n_angles + [2.0 * (hi - lo) + 1.0 for lo, hi in bounds]
    data = _shift(points, n_angles, bounds)
    data[:, :n_angles] = np.mod(data[:, :n_angles], 1.0)
    return cKDTree(data, boxsize=box)


@dataclass(frozen=True)
class CoveringRecord:
    N: int
    epsilon: float
    count: int
    kind: str
    method: str = "greedy"
    system: str = ""
    seconds: float = 0.0
    centers: tuple = field(default=(), repr=False)


@dataclass(frozen=True)
class GrowthFit:
    slope: float
    intercept: float
    r_squared: float
    n_range: tuple
    counts: tuple = ()
    degenerate: bool = False


@dataclass(frozen=True)
class WeightedCovering:
    """Balls given by (center, order); ``cost(s)`` is the sum of order^-s."""

    elements: tuple
    n_min: int = 1

    def __post_init__(self):
        for _, n in self.elements:
            if int(n) < max(1, self.n_min):
                raise ValueError("every order must be at least n_min")

    @property
    def orders(self) -> np.ndarray:
        return np.array([int(n) for _, n in self.elements], dtype=float)


class BallOracle:
    """Exact d_N balls around grid points, with caching.

    Exact systems evaluate orbit segments on demand. Other systems have
    every grid orbit iterated once up front (bounded by ``max_bytes``).
    """

    def __init__(self, sys: DiscreteSystem, grid: SampleGrid, N: int, n_checkpoints: int = 9, max_bytes: int = 2**30, chunk_bytes: int = 2**26):
        if N < 1:
            raise ValueError("N must be >= 1")
        if grid.space != sys.space:
            raise ValueError("grid and system spaces differ")
        self.sys, self.grid, self.N = sys, grid, int(N)
        self.na = sys.space.n_angles
        self.chunk_bytes = chunk_bytes
        pts = grid.points
        n, dim = pts.shape
        self.times = np.unique(np.linspace(0, self.N, min(self.N + 1, n_checkpoints)).round().astype(int))
        self._orbits = None
        if sys.exact:
            ck = sys.orbit_block(pts, self.times)
        else:
            need = n * (self.N + 1) * dim * 8
            if need > max_bytes:
                raise MemoryError(f"orbit table needs {need / 2**20:.0f} MiB; use a smaller grid or N")
            self._orbits = sys.orbit_block(pts, self.N)
            ck = self._orbits[:, self.times, :]
        # embedding: checkpoint states side by side, reals shifted into [0, L)
        bounds = self._emb_bounds(ck)
        emb = ck.reshape(n, -1)
        na_all = [j for t in range(len(self.times)) for j in range(t * dim, t * dim + self.na)]
        self._perm = np.array(na_all + [j for j in range(emb.shape[1]) if j not in set(na_all)], dtype=int)
        self._n_ang_emb = len(na_all)
        self._bounds = bounds
        self.tree = _make_tree(emb[:, self._perm], self._n_ang_emb, bounds)
        self._cache: dict = {}

    def _emb_bounds(self, ck):
        dim = ck.shape[-1]
        bounds = []
        for t in range(ck.shape[1]):
            for j in range(self.na, dim):
                col = ck[:, t, j]
                bounds.append((float(col.min()), float(col.max())))
        return bounds

    def orbits(self, idx: np.ndarray, times: np.ndarray | None = None) -> np.ndarray:
        """Orbit states of grid points ``idx`` at ``times`` (default 0..N).

        Angles are left unwrapped; ``base_distance`` reduces them.
        """
        if times is None:
            times = np.arange(self.N + 1)
        if self._orbits is not None:
            return self._orbits[idx][:, times, :]
        return self.sys.power(self.grid.space.check_array(self.grid.points[idx]), times)

    def _stages(self) -> list[np.ndarray]:
        out, stride = [], max(1, (self.N + 1) // 32)
        while stride > 1:
            out.append(np.arange(0, self.N + 1, stride))
            stride //= 8
        out.append(np.arange(self.N + 1))
        return out

    def distances(self, i: int, idx: np.ndarray, radius: float | None = None) -> np.ndarray:
        """Exact d_N from grid point i to grid points idx.

        With ``radius`` set, entries that already reach the radius on a
        coarse time subset are returned as that partial max (>= radius).
        """
        idx = np.asarray(idx, dtype=int)
        out = np.zeros(idx.size)
        alive = np.arange(idx.size)
        stages = self._stages() if radius is not None else [np.arange(self.N + 1)]
        dim = self.grid.space.dim
        for times in stages:
            oi = self.orbits(np.array([i]), times)[0]
            per = max(1, self.chunk_bytes // max(1, times.size * dim * 8))
            for s in range(0, alive.size, per):
                sel = alive[s : s + per]
                oj = self.orbits(idx[sel], times)
                out[sel] = np.maximum(out[sel], base_distance(self.na, oi[None], oj).max(axis=-1))
            if radius is not None:
                alive = alive[out[alive] < radius]
                if alive.size == 0:
                    break
        return out

    def candidates(self, i: int, radius: float) -> np.ndarray:
        q = self.tree.data[i]
        cand = self.tree.query_ball_point(q, radius * (1 + 1e-9) + 1e-12, p=np.inf)
        return np.asarray(cand, dtype=int)

    def ball(self, i: int, radius: float) -> np.ndarray:
        """Sorted indices j with d_N(i, j) < radius."""
        key = (int(i), float(radius))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        cand = self.candidates(i, radius)
        d = self.distances(i, cand, radius)
        out = np.sort(cand[d < radius])
        self._cache[key] = out
        return out


_oracles: dict = {}
_counts: dict = {}


def clear_count_cache() -> None:
    _oracles.clear()
    _counts.clear()


def _oracle(sys, grid, N) -> BallOracle:
    key = (sys.key, grid.key, int(N))
    o = _oracles.get(key)
    if o is None:
        if len(_oracles) > 8:
            _oracles.pop(next(iter(_oracles)))
        o = BallOracle(sys, grid, N)
        _oracles[key] = o
    return o


def _scan_centers(oracle: BallOracle, radius: float) -> list[int]:
    """Lowest uncovered index becomes a center; removes its open ball."""
    n = oracle.grid.size
    covered = np.zeros(n, dtype=bool)
    centers = []
    i = 0
    while True:
        free = np.flatnonzero(~covered[i:])
        if free.size == 0:
            break
        i += int(free[0])
        centers.append(i)
        covered[oracle.ball(i, radius)] = True
        covered[i] = True
    return centers


_MAX_COVERAGE_LIMIT = 4096


def _max_coverage_centers(oracle: BallOracle, radius: float) -> list[int]:
    """Classical greedy set cover: largest number of newly covered points."""
    n = oracle.grid.size
    balls = [oracle.ball(i, radius) for i in range(n)]
    covered = np.zeros(n, dtype=bool)
    gain = np.array([b.size for b in balls])
    centers = []
    while not covered.all():
        i = int(np.argmax(gain))  # lowest index on ties
        centers.append(i)
        covered[balls[i]] = True
        gain = np.array([int((~covered[b]).sum()) for b in balls])
    return centers


def _record(kind, sys, grid, N, eps, centers, t0, method="greedy"):
    return CoveringRecord(int(N), float(eps), len(centers), kind, method, sys.name, time.perf_counter() - t0, tuple(centers))


def _separated_centers(sys, grid, N, epsilon) -> list[int]:
    key = (sys.key, grid.key, int(N), float(epsilon), "S")
    if key not in _counts:
        _counts[key] = _scan_centers(_oracle(sys, grid, N), epsilon)
    return _counts[key]


def _cover_centers(sys, grid, N, epsilon) -> list[int]:
    key = (sys.key, grid.key, int(N), float(epsilon), "G")
    if key not in _counts:
        best = _separated_centers(sys, grid, N, epsilon)
        if grid.size <= _MAX_COVERAGE_LIMIT:
            alt = _max_coverage_centers(_oracle(sys, grid, N), epsilon)
            if len(alt) < len(best):
                best = alt
        _counts[key] = list(best)
    return _counts[key]


def greedy_separated_count(sys: DiscreteSystem, grid: SampleGrid, N: int, epsilon: float) -> CoveringRecord:
    """Maximal (N, eps)-separated subset of the grid, scanned in index order."""
    t0 = time.perf_counter()
    grid.check_for(epsilon)
    return _record("S", sys, grid, N, epsilon, _separated_centers(sys, grid, N, epsilon), t0)


def greedy_cover_count(sys: DiscreteSystem, grid: SampleGrid, N: int, epsilon: float) -> CoveringRecord:
    """Greedy cover of the grid by open d_N balls of radius eps at grid points.

    Uses the smaller of the scanning cover and (on small grids) the
    max-coverage greedy cover.
    """
    t0 = time.perf_counter()
    grid.check_for(epsilon)
    return _record("G", sys, grid, N, epsilon, _cover_centers(sys, grid, N, epsilon), t0)


def diameter_cover_count(sys: DiscreteSystem, grid: SampleGrid, N: int, epsilon: float) -> CoveringRecord:
    """Cover by sets of d_N diameter <= eps: open balls of radius eps / 2."""
    t0 = time.perf_counter()
    grid.check_for(epsilon)
    return _record("D", sys, grid, N, epsilon, _cover_centers(sys, grid, N, epsilon / 2), t0)


def fit_growth(ns: Sequence[int], counts: Sequence[float]) -> GrowthFit:
    """Least-squares line through (log N, log count)."""
    ns = np.asarray(ns, float)
    counts = np.asarray(counts, float)
    if np.unique(ns).size < 4:
        raise ValueError("a growth fit needs at least 4 distinct N values")
    if np.any(counts < 1):
        raise ValueError("counts must be >= 1")
    x, y = np.log(ns), np.log(counts)
    if np.all(counts == counts[0]):
        return GrowthFit(0.0, float(y[0]), 1.0, (int(ns.min()), int(ns.max())), tuple(counts), degenerate=bool(counts[0] == 1))
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return GrowthFit(float(slope), float(intercept), float(min(1.0, max(0.0, r2))), (int(ns.min()), int(ns.max())), tuple(counts))


def estimate_hpol(sys: DiscreteSystem, grid: SampleGrid, epsilon: float, n_list: Sequence[int]) -> GrowthFit:
    """Fitted exponent of the greedy cover count over the N ladder."""
    n_list = [int(n) for n in n_list]
    if len(set(n_list)) < 4:
        raise ValueError("n_list needs at least 4 distinct values")
    counts = [greedy_cover_count(sys, grid, n, epsilon).count for n in n_list]
    return fit_growth(n_list, counts)


# ---------------------------------------------------------------------------
# weak exponent


def weighted_cover_cost(C: WeightedCovering, s: float) -> float:
    """M(C, s) = sum over elements of order^-s (multiplicity counts)."""
    if s < 0:
        raise ValueError("s must be nonnegative")
    return math.fsum(float(n) ** (-s) for _, n in C.elements)


def greedy_weighted_cover(sys: DiscreteSystem, grid: SampleGrid, epsilon: float, s: float, n_min: int, n_levels: int = 4) -> WeightedCovering:
    """Greedy cover by balls of orders n_min * 2^j, j < n_levels.

    Centers are taken in index order among uncovered points; each picks
    the order with the least cost per newly covered point.
    """
    if grid.size == 0:
        raise ValueError("grid is empty")
    grid.check_for(epsilon)
    orders = [int(n_min) * 2**j for j in range(n_levels)]
    oracles = [_oracle(sys, grid, n) for n in orders]
    covered = np.zeros(grid.size, dtype=bool)
    elements = []
    i = 0
    while True:
        free = np.flatnonzero(~covered[i:])
        if free.size == 0:
            break
        i += int(free[0])
        best = None
        for n, o in zip(orders, oracles):
            b = o.ball(i, epsilon)
            new = int((~covered[b]).sum()) + (0 if covered[i] or i in b else 1)
            score = float(n) ** (-s) / max(new, 1)
            if best is None or score < best[0] - 1e-15 * best[0]:
                best = (score, n, b)
        _, n, b = best
        covered[b] = True
        covered[i] = True
        elements.append((i, n))
    return WeightedCovering(tuple(elements), int(n_min))


def estimate_weak_delta(sys: DiscreteSystem, grid: SampleGrid, epsilon: float, s: float, N_min: int, n_levels: int = 4) -> float:
    """Cost of the greedy weighted cover: an upper bound on the infimum."""
    return weighted_cover_cost(greedy_weighted_cover(sys, grid, epsilon, s, N_min, n_levels), s)


@dataclass(frozen=True)
class WeakEstimate:
    s_c: float
    interval: tuple
    flags: tuple = ()
    trace: tuple = ()


def _trend(sys, grid, epsilon, s, ladder, n_levels):
    vals = [estimate_weak_delta(sys, grid, epsilon, s, n, n_levels) for n in ladder]
    slope = float(np.polyfit(np.log(ladder), np.log(vals), 1)[0])
    d = np.diff(vals)
    monotone = bool(np.all(d >= -1e-12 * np.abs(vals[:-1])) or np.all(d <= 1e-12 * np.abs(vals[:-1])))
    return slope, vals, monotone


def estimate_weak_critical_s(
    sys: DiscreteSystem,
    grid: SampleGrid,
    epsilon: float,
    ladder: Sequence[int] = (8, 16, 32, 64),
    s_max: float | None = None,
    resolution: float = 0.1,
    dead_band: float = 0.05,
    n_levels: int = 4,
) -> WeakEstimate:
    """Bisection on s using the trend of the weighted cost over N_min.

    A log-log trend above ``dead_band`` reads as divergence (s below the
    critical value), below ``-dead_band`` as vanishing.
    """
    ladder = [int(n) for n in ladder]
    if len(ladder) < 2:
        raise ValueError("ladder needs at least two N_min values")
    lo, hi = 0.0, float(sys.space.dim + 1 if s_max is None else s_max)
    flags, trace = [], []
    slope, vals, mono = _trend(sys, grid, epsilon, hi, ladder, n_levels)
    trace.append((hi, slope, tuple(vals)))
    if not mono:
        flags.append("non-monotone")
    if slope > -dead_band:
        flags.append("no-vanishing")
        return WeakEstimate(hi, (hi, float("inf")), tuple(flags), tuple(trace))
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        slope, vals, mono = _trend(sys, grid, epsilon, mid, ladder, n_levels)
        trace.append((mid, slope, tuple(vals)))
        if not mono and "non-monotone" not in flags:
            flags.append("non-monotone")
        if slope > dead_band:
            lo = mid
        elif slope < -dead_band:
            hi = mid
        else:
            lo, hi = max(lo, mid - resolution / 2), min(hi, mid + resolution / 2)
            break
    return WeakEstimate(0.5 * (lo + hi), (lo, hi), tuple(flags), tuple(trace))
