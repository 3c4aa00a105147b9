"""State types, base metrics and Bowen dynamical metrics on T^a x R^b.

States are handled in two forms. ``ProductPoint`` is the immutable
user-facing value. Internally, batches of states are float arrays of
shape ``(n, a + b)`` with the angle columns first; angles are kept in
``[0, 1)``.

A ``DiscreteSystem`` wraps a vectorised time-1 map. Systems whose n-th
iterate has a closed form also provide ``power``, which lets orbit
segments be evaluated for all times in one call.
"""

from __future__ import annotations

import hashlib
import json
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "ProductPoint",
    "SpaceSpec",
    "DiscreteSystem",
    "OrbitCache",
    "base_metric",
    "base_distance",
    "wrap_angles",
    "orbit",
    "orbit_array",
    "dynamical_metric",
    "dynamical_distance",
    "default_orbit_cache",
    "product_of",
    "power_of",
    "product_layout",
]


class DimensionError(ValueError):
    """Raised when a state does not match the dimensions of its space."""


def wrap_angles(values):
    """Reduce angles into [0, 1). Handles the -0.0 and 1.0 rounding edge."""
    out = np.mod(values, 1.0)
    # np.mod(-1e-18, 1.0) rounds to 1.0
    return np.where(out >= 1.0, 0.0, out) + 0.0


@dataclass(frozen=True)
class ProductPoint:
    """A point of T^a x R^b with angles normalised into [0, 1)."""

    angles: tuple = ()
    reals: tuple = ()

    def __post_init__(self):
        angles = tuple(float(v) for v in wrap_angles(np.asarray(self.angles, dtype=float).ravel()))
        reals = tuple(float(v) for v in np.asarray(self.reals, dtype=float).ravel())
        if not all(np.isfinite(angles)) or not all(np.isfinite(reals)):
            raise ValueError("ProductPoint coordinates must be finite")
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "reals", reals)

    @property
    def dims(self) -> tuple[int, int]:
        return len(self.angles), len(self.reals)

    def as_array(self) -> np.ndarray:
        return np.array(self.angles + self.reals, dtype=float)

    @classmethod
    def from_array(cls, row, n_angles: int) -> "ProductPoint":
        row = np.asarray(row, dtype=float).ravel()
        return cls(tuple(row[:n_angles]), tuple(row[n_angles:]))


@dataclass(frozen=True)
class SpaceSpec:
    """A product of ``n_angles`` circles and closed real intervals."""

    n_angles: int
    real_bounds: tuple = ()

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.real_bounds)
        for lo, hi in bounds:
            if not lo <= hi:
                raise ValueError(f"empty real interval [{lo}, {hi}]")
        if self.n_angles < 0:
            raise ValueError("n_angles must be nonnegative")
        object.__setattr__(self, "real_bounds", bounds)

    @property
    def n_reals(self) -> int:
        return len(self.real_bounds)

    @property
    def dim(self) -> int:
        return self.n_angles + self.n_reals

    def check_point(self, x: ProductPoint) -> None:
        if x.dims != (self.n_angles, self.n_reals):
            raise DimensionError(
                f"point has dims {x.dims}, space expects {(self.n_angles, self.n_reals)}"
            )

    def check_array(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        if states.ndim == 1:
            states = states[None, :]
        if states.shape[-1] != self.dim:
            raise DimensionError(f"state width {states.shape[-1]} != space dim {self.dim}")
        return states

    def contains(self, states: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        states = self.check_array(states)
        ok = np.ones(states.shape[0], dtype=bool)
        for j, (lo, hi) in enumerate(self.real_bounds):
            col = states[:, self.n_angles + j]
            ok &= (col >= lo - tol) & (col <= hi + tol)
        return ok

    def to_dict(self) -> dict:
        return {"n_angles": self.n_angles, "real_bounds": [list(b) for b in self.real_bounds]}


def base_distance(n_angles: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Vectorised max-coordinate distance; broadcasts over leading axes."""
    diff = np.subtract(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    if diff.shape[-1] == 0:
        return np.zeros(diff.shape[:-1])
    if n_angles:
        ang = diff[..., :n_angles]
        ang -= np.rint(ang)
    np.abs(diff, out=diff)
    return diff.max(axis=-1)


def base_metric(space: SpaceSpec, x: ProductPoint, y: ProductPoint) -> float:
    """Max over coordinates of circle distance (angles) and |difference| (reals)."""
    space.check_point(x)
    space.check_point(y)
    return float(base_distance(space.n_angles, x.as_array(), y.as_array()))


def _normalise(states: np.ndarray, n_angles: int) -> np.ndarray:
    if n_angles:
        states = np.array(states, dtype=float, copy=True)
        states[..., :n_angles] = wrap_angles(states[..., :n_angles])
    return states


@dataclass(frozen=True, eq=False)
class DiscreteSystem:
    """An evaluatable time-1 map on a ``SpaceSpec``.

    Args:
        space: state space.
        step: maps an ``(n, dim)`` array to its image under the time-1 map.
        power: optional closed form ``power(states, times)`` returning the
            array of shape ``(n, len(times), dim)``; marks the system exact.
        name: short label used in reports.
        params: JSON-serialisable parameters, hashed into ``key``.
    """

    space: SpaceSpec
    step: Callable[[np.ndarray], np.ndarray]
    power: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    name: str = "system"
    params: dict = field(default_factory=dict)

    @property
    def exact(self) -> bool:
        return self.power is not None

    @property
    def key(self) -> str:
        blob = json.dumps({"name": self.name, "params": self.params}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def apply(self, states: np.ndarray) -> np.ndarray:
        states = self.space.check_array(states)
        return _normalise(self.step(states), self.space.n_angles)

    def iterate(self, states: np.ndarray, n: int) -> np.ndarray:
        """The n-th iterate of each state (n >= 0)."""
        states = self.space.check_array(states)
        if n < 0:
            raise ValueError("n must be nonnegative")
        if self.power is not None:
            return _normalise(self.power(states, np.array([n]))[:, 0, :], self.space.n_angles)
        out = states
        for _ in range(n):
            out = self.apply(out)
        return out

    def orbit_block(self, states: np.ndarray, times: Sequence[int] | int) -> np.ndarray:
        """States at the requested times, shape ``(n, len(times), dim)``.

        An integer ``times`` means all times ``0..times``.
        """
        states = self.space.check_array(states)
        if np.isscalar(times):
            times = np.arange(int(times) + 1)
        times = np.asarray(times, dtype=int)
        if times.size and times.min() < 0:
            raise ValueError("times must be nonnegative")
        if self.power is not None:
            return _normalise(self.power(states, times), self.space.n_angles)
        t_max = int(times.max()) if times.size else 0
        out = np.empty((states.shape[0], times.size, self.space.dim))
        slot = {int(t): [] for t in times}
        for j, t in enumerate(times):
            slot[int(t)].append(j)
        cur = _normalise(states, self.space.n_angles)
        for t in range(t_max + 1):
            for j in slot.get(t, ()):
                out[:, j, :] = cur
            if t < t_max:
                cur = self.apply(cur)
        return out


def product_layout(a: SpaceSpec, b: SpaceSpec) -> tuple[SpaceSpec, np.ndarray]:
    """Space of a x b and the column order taking (a-columns, b-columns) to it.

    The product keeps all angles first: angles of a, angles of b, reals of
    a, reals of b.
    """
    space = SpaceSpec(a.n_angles + b.n_angles, a.real_bounds + b.real_bounds)
    ia = np.arange(a.dim)
    ib = a.dim + np.arange(b.dim)
    order = np.concatenate([ia[: a.n_angles], ib[: b.n_angles], ia[a.n_angles :], ib[b.n_angles :]])
    return space, order


def product_of(f: DiscreteSystem, g: DiscreteSystem) -> DiscreteSystem:
    """The map (x, y) -> (f(x), g(y)); with the max metric d_N is the max of both factors."""
    space, order = product_layout(f.space, g.space)
    back = np.argsort(order)

    def split(states):
        stacked = states[..., back]
        return stacked[..., : f.space.dim], stacked[..., f.space.dim :]

    def step(states):
        x, y = split(states)
        return np.concatenate([f.step(x), g.step(y)], axis=-1)[..., order]

    def power(states, times):
        x, y = split(states)
        return np.concatenate([f.power(x, times), g.power(y, times)], axis=-1)[..., order]

    params = {"f": f.key, "g": g.key}
    return DiscreteSystem(space, step, power if f.exact and g.exact else None, f"{f.name}x{g.name}", params)


def power_of(f: DiscreteSystem, m: int) -> DiscreteSystem:
    """The m-th iterate of f as a system of its own."""
    if m < 1:
        raise ValueError("m must be >= 1")

    def step(states):
        for _ in range(m):
            states = _normalise(f.step(states), f.space.n_angles)
        return states

    def power(states, times):
        return f.power(states, np.asarray(times) * m)

    return DiscreteSystem(f.space, step, power if f.exact else None, f"{f.name}^{m}", {"f": f.key, "m": m})


class OrbitCache:
    """Thread-safe LRU cache of orbit arrays bounded by a byte budget."""

    def __init__(self, max_bytes: int = 64 * 2**20):
        self.max_bytes = int(max_bytes)
        self._data: OrderedDict = OrderedDict()
        self._bytes = 0
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, key):
        with self._lock:
            arr = self._data.get(key)
            if arr is None:
                self.misses += 1
                return None
            self._data.move_to_end(key)
            self.hits += 1
            return arr

    def put(self, key, arr: np.ndarray) -> None:
        arr = np.array(arr, copy=True)
        arr.setflags(write=False)
        with self._lock:
            if key in self._data:
                return
            if arr.nbytes > self.max_bytes:
                return
            self._data[key] = arr
            self._bytes += arr.nbytes
            while self._bytes > self.max_bytes:
                _, old = self._data.popitem(last=False)
                self._bytes -= old.nbytes

    def clear(self) -> None:
        with self._lock:
            self._data.clear()
            self._bytes = 0

    def __len__(self) -> int:
        return len(self._data)


default_orbit_cache = OrbitCache()


def orbit_array(sys: DiscreteSystem, x: ProductPoint, N: int, cache: OrbitCache | None = default_orbit_cache) -> np.ndarray:
    """Orbit segment ``x, f(x), ..., f^N(x)`` as an ``(N + 1, dim)`` array."""
    if N < 0:
        raise ValueError("N must be nonnegative")
    sys.space.check_point(x)
    key = (sys.key, x.as_array().tobytes(), int(N))
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return hit
    arr = sys.orbit_block(x.as_array()[None, :], int(N))[0]
    if cache is not None:
        cache.put(key, arr)
    return arr


def orbit(sys: DiscreteSystem, x: ProductPoint, N: int, cache: OrbitCache | None = default_orbit_cache) -> list[ProductPoint]:
    """The N + 1 points of the orbit segment starting at ``x``."""
    arr = orbit_array(sys, x, N, cache)
    return [ProductPoint.from_array(row, sys.space.n_angles) for row in arr]


def dynamical_distance(n_angles: int, orbit_x: np.ndarray, orbit_y: np.ndarray) -> np.ndarray:
    """d_N from precomputed orbit arrays with time on axis -2."""
    return base_distance(n_angles, orbit_x, orbit_y).max(axis=-1)


def dynamical_metric(
    sys: DiscreteSystem,
    x: ProductPoint,
    y: ProductPoint,
    N: int,
    threshold: float | None = None,
    cache: OrbitCache | None = default_orbit_cache,
) -> float:
    """Bowen metric: max of the base distance over times 0..N inclusive.

    With ``threshold`` set, evaluation stops as soon as the running max
    exceeds it and that partial max is returned (a lower bound that is
    already above the threshold).
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    sys.space.check_point(x)
    sys.space.check_point(y)
    na = sys.space.n_angles
    if threshold is None or sys.exact:
        ox = orbit_array(sys, x, N, cache)
        oy = orbit_array(sys, y, N, cache)
        dist = base_distance(na, ox, oy)
        if threshold is not None:
            over = np.nonzero(dist > threshold)[0]
            if over.size:
                return float(dist[: over[0] + 1].max())
        return float(dist.max())
    cur = np.stack([x.as_array(), y.as_array()])
    best = float(base_distance(na, cur[0], cur[1]))
    for _ in range(N):
        if best > threshold:
            break
        cur = sys.apply(cur)
        best = max(best, float(base_distance(na, cur[0], cur[1])))
    return best
