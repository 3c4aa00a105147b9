"""Sections and return maps.

Covers return times to rational sections of Kronecker flows, fundamental
domains of the p-model return map and their iteration counts, the
separation function along an orbit, and the torsion and time-defect
measurements. All p-model comparisons run on lifts to R x [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .dyn_core import ProductPoint, wrap_angles
from .model_flows import KroneckerFlow, ModelError, PlanarPModel, pmodel_time_alpha

__all__ = [
    "RationalLine",
    "FundamentalDomain",
    "SeparationTrace",
    "TorsionReport",
    "kronecker_return",
    "pmodel_return_map",
    "compute_fundamental_domain",
    "compute_mk",
    "separation_trace",
    "torsion_check",
    "time_defect",
    "plateau_domain",
]


@dataclass(frozen=True)
class RationalLine:
    """Line through 0 in T^2 with direction (q, p); its section is q*y2 - p*y1 in Z."""

    q: int
    p: int

    def __post_init__(self):
        if int(self.q) != self.q or int(self.p) != self.p:
            raise ValueError("q and p must be integers")
        if self.p < 0:
            raise ValueError("p must be nonnegative")
        if (self.q, self.p) == (0, 0):
            raise ValueError("(q, p) must not be (0, 0)")
        if math.gcd(abs(self.q), self.p) != 1:
            raise ValueError("q and p must be coprime")

    def level(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, float)
        return self.q * y[..., 1] - self.p * y[..., 0]


def _signed_frac(v):
    return v - np.floor(v + 0.5)


def kronecker_return(flow: KroneckerFlow, line: RationalLine, x: ProductPoint, tol: float = 1e-9):
    """Next hit of the section by the orbit of x, found by crossing detection.

    Returns ``(point, time)``.
    """
    freq = np.asarray(flow.frequency, float)
    if freq.size != 2 or len(x.angles) != 2:
        raise ValueError("kronecker_return works on T^2")
    rate = line.q * freq[1] - line.p * freq[0]
    if abs(rate) <= 1e-14 * max(1.0, float(np.abs(freq).max())):
        raise ValueError("flow is parallel to the section line")
    y0 = np.asarray(x.angles, float)
    if abs(_signed_frac(line.level(y0))) > tol:
        raise ValueError("starting point is not on the section")

    def g(t):
        return float(_signed_frac(line.level(wrap_angles(y0 + t * freq))))

    dt = 0.25 / (abs(line.q) * abs(freq[1]) + line.p * abs(freq[0]))
    t0 = 0.5 * dt  # step off the starting crossing
    g0 = g(t0)
    while True:
        t1 = t0 + dt
        g1 = g(t1)
        # a true crossing changes sign through 0, not through the +-1/2 wrap
        if g0 == 0.0:
            t_hit = t0
            break
        if np.sign(g0) != np.sign(g1) and abs(g0) < 0.25 and abs(g1) < 0.25:
            t_hit = brentq(g, t0, t1, xtol=1e-15, rtol=1e-15)
            break
        t0, g0 = t1, g1
    pt = ProductPoint(tuple(wrap_angles(y0 + t_hit * freq)), x.reals)
    return pt, float(t_hit)


def pmodel_return_map(m: PlanarPModel, alpha: Callable, x: ProductPoint) -> ProductPoint:
    """Return map of the section, realised as the time-alpha(r) map."""
    return pmodel_time_alpha(m, alpha, x)


# ---------------------------------------------------------------------------
# fundamental domains


@dataclass(frozen=True, eq=False)
class FundamentalDomain:
    """Region of chart k between the exit line u = u* and its preimage.

    ``entry_offset(r)`` returns u_k(r): points with chart offset u in
    [u_k(r), u*] reach the exit line within one return time.
    """

    k: int
    model: PlanarPModel
    alpha: Callable
    rho_range: tuple = (0.0, 1.0)

    def entry_offset(self, r) -> np.ndarray:
        r = np.asarray(r, float)
        lam, mu, _ = self.model._coeffs(r)
        lam, mu = lam[..., self.k], mu[..., self.k]
        tau = np.asarray(self.alpha(r), float)
        us = self.model.u_star
        out = np.empty(np.shape(r))
        pos = mu > 0
        sq = np.sqrt(mu[pos])
        out[pos] = sq * np.sinh(np.arcsinh(us / sq) - lam[pos] * tau[pos])
        out[~pos] = us * np.exp(-lam[~pos] * tau[~pos])
        return out

    def exit_curve(self, r) -> np.ndarray:
        """Abscissa of the section curve delta_k (exit line)."""
        return np.full(np.shape(r), self.k / self.model.p + self.model.u_star)

    def entry_curve(self, r) -> np.ndarray:
        """Abscissa of the preimage of delta_k under the return map."""
        return self.k / self.model.p + self.entry_offset(r)

    def transit_residual(self, r) -> np.ndarray:
        """Defining integral minus the return time; should vanish."""
        r = np.asarray(r, float)
        lam, mu, _ = self.model._coeffs(r)
        lam, mu = lam[..., self.k], mu[..., self.k]
        u0 = self.entry_offset(r)
        us = self.model.u_star
        res = np.empty(np.shape(r))
        pos = mu > 0
        sq = np.sqrt(mu[pos])
        res[pos] = (np.arcsinh(us / sq) - np.arcsinh(u0[pos] / sq)) / lam[pos]
        res[~pos] = np.log(us / u0[~pos]) / lam[~pos]
        return res - np.asarray(self.alpha(r), float)

    def contains(self, theta, r, tol: float = 1e-12) -> np.ndarray:
        theta, r = np.broadcast_arrays(np.asarray(theta, float), np.asarray(r, float))
        c = self.k / self.model.p
        off = _signed_frac(theta - c)
        return (off >= self.entry_offset(r) - tol) & (off <= self.model.u_star + tol)

    def sample(self, n_u: int = 41, n_r: int = 41) -> np.ndarray:
        """Grid of (theta, r) states covering the domain, boundaries included."""
        r = np.linspace(*self.rho_range, n_r)
        s = np.linspace(0.0, 1.0, n_u)
        u0 = self.entry_offset(r)
        u = u0[:, None] + s[None, :] * (self.model.u_star - u0[:, None])
        th = wrap_angles(self.k / self.model.p + u)
        return np.stack([th.ravel(), np.repeat(r, n_u)], axis=-1)


def compute_fundamental_domain(m: PlanarPModel, alpha: Callable, k: int, rho_max: float = 1.0) -> FundamentalDomain:
    """Domain of chart k over levels r in [0, rho_max]."""
    if not 0 <= k < m.p:
        raise ValueError("chart index out of range")
    if not 0 < rho_max <= 1:
        raise ValueError("rho_max must lie in (0, 1]")
    r = np.linspace(0.0, rho_max, 1001)
    tau = np.asarray(alpha(r), float)
    lam, mu, _ = m._coeffs(r)
    lam, mu = lam[:, k], mu[:, k]
    with np.errstate(divide="ignore"):
        transit = 2 * np.arcsinh(m.u_star / np.sqrt(mu)) / lam
    bad = tau > transit
    if bad.any():
        raise ModelError(
            f"return time {tau[bad].max():.3g} exceeds the chart transit time "
            f"{transit[bad].min():.3g}; use a smaller level range"
        )
    return FundamentalDomain(k, m, alpha, (0.0, float(rho_max)))


def _in_chart(m: PlanarPModel, k: int, theta: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    return np.abs(_signed_frac(theta - k / m.p)) <= m.u_star + tol


def compute_mk(m: PlanarPModel, alpha: Callable, k: int, a: float = 1.0, max_m: int = 1000, n_union: int = 1000, seed: int = 0) -> int:
    """Smallest m with the sampled image of the domain inside chart k + 1.

    The domain is taken over levels r in [0, a]. Raises if no m <= max_m
    works or if the gap is not covered by the first m images.
    """
    dom = compute_fundamental_domain(m, alpha, k, a)
    pts = dom.sample()
    tau = np.asarray(alpha(pts[:, 1]), float)
    x0 = pts[:, 0] + np.where(pts[:, 0] < k / m.p - 0.5, 1.0, 0.0)
    nxt = (k + 1) % m.p
    mk = None
    for j in range(1, max_m + 1):
        th = m.flow_lifted(x0, pts[:, 1], j * tau)
        if np.all(_in_chart(m, nxt, th)):
            mk = j
            break
    if mk is None:
        raise ModelError(f"no m <= {max_m} moves the domain into the next chart")
    # union property: every gap point is an image of the domain within m_k steps
    rng = np.random.default_rng(seed)
    lo = k / m.p + m.u_star
    th = lo + rng.random(n_union) * m.beta
    r = a * rng.random(n_union)
    tau = np.asarray(alpha(r), float)
    hit = np.zeros(n_union, dtype=bool)
    for j in range(1, mk + 1):
        back = wrap_angles(m.flow_lifted(th, r, -j * tau))
        hit |= dom.contains(back, r, tol=1e-10)
    if not hit.all():
        raise ModelError(f"{int((~hit).sum())} gap samples are not reached within m_k = {mk} steps")
    return mk


# ---------------------------------------------------------------------------
# separation, torsion, time defect


@dataclass(frozen=True)
class SeparationTrace:
    """Samples of E(t) = x'(t) - x(t) along one orbit."""

    start: tuple
    other: tuple
    times: np.ndarray
    values: np.ndarray
    argmax_time: float
    argmax_theta: float
    period: float

    @property
    def max(self) -> float:
        return float(self.values.max())


def separation_trace(m: PlanarPModel, a: ProductPoint, a_prime: ProductPoint, horizon: float | None = None, n: int = 4001) -> SeparationTrace:
    """Sample the separation of two points of a common orbit.

    The lift of ``a_prime`` is taken in [x, x + 1) above the lift x of
    ``a``. ``horizon`` defaults to one period.
    """
    r = a.reals[0]
    if abs(a_prime.reals[0] - r) > 1e-12:
        raise ValueError("points must lie on the same orbit")
    if r <= 0:
        raise ValueError("separation trace needs a periodic orbit (r > 0)")
    T = float(m.period(np.array([r]))[0])
    horizon = T if horizon is None else float(horizon)
    x = a.angles[0]
    xp = x + np.mod(a_prime.angles[0] - x, 1.0)
    t = np.linspace(0.0, horizon, n)
    e = m.flow_lifted(xp, r, t) - m.flow_lifted(x, r, t)
    j = int(np.argmax(e))
    th = float(wrap_angles(m.flow_lifted(x, r, t[j])))
    return SeparationTrace((x, r), (float(a_prime.angles[0]), r), t, e, float(t[j]), th, T)


def plateau_domain(m: PlanarPModel) -> tuple[float, float]:
    """Abscissa interval of psi([0, 1], delta_u0) for the tame-plateau gap."""
    tame = m.tame
    if tame is None:
        raise ModelError("model has no tame plateau")
    lo = tame["k"] / m.p + tame["u0"]
    return lo, lo + tame["M"]


@dataclass(frozen=True)
class TorsionReport:
    n_tested: int
    n_skipped: int
    n_failed: int
    min_gap: float
    worst: tuple = field(default=())

    @property
    def passed(self) -> bool:
        return self.n_failed == 0


def torsion_check(m: PlanarPModel, samples: int | np.ndarray = 1000, t_max: float = 20.0, seed: int = 0) -> TorsionReport:
    """Check x1(t) < x2(t) for lifts started on a common vertical with r1 < r2.

    ``samples`` is either a count or an array of rows (theta, r1, r2, t).
    """
    if np.isscalar(samples):
        rng = np.random.default_rng(seed)
        n = int(samples)
        rows = np.stack([rng.random(n), rng.random(n), rng.random(n), t_max * (1e-3 + rng.random(n))], axis=-1)
    else:
        rows = np.atleast_2d(np.asarray(samples, float))
    th, r1, r2, t = rows.T
    lo, hi = np.minimum(r1, r2), np.maximum(r1, r2)
    skip = (lo == hi) | (t <= 0)
    th, lo, hi, t = th[~skip], lo[~skip], hi[~skip], t[~skip]
    gap = m.flow_lifted(th, hi, t) - m.flow_lifted(th, lo, t)
    failed = gap <= 0
    if gap.size == 0:
        return TorsionReport(0, int(skip.sum()), 0, float("inf"))
    j = int(np.argmin(gap))
    return TorsionReport(int(gap.size), int(skip.sum()), int(failed.sum()), float(gap[j]), (float(th[j]), float(lo[j]), float(hi[j]), float(t[j])))


def time_defect(m: PlanarPModel, a: ProductPoint, r_prime: float, t: float) -> float:
    """t - t' where the orbit of (theta, r_prime) reaches x(t) at time t'.

    ``a`` lies on C_q and the comparison point shares its abscissa on the
    faster orbit r_prime >= r.
    """
    x0, r = a.angles[0], a.reals[0]
    if r <= 0 or r_prime < r:
        raise ValueError("need 0 < r <= r_prime")
    target = float(m.flow_lifted(x0, r, t))
    if t == 0:
        return 0.0

    def f(s):
        return float(m.flow_lifted(x0, r_prime, s)) - target

    hi = max(t, 1.0)
    while f(hi) < 0:
        hi *= 2
    lo = min(0.0, t)
    while f(lo) > 0:
        lo = 2 * lo - 1.0
    t_prime = brentq(f, lo, hi, xtol=1e-14, rtol=1e-15, maxiter=500)
    return float(t - t_prime)
