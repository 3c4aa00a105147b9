"""Model systems: Kronecker flows, action-angle systems, planar p-models,
p-model products, hyperbolic and elliptic normal forms, and a
rotator x pendulum testbed.

Angles live in [0, 1). The planar p-model is evaluated exactly: each
chart O_k is crossed with the closed-form hyperbolic-sine solution and
each gap R_k with the explicit primitive of 1 / xi_k. Orbits are then
parametrised by a phase (elapsed flow time from a reference line), so
the time-t map is ``phase^-1(phase(x) + t)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dyn_core import DiscreteSystem, ProductPoint, SpaceSpec, wrap_angles

__all__ = [
    "InfiniteTransitError",
    "ModelError",
    "KroneckerFlow",
    "ActionAngleSystem",
    "PlanarPModel",
    "PModelSystem",
    "HyperbolicNormalForm",
    "EllipticNormalForm",
    "RotatorPendulum",
    "default_pmodel",
    "default_pmodel_system",
    "kronecker_time1",
    "kronecker_flow",
    "action_angle_time1",
    "pmodel_planar_flow",
    "pmodel_time_alpha",
    "pmodel_product_time1",
    "period_T",
    "period_asymptote",
    "orbit_of_period",
    "max_representable_period",
    "hyperbolic_transit_time",
    "hyperbolic_flow",
    "elliptic_time1",
    "elliptic_chart",
    "rotator_pendulum_time1",
    "pendulum_energy",
    "frequency_rank",
    "omega_consistency",
    "kronecker_system",
    "action_angle_system",
    "planar_system",
    "product_system",
    "return_map_system",
    "elliptic_system",
    "rotator_pendulum_system",
]

Fn = Callable[[np.ndarray], np.ndarray]


class ModelError(ValueError):
    """Model parameters violate a structural hypothesis."""


class InfiniteTransitError(ValueError):
    """The requested transit passes through a rest point."""


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Kronecker flows


@dataclass(frozen=True)
class KroneckerFlow:
    """Constant vector field on T^2 (or T^n) with the given frequency."""

    frequency: tuple

    def __post_init__(self):
        object.__setattr__(self, "frequency", tuple(float(v) for v in self.frequency))


def kronecker_flow(flow: KroneckerFlow, x: ProductPoint, t: float) -> ProductPoint:
    if len(x.angles) != len(flow.frequency):
        raise ValueError("frequency and angle dimensions differ")
    ang = np.asarray(x.angles) + t * np.asarray(flow.frequency)
    return ProductPoint(tuple(wrap_angles(ang)), x.reals)


def kronecker_time1(flow: KroneckerFlow, x: ProductPoint) -> ProductPoint:
    """Advance the angles by the frequency, mod 1."""
    return kronecker_flow(flow, x, 1.0)


def kronecker_system(flow: KroneckerFlow) -> DiscreteSystem:
    freq = np.asarray(flow.frequency)
    n = freq.size

    def step(s):
        return s + freq

    def power(s, times):
        return s[:, None, :] + np.asarray(times, dtype=float)[None, :, None] * freq

    return DiscreteSystem(SpaceSpec(n), step, power, "kronecker", {"frequency": list(flow.frequency)})


# ---------------------------------------------------------------------------
# Action-angle systems


@dataclass(frozen=True, eq=False)
class ActionAngleSystem:
    """H(angles, I) = h(I) with frequency map omega = grad h.

    ``S`` is a finite sample of the action submanifold (rows are action
    vectors) and ``intrinsic_dim`` its dimension.
    """

    h: Fn
    omega: Fn
    S: np.ndarray
    intrinsic_dim: int
    name: str = "action-angle"
    params: dict = field(default_factory=dict)
    domain_tol: float = 1e-9

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.S, dtype=float))
        if S.shape[0] == 0:
            raise ValueError("action sample S is empty")
        object.__setattr__(self, "S", S)

    @property
    def n(self) -> int:
        return self.S.shape[1]

    @property
    def bounds(self) -> tuple:
        lo, hi = self.S.min(axis=0), self.S.max(axis=0)
        return tuple((float(a), float(b)) for a, b in zip(lo, hi))

    def frequencies(self, actions: np.ndarray) -> np.ndarray:
        actions = np.atleast_2d(actions)
        lo, hi = self.S.min(axis=0), self.S.max(axis=0)
        tol = self.domain_tol * max(1.0, float(np.abs(self.S).max()))
        if np.any(actions < lo - tol) or np.any(actions > hi + tol):
            raise ValueError("action outside the sampled domain")
        return np.atleast_2d(self.omega(actions))


def action_angle_time1(sys: ActionAngleSystem, x: ProductPoint) -> ProductPoint:
    """Angles advance by omega(I) mod 1; actions are unchanged."""
    if len(x.angles) != sys.n or len(x.reals) != sys.n:
        raise ValueError("point dims do not match the action-angle system")
    w = sys.frequencies(np.asarray(x.reals)[None, :])[0]
    return ProductPoint(tuple(wrap_angles(np.asarray(x.angles) + w)), x.reals)


def action_angle_system(sys: ActionAngleSystem) -> DiscreteSystem:
    n = sys.n
    space = SpaceSpec(n, sys.bounds)

    def step(s):
        out = s.copy()
        out[:, :n] += sys.frequencies(s[:, n:])
        return out

    def power(s, times):
        w = sys.frequencies(s[:, n:])
        t = np.asarray(times, dtype=float)
        out = np.repeat(s[:, None, :], t.size, axis=1)
        out[:, :, :n] += t[None, :, None] * w[:, None, :]
        return out

    return DiscreteSystem(space, step, power, sys.name, dict(sys.params))


def _jacobian(f: Fn, x: np.ndarray, h: float) -> np.ndarray:
    n = x.size
    cols = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        cols.append((np.atleast_2d(f((x + e)[None, :]))[0] - np.atleast_2d(f((x - e)[None, :]))[0]) / (2 * h))
    return np.stack(cols, axis=1)


def omega_consistency(sys: ActionAngleSystem, h: float = 1e-6) -> float:
    """Max relative gap between omega and a central-difference grad h on S."""
    worst = 0.0
    for I in sys.S:
        step = h * max(1.0, float(np.abs(I).max()))
        grad = np.array([
            (float(sys.h((I + e)[None, :])[0]) - float(sys.h((I - e)[None, :])[0])) / (2 * step)
            for e in np.eye(sys.n) * step
        ])
        w = np.atleast_2d(sys.omega(I[None, :]))[0]
        scale = max(1.0, float(np.abs(w).max()))
        worst = max(worst, float(np.abs(grad - w).max()) / scale)
    return worst


def _tangent_bases(S: np.ndarray, m: int) -> list[np.ndarray]:
    """Local tangent frames of the sampled manifold by neighbour PCA."""
    n_pts, n = S.shape
    if m == 0:
        return [np.zeros((n, 0)) for _ in range(n_pts)]
    if n_pts < m + 1:
        raise ValueError("too few samples for the stated intrinsic dimension")
    k = min(n_pts - 1, max(2 * m + 2, 4))
    bases = []
    d2 = ((S[:, None, :] - S[None, :, :]) ** 2).sum(-1)
    for i in range(n_pts):
        nb = np.argsort(d2[i])[: k + 1]
        diffs = S[nb] - S[i]
        _, sv, vt = np.linalg.svd(diffs, full_matrices=False)
        if sv.size < m or sv[m - 1] <= 1e-6 * max(sv[0], 1e-300):
            raise ValueError("sample of S is degenerate for the stated dimension")
        if sv.size > m and sv[m] > 0.5 * sv[m - 1]:
            raise ValueError("sample of S looks higher-dimensional than stated")
        bases.append(vt[:m].T)
    return bases


def frequency_rank(sys: ActionAngleSystem, rel_tol: float = 1e-8) -> int:
    """Max over S of the numeric rank of d(omega) restricted to T S."""
    bases = _tangent_bases(sys.S, sys.intrinsic_dim)
    svs = []
    scale = 0.0
    for I, B in zip(sys.S, bases):
        step = 1e-5 * max(1.0, float(np.abs(I).max()))
        J = _jacobian(sys.omega, I, step)
        sv = np.linalg.svd(J @ B, compute_uv=False) if B.shape[1] else np.zeros(0)
        svs.append(sv)
        w = np.atleast_2d(sys.omega(I[None, :]))[0]
        scale = max(scale, float(np.abs(w).max()), float(sv.max()) if sv.size else 0.0)
    tol = rel_tol * max(scale, 1e-300)
    return max(int((sv > tol).sum()) for sv in svs)


# ---------------------------------------------------------------------------
# Hyperbolic normal form


@dataclass(frozen=True, eq=False)
class HyperbolicNormalForm:
    """u' = lambda(rho) sqrt(u^2 + mu(rho)), phi' = omega(rho)."""

    lam: Fn
    mu: Fn
    omega: Fn = lambda rho: 0.0 * np.asarray(rho, dtype=float)


def hyperbolic_transit_time(nf: HyperbolicNormalForm, rho: float, u0: float, u1: float) -> float:
    """Flow time from u0 to u1 (negative when u1 < u0)."""
    lam = float(nf.lam(rho))
    mu = float(nf.mu(rho))
    if lam <= 0:
        raise ModelError("lambda(rho) must be positive")
    if mu < 0:
        raise ModelError("mu(rho) must be nonnegative")
    if u0 == u1:
        return 0.0
    if mu > 0:
        s = np.sqrt(mu)
        return float((np.arcsinh(u1 / s) - np.arcsinh(u0 / s)) / lam)
    if u0 * u1 <= 0:
        raise InfiniteTransitError("interval reaches the rest point u = 0")
    return float(np.log(abs(u1) / abs(u0)) / lam * np.sign(u0))


def hyperbolic_flow(nf: HyperbolicNormalForm, rho: float, u: float, t: float) -> float:
    """Closed-form position after time t starting from u."""
    lam = float(nf.lam(rho))
    mu = float(nf.mu(rho))
    if mu > 0:
        s = np.sqrt(mu)
        return float(s * np.sinh(lam * t + np.arcsinh(u / s)))
    if u == 0:
        return 0.0
    return float(u * np.exp(np.sign(u) * lam * t))


# ---------------------------------------------------------------------------
# Planar p-model


def _const(c: float) -> Fn:
    return lambda s: np.full(np.shape(s), float(c))


def _linear(c0: float, c1: float) -> Fn:
    return lambda s: c0 + c1 * np.asarray(s, dtype=float)


_DEFAULTS = {
    "p": 2,
    "u_star": None,
    "a": 0.1,
    "lambda": None,
    "mu_slope": None,
    "sigma0": 3.0,
    "sigma_slope": 0.5,
    "xi_variant": "constant",
    "plateau_time": 1.25,
}


@dataclass(frozen=True, eq=False)
class PlanarPModel:
    """Planar p-model on T x [0, 1] with rest points z_k = (k/p, 0).

    The coefficient functions take the scaled argument ``a * r``.
    Chart k is |theta - k/p| <= u_star, gap k joins chart k to chart
    k + 1 (indices mod p).
    """

    p: int
    lam: tuple
    mu: tuple
    sigma: tuple
    u_star: float
    a: float = 1.0
    xi_variant: str = "constant"
    plateau_time: float = 1.25
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        p = int(self.p)
        if p < 1:
            raise ModelError("p must be >= 1")
        for name in ("lam", "mu", "sigma"):
            if len(getattr(self, name)) != p:
                raise ModelError(f"{name} needs one function per rest point")
        if not 0 < self.u_star < 1.0 / (8 * p):
            raise ModelError("u_star must lie in (0, 1/(8p)) so the charts are disjoint")
        if self.a <= 0:
            raise ModelError("a must be positive")
        if self.xi_variant not in ("constant", "tame-plateau"):
            raise ModelError("xi_variant must be 'constant' or 'tame-plateau'")
        s = self.a * np.linspace(0.0, 1.0, 257)
        for k in range(p):
            if not np.all(self.lam[k](s) > 0):
                raise ModelError(f"lambda_{k} must be positive")
            if abs(float(self.mu[k](np.array([0.0]))[0])) > 0:
                raise ModelError(f"mu_{k}(0) must vanish")
            if not np.all(self.mu[k](s[1:]) > 0):
                raise ModelError(f"mu_{k} must be positive away from 0")
            h = 1e-7
            if not float(self.mu[k](np.array([h]))[0]) / h > 0:
                raise ModelError(f"mu_{k}'(0) must be positive")
            if not np.all(self.sigma[k](s) > 2):
                raise ModelError(f"sigma_{k} must exceed 2")
        object.__setattr__(self, "_geom", self._build_geometry())

    # -- construction helpers -------------------------------------------------

    @classmethod
    def from_params(cls, params: dict | None = None) -> "PlanarPModel":
        q = dict(_DEFAULTS)
        q.update(params or {})
        p = int(q["p"])
        u_star = float(q["u_star"]) if q["u_star"] is not None else 1.0 / (16 * p)
        lam = q["lambda"] if q["lambda"] is not None else [1.0] * p
        mu_slope = q["mu_slope"] if q["mu_slope"] is not None else [1.0] * p
        if len(lam) != p or len(mu_slope) != p:
            raise ModelError("lambda and mu_slope need p entries")
        q.update({"p": p, "u_star": u_star, "lambda": [float(v) for v in lam], "mu_slope": [float(v) for v in mu_slope]})
        return cls(
            p=p,
            lam=tuple(_const(v) for v in q["lambda"]),
            mu=tuple(_linear(0.0, v) for v in q["mu_slope"]),
            sigma=tuple(_linear(float(q["sigma0"]), -float(q["sigma_slope"])) for _ in range(p)),
            u_star=u_star,
            a=float(q["a"]),
            xi_variant=str(q["xi_variant"]),
            plateau_time=float(q["plateau_time"]),
            params={k: q[k] for k in sorted(q)},
        )

    @property
    def key(self) -> str:
        return _hash({"pmodel": self.params or id(self)})

    @property
    def beta(self) -> float:
        """Gap width 1/p - 2 u_star."""
        return 1.0 / self.p - 2 * self.u_star

    def _coeffs(self, r: np.ndarray):
        s = self.a * np.asarray(r, dtype=float)
        lam = np.stack([np.broadcast_to(self.lam[k](s), s.shape) for k in range(self.p)], axis=-1)
        mu = np.stack([np.broadcast_to(self.mu[k](s), s.shape) for k in range(self.p)], axis=-1)
        sig = np.stack([np.broadcast_to(self.sigma[k](s), s.shape) for k in range(self.p)], axis=-1)
        return lam, mu, sig

    @property
    def plateau_speed(self) -> float:
        """M = max(beta/2, max_k,r lambda_k sqrt(u*^2 + mu_k))."""
        r = np.linspace(0.0, 1.0, 2001)
        lam, mu, _ = self._coeffs(r)
        return float(max(self.beta / 2, (lam * np.sqrt(self.u_star**2 + mu)).max()))

    def _build_geometry(self):
        p, us, beta = self.p, self.u_star, self.beta
        # segments in the lap coordinate y = theta + u_star, y in [0, 1)
        segs = []
        tame = None
        if self.xi_variant == "tame-plateau":
            M = self.plateau_speed
            w = self.plateau_time * M
            r = np.linspace(0.0, 1.0, 2001)
            sig_min = float(self._coeffs(r)[2][:, 1 % p].min())
            if not (w < beta and self.plateau_time < sig_min):
                raise ModelError("plateau does not fit inside the gap; lower plateau_time")
            d0 = (beta - w) / 2
            tame = {"k": 1 % p, "M": M, "width": w, "d0": d0, "u0": us + d0, "u1": us + d0 + w}
        for k in range(p):
            y0 = k / p
            segs.append(("chart", k, y0, 2 * us))
            g0 = y0 + 2 * us
            if tame is not None and k == tame["k"]:
                d0, w = tame["d0"], tame["width"]
                segs.append(("comp", k, g0, d0))
                segs.append(("plateau", k, g0 + d0, w))
                segs.append(("comp", k, g0 + d0 + w, d0))
            else:
                segs.append(("gap", k, g0, beta))
        starts = np.array([s[2] for s in segs] + [1.0])
        return {"segs": segs, "starts": starts, "tame": tame}

    @property
    def tame(self) -> Optional[dict]:
        return self._geom["tame"]

    # -- per-level tables -------------------------------------------------------

    def _speeds(self, seg, r, sig):
        kind, k = seg[0], seg[1]
        if kind == "gap":
            return self.beta / sig[..., k]
        tame = self._geom["tame"]
        if kind == "plateau":
            return np.full(np.shape(r), tame["M"])
        return (self.beta - tame["width"]) / (sig[..., k] - self.plateau_time)

    def _tables(self, r: np.ndarray) -> dict:
        r = np.asarray(r, dtype=float)
        lam, mu, sig = self._coeffs(r)
        sq = np.sqrt(mu)
        with np.errstate(divide="ignore"):
            A = np.arcsinh(self.u_star / sq)
        segs = self._geom["segs"]
        dur = np.empty(r.shape + (len(segs),))
        speed = np.full(r.shape + (len(segs),), np.nan)
        for j, seg in enumerate(segs):
            if seg[0] == "chart":
                dur[..., j] = 2 * A[..., seg[1]] / lam[..., seg[1]]
            else:
                speed[..., j] = self._speeds(seg, r, sig)
                dur[..., j] = seg[3] / speed[..., j]
        cum = np.concatenate([np.zeros(r.shape + (1,)), np.cumsum(dur, axis=-1)], axis=-1)
        return {"lam": lam, "mu": mu, "sig": sig, "sq": sq, "A": A, "dur": dur, "speed": speed, "cum": cum, "T": cum[..., -1]}

    def segment_durations(self, r) -> np.ndarray:
        return self._tables(np.asarray(r, dtype=float))["dur"]

    def period(self, r) -> np.ndarray:
        return self._tables(np.asarray(r, dtype=float))["T"]

    # -- exact phase parametrisation (r > 0) --------------------------------

    def _phase_pos(self, x: np.ndarray, tab: dict) -> np.ndarray:
        """Elapsed time from the lap reference theta = -u_star to lifted x."""
        starts = self._geom["starts"]
        segs = self._geom["segs"]
        y = x + self.u_star
        lap = np.floor(y)
        yl = y - lap
        j = np.clip(np.searchsorted(starts, yl, side="right") - 1, 0, len(segs) - 1)
        off = yl - starts[j]
        t_in = np.zeros_like(x)
        for idx, seg in enumerate(segs):
            m = j == idx
            if not m.any():
                continue
            if seg[0] == "chart":
                k = seg[1]
                sq, A, lam = tab["sq"][..., k][m], tab["A"][..., k][m], tab["lam"][..., k][m]
                t_in[m] = (np.arcsinh((off[m] - self.u_star) / sq) + A) / lam
            else:
                t_in[m] = off[m] / tab["speed"][..., idx][m]
        cum = np.take_along_axis(tab["cum"], j[..., None], axis=-1)[..., 0]
        return lap * tab["T"] + cum + t_in

    def _pos_phase(self, phi: np.ndarray, tab: dict) -> np.ndarray:
        starts = self._geom["starts"]
        segs = self._geom["segs"]
        T = tab["T"]
        lap = np.floor(phi / T)
        tl = phi - lap * T
        # guard against tl == T from rounding
        over = tl >= T
        lap = np.where(over, lap + 1, lap)
        tl = np.where(over, tl - T, tl)
        cum = tab["cum"]
        j = np.clip((cum[..., 1:-1] <= tl[..., None]).sum(axis=-1), 0, len(segs) - 1)
        tin = tl - np.take_along_axis(cum, j[..., None], axis=-1)[..., 0]
        off = np.zeros_like(phi)
        for idx, seg in enumerate(segs):
            m = j == idx
            if not m.any():
                continue
            if seg[0] == "chart":
                k = seg[1]
                sq, A, lam = tab["sq"][..., k][m], tab["A"][..., k][m], tab["lam"][..., k][m]
                off[m] = np.clip(self.u_star + sq * np.sinh(lam * tin[m] - A), 0.0, seg[3])
            else:
                off[m] = np.clip(tin[m] * tab["speed"][..., idx][m], 0.0, seg[3])
        return lap + starts[j] + off - self.u_star

    # -- r = 0 (separatrix level) ------------------------------------------------

    def _gap_time_r0(self, k: np.ndarray, off: np.ndarray, sig0: np.ndarray) -> np.ndarray:
        tame = self._geom["tame"]
        t = off * sig0 / self.beta
        if tame is not None:
            m = k == tame["k"]
            if m.any():
                w, d0, M = tame["width"], tame["d0"], tame["M"]
                vc = (self.beta - w) / (sig0[m] - self.plateau_time)
                o = off[m]
                t[m] = np.where(o <= d0, o / vc, np.where(o <= d0 + w, d0 / vc + (o - d0) / M, d0 / vc + w / M + (o - d0 - w) / vc))
        return t

    def _gap_off_r0(self, k: np.ndarray, t: np.ndarray, sig0: np.ndarray) -> np.ndarray:
        tame = self._geom["tame"]
        off = t * self.beta / sig0
        if tame is not None:
            m = k == tame["k"]
            if m.any():
                w, d0, M = tame["width"], tame["d0"], tame["M"]
                vc = (self.beta - w) / (sig0[m] - self.plateau_time)
                tt = t[m]
                t1, t2 = d0 / vc, d0 / vc + w / M
                off[m] = np.where(tt <= t1, tt * vc, np.where(tt <= t2, d0 + (tt - t1) * M, d0 + w + (tt - t2) * vc))
        return np.clip(off, 0.0, self.beta)

    def _flow_r0(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        p, us = self.p, self.u_star
        lam0, _, sig0 = self._coeffs(np.zeros(1))
        lam0, sig0 = lam0[0], sig0[0]
        y = x + us
        lap = np.floor(y)
        yl = y - lap
        cidx = np.floor(yl * p).astype(int)
        cidx = np.clip(cidx, 0, p - 1)
        off = yl - cidx / p  # offset from chart start
        base = lap + cidx / p - us  # lifted chart start
        center = base + us
        in_chart = off <= 2 * us
        u = off - us
        out = x.copy()
        fixed = in_chart & (u == 0)
        # connection index (gap the point belongs to) and its phase
        conn_start = np.where(in_chart & (u < 0), center - 1.0 / p, center)
        conn_k = np.where(in_chart & (u < 0), (cidx - 1) % p, cidx)
        lk = lam0[conn_k]
        lk1 = lam0[(conn_k + 1) % p]
        G = sig0[conn_k]
        phi = np.empty_like(x)
        m = in_chart & (u > 0)
        phi[m] = -np.log(us / u[m]) / lk[m]
        m = ~in_chart
        phi[m] = self._gap_time_r0(conn_k[m], off[m] - 2 * us, sig0[conn_k[m]])
        m = in_chart & (u < 0)
        phi[m] = G[m] + np.log(us / -u[m]) / lk1[m]
        phi2 = phi + t
        pos = np.empty_like(x)
        m = phi2 < 0
        pos[m] = conn_start[m] + us * np.exp(lk[m] * phi2[m])
        m = (phi2 >= 0) & (phi2 <= G)
        pos[m] = conn_start[m] + us + self._gap_off_r0(conn_k[m], phi2[m], sig0[conn_k[m]])
        m = phi2 > G
        pos[m] = conn_start[m] + 1.0 / p - us * np.exp(-lk1[m] * (phi2[m] - G[m]))
        out = np.where(fixed, x, pos)
        return out

    # -- public flow API ------------------------------------------------------

    def flow_lifted(self, x, r, t) -> np.ndarray:
        """Lifted abscissa after time t; x, r, t broadcast together."""
        x, r, t = np.broadcast_arrays(np.asarray(x, float), np.asarray(r, float), np.asarray(t, float))
        if not np.all(np.isfinite(t)):
            raise ValueError("flow time must be finite")
        shape = x.shape
        x, r, t = x.ravel().copy(), r.ravel(), t.ravel()
        out = np.empty_like(x)
        _, mu, _ = self._coeffs(r)
        zero = np.any(mu <= 0, axis=-1)
        if zero.any():
            out[zero] = self._flow_r0(x[zero], t[zero])
        pos = ~zero
        if pos.any():
            tab = self._tables(r[pos])
            out[pos] = self._pos_phase(self._phase_pos(x[pos], tab) + t[pos], tab)
        return out.reshape(shape)

    def phase(self, x, r) -> np.ndarray:
        """Flow time from the reference line theta = -u_star (r > 0 only)."""
        x, r = np.broadcast_arrays(np.asarray(x, float), np.asarray(r, float))
        if np.any(r <= 0):
            raise ValueError("phase is defined for r > 0 only")
        return self._phase_pos(x, self._tables(r))

    def from_phase(self, phi, r) -> np.ndarray:
        phi, r = np.broadcast_arrays(np.asarray(phi, float), np.asarray(r, float))
        return self._pos_phase(phi, self._tables(r))

    def flow_states(self, states: np.ndarray, t) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, float))
        th = self.flow_lifted(states[:, 0], states[:, 1], t)
        return np.stack([wrap_angles(th), states[:, 1]], axis=-1)

    def speed(self, theta, r) -> np.ndarray:
        """Vector field V(theta, r) (theta-component)."""
        theta, r = np.broadcast_arrays(np.asarray(theta, float), np.asarray(r, float))
        tab = self._tables(r)
        y = np.mod(theta + self.u_star, 1.0)
        starts = self._geom["starts"]
        segs = self._geom["segs"]
        j = np.clip(np.searchsorted(starts, y, side="right") - 1, 0, len(segs) - 1)
        out = np.zeros(theta.shape)
        for idx, seg in enumerate(segs):
            m = j == idx
            if not m.any():
                continue
            if seg[0] == "chart":
                k = seg[1]
                u = y[m] - starts[idx] - self.u_star
                out[m] = tab["lam"][..., k][m] * np.sqrt(u**2 + tab["mu"][..., k][m])
            else:
                out[m] = tab["speed"][..., idx][m]
        return out

    def max_speed(self) -> float:
        """Sup of V over the compact domain (the constant l of (C1))."""
        r = np.linspace(0.0, 1.0, 2001)
        tab = self._tables(r)
        chart = (tab["lam"] * np.sqrt(self.u_star**2 + tab["mu"])).max()
        gaps = np.nanmax(tab["speed"])
        return float(max(chart, gaps))

    def gap_integral(self, k: int, r, n: int = 4001) -> np.ndarray:
        """Numerical integral of dtheta / xi_k over gap k (composite Simpson)."""
        from scipy.integrate import simpson

        r = np.atleast_1d(np.asarray(r, float))
        us = self.u_star
        lo, hi = k / self.p + us, (k + 1) / self.p - us
        out = []
        # integrate piecewise so the speed jumps sit on nodes
        cuts = [lo, hi]
        tame = self._geom["tame"]
        if tame is not None and k == tame["k"]:
            cuts = [lo, lo + tame["d0"], lo + tame["d0"] + tame["width"], hi]
        for rv in r:
            total = 0.0
            for a, b in zip(cuts[:-1], cuts[1:]):
                th = np.linspace(a, b, n)
                mid = 0.5 * (a + b)
                sp = self.speed(np.full_like(th, mid), np.full_like(th, rv))
                total += float(simpson(1.0 / sp, x=th))
            out.append(total)
        return np.array(out)

    def check_gap_identity(self, r_samples=None) -> float:
        """Max relative error of the gap-time identity over all gaps."""
        r = np.linspace(0.0, 1.0, 11) if r_samples is None else np.asarray(r_samples, float)
        _, _, sig = self._coeffs(r)
        worst = 0.0
        for k in range(self.p):
            got = self.gap_integral(k, r)
            worst = max(worst, float(np.max(np.abs(got - sig[:, k]) / sig[:, k])))
        return worst


def default_pmodel(**overrides) -> PlanarPModel:
    """Default family: lambda = 1, mu(s) = s, sigma(s) = 3 - s/2, p = 2, a = 0.1."""
    return PlanarPModel.from_params(overrides)


def pmodel_planar_flow(m: PlanarPModel, t: float, x: ProductPoint) -> ProductPoint:
    if len(x.angles) != 1 or len(x.reals) != 1:
        raise ValueError("planar p-model points are (theta, r)")
    if not np.isfinite(t):
        raise ValueError("flow time must be finite")
    out = m.flow_states(x.as_array()[None, :], t)[0]
    return ProductPoint((out[0],), (out[1],))


def pmodel_time_alpha(m: PlanarPModel, alpha: Fn, x: ProductPoint) -> ProductPoint:
    """psi^alpha(theta, r) = psi(alpha(r), (theta, r))."""
    t = float(np.asarray(alpha(np.array([x.reals[0]])), dtype=float).ravel()[0])
    return pmodel_planar_flow(m, t, x)


def period_T(m: PlanarPModel, r: float) -> float:
    if r <= 0:
        raise ValueError("the level r = 0 carries rest points; its period is infinite")
    if r > 1:
        raise ValueError("r must lie in (0, 1]")
    return float(m.period(np.array([r]))[0])


def period_asymptote(m: PlanarPModel, r) -> np.ndarray:
    """Leading-order period -sum_k ln(mu_k(r)) / lambda_k(r) as r -> 0.

    Uses the unscaled coefficient functions evaluated at r.
    """
    r = np.asarray(r, float)
    total = np.zeros(r.shape)
    for k in range(m.p):
        total -= np.log(m.mu[k](r)) / m.lam[k](r)
    return total


_LOG_R_MIN = float(np.log(np.finfo(float).tiny)) + 10


def max_representable_period(m: PlanarPModel) -> float:
    """Largest period whose level r is a normal double."""
    return float(m.period(np.array([np.exp(_LOG_R_MIN)]))[0])


def orbit_of_period(m: PlanarPModel, q, rel_tol: float = 1e-13, underflow: str = "raise") -> np.ndarray | float:
    """Invert the period map by bisection in log r; q >= q* = T(1).

    Periods beyond the double range either raise or, with
    ``underflow="zero"``, map to r = 0.
    """
    scalar = np.ndim(q) == 0
    q = np.atleast_1d(np.asarray(q, float))
    q_star = float(m.period(np.array([1.0]))[0])
    if np.any(q < q_star * (1 - 1e-15)):
        raise ValueError(f"period below the minimal period q* = {q_star}")
    lo = np.full(q.shape, _LOG_R_MIN)  # log r
    hi = np.zeros(q.shape)
    too_big = m.period(np.exp(lo)) < q
    if too_big.any():
        if underflow != "zero":
            raise ValueError("period too large to represent in double precision")
        out = np.zeros(q.shape)
        if (~too_big).any():
            out[~too_big] = orbit_of_period(m, q[~too_big], rel_tol)
        return float(out[0]) if scalar else out
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        big = m.period(np.exp(mid)) >= q
        lo = np.where(big, mid, lo)
        hi = np.where(big, hi, mid)
        if np.all(hi - lo <= rel_tol):
            break
    r = np.exp(hi)
    r = np.where(q <= q_star, 1.0, r)
    return float(r[0]) if scalar else r


def planar_system(m: PlanarPModel, time: float = 1.0) -> DiscreteSystem:
    """Time-``time`` map of the planar p-model as a DiscreteSystem."""

    def step(s):
        return m.flow_states(s, time)

    def power(s, times):
        t = np.asarray(times, float)[None, :] * time
        th = m.flow_lifted(s[:, :1], s[:, 1:2], t)
        r = np.broadcast_to(s[:, 1:2], th.shape)
        return np.stack([wrap_angles(th), r], axis=-1)

    return DiscreteSystem(SpaceSpec(1, ((0.0, 1.0),)), step, power, "pmodel-planar", {"model": m.params, "time": time})


def return_map_system(m: PlanarPModel, alpha: Fn) -> DiscreteSystem:
    """Time-alpha(r) map of the planar p-model."""

    def step(s):
        return m.flow_states(s, alpha(s[:, 1]))

    def power(s, times):
        t = np.asarray(times, float)[None, :] * np.asarray(alpha(s[:, 1]), float)[:, None]
        th = m.flow_lifted(s[:, :1], s[:, 1:2], t)
        return np.stack([wrap_angles(th), np.broadcast_to(s[:, 1:2], th.shape)], axis=-1)

    return DiscreteSystem(SpaceSpec(1, ((0.0, 1.0),)), step, power, "pmodel-return", {"model": m.params, "alpha": repr(alpha)})


# ---------------------------------------------------------------------------
# p-model product


@dataclass(frozen=True, eq=False)
class PModelSystem:
    """alpha (x) psi on T^2 x [0, 1]: phi advances by alpha(r)."""

    planar: PlanarPModel
    alpha: Fn = field(default=_linear(1.0, 1.0))
    params: dict = field(default_factory=lambda: {"alpha0": 1.0, "alpha_slope": 1.0})

    def __post_init__(self):
        r = np.linspace(0.0, 1.0, 257)
        if not np.all(np.asarray(self.alpha(r)) > 0):
            raise ModelError("alpha must be positive on [0, 1]")

    def alpha_lipschitz(self) -> float:
        r = np.linspace(0.0, 1.0, 4001)
        return float(np.abs(np.diff(self.alpha(r))).max() / (r[1] - r[0]))


def default_pmodel_system(**overrides) -> PModelSystem:
    a0 = overrides.pop("alpha0", 1.0)
    a1 = overrides.pop("alpha_slope", 1.0)
    return PModelSystem(default_pmodel(**overrides), _linear(a0, a1), {"alpha0": a0, "alpha_slope": a1})


def pmodel_product_time1(sys: PModelSystem, x: ProductPoint) -> ProductPoint:
    if len(x.angles) != 2 or len(x.reals) != 1:
        raise ValueError("p-model product points are (phi, theta, r)")
    phi, th = x.angles
    r = x.reals[0]
    a = float(np.asarray(sys.alpha(np.array([r]))).ravel()[0])
    out = sys.planar.flow_states(np.array([[th, r]]), 1.0)[0]
    return ProductPoint((phi + a, out[0]), (r,))


def product_system(sys: PModelSystem) -> DiscreteSystem:
    m = sys.planar

    def step(s):
        out = np.empty_like(s)
        out[:, 0] = s[:, 0] + sys.alpha(s[:, 2])
        out[:, 1:] = m.flow_states(s[:, 1:], 1.0)
        return out

    def power(s, times):
        t = np.asarray(times, float)[None, :]
        th = m.flow_lifted(s[:, 1:2], s[:, 2:3], t)
        phi = s[:, 0:1] + t * np.asarray(sys.alpha(s[:, 2]))[:, None]
        return np.stack([wrap_angles(phi), wrap_angles(th), np.broadcast_to(s[:, 2:3], th.shape)], axis=-1)

    return DiscreteSystem(SpaceSpec(2, ((0.0, 1.0),)), step, power, "pmodel-product", {"model": m.params, "alpha": sys.params})


# ---------------------------------------------------------------------------
# Elliptic normal form


@dataclass(frozen=True, eq=False)
class EllipticNormalForm:
    """phi' = dH/dI(I, J), psi' = dH/dJ(I, J) with (I, J) fixed."""

    dH_dI: Callable
    dH_dJ: Callable
    real_bounds: tuple = ((0.0, 1.0), (0.0, 1.0))


def _elliptic_freqs(nf: EllipticNormalForm, I, J):
    wI = np.asarray(nf.dH_dI(I, J), float) * np.ones(np.shape(I))
    wJ = np.asarray(nf.dH_dJ(I, J), float) * np.ones(np.shape(I))
    if np.any(wI == 0):
        raise ModelError("dH/dI must not vanish on the domain")
    return wI, wJ


def elliptic_time1(nf: EllipticNormalForm, x: ProductPoint) -> ProductPoint:
    if len(x.angles) != 2 or len(x.reals) != 2:
        raise ValueError("elliptic points are (phi, psi, I, J)")
    I, J = x.reals
    if J < 0:
        raise ValueError("J must be nonnegative")
    wI, wJ = _elliptic_freqs(nf, np.array([I]), np.array([J]))
    return ProductPoint((x.angles[0] + wI[0], x.angles[1] + wJ[0]), x.reals)


def elliptic_chart(x: ProductPoint) -> np.ndarray:
    """(phi, psi, I, J) -> (phi, I, sqrt(2J) cos 2 pi psi, sqrt(2J) sin 2 pi psi)."""
    phi, psi = x.angles
    I, J = x.reals
    rad = np.sqrt(2 * J)
    return np.array([phi, I, rad * np.cos(2 * np.pi * psi), rad * np.sin(2 * np.pi * psi)])


def elliptic_system(nf: EllipticNormalForm) -> DiscreteSystem:
    def freqs(s):
        return np.stack(_elliptic_freqs(nf, s[:, 2], s[:, 3]), axis=-1)

    def step(s):
        out = s.copy()
        out[:, :2] += freqs(s)
        return out

    def power(s, times):
        w = freqs(s)
        t = np.asarray(times, float)
        out = np.repeat(s[:, None, :], t.size, axis=1)
        out[:, :, :2] += t[None, :, None] * w[:, None, :]
        return out

    return DiscreteSystem(SpaceSpec(2, nf.real_bounds), step, power, "elliptic", {"bounds": nf.real_bounds})


# ---------------------------------------------------------------------------
# Rotator x pendulum


def pendulum_energy(theta2, r2):
    """f = r2^2 / 2 - cos(2 pi theta2)."""
    return 0.5 * np.asarray(r2) ** 2 - np.cos(2 * np.pi * np.asarray(theta2))


_YOSHIDA_W1 = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
_YOSHIDA_W0 = -(2.0 ** (1.0 / 3.0)) * _YOSHIDA_W1


@dataclass(frozen=True)
class RotatorPendulum:
    """H = r1 + (r2^2 / 2 - cos 2 pi theta2) / (2 pi) on a fixed energy level.

    States are (theta1, theta2, r2); r1 is slaved to the energy and does
    not enter the dynamics. The pendulum factor is integrated with
    kick-drift-kick splitting; ``order=4`` composes three such steps.
    """

    step_size: float = 1.0 / 256
    order: int = 4
    rotor_frequency: float = 1.0
    r2_bound: float = 3.0

    def __post_init__(self):
        n = 1.0 / self.step_size
        if abs(n - round(n)) > 1e-9:
            raise ValueError("step_size must divide 1")
        if self.order not in (2, 4):
            raise ValueError("order must be 2 or 4")

    def _strang(self, th, r, h):
        r = r - 0.5 * h * np.sin(2 * np.pi * th)
        th = th + h * r / (2 * np.pi)
        r = r - 0.5 * h * np.sin(2 * np.pi * th)
        return th, r

    def advance(self, th, r, t: float):
        """Integrate the pendulum factor for time t (a multiple of step_size)."""
        n = int(round(abs(t) / self.step_size))
        h = np.sign(t) * self.step_size
        for _ in range(n):
            if self.order == 2:
                th, r = self._strang(th, r, h)
            else:
                th, r = self._strang(th, r, _YOSHIDA_W1 * h)
                th, r = self._strang(th, r, _YOSHIDA_W0 * h)
                th, r = self._strang(th, r, _YOSHIDA_W1 * h)
        return th, r


def rotator_pendulum_time1(sys: RotatorPendulum, x: ProductPoint) -> ProductPoint:
    if len(x.angles) != 2 or len(x.reals) != 1:
        raise ValueError("rotator-pendulum points are (theta1, theta2, r2)")
    th, r = sys.advance(np.array([x.angles[1]]), np.array([x.reals[0]]), 1.0)
    return ProductPoint((x.angles[0] + sys.rotor_frequency, th[0]), (r[0],))


def rotator_pendulum_system(sys: RotatorPendulum) -> DiscreteSystem:
    def step(s):
        th, r = sys.advance(s[:, 1], s[:, 2], 1.0)
        return np.stack([s[:, 0] + sys.rotor_frequency, th, r], axis=-1)

    space = SpaceSpec(2, ((-sys.r2_bound, sys.r2_bound),))
    return DiscreteSystem(space, step, None, "rotator-pendulum", {"h": sys.step_size, "order": sys.order, "rotor": sys.rotor_frequency})
