"""Explicit, checkable entropy bounds for p-models.

The lower bound is a separated set made of backward iterates of points
on a ladder of periodic orbits. The upper bound is a cover of the
planar annulus by regions of d_N-diameter at most epsilon: near the
polycycle (periods >= kappa N) by blocks, their exits and backward
iterates; further out by thin strips between periodic orbits cut into
rectangles along the slower orbit. The three-dimensional cover of the
product system multiplies each planar region by intervals of length
epsilon / 2 in phi, after cutting the region in r so the drift of phi
stays below epsilon / 2.

Regions are stored as families with closed-form membership (``locate``),
never as point lists.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .dyn_core import DiscreteSystem, ProductPoint, base_distance, wrap_angles
from .entropy_estimators import BallOracle, SampleGrid
from .model_flows import (
    PlanarPModel,
    max_representable_period,
    orbit_of_period,
    planar_system,
)

__all__ = [
    "CertificateError",
    "CutoffPlan",
    "SeparatedSetCertificate",
    "SeparationReport",
    "CoveringCertificate",
    "CoverReport",
    "compute_kappa",
    "block_containment_excess",
    "arc_containment_margin",
    "admissible_lower_epsilon",
    "build_lower_bound_set",
    "verify_separated",
    "build_upper_bound_cover",
    "witness_grid",
    "verify_cover",
    "SCHEMA_VERSION",
]

SCHEMA_VERSION = 1


class CertificateError(ValueError):
    """A construction hypothesis fails for the requested parameters."""


def _levels(m: PlanarPModel, q) -> np.ndarray:
    return orbit_of_period(m, q, underflow="zero")


# ---------------------------------------------------------------------------
# cutoff plan


@dataclass(frozen=True, eq=False)
class CutoffPlan:
    """Constants of the upper-bound construction for one epsilon."""

    model: PlanarPModel
    epsilon: float
    kappa: int
    nu: int
    q_star: float
    r0: float
    r_star: float
    N0: int
    N1: int
    N2: int
    N3: int
    ell_prime: float
    c1: float
    lam_lip: float
    j_star: int
    alpha_slope: float
    plateau: tuple
    trace: tuple = field(default=(), repr=False)

    @property
    def n_min(self) -> int:
        return max(self.N0, self.N1, self.N2, self.N3)

    def inner_level(self, N: int) -> float:
        """r(kappa N): the inner annulus is r <= this level (0 if it underflows)."""
        return float(_levels(self.model, np.array([self.kappa * N]))[0])

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon, "kappa": self.kappa, "nu": self.nu, "q_star": self.q_star,
            "r0": self.r0, "r_star": self.r_star, "N0": self.N0, "N1": self.N1, "N2": self.N2,
            "N3": self.N3, "ell_prime": self.ell_prime, "c1": self.c1, "lam_lip": self.lam_lip,
            "j_star": self.j_star, "alpha_slope": self.alpha_slope, "plateau": list(self.plateau),
        }


def _block_transit(m: PlanarPModel, k: int, r: np.ndarray, half: float) -> np.ndarray:
    lam, mu, _ = m._coeffs(r)
    with np.errstate(divide="ignore"):
        return 2 * np.arcsinh(half / np.sqrt(mu[..., k])) / lam[..., k]


def _lipschitz_on_plateau(m: PlanarPModel, lo: float, hi: float) -> float:
    """Numerical Lipschitz constant of (t, theta, r) -> psi_t(theta, r) on [-1, 1] x K."""
    th = np.linspace(lo, hi, 41)
    r = np.linspace(0.0, 1.0, 21)[1:]
    t = np.linspace(-1.0, 1.0, 41)
    T, TH, R = np.meshgrid(t, th, r, indexing="ij")
    h = 1e-6
    base = m.flow_lifted(TH, R, T)
    d_th = np.abs(m.flow_lifted(TH + h, R, T) - base) / h
    d_r = np.abs(m.flow_lifted(TH, np.minimum(R + h, 1.0), T) - base) / h
    d_t = np.abs(m.flow_lifted(TH, R, T + h) - base) / h
    return float((d_th + d_r + d_t).max())


def compute_kappa(m: PlanarPModel, epsilon: float, alpha=None) -> CutoffPlan:
    """Cutoff constant kappa and the thresholds N0..N3 for one epsilon."""
    p = m.p
    if not 0 < epsilon < 2 * m.u_star:
        raise CertificateError(f"epsilon must lie in (0, {2 * m.u_star}) so blocks sit inside charts")
    lam0 = m._coeffs(np.zeros(1))[0][0]
    ratios = [sum(lam0[l % p] / lam0[k] for l in range(1, p)) for k in range(p)]
    kappa = int(math.floor(2 * max(ratios))) + 1
    q_star = float(m.period(np.array([1.0]))[0])
    half = epsilon / 2
    trace = []

    # r0: block transit beats T / kappa for every level below it
    logr = np.linspace(np.log(np.finfo(float).tiny) + 10, 0.0, 4001)
    r = np.exp(logr)
    T = m.period(r)
    ok = np.ones(r.size, dtype=bool)
    for k in range(p):
        ok &= _block_transit(m, k, r, half) > T / kappa
    if not ok[0]:
        raise CertificateError(f"no level satisfies the block condition; trace: {list(zip(r[:3], T[:3]))}")
    first_bad = np.flatnonzero(~ok)
    r0 = float(r[first_bad[0] - 1]) if first_bad.size else 1.0
    trace.append(("r0", r0))
    N0 = int(math.ceil(float(m.period(np.array([r0]))[0])))

    # N1: r(kappa N) <= epsilon
    N1 = 1 if epsilon >= 1 else int(math.ceil(float(m.period(np.array([epsilon]))[0]) / kappa))

    # nu: first iterate of a_k(0) inside the next block
    nu = 0
    for k in range(p):
        x0 = k / p + half
        target = (k + 1) / p
        for ell in range(1, 10000):
            x = float(m.flow_lifted(x0, 0.0, float(ell)))
            if abs(x - target) <= half:
                nu = max(nu, ell)
                break
        else:
            raise CertificateError("separatrix point never reaches the next block")

    # r*: psi^nu(a_k(r)) stays inside block k+1 for r <= r*
    def nu_ok(rv: float) -> bool:
        return all(
            float(m.flow_lifted(k / p + half, rv, float(nu))) <= (k + 1) / p + half for k in range(p)
        )

    if nu_ok(1.0):
        r_star = 1.0
    else:
        lo, hi = np.log(np.finfo(float).tiny) + 10, 0.0
        if not nu_ok(float(np.exp(lo))):
            raise CertificateError("nu condition fails at every level")
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if nu_ok(float(np.exp(mid))):
                lo = mid
            else:
                hi = mid
        r_star = float(np.exp(lo))
    N2 = int(math.ceil(math.ceil(float(m.period(np.array([r_star]))[0])) / kappa))

    alpha = alpha if alpha is not None else (lambda rr: 1.0 + np.asarray(rr))
    rr = np.linspace(0.0, 1.0, 4001)
    a_slope = float(np.abs(np.diff(alpha(rr))).max() / (rr[1] - rr[0]))

    # N3: N max|alpha'| r(kappa N) <= epsilon / 2
    N3 = max(1, math.ceil(q_star / kappa))
    while N3 < 10**6:
        if N3 * a_slope * float(_levels(m, np.array([kappa * N3]))[0]) <= half:
            break
        N3 += 1

    ell_prime = m.max_speed()
    tame = m.tame
    if tame is None:
        plateau = (float("nan"), float("nan"))
        lam_lip, j_star = float("nan"), 0
    else:
        lo_p = tame["k"] / p + tame["u0"]
        plateau = (lo_p, lo_p + tame["M"])
        lam_lip = max(1.0, _lipschitz_on_plateau(m, *plateau))
        j_star = int(math.floor(tame["M"] / (epsilon / (2 * lam_lip)))) + 1
    n_min = max(N0, N1, N2, N3)
    excess = block_containment_excess(m, epsilon, kappa, n_min)
    trace.append(("containment", n_min, excess))
    if excess > 1e-12:
        raise CertificateError(f"entry edge leaves its block by {excess:.3g} at N={n_min}; trace: {trace}")
    return CutoffPlan(
        m, float(epsilon), kappa, nu, q_star, r0, r_star, N0, N1, N2, N3, ell_prime,
        1.0 / ell_prime, lam_lip, j_star, a_slope, plateau, tuple(trace),
    )


def block_containment_excess(m: PlanarPModel, epsilon: float, kappa: int, N: int, n_samples: int = 200) -> float:
    """Largest overshoot of the block by psi^n of the entry edge, n <= N.

    Samples levels 0 <= r <= r(kappa N) on the edge theta = k/p - epsilon/2.
    A value <= 0 (up to rounding) means every sampled iterate stays inside its block.
    """
    half = epsilon / 2
    r_top = float(_levels(m, np.array([float(kappa * N)]))[0])
    r = np.concatenate([[0.0], r_top * np.geomspace(1e-12, 1.0, n_samples - 1)]) if r_top > 0 else np.zeros(1)
    n = np.arange(N + 1, dtype=float)
    worst = -np.inf
    for k in range(m.p):
        start = np.full((r.size, 1), k / m.p - half)
        x = m.flow_lifted(start, r[:, None], n[None, :])
        worst = max(worst, float(np.abs(x - k / m.p).max() - half))
    return worst


def arc_containment_margin(m: PlanarPModel, theta0: float, qs) -> np.ndarray:
    """Per period q: how far [psi(a_q), psi^[q/2](a_q)] stays inside [psi(a_inf), psi^-1(a_inf)].

    Works in the lifted angle, where the second arc runs from psi(a_inf)
    forward to psi^-1(a_inf) + 1. Entries below zero (beyond rounding) mark a violation.
    """
    qs = np.atleast_1d(np.asarray(qs, float))
    r = _levels(m, qs)
    first = m.flow_lifted(np.full(qs.size, theta0), r, np.ones(qs.size))
    last = m.flow_lifted(np.full(qs.size, theta0), r, np.floor(qs / 2))
    lo = float(m.flow_lifted(theta0, 0.0, 1.0))
    hi = float(m.flow_lifted(theta0, 0.0, -1.0)) + 1.0
    return np.minimum(first - lo, hi - last)


# ---------------------------------------------------------------------------
# lower bound


@dataclass(frozen=True, eq=False)
class SeparatedSetCertificate:
    points: tuple
    N: int
    epsilon: float
    periods: tuple = ()
    theta0: float = 0.0
    margin: Optional[float] = None
    model_key: str = ""
    # exact flow-time coordinate of each point along its orbit; theta alone
    # rounds onto the rest points for long periods
    phases: tuple = ()
    model: Optional[PlanarPModel] = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return len(self.points)

    def as_array(self) -> np.ndarray:
        return np.array([p.as_array() for p in self.points]).reshape(len(self.points), -1)

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION, "kind": "separated", "N": self.N, "epsilon": self.epsilon,
            "parameters_hash": self.model_key, "theta0": self.theta0, "periods": list(self.periods),
            "points": self.as_array().tolist(), "phases": list(self.phases), "margin": self.margin,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _lower_conditions(m: PlanarPModel, theta0: np.ndarray) -> np.ndarray:
    """min of the distances in conditions (1) and (2) at the separatrix level."""

    def circ(a, b):
        d = np.abs(a - b)
        d = d - np.floor(d)
        return np.minimum(d, 1 - d)

    x0 = theta0
    xp = m.flow_lifted(x0, 0.0, 1.0)
    xm = m.flow_lifted(x0, 0.0, -1.0)
    x2 = m.flow_lifted(x0, 0.0, 2.0)
    return np.minimum.reduce([circ(x0, xp), circ(x0, xm), circ(xp, x2)])


def admissible_lower_epsilon(m: PlanarPModel) -> tuple[float, float]:
    """Best base point theta0 and the supremum of admissible epsilon."""
    th = np.linspace(0.0, 1.0, 20001, endpoint=False)
    vals = _lower_conditions(m, th)
    j = int(np.argmax(vals))
    return float(th[j]), float(vals[j])


def _lower_periods(N: int, q_star: float) -> list[int]:
    q0 = math.ceil(N / 3)
    qs = [q0 + 3 * i for i in range(N // 18)]
    if any(q > N / 2 for q in qs) or any(q < q_star for q in qs):
        raise CertificateError("period ladder leaves [N/3, N/2] or drops below q*")
    return qs


def build_lower_bound_set(m: PlanarPModel, N: int, epsilon: float, theta0: float | None = None) -> SeparatedSetCertificate:
    """Union over the period ladder of the backward iterates psi^-k(a_q), 1 <= k <= [q/2]."""
    q_star = float(m.period(np.array([1.0]))[0])
    if N < max(18, 3 * math.ceil(q_star)):
        raise CertificateError(f"N must be >= {max(18, 3 * math.ceil(q_star))}")
    best_theta, eps_max = admissible_lower_epsilon(m)
    if theta0 is None:
        theta0 = best_theta
    else:
        eps_max = float(_lower_conditions(m, np.array([theta0]))[0])
    if np.any(np.abs(wrap_angles(theta0 - np.arange(m.p) / m.p + 0.5) - 0.5) < 1e-12):
        raise CertificateError("theta0 sits on a rest point")
    if not epsilon < eps_max:
        raise CertificateError(f"epsilon {epsilon} violates conditions (1)/(2); maximal admissible epsilon is {eps_max:.6g}")
    qs = _lower_periods(N, q_star)
    arc = arc_containment_margin(m, theta0, qs)
    if np.any(arc < -1e-12):
        raise CertificateError(f"iterate arc leaves [psi(a_inf), psi^-1(a_inf)] for periods {np.asarray(qs)[arc < -1e-12].tolist()}")
    pts, phases = [], []
    for q in qs:
        r = float(orbit_of_period(m, float(q)))
        ph = float(m.phase(theta0, r)) - np.arange(1, q // 2 + 1, dtype=float)
        th = wrap_angles(m.from_phase(ph, r))
        pts.extend(ProductPoint((float(t),), (r,)) for t in th)
        phases.extend(ph.tolist())
    return SeparatedSetCertificate(tuple(pts), int(N), float(epsilon), tuple(qs), float(theta0), None, m.key, tuple(phases), m)


@dataclass(frozen=True)
class SeparationReport:
    passed: bool
    margin: float
    min_distance: float
    n_points: int
    violations: tuple = ()
    seconds: float = 0.0


def _lift(sys: DiscreteSystem, arr: np.ndarray, phi: float = 0.0) -> np.ndarray:
    if sys.space.dim == arr.shape[1]:
        return arr
    if sys.space.dim == arr.shape[1] + 1:
        return np.concatenate([np.full((arr.shape[0], 1), phi), arr], axis=1)
    raise ValueError("certificate points do not fit the system")


def _phase_chart(sys: DiscreteSystem, m: PlanarPModel) -> DiscreteSystem:
    """``sys`` with its theta column read as phase, so orbits come from from_phase.

    Only ``power`` is provided; the oracle never calls ``step`` on exact systems.
    """
    col = sys.space.n_angles - 1

    def power(states, times):
        out = sys.power(states, times)
        t = np.asarray(times, float)[None, :]
        out[..., col] = wrap_angles(m.from_phase(states[:, col : col + 1] + t, states[:, -1:]))
        return out

    return DiscreteSystem(sys.space, sys.step, power, f"{sys.name}-phase", {**sys.params, "phase_chart": True})


def verify_separated(sys: DiscreteSystem, cert: SeparatedSetCertificate, slack: float = 1e-12, max_report: int = 20) -> tuple[SeparatedSetCertificate, SeparationReport]:
    """Exact pairwise d_N check: every pair must be at least epsilon apart.

    Candidate pairs come from a checkpoint k-d tree at radius 2 epsilon;
    every pair closer than that is measured exactly, so the minimum is
    exact whenever it is below 2 epsilon. Certificates that carry phases
    for the same p-model are evaluated through those phases.
    """
    t0 = time.perf_counter()
    eps = cert.epsilon
    pts = _lift(sys, cert.as_array())
    use_phase = bool(cert.phases) and cert.model is not None and sys.exact and sys.params.get("model") == cert.model.params
    if use_phase:
        pts[:, sys.space.n_angles - 1] = cert.phases
        sys = _phase_chart(sys, cert.model)
    grid = SampleGrid(sys.space, (0.0,) * sys.space.dim, pts)
    oracle = BallOracle(sys, grid, cert.N)
    radius = 2 * eps
    min_d = radius
    bad = []
    for i in range(pts.shape[0]):
        cand = oracle.candidates(i, radius)
        cand = cand[cand > i]
        if cand.size == 0:
            continue
        d = oracle.distances(i, cand)
        if d.size:
            min_d = min(min_d, float(d.min()))
        for j in cand[d < eps - slack]:
            if len(bad) < max_report:
                bad.append((i, int(j), float(d[cand == j][0])))
            else:
                break
    n_bad = len(bad)
    margin = min_d - eps
    passed = n_bad == 0
    new = replace(cert, margin=margin)
    return new, SeparationReport(passed, margin, min_d, pts.shape[0], tuple(bad), time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# upper bound


@dataclass
class CoveringCertificate:
    """Planar cover families plus the product-direction multiplicities."""

    model: PlanarPModel
    plan: CutoffPlan
    N: int
    epsilon: float
    inner_level: float
    inner_intervals: tuple  # per gap k: array of interval edges
    exit_intervals: tuple  # per gap k: indices of intervals meeting U_k
    strips: list  # per k: dict(q_hi, q_lo, width, count)
    counts: dict
    product_count: int
    product_subdivisions: dict
    diagnostics: list = field(default_factory=list)
    deleted: set = field(default_factory=set)
    inflated: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def planar_count(self) -> int:
        return int(sum(self.counts.values()))

    def alpha_bound(self) -> float:
        """alpha_eps N^2 with alpha_eps = (2/eps) c_eps zeta(2)."""
        pl = self.plan
        c2 = 2 * pl.j_star
        c3 = 2 + pl.c1 * self.epsilon / pl.q_star
        c_eps = c2 * c3 * pl.kappa**2 / (pl.c1 * self.epsilon)
        return (2 / self.epsilon) * c_eps * (math.pi**2 / 6) * self.N**2

    # -- membership -------------------------------------------------------

    def _strip_of(self, q: np.ndarray):
        kN = self.plan.kappa * self.N
        K = len(self.strips)
        k = np.clip(np.floor(kN / q).astype(int), 1, K)
        q_hi = kN / k
        w = np.array([s["width"] for s in self.strips])[k - 1]
        n_sub = np.array([s["n_sub"] for s in self.strips])[k - 1]
        j = np.clip(np.floor((q_hi - q) / w).astype(int), 0, n_sub - 1)
        q_up = q_hi - j * w
        q_lo = np.maximum(q_up - w, np.array([s["q_lo"] for s in self.strips])[k - 1])
        return k, j, q_up, q_lo

    def _arc_index(self, theta: np.ndarray, q_up: np.ndarray, r_point: np.ndarray):
        """Lap time i and plateau piece jj, measured along the level r(q_up).

        Where r(q_up) underflows, the point's own level stands in for it.
        """
        m = self.model
        r_up = _levels(m, q_up)
        r_eff = np.where(r_up > 0, r_up, r_point)
        lo = self.plan.plateau[0]
        T = m.period(r_eff)
        ph = np.mod(m.phase(theta, r_eff) - m.phase(np.full(theta.shape, lo), r_eff), T)
        i = np.floor(ph).astype(int)
        h = self.epsilon / (2 * self.plan.lam_lip)
        jj = np.minimum(np.floor(m.tame["M"] * (ph - i) / h).astype(int), self.plan.j_star - 1)
        return i, jj, r_up

    def rectangle(self, k: int, j: int, i: int, jj: int):
        """(theta_minus, theta_plus (lifted), r_up, r_lo) of strip rectangle R_ij."""
        m = self.model
        s = self.strips[k - 1]
        q_up = s["q_hi"] - j * s["width"]
        q_lo = max(q_up - s["width"], s["q_lo"])
        r_up, r_lo = _levels(m, np.array([q_up, q_lo]))
        h = self.epsilon / (2 * self.plan.lam_lip)
        M = m.tame["M"]
        t0 = i + jj * h / M
        t1 = i + min((jj + 1) * h, M) / M
        lo = self.plan.plateau[0]
        th0, th1 = m.flow_lifted(lo, r_up, np.array([t0, t1]))
        return float(th0), float(th1), float(r_up), float(r_lo)

    def _inner_index(self, k: int, theta: np.ndarray) -> np.ndarray:
        edges = self.inner_intervals[k]
        start = edges[0]
        off = np.mod(theta - start, 1.0) + start
        return np.clip(np.searchsorted(edges, off, side="right") - 1, 0, len(edges) - 2)

    def locate(self, points: np.ndarray) -> list:
        """Canonical element id of each planar point (None if uncovered)."""
        m, p = self.model, self.model.p
        pts = np.atleast_2d(points)
        th, r = wrap_angles(pts[:, 0]), pts[:, 1]
        half = self.epsilon / 2
        out: list = [None] * th.size
        kN = self.plan.kappa * self.N
        q = np.full(th.size, np.inf)
        pos = r > 0
        q[pos] = m.period(r[pos])
        inner = (q >= kN) | (r <= self.inner_level)
        # inner annulus
        idx = np.flatnonzero(inner)
        if idx.size:
            c = np.round(th[idx] * p) % p
            off = th[idx] - np.round(th[idx] * p) / p
            # blocks are half-open: the exit edge belongs to the gap cover
            in_block = (off >= -half) & (off < half)
            for kk in range(p):
                # block points
                sel = idx[in_block & (c == kk)]
                if sel.size:
                    offs = th[sel] - np.round(th[sel] * p) / p
                    x = kk / p + offs
                    exit_x = kk / p + half
                    s = np.full(sel.size, np.inf)
                    rp = r[sel] > 0
                    if rp.any():
                        rr = r[sel][rp]
                        s[rp] = np.mod(m.phase(np.full(rp.sum(), exit_x), rr) - m.phase(x[rp], rr), m.period(rr))
                    r0 = ~rp & (offs > 0)
                    if r0.any():
                        lam0 = float(m._coeffs(np.zeros(1))[0][0, kk])
                        s[r0] = np.log(half / offs[r0]) / lam0
                    n = np.ceil(s - 1e-12)
                    go = (s > 0) & (n <= self.N) & np.isfinite(s)
                    for t, j in enumerate(sel):
                        if not go[t]:
                            out[j] = ("K", kk)
                    if go.any():
                        xs = m.flow_lifted(x[go], r[sel][go], n[go])
                        ii = self._inner_index(kk, wrap_angles(xs))
                        for t, j, nn in zip(ii, sel[go], n[go]):
                            out[j] = ("Bn", int(nn), kk, int(t))
                # gap points
                gsel = idx[~in_block]
                gk = np.floor(np.mod(th[gsel] - half, 1.0) * p).astype(int) % p
                sel = gsel[gk == kk]
                if sel.size:
                    ii = self._inner_index(kk, th[sel])
                    for t, j in zip(ii, sel):
                        out[j] = ("B", kk, int(t))
        # outer annulus
        idx = np.flatnonzero(~inner)
        if idx.size:
            qk = np.maximum(q[idx], self.plan.q_star)
            k, j, q_up, _ = self._strip_of(qk)
            i, jj, _ = self._arc_index(th[idx], q_up, r[idx])
            for t, g in enumerate(idx):
                out[g] = ("R", int(k[t]), int(j[t]), int(i[t]), int(jj[t]))
        # negative-control edits
        if self.inflated:
            for eid, amount in self.inflated.items():
                lo, hi, rlo, rhi = self.geometry(eid)
                d = np.mod(th - lo, 1.0)
                inside = (d <= (hi - lo) + amount) | (np.mod(lo - th, 1.0) <= amount)
                inside &= (r >= rlo - 1e-15) & (r <= rhi + 1e-15)
                for g in np.flatnonzero(inside):
                    out[g] = eid
        if self.deleted:
            out = [None if o in self.deleted else o for o in out]
        return out

    def geometry(self, eid) -> tuple:
        """(theta_lo, theta_hi lifted, r_lo, r_hi) for regular and rectangle elements."""
        if eid[0] == "B":
            edges = self.inner_intervals[eid[1]]
            return float(edges[eid[2]]), float(edges[eid[2] + 1]), 0.0, self.inner_level
        if eid[0] == "R":
            a, b, r_up, r_lo = self.rectangle(*eid[1:])
            return a, b, r_up, r_lo
        raise ValueError("geometry is only defined for regular and rectangle elements")

    def counts_by_tag(self) -> dict:
        return dict(self.counts)

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION, "kind": "cover", "N": self.N, "epsilon": self.epsilon,
            "parameters_hash": self.model.key, "plan": self.plan.to_dict(),
            "inner_level": self.inner_level,
            "elements": {
                "regular": [e.tolist() for e in self.inner_intervals],
                "exit_regular": [list(map(int, e)) for e in self.exit_intervals],
                "strips": [{k: (float(v) if isinstance(v, (float, np.floating)) else int(v)) for k, v in s.items()} for s in self.strips],
            },
            "counts": self.counts, "planar_count": self.planar_count,
            "product_count": self.product_count, "diagnostics": self.diagnostics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _regular_intervals(m: PlanarPModel, k: int, r_top: float, eps: float, nu: int) -> np.ndarray:
    """Greedy d_nu cover of the gap between blocks k and k+1 by theta-intervals."""
    p = m.p
    start = k / p + eps / 2
    end = (k + 1) / p - eps / 2
    times = np.arange(nu + 1, dtype=float)

    def spread(a, b):
        return float((m.flow_lifted(b, r_top, times) - m.flow_lifted(a, 0.0, times)).max())

    edges = [start]
    a = start
    while a < end - 1e-15:
        if spread(a, end) <= eps:
            edges.append(end)
            break
        if spread(a, a) > eps:
            raise CertificateError("inner level too high for a d_nu cover; increase N")
        lo, hi = a, end
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if spread(a, mid) <= eps:
                lo = mid
            else:
                hi = mid
        edges.append(lo)
        a = lo
    return np.array(edges)


def _strip_plan(plan: CutoffPlan, N: int) -> list:
    kN = plan.kappa * N
    K = max(1, math.ceil(kN / plan.q_star) - 1)
    strips = []
    for k in range(1, K + 1):
        q_hi = kN / k
        q_lo = max(kN / (k + 1), plan.q_star)
        w = plan.c1 * plan.epsilon / (2 * (k + 1))
        n_sub = max(1, math.ceil((q_hi - q_lo) / w - 1e-12))
        strips.append({"k": k, "q_hi": q_hi, "q_lo": q_lo, "width": w, "n_sub": n_sub})
    return strips


def _level_table(m: PlanarPModel, n: int = 200001):
    logr = np.linspace(np.log(np.finfo(float).tiny) + 10, 0.0, n)
    T = m.period(np.exp(logr))
    return T[::-1], logr[::-1]  # increasing periods


def build_upper_bound_cover(m: PlanarPModel, N: int, epsilon: float, plan: CutoffPlan | None = None, alpha=None) -> CoveringCertificate:
    """Block/strip cover of the planar annulus with d_N-diameter <= epsilon."""
    t_start = time.perf_counter()
    if m.tame is None:
        raise CertificateError("the strip construction needs the tame-plateau variant")
    plan = plan if plan is not None else compute_kappa(m, epsilon, alpha)
    if abs(plan.epsilon - epsilon) > 0:
        raise CertificateError("plan was computed for a different epsilon")
    diagnostics = []
    if N < plan.n_min:
        raise CertificateError(f"N must be >= max(N0..N3) = {plan.n_min}")
    p, half = m.p, epsilon / 2
    r_top = plan.inner_level(N)
    if r_top == 0.0:
        diagnostics.append("inner annulus level r(kappa N) underflows double precision; treated as r = 0")
    # entry side of every block stays inside for N steps
    for k in range(p):
        for rv in (r_top, 0.0):
            x = m.flow_lifted(k / p - half, rv, np.arange(N + 1, dtype=float))
            if x.max() > k / p + half + 1e-12:
                raise CertificateError("block entry leaves the block before time N; increase N")
        if float(m.flow_lifted(k / p + half, r_top, 1.0)) >= (k + 1) / p - half:
            raise CertificateError("one step from a block exit already reaches the next block")
    intervals, exits = [], []
    for k in range(p):
        edges = _regular_intervals(m, k, r_top, epsilon, plan.nu)
        intervals.append(edges)
        reach = float(m.flow_lifted(k / p + half, r_top, 1.0))
        exits.append(np.flatnonzero(edges[:-1] <= reach + 1e-15))
    i_star = sum(len(e) - 1 for e in intervals)
    i_2star = sum(len(e) for e in exits)
    strips = _strip_plan(plan, N)

    # outer count and product subdivisions
    T_tab, logr_tab = _level_table(m)
    q_repr = max_representable_period(m)
    outer = 0
    product_outer = 0
    n_subdivided = 0
    for s in strips:
        q_up = s["q_hi"] - s["width"] * np.arange(s["n_sub"])
        q_lo = np.maximum(q_up - s["width"], s["q_lo"])
        per = (np.floor(q_up) + 1) * plan.j_star
        outer += int(per.sum())
        r_up = np.where(q_up <= q_repr, np.exp(np.interp(q_up, T_tab, logr_tab)), 0.0)
        r_lo = np.where(q_lo <= q_repr, np.exp(np.interp(q_lo, T_tab, logr_tab)), 0.0)
        dr = np.abs(r_lo - r_up) * (1 + 1e-6) + 1e-300
        cuts = np.maximum(1, np.ceil(N * plan.alpha_slope * dr / half))
        n_subdivided += int((cuts > 1).sum())
        product_outer += int((per * cuts).sum())
        s["elements"] = int(per.sum())
    inner_cuts = max(1, math.ceil(N * plan.alpha_slope * r_top / half))
    counts = {"regular": i_star, "iterate": N * i_2star, "block_remainder": p, "strip_rectangle": outer}
    n_phi = math.ceil(2 / epsilon - 1e-12)
    product = n_phi * (inner_cuts * (i_star + N * i_2star + p) + product_outer)
    if n_subdivided:
        diagnostics.append(
            f"{n_subdivided} strips needed extra cuts in r to keep the phi drift below epsilon/2 (minimal period not large enough at this scale)"
        )
    return CoveringCertificate(
        m, plan, int(N), float(epsilon), r_top, tuple(intervals), tuple(exits), strips, counts,
        int(product), {"phi_intervals": n_phi, "inner_cuts": inner_cuts, "strips_cut": n_subdivided},
        diagnostics, seconds=time.perf_counter() - t_start,
    )


# ---------------------------------------------------------------------------
# cover verification


@dataclass(frozen=True)
class CoverReport:
    passed: bool
    n_points: int
    n_uncovered: int
    n_groups: int
    max_diameter: float
    diameter_failures: tuple
    corner_max: float
    corner_failures: tuple
    max_witnessed_period: float
    seconds: float
    uncovered: tuple = ()


def witness_grid(cert: CoveringCertificate, n_rows: int = 48) -> np.ndarray:
    """Uniform grid at spacing eps/8 plus rows on periodic orbits and near the polycycle."""
    m, eps = cert.model, cert.epsilon
    d = eps / 8
    n_th = math.ceil(1 / d)
    th = np.arange(n_th) / n_th
    rows = list(np.linspace(0.0, 1.0, math.ceil(1 / d) + 1))
    q_top = min(cert.plan.kappa * cert.N * 1.05, max_representable_period(m))
    qs = np.geomspace(cert.plan.q_star * 1.0001, q_top, n_rows)
    rows += list(_levels(m, qs))
    if cert.inner_level > 0:
        rows += [cert.inner_level, cert.inner_level * 1e-3]
    rows = np.unique(np.asarray(rows))
    TH, R = np.meshgrid(th, rows, indexing="ij")
    return np.stack([TH.ravel(), R.ravel()], axis=-1)


def _group_diameter(sys: DiscreteSystem, pts: np.ndarray, N: int, max_exhaustive: int, rng) -> float:
    orb = sys.orbit_block(pts, N)
    na = sys.space.n_angles
    n = pts.shape[0]
    if n <= max_exhaustive:
        best = 0.0
        for a in range(n - 1):
            best = max(best, float(base_distance(na, orb[a][None], orb[a + 1 :]).max()))
        return best
    # extreme points in each coordinate plus random pairs
    pick = set()
    for c in range(pts.shape[1]):
        pick.update([int(np.argmin(pts[:, c])), int(np.argmax(pts[:, c]))])
    pick = np.array(sorted(pick))
    best = 0.0
    for a in pick:
        best = max(best, float(base_distance(na, orb[a][None], orb).max()))
    ia = rng.integers(0, n, 2000)
    ib = rng.integers(0, n, 2000)
    best = max(best, float(base_distance(na, orb[ia], orb[ib]).max()))
    return best


def verify_cover(sys: DiscreteSystem | None, grid, cert: CoveringCertificate, n_corners: int = 500, max_exhaustive: int = 64, seed: int = 0) -> CoverReport:
    """Coverage and diameter check of a cover certificate on witness points.

    ``sys`` is the planar time-1 map (default) or the product system; for
    the product, the third-coordinate id adds the phi interval and the
    cut in r. ``grid`` may be None (default witness grid), a SampleGrid
    or an array of points.
    """
    t0 = time.perf_counter()
    m, eps, N = cert.model, cert.epsilon, cert.N
    rng = np.random.default_rng(seed)
    if sys is None:
        sys = planar_system(m)
    if grid is None:
        pts = witness_grid(cert)
        if sys.space.dim == 3:
            pts = np.concatenate([_lift(sys, pts, phi) for phi in (0.0, eps / 5, 2 * eps / 5)])
    elif isinstance(grid, SampleGrid):
        pts = np.asarray(grid.points)
    else:
        pts = np.atleast_2d(np.asarray(grid, float))
    product = sys.space.dim == 3
    planar = pts[:, 1:] if product else pts
    ids = cert.locate(planar)
    if product:
        ids = _product_ids(cert, pts, ids)
    uncovered = [int(i) for i, e in enumerate(ids) if e is None]
    groups: dict = {}
    for i, e in enumerate(ids):
        if e is not None:
            groups.setdefault(e, []).append(i)
    max_d = 0.0
    fails = []
    for e, members in groups.items():
        if len(members) < 2:
            continue
        dmax = _group_diameter(sys, pts[members], N, max_exhaustive, rng)
        max_d = max(max_d, dmax)
        if dmax > eps + 1e-12:
            fails.append((e, dmax))
    # corner pairs a-/a+ of sampled strip rectangles (torsion makes them extremal)
    corner_max, corner_fails = 0.0, []
    q_repr = max_representable_period(m)
    live = [s for s in cert.strips if s["q_lo"] <= q_repr]
    if live and n_corners:
        A, B, tags = [], [], []
        h = eps / (2 * cert.plan.lam_lip)
        M = m.tame["M"]
        lo = cert.plan.plateau[0]
        for _ in range(n_corners):
            s = live[int(rng.integers(len(live)))]
            j = int(rng.integers(s["n_sub"]))
            q_up = s["q_hi"] - j * s["width"]
            q_lo = max(q_up - s["width"], s["q_lo"])
            if q_lo > q_repr:
                continue
            i = int(rng.integers(int(math.floor(q_up)) + 1))
            jj = int(rng.integers(cert.plan.j_star))
            A.append((q_up, i + jj * h / M))
            B.append((q_lo, i + min((jj + 1) * h, M) / M))
            tags.append(("R", s["k"], j, i, jj))
        if A:
            # corners of psi^i(plateau piece) in phase coordinates: theta
            # round trips lose the phase next to the rest points
            A, B = np.array(A), np.array(B)
            r_a, r_b = _levels(m, A[:, 0]), _levels(m, B[:, 0])
            steps = np.arange(N + 1, dtype=float)
            ph_a = m.phase(np.full(r_a.size, lo), r_a) + A[:, 1]
            ph_b = m.phase(np.full(r_b.size, lo), r_b) + B[:, 1]
            xa = m.from_phase(ph_a[:, None] + steps, r_a[:, None])
            xb = m.from_phase(ph_b[:, None] + steps, r_b[:, None])
            diff = xa - xb
            dist = np.max(np.maximum(np.abs(diff - np.rint(diff)), np.abs(r_a - r_b)[:, None]), axis=1)
            corner_max = float(dist.max())
            corner_fails = [(t, float(d)) for t, d in zip(tags, dist) if d > eps + 1e-12]
    passed = not uncovered and not fails and not corner_fails
    return CoverReport(
        passed, int(pts.shape[0]), len(uncovered), len(groups), max_d, tuple(fails[:50]),
        corner_max, tuple(corner_fails[:50]), float(q_repr), time.perf_counter() - t0, tuple(uncovered[:50]),
    )


def _product_ids(cert: CoveringCertificate, pts: np.ndarray, ids: list) -> list:
    """Attach the phi interval and the cut in r to planar ids."""
    eps, N = cert.epsilon, cert.N
    half = eps / 2
    phi_idx = np.floor(wrap_angles(pts[:, 0]) / half).astype(int)
    lo = np.zeros(len(ids))
    hi = np.full(len(ids), cert.inner_level)
    strip_keys = sorted({e[1:3] for e in ids if e is not None and e[0] == "R"})
    if strip_keys:
        kj = np.array(strip_keys)
        q_hi = np.array([cert.strips[k - 1]["q_hi"] for k, _ in strip_keys])
        w = np.array([cert.strips[k - 1]["width"] for k, _ in strip_keys])
        q_floor = np.array([cert.strips[k - 1]["q_lo"] for k, _ in strip_keys])
        q_up = q_hi - kj[:, 1] * w
        levels = _levels(cert.model, np.concatenate([q_up, np.maximum(q_up - w, q_floor)]))
        n = len(strip_keys)
        where = {key: (levels[t], levels[n + t]) for t, key in enumerate(strip_keys)}
        for t, e in enumerate(ids):
            if e is not None and e[0] == "R":
                lo[t], hi[t] = where[e[1:3]]
    r = pts[:, 2]
    span = hi - lo
    cuts = np.maximum(1, np.ceil(N * cert.plan.alpha_slope * (span * (1 + 1e-6) + 1e-300) / half)).astype(int)
    with np.errstate(divide="ignore", invalid="ignore"):
        cut = np.where(span > 0, np.floor((r - lo) / (span / cuts)), 0)
    cut = np.clip(np.nan_to_num(cut), 0, cuts - 1).astype(int)
    return [None if e is None else e + (int(phi_idx[t]), int(cut[t])) for t, e in enumerate(ids)]
