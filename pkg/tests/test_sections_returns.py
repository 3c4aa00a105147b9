import math

import numpy as np
import pytest

from polyent.dyn_core import ProductPoint, wrap_angles
from polyent.model_flows import KroneckerFlow, ModelError, default_pmodel, orbit_of_period, pmodel_time_alpha
from polyent.sections_returns import (
    RationalLine,
    compute_fundamental_domain,
    compute_mk,
    kronecker_return,
    plateau_domain,
    pmodel_return_map,
    separation_trace,
    time_defect,
    torsion_check,
)

ALPHA = lambda r: 1.0 + np.asarray(r, float)  # noqa: E731


def on_line(line, s):
    """A point of the section q*y2 - p*y1 = 0 at parameter s."""
    return ProductPoint((line.q * s, line.p * s))


@pytest.mark.parametrize(
    "freq,line",
    [((math.sqrt(2), 1.0), RationalLine(1, 0)), ((0.0, 1.0), RationalLine(1, 0)), ((1.0, 1.0), RationalLine(1, 2))],
)
def test_kronecker_return_examples(freq, line):
    _, t = kronecker_return(KroneckerFlow(freq), line, on_line(line, 0.137))
    assert t == pytest.approx(1.0, abs=1e-12)


def test_return_time_independent_of_start():
    rng = np.random.default_rng(3)
    flow = KroneckerFlow((0.3, 0.7 * math.pi))
    line = RationalLine(2, 3)
    times = [kronecker_return(flow, line, on_line(line, s))[1] for s in rng.random(20)]
    assert max(times) - min(times) < 1e-10


def test_return_lands_on_section():
    flow, line = KroneckerFlow((0.41, 1.3)), RationalLine(3, 1)
    pt, _ = kronecker_return(flow, line, on_line(line, 0.4))
    v = line.level(np.array(pt.angles))
    assert abs(v - round(v)) < 1e-12


def test_parallel_flow_rejected():
    with pytest.raises(ValueError):
        kronecker_return(KroneckerFlow((1.0, 2.0)), RationalLine(1, 2), ProductPoint((0.0, 0.0)))
    with pytest.raises(ValueError):
        RationalLine(2, 4)


def test_return_map_is_time_alpha(pmodel):
    x = ProductPoint((0.3,), (0.4,))
    assert pmodel_return_map(pmodel, ALPHA, x) == pmodel_time_alpha(pmodel, ALPHA, x)
    z = ProductPoint((0.5,), (0.0,))
    assert pmodel_return_map(pmodel, ALPHA, z).angles[0] == pytest.approx(0.5, abs=1e-15)


def test_fundamental_domain_self_consistent(pmodel):
    dom = compute_fundamental_domain(pmodel, ALPHA, 0, 0.02)
    r = np.linspace(0, 0.02, 101)
    assert np.abs(dom.transit_residual(r[1:])).max() < 1e-9
    # image of the interior is disjoint from the interior
    pts = dom.sample(21, 21)
    inner = pts[(pts[:, 0] != dom.entry_curve(pts[:, 1])) & (np.abs(pts[:, 0] - dom.exit_curve(pts[:, 1])) > 1e-9)]
    img = wrap_angles(pmodel.flow_lifted(inner[:, 0], inner[:, 1], ALPHA(inner[:, 1])))
    assert not np.any(dom.contains(img, inner[:, 1], tol=-1e-9))


def test_domain_width_shrinks_with_alpha(pmodel):
    a = compute_fundamental_domain(pmodel, ALPHA, 0, 0.01)
    b = compute_fundamental_domain(pmodel, lambda r: 1.2 + np.asarray(r), 0, 0.01)
    r = np.array([0.0, 0.01])
    assert np.all(b.entry_offset(r) < a.entry_offset(r))


def test_domain_rejects_long_return_time(pmodel):
    with pytest.raises(ModelError, match="smaller level range"):
        compute_fundamental_domain(pmodel, ALPHA, 0, 1.0)


def test_mk_rule(pmodel):
    mk = compute_mk(pmodel, ALPHA, 0, a=0.02)
    # shortest return time over the level range is alpha(0) = 1, longest gap time is sigma(0)
    sigma = float(pmodel._coeffs(np.array([0.0]))[2][0, 0])
    assert mk >= 2
    assert (mk - 1) * 1.0 >= sigma


def test_separation_trace(pmodel):
    a = ProductPoint((0.6,), (0.3,))
    same = separation_trace(pmodel, a, a)
    assert np.all(same.values == 0)
    tr = separation_trace(pmodel, a, ProductPoint((0.62,), (0.3,)), horizon=2 * pmodel.period(np.array([0.3]))[0], n=4001)
    assert np.all(tr.values >= 0)
    half = tr.values.size // 2
    assert np.allclose(tr.values[:half + 1], tr.values[half:], atol=1e-9)


def test_tameness_argmax_on_plateau(tame_pmodel):
    lo, hi = plateau_domain(tame_pmodel)
    m = tame_pmodel
    for r in (0.5, 0.05, 1e-4):
        x = m.tame["k"] / m.p + m.u_star * 0.5
        t0 = 1.0
        xp = float(m.flow_lifted(x, r, t0))
        tr = separation_trace(m, ProductPoint((x,), (r,)), ProductPoint((xp,), (r,)), n=20001)
        assert lo - 1e-9 <= tr.argmax_theta <= hi + 1e-9
        assert tr.max <= t0 * m.tame["M"] * (1 + 1e-9)


def test_torsion(pmodel):
    rep = torsion_check(pmodel, 1000)
    assert rep.passed and rep.n_tested == 1000
    assert torsion_check(pmodel, np.array([[0.1, 0.5, 0.5, 3.0]])).n_skipped == 1
    bad = default_pmodel(sigma_slope=-0.5)
    assert not torsion_check(bad, 1000).passed


def test_tame_plateau_torsion_is_weak_only_on_plateau(tame_pmodel):
    m = tame_pmodel
    lo, hi = plateau_domain(m)
    rep = torsion_check(m, 2000)
    assert rep.min_gap >= -1e-12
    # both lifts stay on the plateau: equal speed, zero gap
    on = torsion_check(m, np.array([[lo + 0.01, 0.2, 0.6, 0.5]]))
    assert on.n_failed == 1 and abs(on.min_gap) < 1e-12
    # leaving the plateau restores the strict inequality
    assert torsion_check(m, np.array([[lo + 0.01, 0.2, 0.6, 3.0]])).passed


def test_time_defect_identities(pmodel):
    q = 20.0
    r = float(orbit_of_period(pmodel, q))
    q2 = 19.5
    r2 = float(orbit_of_period(pmodel, q2))
    a = ProductPoint((0.3,), (r,))
    assert time_defect(pmodel, a, r2, 0.0) == 0.0
    assert time_defect(pmodel, a, r2, q) == pytest.approx(q - q2, abs=1e-8)
    assert time_defect(pmodel, a, r2, 3 * q) == pytest.approx(3 * (q - q2), abs=1e-8)
    t1, t2 = 4.3, 7.9
    b = ProductPoint((float(wrap_angles(pmodel.flow_lifted(0.3, r, t1))),), (r,))
    lhs = time_defect(pmodel, a, r2, t1 + t2)
    rhs = time_defect(pmodel, a, r2, t1) + time_defect(pmodel, b, r2, t2)
    assert abs(lhs - rhs) < 1e-8


def test_time_defect_bounds_displacement(pmodel):
    r = float(orbit_of_period(pmodel, 30.0))
    r2 = float(orbit_of_period(pmodel, 29.0))
    lp = pmodel.max_speed()
    for t in (1.0, 5.0, 12.0, 29.0):
        d = time_defect(pmodel, ProductPoint((0.3,), (r,)), r2, t)
        gap = float(pmodel.flow_lifted(0.3, r2, t) - pmodel.flow_lifted(0.3, r, t))
        assert 0 <= gap <= lp * d + 1e-12
