import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import rk4_transit

from polyent.dyn_core import ProductPoint
from polyent.model_flows import (
    ActionAngleSystem,
    EllipticNormalForm,
    HyperbolicNormalForm,
    InfiniteTransitError,
    KroneckerFlow,
    ModelError,
    RotatorPendulum,
    action_angle_time1,
    default_pmodel,
    default_pmodel_system,
    elliptic_chart,
    elliptic_time1,
    frequency_rank,
    hyperbolic_flow,
    hyperbolic_transit_time,
    kronecker_flow,
    kronecker_time1,
    max_representable_period,
    omega_consistency,
    orbit_of_period,
    pendulum_energy,
    period_asymptote,
    period_T,
    pmodel_planar_flow,
    pmodel_product_time1,
    pmodel_time_alpha,
    product_system,
    rotator_pendulum_system,
)


def quadratic(n=1, lo=1.0, hi=2.0):
    axes = [np.linspace(lo, hi, 17)] * n
    S = np.stack([a.ravel() for a in np.meshgrid(*axes, indexing="ij")], axis=-1)
    return ActionAngleSystem(lambda I: 0.5 * np.sum(np.asarray(I) ** 2, axis=-1), lambda I: np.asarray(I, float), S, n)


# -- Kronecker and action-angle ------------------------------------------------


def test_kronecker_closed_form():
    f = KroneckerFlow((math.sqrt(2), 1.0))
    x = ProductPoint((0.25, 0.5))
    y = kronecker_flow(f, x, 3.0)
    assert y.angles[0] == pytest.approx((0.25 + 3 * math.sqrt(2)) % 1)
    assert y.angles[1] == pytest.approx(0.5)
    assert kronecker_time1(f, x) == kronecker_flow(f, x, 1.0)


def test_action_angle_step_and_domain():
    sys = quadratic()
    y = action_angle_time1(sys, ProductPoint((0.1,), (1.5,)))
    assert y.angles[0] == pytest.approx(0.6) and y.reals == (1.5,)
    with pytest.raises(ValueError):
        action_angle_time1(sys, ProductPoint((0.1,), (2.5,)))


def test_omega_is_gradient():
    assert omega_consistency(quadratic(2)) < 1e-6


def test_frequency_rank():
    assert frequency_rank(quadratic(1)) == 1
    assert frequency_rank(quadratic(2)) == 2
    S = np.linspace(1, 2, 17)[:, None]
    const = ActionAngleSystem(lambda I: 0.3 * np.asarray(I)[..., 0], lambda I: np.full(np.shape(I), 0.3), S, 1)
    assert frequency_rank(const) == 0


# -- hyperbolic normal form ------------------------------------------------------


def test_transit_matches_rk4_oracle_samples():
    nf = HyperbolicNormalForm(lambda r: 1.0 + 0 * r, lambda r: r)
    for rho, u0, u1 in [(0.01, -0.03, 0.03), (1e-4, 0.001, 0.03), (0.5, -0.2, -0.1)]:
        got = hyperbolic_transit_time(nf, rho, u0, u1)
        assert got == pytest.approx(rk4_transit(1.0, rho, u0, u1), rel=1e-7)


def test_transit_inverse_of_flow():
    nf = HyperbolicNormalForm(lambda r: 2.0 + 0 * r, lambda r: r)
    t = hyperbolic_transit_time(nf, 0.01, -0.02, 0.03)
    assert hyperbolic_flow(nf, 0.01, -0.02, t) == pytest.approx(0.03, rel=1e-12)


def test_transit_through_rest_point_is_infinite():
    nf = HyperbolicNormalForm(lambda r: 1.0 + 0 * r, lambda r: r)
    with pytest.raises(InfiniteTransitError):
        hyperbolic_transit_time(nf, 0.0, -0.01, 0.01)
    assert hyperbolic_transit_time(nf, 0.0, 0.01, 0.01 * math.e) == pytest.approx(1.0)


# -- planar p-model --------------------------------------------------------------

PM = default_pmodel()


@given(st.floats(0, 1), st.floats(1e-6, 1), st.floats(-30, 30), st.floats(-30, 30))
def test_group_law(theta, r, s, t):
    a = PM.flow_lifted(PM.flow_lifted(theta, r, s), r, t)
    b = PM.flow_lifted(theta, r, s + t)
    assert abs(a - b) < 1e-9


# backward flow near a saddle amplifies rounding by exp(lambda t); keep t where that stays below 1e-9
@given(st.floats(0, 1), st.one_of(st.just(0.0), st.floats(0.01, 1)), st.floats(-8, 8))
def test_inverse(theta, r, t):
    back = PM.flow_lifted(PM.flow_lifted(theta, r, t), r, -t)
    assert abs(back - theta) < 1e-9


def test_rest_points_fixed(pmodel):
    for k in range(pmodel.p):
        y = pmodel_planar_flow(pmodel, 5.0, ProductPoint((k / pmodel.p,), (0.0,)))
        assert y.angles[0] == pytest.approx(k / pmodel.p, abs=1e-15)


def test_period_returns_to_start(pmodel):
    for r in (1.0, 0.3, 1e-3, 1e-12):
        T = period_T(pmodel, r)
        assert pmodel.flow_lifted(0.2, r, T) == pytest.approx(1.2, abs=1e-9)


def test_period_strictly_decreasing(pmodel):
    r = np.geomspace(1e-200, 1.0, 400)
    assert np.all(np.diff(pmodel.period(r)) < 0)


def test_period_rejects_bad_levels(pmodel):
    with pytest.raises(ValueError):
        period_T(pmodel, 0.0)
    with pytest.raises(ValueError):
        period_T(pmodel, 1.5)


def test_orbit_of_period_round_trip(pmodel):
    q = np.array([7.0, 30.0, 500.0])
    r = orbit_of_period(pmodel, q)
    assert np.allclose(pmodel.period(r), q, rtol=1e-10)
    assert orbit_of_period(pmodel, [10.0, 5000.0], underflow="zero")[1] == 0.0
    with pytest.raises(ValueError):
        orbit_of_period(pmodel, 5000.0)
    assert 1300 < max_representable_period(pmodel) < 1500


def test_asymptote_ratio_near_polycycle(pmodel):
    r = np.array([1e-4, 1e-8, 1e-30])
    ratio = pmodel.period(r) / period_asymptote(pmodel, r)
    assert np.all((ratio > 0.9) & (ratio < 1.1))
    assert ratio[2] == pytest.approx(1.0, abs=0.02)


def test_speed_bound(pmodel, tame_pmodel):
    for m in (pmodel, tame_pmodel):
        th, r = np.meshgrid(np.linspace(0, 1, 801), np.linspace(0, 1, 41))
        assert m.speed(th, r).max() <= m.max_speed() * (1 + 1e-12)
        assert m.speed(th, r).min() >= 0


def test_gap_identity(pmodel, tame_pmodel):
    assert pmodel.check_gap_identity() < 1e-9
    assert tame_pmodel.check_gap_identity() < 1e-9


def test_invalid_parameters_rejected():
    with pytest.raises(ModelError):
        default_pmodel(sigma0=2.0, sigma_slope=0.5)
    with pytest.raises(ModelError):
        default_pmodel(u_star=0.2)
    with pytest.raises(ModelError):
        default_pmodel(xi_variant="wiggly")


def test_time_alpha_and_product(pmodel):
    alpha = lambda r: 1.0 + np.asarray(r)
    x = ProductPoint((0.3,), (0.5,))
    assert pmodel_time_alpha(pmodel, alpha, x) == pmodel_planar_flow(pmodel, 1.5, x)
    ps = default_pmodel_system()
    y = pmodel_product_time1(ps, ProductPoint((0.1, 0.3), (0.5,)))
    assert y.angles[0] == pytest.approx(0.6)
    blk = product_system(ps).orbit_block(np.array([[0.1, 0.3, 0.5]]), 2)
    assert np.allclose(blk[0, 1], y.as_array(), atol=1e-12)


# -- elliptic and rotator x pendulum --------------------------------------------------


def test_elliptic_chart_and_step():
    nf = EllipticNormalForm(lambda I, J: 1.0 + 0 * I, lambda I, J: 0.5 + J)
    x = ProductPoint((0.0, 0.25), (0.2, 0.5))
    y = elliptic_time1(nf, x)
    assert y.angles == pytest.approx((0.0, 0.25))
    c = elliptic_chart(x)
    assert c[2] == pytest.approx(0.0, abs=1e-15) and c[3] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        elliptic_time1(nf, ProductPoint((0.0, 0.0), (0.2, -0.1)))


@pytest.mark.parametrize("r2", [0.5, 1.9, 2.0, 2.5])
def test_pendulum_energy_drift(r2):
    sys = rotator_pendulum_system(RotatorPendulum())
    x = np.array([[0.0, 0.01, r2]])
    f0 = pendulum_energy(x[0, 1], x[0, 2])
    orb = sys.orbit_block(x, 20)
    drift = np.abs(pendulum_energy(orb[0, :, 1], orb[0, :, 2]) - f0).max()
    assert drift / 20 < 1e-8


def test_pendulum_equilibria():
    sys = rotator_pendulum_system(RotatorPendulum(step_size=1 / 64))
    for th in (0.0, 0.5):
        y = sys.iterate(np.array([[0.2, th, 0.0]]), 5)
        assert y[0, 1] == pytest.approx(th, abs=1e-12) and y[0, 2] == pytest.approx(0.0, abs=1e-12)
