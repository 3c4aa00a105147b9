import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from polyent.dyn_core import (
    DimensionError,
    DiscreteSystem,
    OrbitCache,
    ProductPoint,
    SpaceSpec,
    base_distance,
    base_metric,
    dynamical_metric,
    orbit,
    orbit_array,
    wrap_angles,
)
from polyent.model_flows import KroneckerFlow, RotatorPendulum, kronecker_system, rotator_pendulum_system

SPACE = SpaceSpec(2, ((-1.0, 1.0),))
finite = st.floats(-50, 50, allow_nan=False)
points = st.builds(lambda a, b, r: ProductPoint((a, b), (r,)), finite, finite, st.floats(-1, 1))


def test_angles_normalised():
    p = ProductPoint((1.0, -0.25, 3.5), (2.0,))
    assert p.angles == (0.0, 0.75, 0.5)
    assert wrap_angles(np.array([-1e-18]))[0] == 0.0


def test_nonfinite_rejected():
    with pytest.raises(ValueError):
        ProductPoint((np.nan,), ())


def test_dimension_checked():
    with pytest.raises(DimensionError):
        base_metric(SPACE, ProductPoint((0.1,), (0.0,)), ProductPoint((0.1, 0.2), (0.0,)))


def test_empty_interval_rejected():
    with pytest.raises(ValueError):
        SpaceSpec(1, ((1.0, 0.0),))


def test_circle_distance_wraps():
    assert base_metric(SpaceSpec(1), ProductPoint((0.95,)), ProductPoint((0.05,))) == pytest.approx(0.1)


@given(points, points, points)
def test_metric_axioms(x, y, z):
    dxy = base_metric(SPACE, x, y)
    assert dxy >= 0
    assert dxy == base_metric(SPACE, y, x)
    assert base_metric(SPACE, x, x) == 0
    assert dxy <= base_metric(SPACE, x, z) + base_metric(SPACE, z, y) + 1e-12


@given(points, points)
def test_dynamical_metric_monotone_in_N(x, y):
    sys = DiscreteSystem(SPACE, lambda s: s + np.array([0.3, np.sqrt(2), 0.0]) * (1 + 0.1 * s[:, 2:3]), None, "shear")
    vals = [dynamical_metric(sys, x, y, n) for n in (1, 2, 5, 9)]
    assert vals == sorted(vals)
    assert vals[0] >= base_metric(SPACE, x, y)


def test_threshold_early_exit_is_a_lower_bound_above_threshold():
    sys = DiscreteSystem(SpaceSpec(1, ((0.0, 1.0),)), lambda s: s + np.c_[s[:, 1], 0 * s[:, 1]], None, "twist")
    x, y = ProductPoint((0.0,), (0.0,)), ProductPoint((0.0,), (0.01,))
    full = dynamical_metric(sys, x, y, 40)
    part = dynamical_metric(sys, x, y, 40, threshold=0.05)
    assert part > 0.05 and part <= full


def test_orbit_block_matches_iteration():
    sys = rotator_pendulum_system(RotatorPendulum(step_size=1 / 16))
    x = np.array([[0.1, 0.2, 0.5]])
    blk = sys.orbit_block(x, [0, 3, 1])
    assert np.array_equal(blk[0, 1], sys.iterate(x, 3)[0])
    assert np.array_equal(blk[0, 2], sys.apply(x)[0])


def test_exact_power_matches_steps():
    sys = kronecker_system(KroneckerFlow((0.1234, 0.77)))
    x = np.array([[0.5, 0.25]])
    stepped = x
    for _ in range(7):
        stepped = sys.apply(stepped)
    assert np.allclose(base_distance(2, stepped, sys.iterate(x, 7)), 0, atol=1e-12)


def test_orbit_cache_lru_and_reuse():
    cache = OrbitCache(max_bytes=3 * 17 * 8)
    sys = kronecker_system(KroneckerFlow((0.1,)))
    xs = [ProductPoint((v,)) for v in (0.1, 0.2, 0.3, 0.4)]
    for x in xs:
        orbit_array(sys, x, 16, cache)
    assert len(cache) == 3
    orbit_array(sys, xs[-1], 16, cache)
    assert cache.hits == 1
    assert len(orbit(sys, xs[0], 4, cache)) == 5


def test_deterministic_step():
    sys = rotator_pendulum_system(RotatorPendulum(step_size=1 / 32))
    x = np.array([[0.3, 0.4, 0.2]])
    assert sys.apply(x).tobytes() == sys.apply(x).tobytes()
