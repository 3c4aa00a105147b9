import json
import math

import numpy as np
import pytest

from polyent.constructive_bounds import (
    SCHEMA_VERSION,
    CertificateError,
    admissible_lower_epsilon,
    arc_containment_margin,
    block_containment_excess,
    build_lower_bound_set,
    build_upper_bound_cover,
    compute_kappa,
    verify_cover,
    verify_separated,
    witness_grid,
)
from polyent.dyn_core import ProductPoint
from polyent.model_flows import default_pmodel_system, planar_system, product_system


@pytest.fixture(scope="module")
def cover128(tame_pmodel):
    return build_upper_bound_cover(tame_pmodel, 128, 0.05)


# -- cutoff plan -----------------------------------------------------------------------


def test_plan_constants(tame_pmodel):
    pl = compute_kappa(tame_pmodel, 0.05)
    assert pl.kappa == 3 and pl.nu == 4
    assert (pl.N0, pl.N1, pl.N2, pl.N3) == (21, 3, 3, 4)
    assert pl.c1 == pytest.approx(1 / pl.ell_prime)
    assert pl.j_star == math.floor(tame_pmodel.tame["M"] / (0.05 / (2 * pl.lam_lip))) + 1
    assert pl.q_star == pytest.approx(6.2946, abs=1e-4)


def test_kappa_independent_of_epsilon(pmodel):
    assert {compute_kappa(pmodel, e).kappa for e in (0.02, 0.05, 0.06)} == {3}


def test_plan_rejects_wide_blocks(pmodel):
    with pytest.raises(CertificateError):
        compute_kappa(pmodel, 0.07)


def test_block_containment(pmodel):
    pl = compute_kappa(pmodel, 0.05)
    assert block_containment_excess(pmodel, 0.05, pl.kappa, 256, n_samples=200) <= 1e-12
    # with kappa = 1 the edge levels are too fast to stay in the block
    assert block_containment_excess(pmodel, 0.05, 1, 256) > 0.05


def test_arc_containment_for_sampled_periods(pmodel):
    theta0, _ = admissible_lower_epsilon(pmodel)
    q_star = float(pmodel.period(np.array([1.0]))[0])
    qs = np.r_[np.linspace(max(3.0, q_star), 60, 120), np.geomspace(60, 1300, 40)]
    for th in (theta0, 0.3, 0.61, 0.9):
        assert arc_containment_margin(pmodel, th, qs).min() >= -1e-12
    assert arc_containment_margin(pmodel, theta0, [7.0])[0] > 1e-4


# -- lower bound ---------------------------------------------------------------------


def test_admissible_epsilon(pmodel):
    theta0, eps_max = admissible_lower_epsilon(pmodel)
    assert eps_max > 0.1
    assert theta0 not in (0.0, 0.5)


@pytest.mark.parametrize("N", [36, 108])
def test_lower_set_size_and_separation(pmodel, N):
    cert = build_lower_bound_set(pmodel, N, 0.1)
    assert cert.size >= N * N / 108
    assert cert.size >= (N // 18) * (N // 6)
    assert all(N / 3 <= q <= N / 2 for q in cert.periods)
    assert np.all(np.diff(cert.periods) >= 3)
    done, rep = verify_separated(planar_system(pmodel), cert)
    assert rep.passed and done.margin >= 0 and rep.min_distance >= 0.1


def test_lower_set_in_product_system():
    ps = default_pmodel_system()
    cert = build_lower_bound_set(ps.planar, 36, 0.1)
    _, rep = verify_separated(product_system(ps), cert)
    assert rep.passed


def test_lower_rejects_large_epsilon(pmodel):
    _, eps_max = admissible_lower_epsilon(pmodel)
    with pytest.raises(CertificateError, match="maximal admissible"):
        build_lower_bound_set(pmodel, 36, eps_max + 0.01)
    with pytest.raises(CertificateError):
        build_lower_bound_set(pmodel, 12, 0.1)
    with pytest.raises(CertificateError, match="rest point"):
        build_lower_bound_set(pmodel, 36, 0.01, theta0=0.5)


def test_duplicate_point_fails_verification(pmodel):
    cert = build_lower_bound_set(pmodel, 36, 0.1)
    bad = type(cert)(cert.points + (cert.points[3],), cert.N, cert.epsilon, cert.periods, cert.theta0)
    _, rep = verify_separated(planar_system(pmodel), bad)
    assert not rep.passed
    assert any({i, j} == {3, cert.size} for i, j, _ in rep.violations)


def test_jittered_set_fails_verification(pmodel):
    cert = build_lower_bound_set(pmodel, 36, 0.1)
    A = cert.as_array()
    failed = 0
    for seed in range(5):
        th = A[:, 0] + np.random.default_rng(seed).uniform(-0.3, 0.3, len(A))
        pts = tuple(ProductPoint((float(t),), (float(r),)) for t, r in zip(th, A[:, 1]))
        _, rep = verify_separated(planar_system(pmodel), type(cert)(pts, 36, 0.1))
        failed += not rep.passed
    assert failed >= 4


def test_separated_json(pmodel):
    cert, _ = verify_separated(planar_system(pmodel), build_lower_bound_set(pmodel, 36, 0.1))
    doc = json.loads(cert.to_json())
    assert doc["schema"] == SCHEMA_VERSION and doc["kind"] == "separated"
    assert len(doc["points"]) == cert.size and doc["margin"] == cert.margin
    assert doc["parameters_hash"] == pmodel.key


# -- upper bound ---------------------------------------------------------------------


def test_upper_requires_tame_model(pmodel):
    with pytest.raises(CertificateError):
        build_upper_bound_cover(pmodel, 128, 0.05)


def test_upper_requires_large_N(tame_pmodel):
    with pytest.raises(CertificateError):
        build_upper_bound_cover(tame_pmodel, 8, 0.05)


def test_upper_cover_verifies(cover128):
    rep = verify_cover(None, None, cover128)
    assert rep.passed, (rep.n_uncovered, rep.diameter_failures[:3], rep.corner_failures[:3])
    assert rep.max_diameter <= 0.05 and rep.corner_max <= 0.05


def test_upper_count_below_alpha_bound(cover128):
    assert 0 < cover128.planar_count <= cover128.alpha_bound()
    assert cover128.product_count >= cover128.planar_count * cover128.product_subdivisions["phi_intervals"]


def test_deleted_element_is_uncovered(cover128):
    cover128.deleted = {("B", 0, 3)}
    try:
        rep = verify_cover(None, None, cover128)
    finally:
        cover128.deleted = set()
    assert not rep.passed and rep.n_uncovered > 0


def test_inflated_element_breaks_diameter(cover128):
    cover128.inflated = {("B", 0, 3): 3 * cover128.epsilon}
    try:
        rep = verify_cover(None, None, cover128)
    finally:
        cover128.inflated = {}
    assert not rep.passed
    assert any(e == ("B", 0, 3) for e, _ in rep.diameter_failures)


def test_cover_json(cover128):
    doc = json.loads(cover128.to_json())
    assert doc["schema"] == SCHEMA_VERSION and doc["kind"] == "cover"
    assert doc["planar_count"] == sum(doc["counts"].values())
    assert set(doc["counts"]) == {"regular", "iterate", "block_remainder", "strip_rectangle"}


def test_separated_points_in_distinct_cover_elements(tame_pmodel, cover128):
    # an element of diameter <= eps holds at most one point of a 2 eps-separated set
    lower = build_lower_bound_set(tame_pmodel, 128, 0.1)
    _, rep = verify_separated(planar_system(tame_pmodel), lower)
    assert rep.passed
    ids = cover128.locate(lower.as_array())
    assert None not in ids
    assert len(set(ids)) == len(ids)


def test_product_cover_spot_check():
    ps = default_pmodel_system(xi_variant="tame-plateau")
    cert = build_upper_bound_cover(ps.planar, 128, 0.05, alpha=ps.alpha)
    pts = witness_grid(cert)[::9]
    pts = np.concatenate([np.c_[np.full(len(pts), phi), pts] for phi in (0.0, 0.013)])
    rep = verify_cover(product_system(ps), pts, cert, n_corners=100)
    assert rep.passed, rep.diameter_failures[:3]
