import numpy as np
import pytest

from models.cone_membership import ConeSpec, cone_membership
from models.curvature_algebra import sphere_tensor
from models.pinching_builder import build
from models.surgery_neck import (
    NeckGeometry,
    conformal_data,
    conformal_transform,
    cutoff_phi,
    finite_difference_curvature,
    frame_components,
    gain_bound,
    monotone_gain,
    neck_curvature,
    neck_decomposition,
    pinching_audit,
    surgery_decompose,
    trace_gain,
)
from utils.errors import DimensionMismatch, PreconditionError, ReconstructionError

SMALL_GRID = {"points": 101, "refine": 16}


def _index(geom, z):
    return int(np.argmin(np.abs(geom.z - z)))


@pytest.fixture(scope="module")
def radius_one_audit():
    geom = NeckGeometry(5, radius=1.0, **SMALL_GRID)
    return pinching_audit(geom, build(1.5, 0.05, 5), restarts=4)


def test_cutoff_and_its_derivatives():
    phi, d1, d2 = cutoff_phi(0.5)
    assert phi == pytest.approx(np.exp(-2.0))
    assert d1 == pytest.approx(4.0 * np.exp(-2.0))
    assert d2 == pytest.approx(0.0, abs=1e-14)
    assert cutoff_phi(-1.0) == (0.0, 0.0, 0.0)
    assert cutoff_phi(1e-4) == (0.0, 0.0, 0.0)
    phi, _, _ = cutoff_phi(np.array([-1.0, 0.0, 1.0]))
    np.testing.assert_allclose(phi, [0.0, 0.0, np.exp(-1.0)])
    assert gain_bound(0.5) == pytest.approx(16.0 * np.exp(-2.0))


def test_neck_geometry_validation():
    geom = NeckGeometry(5, **SMALL_GRID)
    assert geom.z[0] == -10.0 and geom.z[-1] == 10.0
    assert np.all(np.diff(geom.z) > 0.0)
    assert geom.label() == "standard neck (r=1, n=5)"
    with pytest.raises(PreconditionError):
        NeckGeometry(5, profile="standard", delta=0.01)
    with pytest.raises(PreconditionError):
        NeckGeometry(5, profile="perturbed", delta=0.2)
    with pytest.raises(PreconditionError):
        NeckGeometry(5, radius=0.0)
    with pytest.raises(PreconditionError):
        NeckGeometry(5, profile="torus")


def test_round_cylinder_decomposition():
    geom = NeckGeometry(5, radius=2.0, **SMALL_GRID)
    S, H = neck_decomposition(geom, 0)
    assert S.scale() == 0.0
    np.testing.assert_allclose(np.diag(H.entries), [-0.125, 0.125, 0.125, 0.125, 0.125])
    R = neck_curvature(geom, 0)
    assert R.sectional(1, 2) == pytest.approx(0.25)
    assert R.sectional(0, 1) == pytest.approx(0.0, abs=1e-15)


def test_grid_differences_match_closed_form():
    kwargs = {"profile": "perturbed", "delta": 0.05, "points": 2001, "refine": 0}
    exact = NeckGeometry(5, **kwargs)
    approx = NeckGeometry(5, closed_form=False, **kwargs)
    inner = slice(1, -1)
    np.testing.assert_allclose(approx.ddw[inner], exact.ddw[inner], atol=1e-4)
    assert approx.one_sided[0] and approx.one_sided[-1]


def test_conformal_transform_against_coordinates():
    n, z0 = 4, 0.5
    geom = NeckGeometry(n, profile="perturbed", delta=0.05, **SMALL_GRID)
    index = _index(geom, z0)
    z0 = float(geom.z[index])
    phi, dphi, hess = conformal_data(geom, index)
    expected = conformal_transform(neck_curvature(geom, index), phi, dphi, hess)

    def metric(x):
        z, alpha, beta, _ = x
        w = geom.warp(z)[0]
        conformal = np.exp(-2.0 * cutoff_phi(z)[0])
        return conformal * np.diag([1.0, w ** 2, (w * np.sin(alpha)) ** 2,
                                    (w * np.sin(alpha) * np.sin(beta)) ** 2])

    point = np.array([z0, np.pi / 2, np.pi / 2, 0.0])
    w = geom.warp(z0)[0]
    frame = np.exp(phi) * np.diag([1.0, 1.0 / w, 1.0 / w, 1.0 / w])
    components = frame_components(finite_difference_curvature(metric, point), frame)
    np.testing.assert_allclose(components, expected.full(), atol=1e-5)


def test_surgery_decomposition_reassembles():
    geom = NeckGeometry(5, profile="perturbed", delta=0.05, **SMALL_GRID)
    index = _index(geom, 0.3)
    S, H = neck_decomposition(geom, index)
    phi, dphi, hess = conformal_data(geom, index)
    R_tilde = conformal_transform(neck_curvature(geom, index), phi, dphi, hess)
    S_tilde, H_tilde = surgery_decompose(R_tilde, S, H, phi, dphi, hess)
    assert S_tilde.scale() == 0.0
    with pytest.raises(ReconstructionError):
        surgery_decompose(R_tilde + sphere_tensor(5), S, H, phi, dphi, hess)
    with pytest.raises(DimensionMismatch):
        conformal_transform(sphere_tensor(5), phi, np.zeros(4), hess)


def test_gain_terms():
    geom = NeckGeometry(5, **SMALL_GRID)
    for z, sign in ((0.3, 1.0), (0.6, -1.0)):
        index = _index(geom, z)
        _, H = neck_decomposition(geom, index)
        phi, dphi, hess = conformal_data(geom, index)
        assert np.sign(monotone_gain(H, phi, dphi, hess)) == sign
        assert trace_gain(H, phi, dphi, hess) == pytest.approx(
            np.expm1(2.0 * phi) * H.trace() + monotone_gain(H, phi, dphi, hess))


def test_edge_slack_at_height_one(restarts):
    geom = NeckGeometry(5, **SMALL_GRID)
    index = _index(geom, 1.0)
    phi, dphi, hess = conformal_data(geom, index)
    R_tilde = conformal_transform(neck_curvature(geom, index), phi, dphi, hess)
    report = cone_membership(R_tilde, ConeSpec(1.0, 0.05), restarts=restarts)
    assert report.slack == pytest.approx(np.exp(2.0 * np.exp(-1.0)) * -np.exp(-1.0), rel=1e-3)


def test_audit_rows_below_zero_are_unchanged(radius_one_audit):
    rows = [row for row in radius_one_audit.rows if row["z"] <= 0.0]
    assert rows
    assert all(row["unchanged"] and row["post_member"] for row in rows)
    assert all(row["pre_slack"] >= 0.0 for row in radius_one_audit.rows)


def test_radius_one_neck_fails_in_two_bands(radius_one_audit):
    assert not radius_one_audit.passed
    failing = radius_one_audit.failing_z()
    assert any(0.18 <= z <= 0.27 for z in failing)
    assert any(0.6 <= z <= 0.8 for z in failing)
    assert all(z > 0.1 for z in failing)
    assert radius_one_audit.to_dict()["verdict"] == "FAIL"


def test_trace_gain_band_near_the_cut(radius_one_audit):
    assert radius_one_audit.gain_band_holds(0.2, 0.1)
    for row in radius_one_audit.rows:
        if 0.0 < row["z"] <= 0.4:
            assert row["monotone_gain"] >= 0.0


def test_audit_frame_and_summary(radius_one_audit, tmp_path):
    frame = radius_one_audit.to_frame()
    assert {"z", "post_slack", "c", "edge_slack"} <= set(frame.columns)
    radius_one_audit.to_csv(tmp_path / "audit.csv")
    assert (tmp_path / "audit.csv").read_text().startswith("z,")
    summary = radius_one_audit.to_dict()
    assert summary["points"] == len(frame)
    assert summary["min_post_slack"] < 0.0


@pytest.mark.slow
@pytest.mark.parametrize("profile, delta", [("standard", 0.0), ("perturbed", 0.01)])
def test_thinner_neck_stays_pinched(profile, delta, pinching_n5):
    geom = NeckGeometry(5, profile=profile, radius=0.9, delta=delta, **SMALL_GRID)
    audit = pinching_audit(geom, pinching_n5, restarts=4)
    assert audit.passed
    assert audit.to_dict()["failing_points"] == 0


def test_audit_preconditions(pinching_n5):
    with pytest.raises(PreconditionError):
        pinching_audit(NeckGeometry(6, **SMALL_GRID), pinching_n5)
