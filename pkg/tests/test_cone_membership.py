import numpy as np
import pytest

from models.cone_membership import (
    ConeSpec,
    complex_sectional_min,
    cone_membership,
    cone_terms,
    curv_op_min_eig,
    branch_b_sampled,
    decompose,
    frame_pic2_slack,
    gauge_reduced,
    isotropic_min,
    oracle_check,
    pic1_min,
    pic2_min,
)
from models.curvature_algebra import SymmetricForm, kn_product, ricci_traceless, sphere_tensor
from models.hamilton_ode import cylinder_tensor
from models.sampling import CurvatureSampler, random_curvature, random_symmetric
from utils.errors import PreconditionError


def test_sphere_is_interior_of_c_2_0(restarts):
    report = cone_membership(sphere_tensor(5), ConeSpec(2.0, 0.0), restarts=restarts)
    assert report.member
    assert report.slack == pytest.approx(2.0, abs=1e-8)
    assert report.cone == "C(2,0)"


def test_negative_sphere_is_exterior(restarts):
    report = cone_membership(sphere_tensor(5) * -1.0, ConeSpec(1.5, 0.0), restarts=restarts)
    assert not report.member
    assert report.slack == pytest.approx(-2.0, abs=1e-8)


def test_complex_sectional_min_of_sphere(restarts):
    value, witness = complex_sectional_min(sphere_tensor(6), restarts=restarts)
    assert value == pytest.approx(2.0, abs=1e-9)
    assert witness.orthonormality_error() < 1e-8
    assert witness.evaluate(sphere_tensor(6)) == pytest.approx(value, abs=1e-9)


def test_gauge_reduction_of_kn_factor(rng, restarts):
    H = random_symmetric(rng, 5)
    R = kn_product(H, SymmetricForm.identity(5))
    reduced = gauge_reduced(R)
    assert reduced.max_error(sphere_tensor(5) * (H.trace() / 5)) < 1e-12
    assert cone_terms(R, restarts=restarts).pic2 == pytest.approx(2.0 * H.trace() / 5, abs=1e-8)


def test_shift_moves_slack_by_twice_the_shift(restarts):
    terms = cone_terms(sphere_tensor(5), restarts=restarts)
    spec = ConeSpec(1.5, 0.0)
    base, _ = terms.slack(spec)
    shifted, _ = terms.slack(spec, shift=0.25)
    assert shifted - base == pytest.approx(0.5)


def test_curvature_operator_eigenvalue_of_sphere():
    assert curv_op_min_eig(sphere_tensor(5)) == pytest.approx(2.0)


def test_sampled_member_decomposes(restarts):
    spec = ConeSpec(1.5, 0.05)
    R = random_curvature(5, seed=4, kind="cone_member", sigma=1.5, theta=0.05, restarts=restarts)
    assert cone_membership(R, spec, restarts=restarts).member
    pieces = decompose(R, spec, restarts=restarts)
    assert pieces is not None
    S, H = pieces
    rebuilt = S + kn_product(H, SymmetricForm.identity(5))
    assert rebuilt.max_error(R) < 1e-12
    top = H.eigenvalues()[-1]
    assert top <= H.trace() / (5 - 2 * 1.5) + 1e-6


def test_cone_spec_validation():
    with pytest.raises(PreconditionError):
        ConeSpec(0.0)
    with pytest.raises(PreconditionError):
        ConeSpec(2.5)
    with pytest.raises(PreconditionError):
        ConeSpec(1.0, -0.1)
    with pytest.raises(PreconditionError):
        ConeSpec(2.0).check_dim(3)
    ConeSpec(2.0).check_dim(4)


def test_membership_report_serializes(restarts):
    report = cone_membership(sphere_tensor(4), ConeSpec(1.0, 0.0), restarts=restarts)
    data = report.to_dict()
    assert data["member"] is True
    assert data["witness"]["kind"] == report.witness.kind
    assert np.isfinite(data["slack"])


def test_decompose_agrees_with_membership_away_from_boundary(restarts):
    spec = ConeSpec(1.5, 0.05)
    tensors = [sphere_tensor(5), sphere_tensor(5) * -1.0]
    tensors += [random_curvature(5, seed=s, kind="cone_member", sigma=1.5, theta=0.05, restarts=restarts)
                for s in range(3)]
    tensors += [random_curvature(5, seed=s, kind="generic") for s in range(3)]
    disagreements = 0
    for R in tensors:
        terms = cone_terms(R, restarts=restarts)
        report = cone_membership(R, spec, terms=terms)
        if abs(report.slack) < 1e-3:
            continue
        certified = decompose(R, spec, terms=terms) is not None
        disagreements += certified != report.member
    assert disagreements == 0


@pytest.mark.parametrize("factor, tensor, expected", [
    (1.0, sphere_tensor(5), 8.0),
    (-1.0, sphere_tensor(5), -8.0),
    (1.0, cylinder_tensor(5), 4.0),
])
def test_isotropic_minimum_of_model_tensors(factor, tensor, expected, restarts):
    value, witness = isotropic_min(tensor * factor, restarts=restarts)
    assert value == pytest.approx(expected, abs=1e-8)
    assert witness.evaluate(tensor * factor) == pytest.approx(value, abs=1e-9)


def test_pseudo_cylinder_pic2_minimum(restarts):
    R = kn_product(SymmetricForm.diag([-3.0, 1.0, 1.0, 1.0, 1.0]), SymmetricForm.identity(5))
    weighted, _ = pic2_min(R, restarts=restarts)
    product, _ = pic2_min(R, restarts=restarts, method="product")
    csec, _ = complex_sectional_min(R, restarts=restarts)
    assert weighted == pytest.approx(-2.0, abs=1e-8)
    assert product == pytest.approx(-2.0, abs=1e-8)
    assert csec == pytest.approx(-2.0, abs=1e-8)
    assert pic1_min(R, restarts=restarts)[0] >= weighted - 1e-12


@pytest.mark.parametrize("seed", [0, 1])
def test_weighted_and_product_pic2_agree(seed):
    R = random_curvature(5, seed=seed)
    weighted, _ = pic2_min(R)
    product, _ = pic2_min(R, method="product")
    assert product == pytest.approx(weighted, abs=1e-6 * max(1.0, R.scale()))


def test_unknown_oracle_method():
    with pytest.raises(PreconditionError):
        pic2_min(sphere_tensor(5), method="hermitian")


@pytest.mark.parametrize("kind", ["generic", "pic2_interior", "psd_operator"])
def test_oracles_cross_check_on_sampled_tensors(kind):
    sampler = CurvatureSampler(5, seed=11)
    for index in range(4):
        R = sampler.sample(kind)
        check = oracle_check(R, restarts=16, seed=index)
        assert check.verdicts_agree()
        assert check.nesting_gap() <= 1e-12
        assert check.witness_error <= 1e-9 * check.scale
        if kind == "psd_operator":
            assert check.curv_op >= -1e-10
            assert check.sufficiency_gap() == pytest.approx(0.0, abs=1e-9)
            assert check.pic2 >= -1e-9 * check.scale
        if kind == "pic2_interior":
            assert check.pic2 > 0.0 and check.complex_sectional > 0.0


def test_top_ricci_eigenvector_gives_the_smallest_ricci_branch(rng, restarts):
    spec = ConeSpec(1.5, 0.0)
    R = random_curvature(5, seed=8)
    terms = cone_terms(R, restarts=restarts)
    _, vectors = ricci_traceless(R).eigh()
    samples = [rng.standard_normal(5) for _ in range(100)] + [vectors[:, -1]]
    slacks = branch_b_sampled(R, spec, samples, terms=terms)
    top = terms.pic2 - 2.0 * spec.ricci_coefficient(5) * terms.ricci_top
    assert slacks.min() >= top - 1e-12
    assert slacks[-1] == pytest.approx(top, abs=1e-12)


def test_weighted_frame_slack_has_the_same_sign(restarts):
    spec = ConeSpec(1.5, 0.05)
    tensors = [sphere_tensor(5), sphere_tensor(5) * -1.0, random_curvature(5, seed=2)]
    tensors += [random_curvature(5, seed=s, kind="cone_member", sigma=1.5, theta=0.05, restarts=restarts)
                for s in range(2)]
    for R in tensors:
        slack = cone_membership(R, spec, restarts=restarts).slack
        if abs(slack) < 1e-3:
            continue
        assert (frame_pic2_slack(R, spec, restarts=restarts) > 0.0) == (slack > 0.0)
