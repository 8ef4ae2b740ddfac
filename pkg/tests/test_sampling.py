import numpy as np
import pytest

from models.cone_membership import ConeSpec, complex_sectional_min, cone_membership
from models.sampling import CurvatureSampler, random_curvature, random_psd, random_traceless
from utils.errors import PreconditionError


def test_same_seed_gives_identical_bytes():
    first = random_curvature(5, seed=17)
    second = random_curvature(5, seed=17)
    assert first.block.tobytes() == second.block.tobytes()
    assert random_curvature(5, seed=18).block.tobytes() != first.block.tobytes()


def test_generic_samples_satisfy_bianchi():
    sampler = CurvatureSampler(6, seed=1)
    for _ in range(3):
        assert sampler.sample("generic").bianchi_residual() < 1e-12


def test_pic2_interior_sample_is_positive(restarts):
    R = random_curvature(5, seed=3, kind="pic2_interior")
    value, _ = complex_sectional_min(R, restarts=restarts)
    assert value > 0.0


def test_psd_operator_sample_has_nonnegative_operator():
    R = random_curvature(5, seed=6, kind="psd_operator")
    assert R.operator_eigenvalues()[0] >= -1e-10


@pytest.mark.parametrize("active", ["eigen", "trace"])
def test_cone_boundary_sample_has_zero_slack(active, restarts):
    spec = ConeSpec(1.5, 0.05)
    R = random_curvature(5, seed=8, kind="cone_boundary", sigma=1.5, theta=0.05, active=active)
    report = cone_membership(R, spec, restarts=restarts, seed=8)
    assert abs(report.slack) <= 1e-6 * R.scale()


def test_random_forms(rng):
    assert random_traceless(rng, 5).trace() == pytest.approx(0.0, abs=1e-12)
    A = random_psd(rng, 5, rank=2)
    eigenvalues = A.eigenvalues()
    assert eigenvalues[0] >= -1e-12
    assert np.sum(eigenvalues > 1e-10) == 2


def test_unknown_class_and_missing_cone():
    sampler = CurvatureSampler(5, seed=0)
    with pytest.raises(PreconditionError):
        sampler.sample("einstein")
    with pytest.raises(PreconditionError):
        sampler.sample("cone_member")
    with pytest.raises(PreconditionError):
        sampler.sample("cone_boundary", spec=ConeSpec(1.5), active="ricci")
