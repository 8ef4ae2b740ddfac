"""Seeded generators for random symmetric forms and curvature tensors."""
import logging

import numpy as np

from models.cone_membership import ConeSpec, complex_sectional_min
from models.curvature_algebra import (
    CurvatureTensor,
    SymmetricForm,
    check_dim,
    kn_product,
    plane_count,
    scalar,
    sphere_tensor,
    weyl_part,
)
from utils.errors import PreconditionError, SamplerFailure

logger = logging.getLogger(__name__)

TENSOR_CLASSES = ("generic", "pic2_interior", "psd_operator", "cone_member", "cone_boundary")
DEFAULT_ATTEMPTS = 20
SAMPLER_RESTARTS = 16


def random_symmetric(rng, n, scale=1.0):
    a = rng.standard_normal((n, n))
    return SymmetricForm(scale * 0.5 * (a + a.T))


def random_traceless(rng, n, scale=1.0):
    return random_symmetric(rng, n, scale).traceless()


def random_psd(rng, n, rank=None, ridge=0.0):
    """B B^T + ridge * id with B of the given rank"""
    b = rng.standard_normal((n, rank or n))
    return SymmetricForm(b @ b.T + ridge * np.eye(n))


def _two_form(x, y):
    """Coefficients of x ^ y on the coordinate planes i < j"""
    I, J = np.triu_indices(len(x), k=1)
    return x[I] * y[J] - x[J] * y[I]


class CurvatureSampler:
    """Draws curvature tensors of a requested class from one seeded generator"""

    def __init__(self, n, seed=0, restarts=SAMPLER_RESTARTS, attempts=DEFAULT_ATTEMPTS):
        check_dim(n)
        self.n = n
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.restarts = restarts
        self.attempts = attempts

    def _child_seed(self):
        return int(self.rng.integers(0, 2 ** 31 - 1))

    def _csec(self, R):
        value, _ = complex_sectional_min(R, restarts=self.restarts, seed=self._child_seed())
        return value

    def sample(self, kind="generic", spec=None, active=None):
        if kind == "generic":
            return self._sample_generic()
        if kind == "pic2_interior":
            return self._sample_pic2_interior()
        if kind == "psd_operator":
            return self._sample_psd_operator()
        if kind in ("cone_member", "cone_boundary"):
            if spec is None:
                raise PreconditionError(f"class '{kind}' needs a ConeSpec")
            spec.check_dim(self.n)
            if kind == "cone_member":
                return self._sample_cone_member(spec)
            return self._sample_cone_boundary(spec, active)
        raise PreconditionError(f"unknown tensor class {kind!r}; expected one of {TENSOR_CLASSES}")

    def _sample_generic(self):
        size = plane_count(self.n)
        block = self.rng.standard_normal((size, size))
        return CurvatureTensor(0.5 * (block + block.T))

    def _sample_pic2_interior(self):
        n = self.n
        for attempt in range(self.attempts):
            R = CurvatureTensor.zeros(n)
            for _ in range(int(self.rng.integers(1, 4))):
                A = random_psd(self.rng, n, ridge=0.1)
                R = R + kn_product(A, A) * float(self.rng.uniform(0.5, 1.5))
            R = R / R.scale()
            noisy = R + self._sample_generic() * (0.01 / n)
            noisy = noisy / noisy.scale()
            if self._csec(noisy) > 0.0:
                return noisy
            logger.info(f"pic2_interior candidate {attempt} rejected by the PIC2 oracle")
        raise SamplerFailure("pic2_interior", self.attempts)

    def _sample_psd_operator(self):
        """Sum of squared decomposable 2-forms and A (KN) A with A >= 0"""
        n = self.n
        size = plane_count(n)
        block = np.zeros((size, size))
        for _ in range(int(self.rng.integers(1, n + 1))):
            omega = _two_form(self.rng.standard_normal(n), self.rng.standard_normal(n))
            block += np.outer(omega, omega)
        R = CurvatureTensor(block)
        if self.rng.uniform() < 0.5:
            A = random_psd(self.rng, n, rank=int(self.rng.integers(1, n + 1)))
            R = R + kn_product(A, A)
        return R / R.scale()

    def _einstein_pic2(self, margin):
        """Weyl tensor plus the multiple of id (KN) id that puts its PIC2 slack at ``margin``"""
        weyl = weyl_part(self._sample_generic())
        lowest = self._csec(weyl)
        shift = 0.5 * (margin - lowest)
        return weyl + sphere_tensor(self.n) * shift

    def _sample_cone_member(self, spec):
        n = self.n
        S = self._einstein_pic2(float(self.rng.uniform(0.1, 1.0)))
        H0 = random_traceless(self.rng, n, scale=float(self.rng.uniform(0.0, 1.0)))
        top = float(H0.eigenvalues()[-1])
        eigen_gauge = n * (n - 2.0 * spec.sigma) * top / (2.0 * spec.sigma)
        trace_gauge = spec.theta * scalar(S)
        gauge = max(eigen_gauge, trace_gauge) * (1.0 + float(self.rng.uniform(0.0, 1.0))) \
            + float(self.rng.uniform(0.0, 0.5))
        H = H0 + SymmetricForm.identity(n) * (gauge / n)
        R = S + kn_product(H, SymmetricForm.identity(n))
        return R / R.scale()

    def _onto_pic2_boundary(self, S, checks=3):
        """Shift S along id (KN) id until independent searches agree its PIC2 slack is 0"""
        S = S - sphere_tensor(self.n) * (0.5 * self._csec(S))
        for _ in range(checks):
            lowest = self._csec(S)
            if lowest >= -1e-12 * max(1.0, S.scale()):
                break
            S = S - sphere_tensor(self.n) * (0.5 * lowest)
        return S

    def _sample_cone_boundary(self, spec, active=None):
        """Boundary point with PIC2 of S active and one of the H constraints active"""
        n = self.n
        S = self._einstein_pic2(float(self.rng.uniform(0.1, 1.0)))
        S = self._onto_pic2_boundary(S)
        scal_s = scalar(S)
        if active is None:
            active = "eigen" if self.rng.uniform() < 0.5 else "trace"
        if active not in ("eigen", "trace"):
            raise PreconditionError(f"active constraint must be 'eigen' or 'trace', got {active!r}")
        trace_gauge = spec.theta * scal_s
        H0 = random_traceless(self.rng, n)
        top = float(H0.eigenvalues()[-1])
        unit_eigen_gauge = n * (n - 2.0 * spec.sigma) * top / (2.0 * spec.sigma)
        if active == "eigen":
            target = trace_gauge * (1.0 + float(self.rng.uniform(0.0, 1.0))) if trace_gauge > 0.0 \
                else float(self.rng.uniform(0.2, 1.0))
        else:
            target = trace_gauge * float(self.rng.uniform(0.0, 1.0))
        if unit_eigen_gauge > 0.0:
            H0 = H0 * (target / unit_eigen_gauge)
            eigen_gauge = target
        else:
            eigen_gauge = 0.0
        gauge = max(eigen_gauge, trace_gauge)
        H = H0 + SymmetricForm.identity(n) * (gauge / n)
        R = S + kn_product(H, SymmetricForm.identity(n))
        return R / R.scale()


def random_curvature(n, seed=0, kind="generic", sigma=None, theta=0.0, active=None,
                     restarts=SAMPLER_RESTARTS, attempts=DEFAULT_ATTEMPTS):
    """One tensor of the requested class; identical arguments give identical bytes"""
    spec = ConeSpec(sigma, theta) if sigma is not None else None
    sampler = CurvatureSampler(n, seed=seed, restarts=restarts, attempts=attempts)
    return sampler.sample(kind, spec=spec, active=active)
