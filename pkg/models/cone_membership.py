"""Membership oracles for PIC, PIC1, PIC2, the cones C(sigma, theta) and the pinched sets.

Every oracle returns a signed slack (negative means violated) together with a
witness frame that reproduces it. The PIC2 slack used for the cones is the
minimum of R(z, w, z_bar, w_bar) over Hermitian-orthonormal pairs; on such
pairs id (KN) id evaluates to exactly 2, so adding c * id (KN) id shifts the
slack by 2c and both cone branches follow from one optimization.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from models.curvature_algebra import (
    SymmetricForm,
    bianchi_project,
    check_dim,
    kn_product,
    ricci_traceless,
    scalar,
    sphere_tensor,
)
from models.frame_search import (
    DEFAULT_GTOL,
    DEFAULT_MAX_ITER,
    DEFAULT_RESTARTS,
    ComplexPairSearch,
    FrameSearch,
    pair_terms,
    run_search,
)
from utils.errors import PreconditionError

logger = logging.getLogger(__name__)

MEMBERSHIP_TOL = 1e-8
BOUNDARY_BAND = 1e-6
GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class ConeSpec:
    sigma: float
    theta: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.sigma <= 2.0:
            raise PreconditionError(f"sigma = {self.sigma} outside (0, 2]")
        if self.theta < 0.0:
            raise PreconditionError(f"theta = {self.theta} must be nonnegative")

    def check_dim(self, n):
        check_dim(n)
        if n - 2.0 * self.sigma <= 0.0 and not (n == 4 and self.sigma == 2.0):
            raise PreconditionError(f"n - 2 sigma must be positive (n = {n}, sigma = {self.sigma})")

    def scalar_coefficient(self, n):
        """Coefficient of scal * id (KN) id in the scalar branch"""
        return self.theta / (n * (1.0 + 2.0 * (n - 1) * self.theta))

    def ricci_coefficient(self, n):
        """Coefficient of lambda_max(Ric0) * id (KN) id in the Ricci branch"""
        return (n - 2.0 * self.sigma) / (2.0 * (n - 2) * self.sigma)

    def label(self):
        return f"C({self.sigma:g},{self.theta:g})"


@dataclass
class FrameWitness:
    kind: str
    vectors: list
    lam: float = None
    mu: float = None
    branch: str = None
    converged: bool = True

    @classmethod
    def from_result(cls, result, branch=None):
        return cls(kind=result.kind, vectors=[np.array(v) for v in result.vectors],
                   lam=result.lam, mu=result.mu, branch=branch, converged=result.converged)

    def orthonormality_error(self):
        if not self.vectors:
            return 0.0
        frame = np.stack(self.vectors, axis=1)
        gram = frame.conj().T @ frame
        return float(np.max(np.abs(gram - np.eye(gram.shape[0]))))

    def evaluate(self, R):
        """Re-evaluate the functional this witness was produced for"""
        full = R.full()
        if self.kind == "complex-2-frame":
            Z, W = self.vectors
        elif self.kind == "real-4-frame":
            e1, e2, e3, e4 = self.vectors
            Z = e1 + 1j * self.mu * e2
            W = e3 + 1j * self.lam * e4
        else:
            v = self.vectors[0]
            return float(v @ R.block @ v)
        value, _, _ = pair_terms(full, np.asarray(Z)[None, :], np.asarray(W)[None, :])
        return float(value[0])

    def to_dict(self):
        def encode(vector):
            vector = np.asarray(vector)
            if np.iscomplexobj(vector):
                return [[float(c.real), float(c.imag)] for c in vector]
            return [float(c) for c in vector]

        return {
            "kind": self.kind,
            "vectors": [encode(v) for v in self.vectors],
            "lambda": self.lam,
            "mu": self.mu,
            "branch": self.branch,
            "converged": self.converged,
        }


@dataclass
class MembershipReport:
    member: bool
    slack: float
    witness: FrameWitness
    evaluations: int
    cone: str
    sigma: float = None
    theta: float = None
    seed: int = None
    branch: str = None
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "cone": self.cone,
            "sigma": self.sigma,
            "theta": self.theta,
            "member": self.member,
            "slack": self.slack,
            "branch": self.branch,
            "witness": self.witness.to_dict() if self.witness is not None else None,
            "evaluations": self.evaluations,
            "seed": self.seed,
            "details": self.details,
        }


def _search(search, seed, restarts, tol, warm_start, max_iter):
    rng = np.random.default_rng(seed)
    warm = [warm_start] if warm_start is not None and warm_start.kind == search.kind else None
    return run_search(search, rng, restarts=restarts, max_iter=max_iter, gtol=tol, warm_starts=warm)


def isotropic_min(R, restarts=DEFAULT_RESTARTS, tol=DEFAULT_GTOL, seed=0, warm_start=None,
                  max_iter=DEFAULT_MAX_ITER):
    """Minimum of the isotropic curvature functional over orthonormal 4-frames"""
    result = _search(FrameSearch(R, "isotropic"), seed, restarts, tol, warm_start, max_iter)
    return result.value, FrameWitness.from_result(result)


def direct_sum_flat(R, extra):
    """R (+) 0 on R^(n + extra)"""
    n = R.dim
    check_dim(n + extra)
    full = np.zeros((n + extra,) * 4)
    full[:n, :n, :n, :n] = R.full()
    return bianchi_project(full)


def _weighted_min(R, mode, extra, method, restarts, tol, seed, warm_start, max_iter):
    if method == "weighted":
        result = _search(FrameSearch(R, mode), seed, restarts, tol, warm_start, max_iter)
        return result.value, FrameWitness.from_result(result)
    if method == "product":
        return isotropic_min(direct_sum_flat(R, extra), restarts=restarts, tol=tol, seed=seed,
                             max_iter=max_iter)
    raise PreconditionError(f"unknown method {method!r}; expected 'weighted' or 'product'")


def pic1_min(R, restarts=DEFAULT_RESTARTS, tol=DEFAULT_GTOL, seed=0, method="weighted",
             warm_start=None, max_iter=DEFAULT_MAX_ITER):
    return _weighted_min(R, "pic1", 1, method, restarts, tol, seed, warm_start, max_iter)


def pic2_min(R, restarts=DEFAULT_RESTARTS, tol=DEFAULT_GTOL, seed=0, method="weighted",
             warm_start=None, max_iter=DEFAULT_MAX_ITER):
    return _weighted_min(R, "pic2", 2, method, restarts, tol, seed, warm_start, max_iter)


def complex_sectional_min(R, restarts=DEFAULT_RESTARTS, tol=DEFAULT_GTOL, seed=0, warm_start=None,
                          max_iter=DEFAULT_MAX_ITER):
    """Minimum of R(z, w, z_bar, w_bar) over Hermitian-orthonormal pairs (z, w)"""
    result = _search(ComplexPairSearch(R), seed, restarts, tol, warm_start, max_iter)
    return result.value, FrameWitness.from_result(result)


def curv_op_min_eig(R):
    return float(R.operator_eigenvalues()[0])


@dataclass
class OracleCheck:
    """The PIC-family minima of one tensor, side by side"""
    isotropic: float
    pic1: float
    pic2: float
    complex_sectional: float
    curv_op: float
    witness_error: float
    scale: float = 1.0
    pic2_product: float = None

    def verdicts_agree(self, band=1e-6):
        """pic2_min and complex_sectional_min have the same sign unless one is within the band of zero"""
        width = band * self.scale
        if abs(self.pic2) <= width or abs(self.complex_sectional) <= width:
            return True
        return (self.pic2 > 0.0) == (self.complex_sectional > 0.0)

    def nesting_gap(self):
        """Positive when a wider search reports a larger minimum than a narrower one"""
        return max(self.pic2 - self.pic1, self.pic1 - self.isotropic) / self.scale

    def sufficiency_gap(self, tol=1e-9):
        """How far a tensor with nonnegative curvature operator falls outside PIC2 (0 if it does not apply)"""
        if self.curv_op < -tol * self.scale:
            return 0.0
        return max(0.0, -min(self.pic2, self.complex_sectional) / self.scale)

    def to_dict(self):
        return dict(self.__dict__)


def oracle_check(R, restarts=DEFAULT_RESTARTS, tol=DEFAULT_GTOL, seed=0, product=False):
    """Run every PIC-family oracle on R.

    The PIC1 search starts from the isotropic witness and the PIC2 search from
    the PIC1 witness, so the three minima are comparable.
    """
    iso, iso_witness = isotropic_min(R, restarts=restarts, tol=tol, seed=seed)
    pic1, pic1_witness = pic1_min(R, restarts=restarts, tol=tol, seed=seed, warm_start=iso_witness)
    pic2, pic2_witness = pic2_min(R, restarts=restarts, tol=tol, seed=seed, warm_start=pic1_witness)
    csec, csec_witness = complex_sectional_min(R, restarts=restarts, tol=tol, seed=seed)
    witness_error = max(abs(witness.evaluate(R) - value) for witness, value in
                        ((iso_witness, iso), (pic1_witness, pic1), (pic2_witness, pic2), (csec_witness, csec)))
    check = OracleCheck(isotropic=iso, pic1=pic1, pic2=pic2, complex_sectional=csec, curv_op=curv_op_min_eig(R),
                        witness_error=witness_error, scale=max(1.0, R.scale()))
    if product:
        check.pic2_product, _ = pic2_min(R, restarts=restarts, tol=tol, seed=seed, method="product")
    return check


def gauge_reduced(R):
    """R - Ric0 (KN) id / (n - 2): the tensor whose PIC2 slack enters every cone test"""
    n = R.dim
    return R - kn_product(ricci_traceless(R), SymmetricForm.identity(n)) * (1.0 / (n - 2))


@dataclass
class ConeTerms:
    """Cone-independent quantities shared by all cone and pinched slacks of one tensor"""

    n: int
    pic2: float
    scal: float
    ricci_top: float
    witness: FrameWitness
    evaluations: int

    def slack(self, spec, shift=0.0):
        """Slack of R + shift * id (KN) id in the cone of ``spec``"""
        n = self.n
        scalar_term = spec.scalar_coefficient(n) * (self.scal + 2.0 * n * (n - 1) * shift)
        ricci_term = spec.ricci_coefficient(n) * self.ricci_top
        branch = "scalar" if scalar_term >= ricci_term else "ricci"
        return self.pic2 + 2.0 * shift - 2.0 * max(scalar_term, ricci_term), branch


def cone_terms(R, restarts=DEFAULT_RESTARTS, tol=DEFAULT_GTOL, seed=0, warm_start=None,
               max_iter=DEFAULT_MAX_ITER):
    reduced = gauge_reduced(R)
    search = ComplexPairSearch(reduced)
    result = _search(search, seed, restarts, tol, warm_start, max_iter)
    ric0 = ricci_traceless(R)
    return ConeTerms(n=R.dim, pic2=result.value, scal=scalar(R), ricci_top=float(ric0.eigenvalues()[-1]),
                     witness=FrameWitness.from_result(result), evaluations=result.evaluations)


def cone_membership(R, spec, restarts=DEFAULT_RESTARTS, tol=MEMBERSHIP_TOL, seed=0, warm_start=None,
                    max_iter=DEFAULT_MAX_ITER, terms=None):
    """Signed slack of R in C(sigma, theta) with the attaining branch and pair"""
    spec.check_dim(R.dim)
    if terms is None:
        terms = cone_terms(R, restarts=restarts, seed=seed, warm_start=warm_start, max_iter=max_iter)
    slack, branch = terms.slack(spec)
    witness = FrameWitness(**{**terms.witness.__dict__, "branch": branch})
    return MembershipReport(
        member=bool(slack >= -tol),
        slack=float(slack),
        witness=witness,
        evaluations=terms.evaluations,
        cone=spec.label(),
        sigma=spec.sigma,
        theta=spec.theta,
        seed=seed,
        branch=branch,
        details={"pic2_reduced": terms.pic2, "scal": terms.scal, "ricci_top": terms.ricci_top},
    )


def _joint_slack(t, terms, spec, top_h0):
    """min over the three constraints at gauge t = tr(H)"""
    n = terms.n
    pic2 = terms.pic2 - 2.0 * t / n
    eigen = t * (2.0 * spec.sigma / n) - (n - 2.0 * spec.sigma) * top_h0
    trace = t * (1.0 + 2.0 * (n - 1) * spec.theta) - spec.theta * terms.scal
    return min(pic2, eigen, trace)


def decompose(R, spec, restarts=DEFAULT_RESTARTS, tol=MEMBERSHIP_TOL, seed=0, terms=None,
              iterations=200):
    """Find R = S + H (KN) id certifying membership in C(sigma, theta), or None.

    The trace-free part of H is fixed to Ric0 / (n - 2); the gauge t = tr(H) is
    found by golden-section search on the joint slack, which is concave in t.
    """
    n = R.dim
    spec.check_dim(n)
    if terms is None:
        terms = cone_terms(R, restarts=restarts, seed=seed)
    h0 = ricci_traceless(R) / (n - 2)
    top_h0 = float(h0.eigenvalues()[-1])
    upper = n * max(terms.pic2, 0.0) / 2.0 + (n - 2.0 * spec.sigma) * abs(top_h0) * n / (2.0 * spec.sigma) \
        + abs(spec.theta * terms.scal) + 1.0
    lo, hi = 0.0, upper
    for _ in range(iterations):
        left = hi - GOLDEN * (hi - lo)
        right = lo + GOLDEN * (hi - lo)
        if _joint_slack(left, terms, spec, top_h0) < _joint_slack(right, terms, spec, top_h0):
            lo = left
        else:
            hi = right
    gauge = 0.5 * (lo + hi)
    best = _joint_slack(gauge, terms, spec, top_h0)
    if best < -tol * max(1.0, R.scale()):
        logger.info(f"no decomposition in {spec.label()}: best joint slack {best:.3e}")
        return None
    H = h0 + SymmetricForm.identity(n) * (gauge / n)
    S = R - kn_product(H, SymmetricForm.identity(n))
    return S, H


def pinched_terms(terms, f, theta=None):
    """Per-term slacks of the pinched set: the C(sigma0) term and one per (sigma_j, offset_j)"""
    theta = f.theta if theta is None else theta
    rows = []
    slack, branch = terms.slack(ConeSpec(f.sigma0, theta))
    rows.append((0, f.sigma0, 0.0, slack, branch))
    for j, (sigma_j, offset) in enumerate(f.sequence, start=1):
        slack, branch = terms.slack(ConeSpec(sigma_j, theta), shift=offset)
        rows.append((j, sigma_j, offset, slack, branch))
    return rows


def pinched_membership(R, f, theta=None, restarts=DEFAULT_RESTARTS, tol=MEMBERSHIP_TOL, seed=0,
                       warm_start=None, max_iter=DEFAULT_MAX_ITER, terms=None):
    """Membership in C(sigma0, theta) intersected with R + offset_j id (KN) id in C(sigma_j, theta)"""
    theta = f.theta if theta is None else theta
    if f.n != R.dim:
        raise PreconditionError(f"pinching function built for n = {f.n}, tensor has n = {R.dim}")
    if terms is None:
        terms = cone_terms(R, restarts=restarts, seed=seed, warm_start=warm_start, max_iter=max_iter)
    rows = pinched_terms(terms, f, theta)
    worst = min(rows, key=lambda row: row[3])
    branch = f"term {worst[0]} ({worst[4]})"
    witness = FrameWitness(**{**terms.witness.__dict__, "branch": branch})
    return MembershipReport(
        member=bool(worst[3] >= -tol),
        slack=float(worst[3]),
        witness=witness,
        evaluations=terms.evaluations,
        cone="pinched",
        sigma=f.sigma0,
        theta=theta,
        seed=seed,
        branch=branch,
        details={"active_term": worst[0], "pic2_reduced": terms.pic2, "scal": terms.scal},
    )


def branch_b_sampled(R, spec, vectors, terms=None, restarts=DEFAULT_RESTARTS, seed=0):
    """Ricci-branch slacks with Ric0(v, v) for the given unit vectors, for comparison with lambda_max"""
    if terms is None:
        terms = cone_terms(R, restarts=restarts, seed=seed)
    ric0 = ricci_traceless(R)
    coefficient = spec.ricci_coefficient(R.dim)
    values = [terms.pic2 - 2.0 * coefficient * ric0.quadratic(v / np.linalg.norm(v)) for v in vectors]
    return np.array(values)


def frame_pic2_slack(R, spec, restarts=DEFAULT_RESTARTS, seed=0, method="weighted"):
    """Cone slack with the weighted-frame PIC2 functional in place of the complex pairs.

    The weighted functional is not normalized like the complex sectional
    curvature, so each branch needs its own optimization.
    """
    n = R.dim
    spec.check_dim(n)
    reduced = gauge_reduced(R)
    identity = sphere_tensor(n)
    scal = scalar(R)
    ric0 = ricci_traceless(R)
    scalar_branch = reduced - identity * (spec.scalar_coefficient(n) * scal)
    ricci_branch = reduced - identity * (spec.ricci_coefficient(n) * float(ric0.eigenvalues()[-1]))
    a, _ = pic2_min(scalar_branch, restarts=restarts, seed=seed, method=method)
    b, _ = pic2_min(ricci_branch, restarts=restarts, seed=seed, method=method)
    return min(a, b)

