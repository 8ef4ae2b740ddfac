"""Exact curvature tensors of the model spaces and their cone audits."""
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed
from scipy.optimize import linprog

from models.cone_membership import (
    BOUNDARY_BAND,
    ConeSpec,
    cone_membership,
    cone_terms,
)
from models.curvature_algebra import (
    SymmetricForm,
    bianchi_project,
    check_dim,
    kn_product,
    ricci,
    sphere_tensor,
)
from models.frame_search import DEFAULT_RESTARTS
from models.sampling import CurvatureSampler
from utils.errors import PreconditionError

logger = logging.getLogger(__name__)

MODEL_TAGS = ("sphere", "cylinder", "pseudo_cylinder", "product_spheres", "s_h2", "s_r2", "cp", "hp")
AUDIT_DIRECTIONS = 20
AUDIT_EPSILON = 1e-3
CATALOG_PATH = Path(__file__).resolve().parent.parent / "data" / "model_catalog.json"


@dataclass(frozen=True)
class ModelKind:
    tag: str
    n: int
    scale: float = 1.0
    k: int = None

    def __post_init__(self):
        if self.tag not in MODEL_TAGS:
            raise PreconditionError(f"unknown model {self.tag!r}; expected one of {MODEL_TAGS}")
        check_dim(self.n)
        if self.scale <= 0.0:
            raise PreconditionError(f"model scale must be positive, got {self.scale}")
        if self.tag == "product_spheres":
            if self.k is None or not 2 <= self.k <= self.n - 2:
                raise PreconditionError(f"product_spheres needs 2 <= k <= n - 2, got k = {self.k}")
        elif self.k is not None:
            raise PreconditionError(f"only product_spheres takes k, got k = {self.k} for {self.tag}")
        if self.tag == "cp" and self.n % 2:
            raise PreconditionError(f"cp needs even n, got {self.n}")
        if self.tag == "hp" and self.n % 4:
            raise PreconditionError(f"hp needs n divisible by 4, got {self.n}")

    def label(self):
        name = f"{self.tag}(k={self.k})" if self.k is not None else self.tag
        return f"{name}, n={self.n}"

    @classmethod
    def parse(cls, text, n, scale=1.0):
        """'product_spheres(k=2)', 'product_spheres(2)' or a bare tag"""
        match = re.fullmatch(r"\s*(\w+)\s*(?:\(\s*(?:k\s*=\s*)?(\d+)\s*\))?\s*", text)
        if match is None:
            raise PreconditionError(f"cannot parse model {text!r}")
        k = int(match.group(2)) if match.group(2) else None
        return cls(match.group(1), n, scale=scale, k=k)


def _projector(n, indices):
    diagonal = np.zeros(n)
    diagonal[list(indices)] = 1.0
    return SymmetricForm.diag(diagonal)


def _complex_structure(n):
    """J e_(2a) = e_(2a+1) on R^n = C^(n/2)"""
    J = np.zeros((n, n))
    for a in range(0, n, 2):
        J[a + 1, a] = 1.0
        J[a, a + 1] = -1.0
    return J


def _quaternion_structures(n):
    """Left multiplication by i, j, k on R^n = H^(n/4), basis (1, i, j, k) per block"""
    left_i = np.array([[0, -1, 0, 0], [1, 0, 0, 0], [0, 0, 0, -1], [0, 0, 1, 0]], dtype=float)
    left_j = np.array([[0, 0, -1, 0], [0, 0, 0, 1], [1, 0, 0, 0], [0, -1, 0, 0]], dtype=float)
    left_k = left_i @ left_j
    blocks = n // 4
    return [np.kron(np.eye(blocks), m) for m in (left_i, left_j, left_k)]


def _hermitian_term(J):
    """<JX,Z><JY,W> - <JX,W><JY,Z> + 2<JX,Y><JZ,W> on the coordinate basis"""
    a = J.T
    return (
        np.einsum("ik,jl->ijkl", a, a)
        - np.einsum("il,jk->ijkl", a, a)
        + 2.0 * np.einsum("ij,kl->ijkl", a, a)
    )


def _constant_part(n):
    eye = np.eye(n)
    return np.einsum("ik,jl->ijkl", eye, eye) - np.einsum("il,jk->ijkl", eye, eye)


def product_spheres(n, k):
    """Einstein S^k x S^(n-k): sectional curvature n-k-1 on the first factor, k-1 on the second"""
    first = _projector(n, range(k))
    second = _projector(n, range(k, n))
    return kn_product(first, first) * (0.5 * (n - k - 1)) + kn_product(second, second) * (0.5 * (k - 1))


def model_tensor(kind):
    n = kind.n
    identity = SymmetricForm.identity(n)
    tag = kind.tag
    if tag == "sphere":
        R = sphere_tensor(n)
    elif tag == "cylinder":
        P = _projector(n, range(1, n))
        R = kn_product(P, P)
    elif tag == "pseudo_cylinder":
        D = SymmetricForm.diag([-1.0] + [1.0] * (n - 1))
        R = kn_product(D, D)
    elif tag == "s_h2":
        R = kn_product(SymmetricForm.diag([-1.0, -1.0] + [1.0] * (n - 2)), identity)
    elif tag == "product_spheres":
        R = product_spheres(n, kind.k)
    elif tag == "s_r2":
        H = SymmetricForm.diag([-1.0, -1.0] + [1.0] * (n - 2))
        R = product_spheres(n, 2) + kn_product(H, identity) * (0.5 * (n - 3))
    elif tag == "cp":
        R = bianchi_project(0.25 * (_constant_part(n) + _hermitian_term(_complex_structure(n))))
    else:
        full = _constant_part(n) + sum(_hermitian_term(J) for J in _quaternion_structures(n))
        R = bianchi_project(0.25 * full)
    return R * kind.scale


@dataclass
class AuditResult:
    model: str
    spec: ConeSpec
    classification: str
    report: object
    direction_slacks: list = field(default_factory=list)
    exit_direction: int = None
    exit_sign: int = None

    def to_dict(self):
        return {
            "model": self.model,
            "cone": self.spec.label(),
            "classification": self.classification,
            "membership": self.report.to_dict(),
            "direction_slacks": [[float(plus), float(minus)] for plus, minus in self.direction_slacks],
            "exit_direction": self.exit_direction,
            "exit_sign": self.exit_sign,
        }


def _direction_slack(R, direction, epsilon, spec, restarts, seed, witness):
    """Cone slacks of R + eps * D and R - eps * D"""
    values = []
    for sign in (1.0, -1.0):
        terms = cone_terms(R + direction * (sign * epsilon), restarts=restarts, seed=seed, warm_start=witness)
        values.append(terms.slack(spec)[0])
    return tuple(values)


def boundary_audit(kind, spec, directions=AUDIT_DIRECTIONS, epsilon=AUDIT_EPSILON, band=BOUNDARY_BAND,
                   restarts=DEFAULT_RESTARTS, seed=0, threads=1):
    """Classify a model tensor as interior, boundary or exterior of a cone.

    A tensor is on the boundary when its slack is within ``band`` of zero and
    at least one of the random perturbation directions leaves the cone.
    """
    R = model_tensor(kind)
    spec.check_dim(R.dim)
    report = cone_membership(R, spec, restarts=restarts, seed=seed)
    scale = R.scale()
    result = AuditResult(model=kind.label(), spec=spec, classification="", report=report)
    if report.slack > band * scale:
        result.classification = "interior"
        return result
    if report.slack < -band * scale:
        result.classification = "exterior"
        return result

    sampler = CurvatureSampler(R.dim, seed=seed)
    samples = [sampler.sample("generic") for _ in range(directions)]
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(directions)]
    slacks = Parallel(n_jobs=threads)(
        delayed(_direction_slack)(R, D / D.scale(), epsilon * scale, spec, restarts, s, report.witness)
        for D, s in zip(samples, seeds)
    )
    result.direction_slacks = list(slacks)
    for index, (plus, minus) in enumerate(slacks):
        for sign, value in ((1, plus), (-1, minus)):
            if value < -band * scale and result.exit_direction is None:
                result.exit_direction = index
                result.exit_sign = sign
    if result.exit_direction is None:
        logger.warning(f"{kind.label()} has slack {report.slack:.3e} in {spec.label()} "
                       f"but none of {directions} directions leaves the cone")
        result.classification = "interior"
    else:
        result.classification = "boundary"
    return result


def cylinder_direction_tensor(v):
    """(id - 2 v v^T) (KN) id, the cylinder tensor whose Ricci form vanishes on v"""
    v = np.asarray(v, dtype=float)
    n = len(v)
    form = SymmetricForm(np.eye(n) - 2.0 * np.outer(v, v) / float(v @ v))
    return kn_product(form, SymmetricForm.identity(n))


@dataclass
class RigidityResult:
    kind: str
    slack: float
    direction: list = None
    coefficient: float = None
    residual: float = None

    def to_dict(self):
        return dict(self.__dict__)


def rigidity_check(R, tol=1e-8, restarts=DEFAULT_RESTARTS, seed=0):
    """In C(1, 0), a Ricci null direction forces R to be a cylinder tensor"""
    report = cone_membership(R, ConeSpec(1.0, 0.0), restarts=restarts, seed=seed, tol=tol)
    scale = R.scale()
    if not report.member:
        return RigidityResult("not_member", report.slack)
    if scale <= tol:
        return RigidityResult("zero", report.slack)
    values, vectors = ricci(R).eigh()
    if values[0] > tol * scale:
        return RigidityResult("ricci_positive", report.slack)
    v = vectors[:, 0]
    model = cylinder_direction_tensor(v)
    coefficient = float(np.sum(R.block * model.block) / np.sum(model.block * model.block))
    residual = float(np.max(np.abs(R.block - coefficient * model.block))) / scale
    kind = "cylinder" if residual <= tol and coefficient > 0.0 else "violation"
    if kind == "violation":
        logger.warning(f"Ricci null direction without cylinder shape: residual {residual:.3e}")
    return RigidityResult(kind, report.slack, direction=v.tolist(), coefficient=coefficient, residual=residual)


@dataclass
class HullEvidence:
    n: int
    samples: int
    extreme_points: list
    pattern_error: float
    lp_error: float
    tensor_error: float

    @property
    def supports(self):
        return max(self.pattern_error, self.lp_error, self.tensor_error) <= 1e-9

    def to_dict(self):
        return {
            "n": self.n,
            "samples": self.samples,
            "distinct_extreme_points": len(self.extreme_points),
            "pattern_error": self.pattern_error,
            "lp_error": self.lp_error,
            "tensor_error": self.tensor_error,
            "supports": self.supports,
        }


def hull_extreme_point(weights, n):
    """Maximizer of w.x over {x_i <= sum(x) / (n - 4), sum(x) = 1}"""
    bound = 1.0 / (n - 4)
    x = np.full(n, bound)
    low = int(np.argmin(weights))
    x[low] = 1.0 - (n - 1) * bound
    return x


def hull_evidence(n, samples=200, seed=0):
    """Extreme points of the H (KN) id cone eigenvalue set against the pseudo-cylinder pattern"""
    if n < 5:
        raise PreconditionError(f"hull evidence needs n >= 5, got {n}")
    check_dim(n)
    rng = np.random.default_rng(seed)
    pattern = np.array([-3.0] + [1.0] * (n - 1)) / (n - 4)
    bound = 1.0 / (n - 4)
    identity = SymmetricForm.identity(n)
    pseudo = model_tensor(ModelKind("pseudo_cylinder", n))
    seen = {}
    pattern_error = lp_error = tensor_error = 0.0
    for _ in range(samples):
        weights = rng.standard_normal(n)
        x = hull_extreme_point(weights, n)
        pattern_error = max(pattern_error, float(np.max(np.abs(np.sort(x) - np.sort(pattern)))))
        lp = linprog(-weights, A_ub=np.eye(n), b_ub=np.full(n, bound), A_eq=np.ones((1, n)), b_eq=[1.0],
                     bounds=[(None, None)] * n, method="highs")
        lp_error = max(lp_error, abs(float(-lp.fun) - float(weights @ x)))
        low = int(np.argmin(x))
        if low not in seen:
            order = [low] + [i for i in range(n) if i != low]
            full = kn_product(SymmetricForm.diag(x * (n - 4)), identity).full()
            permuted = full[np.ix_(order, order, order, order)]
            tensor_error = max(tensor_error, float(np.max(np.abs(permuted - pseudo.full()))))
            seen[low] = x.tolist()
    return HullEvidence(n=n, samples=samples, extreme_points=list(seen.values()), pattern_error=pattern_error,
                        lp_error=lp_error, tensor_error=tensor_error)


def load_catalog(path=CATALOG_PATH):
    """Catalog entries as (ModelKind, ConeSpec, expected classification)"""
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise PreconditionError(f"cannot read model catalog {path}: {e}") from e
    entries = []
    for entry in data.get("models", []):
        kind = ModelKind(entry["tag"], int(entry["n"]), k=entry.get("k"))
        spec = ConeSpec(float(entry.get("sigma", 2.0)), float(entry.get("theta", 0.0)))
        entries.append((kind, spec, entry["expected"]))
    return data.get("metadata", {}), entries


def catalog_tensors(n):
    """Every model kind that exists in dimension n"""
    kinds = [ModelKind(tag, n) for tag in ("sphere", "cylinder", "pseudo_cylinder", "s_h2", "s_r2")]
    kinds += [ModelKind("product_spheres", n, k=k) for k in range(2, n // 2 + 1)]
    if n % 2 == 0:
        kinds.append(ModelKind("cp", n))
    if n % 4 == 0:
        kinds.append(ModelKind("hp", n))
    return {kind.label(): model_tensor(kind) for kind in kinds}

