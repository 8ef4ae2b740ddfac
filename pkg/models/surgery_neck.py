"""Neck geometry, the conformal surgery cutoff and the pointwise pinching audit.

The neck is S^(n-1) x [-10, 10] with the warped metric dz^2 + w(z)^2 g_round.
Surgery replaces g by exp(-2 phi) g with phi = exp(-1/z) for z > 0 and
phi = 0 otherwise. All curvature is expressed in an orthonormal frame
(e_1 radial), and for the modified metric in the frame exp(phi) e_i.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from models.cone_membership import (
    MEMBERSHIP_TOL,
    ConeSpec,
    cone_membership,
    cone_terms,
    pinched_membership,
)
from models.curvature_algebra import CurvatureTensor, SymmetricForm, check_dim, kn_product, scalar
from utils.errors import DimensionMismatch, PreconditionError, ReconstructionError

logger = logging.getLogger(__name__)

NECK_PROFILES = ("standard", "perturbed")
NECK_LENGTH = 10.0
GRID_POINTS = 2048
REFINE_POINTS = 64
REFINE_RANGE = (1e-3, 1.0)
MAX_DELTA = 0.1
# exp(-1/z) is below the smallest double for z under this
PHI_FLOOR = 1.0 / 700.0
AUDIT_RESTARTS = 8
RECONSTRUCTION_TOL = 1e-12
GAIN_BAND = 0.2
GAIN_BAND_MAX_Z = 0.1
FD_STEP = 1e-3


def cutoff_phi(z):
    """(phi, phi', phi'') of phi = exp(-1/z) for z > 0, zero for z <= 0"""
    values = np.asarray(z, dtype=float)
    active = values > PHI_FLOOR
    inverse = np.where(active, 1.0 / np.where(active, values, 1.0), 0.0)
    phi = np.where(active, np.exp(-inverse), 0.0)
    d1 = phi * inverse ** 2
    d2 = phi * (inverse ** 4 - 2.0 * inverse ** 3)
    if values.ndim == 0:
        return float(phi), float(d1), float(d2)
    return phi, d1, d2


def gain_bound(z):
    """z^-4 exp(-1/z), the leading term of the Hessian of phi"""
    phi, _, _ = cutoff_phi(z)
    values = np.asarray(z, dtype=float)
    inverse = np.where(values > PHI_FLOOR, 1.0 / np.where(values > PHI_FLOOR, values, 1.0), 0.0)
    bound = phi * inverse ** 4
    return float(bound) if values.ndim == 0 else bound


@dataclass
class NeckGeometry:
    """Rotationally symmetric neck sampled on a grid of heights.

    The standard profile is w = radius; the perturbed profile is
    w = radius (1 + delta cos z). With ``closed_form`` off the derivatives of
    w come from second-order finite differences on the grid, one-sided at
    both ends.
    """

    n: int
    profile: str = "standard"
    radius: float = 1.0
    delta: float = 0.0
    points: int = GRID_POINTS
    refine: int = REFINE_POINTS
    closed_form: bool = True
    z: np.ndarray = field(init=False, repr=False)
    w: np.ndarray = field(init=False, repr=False)
    dw: np.ndarray = field(init=False, repr=False)
    ddw: np.ndarray = field(init=False, repr=False)
    one_sided: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        check_dim(self.n)
        if self.profile not in NECK_PROFILES:
            raise PreconditionError(f"unknown neck profile {self.profile!r}; expected one of {NECK_PROFILES}")
        if self.radius <= 0.0:
            raise PreconditionError(f"neck radius must be positive, got {self.radius}")
        if not 0.0 <= self.delta <= MAX_DELTA:
            raise PreconditionError(f"perturbation delta = {self.delta} outside [0, {MAX_DELTA}]")
        if self.profile == "standard" and self.delta != 0.0:
            raise PreconditionError("the standard neck takes no perturbation; use profile 'perturbed'")
        if self.points < 3:
            raise PreconditionError(f"neck grid needs at least 3 points, got {self.points}")
        uniform = np.linspace(-NECK_LENGTH, NECK_LENGTH, self.points)
        refined = np.geomspace(*REFINE_RANGE, self.refine) if self.refine > 0 else np.empty(0)
        self.z = np.unique(np.concatenate([uniform, refined]))
        self.w, self.dw, self.ddw = self.warp(self.z)
        self.one_sided = np.zeros(self.z.shape, dtype=bool)
        if not self.closed_form:
            self.dw = np.gradient(self.w, self.z, edge_order=2)
            self.ddw = np.gradient(self.dw, self.z, edge_order=2)
            self.one_sided[[0, -1]] = True
            logger.info("neck derivatives from grid differences; end points use one-sided stencils")

    def warp(self, z):
        """(w, w', w'') in closed form"""
        z = np.asarray(z, dtype=float)
        if self.profile == "standard":
            return np.full(z.shape, self.radius), np.zeros(z.shape), np.zeros(z.shape)
        r, d = self.radius, self.delta
        return r * (1.0 + d * np.cos(z)), -r * d * np.sin(z), -r * d * np.cos(z)

    def __len__(self):
        return len(self.z)

    def label(self):
        if self.profile == "standard":
            return f"standard neck (r={self.radius:g}, n={self.n})"
        return f"perturbed neck (r={self.radius:g}, delta={self.delta:g}, n={self.n})"


def _split(n, w, dw, ddw):
    """H with R = H (KN) id for the warped metric; radial K = -w''/w, spherical K = (1 - w'^2)/w^2"""
    radial = -ddw / w
    spherical = (1.0 - dw * dw) / (w * w)
    return SymmetricForm.diag([radial - 0.5 * spherical] + [0.5 * spherical] * (n - 1))


def neck_decomposition(geom, index):
    """Pre-surgery (S, H) at a grid point; the neck is conformally flat so S = 0"""
    n = geom.n
    H = _split(n, geom.w[index], geom.dw[index], geom.ddw[index])
    return CurvatureTensor.zeros(n), H


def neck_curvature(geom, index):
    if geom.one_sided[index]:
        logger.warning(f"curvature at z = {geom.z[index]:g} uses a one-sided difference stencil")
    _, H = neck_decomposition(geom, index)
    return kn_product(H, SymmetricForm.identity(geom.n))


def conformal_data(geom, index):
    """phi, d phi and the Hessian of phi at a grid point, in the orthonormal frame of g"""
    n = geom.n
    phi, d1, d2 = cutoff_phi(geom.z[index])
    dphi = np.zeros(n)
    dphi[0] = d1
    tangential = geom.dw[index] / geom.w[index] * d1
    hess = SymmetricForm.diag([d2] + [tangential] * (n - 1))
    return phi, dphi, hess


def _conformal_shift(phi, dphi, hess):
    """D^2 phi + d phi (x) d phi - |d phi|^2 id / 2"""
    dphi = np.asarray(dphi, dtype=float)
    if dphi.shape != (hess.dim,):
        raise DimensionMismatch(len(dphi), hess.dim, "gradient and Hessian")
    return hess + SymmetricForm.outer(dphi) - SymmetricForm.identity(hess.dim) * (0.5 * float(dphi @ dphi))


def conformal_transform(R, phi, dphi, hess):
    """Curvature of exp(-2 phi) g in the frame exp(phi) e_i"""
    if hess.dim != R.dim:
        raise DimensionMismatch(R.dim, hess.dim, "tensor and Hessian")
    factor = float(np.exp(2.0 * phi))
    shift = _conformal_shift(phi, dphi, hess)
    return R * factor + kn_product(shift, SymmetricForm.identity(R.dim)) * factor


def surgery_decompose(R_tilde, S, H, phi, dphi, hess, tol=RECONSTRUCTION_TOL):
    """(S~, H~) = (exp(2 phi) S, exp(2 phi)(H + D^2 phi + d phi (x) d phi - |d phi|^2 id / 2))"""
    factor = float(np.exp(2.0 * phi))
    S_tilde = S * factor
    H_tilde = (H + _conformal_shift(phi, dphi, hess)) * factor
    rebuilt = S_tilde + kn_product(H_tilde, SymmetricForm.identity(R_tilde.dim))
    error = R_tilde.max_error(rebuilt)
    if error > tol:
        raise ReconstructionError(error, tol)
    return S_tilde, H_tilde


def trace_gain(H, phi, dphi, hess):
    """tr(H~) - tr(H) written as (exp(2 phi) - 1) tr(H) + exp(2 phi)(lap phi + (1 - n/2)|d phi|^2)"""
    n = H.dim
    dphi = np.asarray(dphi, dtype=float)
    own = hess.trace() + (1.0 - 0.5 * n) * float(dphi @ dphi)
    return float(np.expm1(2.0 * phi)) * H.trace() + float(np.exp(2.0 * phi)) * own


def monotone_gain(H, phi, dphi, hess):
    """tr(H~) - exp(2 phi) tr(H)"""
    n = H.dim
    dphi = np.asarray(dphi, dtype=float)
    return float(np.exp(2.0 * phi)) * (hess.trace() + (1.0 - 0.5 * n) * float(dphi @ dphi))


def _tensor_terms(R, restarts, seed):
    return cone_terms(R, restarts=restarts, seed=seed)


def _terms_for(tensors, restarts, seed, threads):
    """cone_terms for every tensor, evaluating each distinct tensor once"""
    keys = [R.block.tobytes() for R in tensors]
    unique = {}
    for key, R in zip(keys, tensors):
        unique.setdefault(key, R)
    results = Parallel(n_jobs=threads)(delayed(_tensor_terms)(R, restarts, seed) for R in unique.values())
    lookup = dict(zip(unique.keys(), results))
    return [lookup[key] for key in keys]


@dataclass
class SurgeryAudit:
    neck: str
    n: int
    sigma0: float
    theta: float
    passed: bool
    rows: list
    details: dict = field(default_factory=dict)

    def to_frame(self):
        return pd.DataFrame(self.rows)

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)

    def failing_z(self):
        return [row["z"] for row in self.rows if not row["post_member"]]

    def gain_band_holds(self, c=GAIN_BAND, z_max=GAIN_BAND_MAX_Z):
        """c(z) <= c wherever 0 < z <= z_max and the bound does not underflow"""
        values = [row["c"] for row in self.rows if 0.0 < row["z"] <= z_max and not np.isnan(row["c"])]
        return bool(values) and max(values) <= c

    def to_dict(self):
        frame = self.to_frame()
        worst = frame.loc[frame["post_slack"].idxmin()]
        return {
            "neck": self.neck,
            "n": self.n,
            "sigma0": self.sigma0,
            "theta": self.theta,
            "verdict": "PASS" if self.passed else "FAIL",
            "points": len(self.rows),
            "min_post_slack": float(worst["post_slack"]),
            "argmin_z": float(worst["z"]),
            "failing_points": len(self.failing_z()),
            "gain_band": self.gain_band_holds(),
            "details": self.details,
        }


def pinching_audit(geom, f, theta=None, restarts=AUDIT_RESTARTS, seed=0, threads=1, tol=MEMBERSHIP_TOL):
    """Check that surgery on a pinched neck keeps every grid point pinched.

    Besides the post-surgery membership, each row records the trace gain
    against z^-4 exp(-1/z), the monotone gain tr(H~) - exp(2 phi) tr(H), the
    concavity step f(tr H~) - f(tr H) - (tr H~ - tr H)/(n - 2), both extreme
    eigenvalue gaps and the C(1, theta) slack of the modified tensor.
    """
    theta = f.theta if theta is None else theta
    n = geom.n
    if f.n != n:
        raise PreconditionError(f"pinching function built for n = {f.n}, neck has n = {n}")
    identity = SymmetricForm.identity(n)
    points = []
    for index, z in enumerate(geom.z):
        S, H = neck_decomposition(geom, index)
        R = kn_product(H, identity)
        phi, dphi, hess = conformal_data(geom, index)
        R_tilde = conformal_transform(R, phi, dphi, hess)
        S_tilde, H_tilde = surgery_decompose(R_tilde, S, H, phi, dphi, hess)
        points.append((z, phi, dphi, hess, S, H, R, S_tilde, H_tilde, R_tilde))

    pre_terms = _terms_for([point[6] for point in points], restarts, seed, threads)
    pre_reports = [pinched_membership(point[6], f, theta, terms=terms, tol=tol)
                   for point, terms in zip(points, pre_terms)]
    refused = [float(point[0]) for point, report in zip(points, pre_reports) if not report.member]
    if refused:
        raise PreconditionError(f"{geom.label()} is not pinched before surgery at z = {refused[:5]}")

    post_terms = _terms_for([point[9] for point in points], restarts, seed, threads)
    edge = ConeSpec(1.0, theta)
    rows = []
    for point, pre, terms in zip(points, pre_reports, post_terms):
        z, phi, dphi, hess, S, H, R, S_tilde, H_tilde, R_tilde = point
        post = pinched_membership(R_tilde, f, theta, terms=terms, tol=tol * max(1.0, R_tilde.scale()))
        gain = trace_gain(H, phi, dphi, hess)
        bound = gain_bound(z)
        trace_before, trace_after = H.trace(), H_tilde.trace()
        eig_before, eig_after = H.eigenvalues(), H_tilde.eigenvalues()
        rows.append({
            "z": float(z),
            "phi": phi,
            "pre_slack": pre.slack,
            "post_slack": post.slack,
            "post_member": post.member,
            "unchanged": bool(np.array_equal(R.block, R_tilde.block)),
            "trH_gain": gain,
            "bound": bound,
            "c": 1.0 - gain / bound if bound > 0.0 else float("nan"),
            "monotone_gain": monotone_gain(H, phi, dphi, hess),
            "concavity_gap": float(f(trace_after) - f(trace_before)) - (trace_after - trace_before) / (n - 2),
            "pinch_margin": float(f(trace_after)) - float(eig_after[-1]),
            "trace_margin": trace_after - theta * scalar(S_tilde),
            "top_gap": float(eig_after[-1] - eig_before[-1]),
            "bottom_gap": float(eig_after[0] - eig_before[0]),
            "edge_slack": cone_membership(R_tilde, edge, terms=terms).slack,
        })

    passed = all(row["post_member"] for row in rows)
    audit = SurgeryAudit(neck=geom.label(), n=n, sigma0=f.sigma0, theta=theta, passed=passed, rows=rows,
                         details={"restarts": restarts, "seed": seed, "tol": tol})
    if passed:
        logger.info(f"surgery audit PASS on {geom.label()} over {len(rows)} points")
    else:
        logger.warning(f"surgery audit FAIL on {geom.label()} at z = {audit.failing_z()[:5]}")
    return audit


def _christoffel(metric_fn, x, h):
    """Gamma^l_ij from central differences of the metric"""
    d = len(x)
    g = np.asarray(metric_fn(x), dtype=float)
    dg = np.empty((d, d, d))
    for m in range(d):
        step = np.zeros(d)
        step[m] = h
        dg[m] = (np.asarray(metric_fn(x + step)) - np.asarray(metric_fn(x - step))) / (2.0 * h)
    lowered = 0.5 * (np.einsum("imj->mij", dg) + np.einsum("jmi->mij", dg) - dg)
    return np.einsum("lm,mij->lij", np.linalg.inv(g), lowered)


def finite_difference_curvature(metric_fn, point, h=FD_STEP):
    """R_ijkl = g(R(d_i, d_j) d_l, d_k) in coordinates, so that R_ijij is the sectional curvature"""
    x = np.asarray(point, dtype=float)
    d = len(x)
    gamma = _christoffel(metric_fn, x, h)
    dgamma = np.empty((d, d, d, d))
    for a in range(d):
        step = np.zeros(d)
        step[a] = h
        dgamma[a] = (_christoffel(metric_fn, x + step, h) - _christoffel(metric_fn, x - step, h)) / (2.0 * h)
    upper = (
        np.einsum("iljk->lijk", dgamma)
        - np.einsum("jlik->lijk", dgamma)
        + np.einsum("lim,mjk->lijk", gamma, gamma)
        - np.einsum("ljm,mik->lijk", gamma, gamma)
    )
    g = np.asarray(metric_fn(x), dtype=float)
    return np.einsum("km,mijl->ijkl", g, upper)


def frame_components(full, frame):
    """Components of a 4-tensor on the columns of ``frame``"""
    return np.einsum("ai,bj,ck,dl,abcd->ijkl", frame, frame, frame, frame, full)
