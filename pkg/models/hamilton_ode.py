"""The Hamilton ODE dR/dt = Q(R), its coupled (S, H) form, and the preservation probes.

Along the coupled system S keeps Ric0(S) = 0 and S + H (KN) id evolves by Q.
The probes integrate sampled cone members and boundary points, and the
step functions evaluate the algebraic expressions whose signs decide
preservation of each cone constraint.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from models.cone_membership import ConeSpec, cone_terms, pinched_membership
from models.curvature_algebra import (
    CurvatureTensor,
    SymmetricForm,
    contract_sh,
    kn_product,
    q_quadratic,
    ricci_traceless,
    scalar,
    sphere_tensor,
)
from models.sampling import random_curvature
from utils.errors import (
    BuildError,
    GaugeViolation,
    PreconditionError,
    ReconstructionError,
    StepSizeUnderflow,
)
from utils.integrator import DormandPrince45

logger = logging.getLogger(__name__)

DEFAULT_RTOL = 1e-8
GAUGE_TOL = 1e-8
STEP5_TOL = 1e-9
PROBE_TOL = 1e-5
MAX_STEPS = 20000
PROBE_RESTARTS = 8
DEFAULT_SIGMA_GRID = tuple(np.linspace(0.1, 2.0, 20))
TRANSVERSALITY_STEPS = (1e-4, 1e-5)


def _triu_pack(H):
    rows, cols = np.triu_indices(H.dim)
    return H.entries[rows, cols]


def _triu_unpack(n, values):
    rows, cols = np.triu_indices(n)
    matrix = np.zeros((n, n))
    matrix[rows, cols] = values
    matrix[cols, rows] = values
    return SymmetricForm(matrix)


def gauge_project(S, H):
    """Move Ric0(S) into H without changing S + H (KN) id"""
    n = S.dim
    drift = ricci_traceless(S) / (n - 2)
    return S - kn_product(drift, SymmetricForm.identity(n)), H + drift


@dataclass
class OdeState:
    """Either a full tensor R or a gauge-fixed pair (S, H) with its sigma"""

    R: CurvatureTensor = None
    S: CurvatureTensor = None
    H: SymmetricForm = None
    sigma: float = None
    time: float = 0.0
    normalized: bool = False

    @classmethod
    def full(cls, R, time=0.0, normalized=False):
        return cls(R=R, time=time, normalized=normalized)

    @classmethod
    def coupled(cls, S, H, sigma, time=0.0, normalized=False):
        if S.dim - 2.0 * sigma <= 0.0:
            raise PreconditionError(f"coupled system needs n - 2 sigma > 0 (n = {S.dim}, sigma = {sigma})")
        return cls(S=S, H=H, sigma=sigma, time=time, normalized=normalized)

    @property
    def is_coupled(self):
        return self.R is None

    @property
    def n(self):
        return self.S.dim if self.is_coupled else self.R.dim

    def tensor(self):
        if self.is_coupled:
            return self.S + kn_product(self.H, SymmetricForm.identity(self.n))
        return self.R

    def to_vector(self):
        if self.is_coupled:
            return np.concatenate([self.S.packed(), _triu_pack(self.H)])
        return self.R.packed()

    def with_vector(self, values, time, project=True):
        n = self.n
        if not self.is_coupled:
            return OdeState.full(CurvatureTensor.from_packed(n, values, project=project), time, self.normalized)
        split = len(values) - n * (n + 1) // 2
        S = CurvatureTensor.from_packed(n, values[:split], project=project)
        H = _triu_unpack(n, values[split:])
        if project:
            S, H = gauge_project(S, H)
        return OdeState(S=S, H=H, sigma=self.sigma, time=time, normalized=self.normalized)


@dataclass
class EigenData:
    """Nondecreasing eigenvalues of A = tr(H) id / (n - 2 sigma) - H"""

    a: np.ndarray

    @classmethod
    def from_form(cls, H, sigma):
        n = H.dim
        A = SymmetricForm.identity(n) * (H.trace() / (n - 2.0 * sigma)) - H
        return cls(np.sort(A.eigenvalues()))

    @property
    def n(self):
        return len(self.a)


@dataclass
class TraceRecord:
    times: list = field(default_factory=list)
    scal: list = field(default_factory=list)
    slack: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    rho: list = field(default_factory=list)
    samples: list = field(default_factory=list)
    stop_reason: str = None

    def append(self, t, scal, slack=float("nan"), step=0.0, rho=0.0):
        if self.times and t <= self.times[-1]:
            raise BuildError("times_increasing", f"t = {t} after {self.times[-1]}")
        self.times.append(float(t))
        self.scal.append(float(scal))
        self.slack.append(float(slack))
        self.steps.append(float(step))
        self.rho.append(float(rho))

    def min_slack(self):
        values = [s for s in self.slack if not math.isnan(s)]
        return min(values) if values else None

    def to_frame(self):
        return pd.DataFrame({"t": self.times, "scal": self.scal, "slack": self.slack,
                             "dt": self.steps, "rho": self.rho})

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)


def rhs_full(R):
    return q_quadratic(R)


def _coupled_coefficients(n, sigma):
    if n - 2.0 * sigma <= 0.0:
        raise PreconditionError(f"coupled system needs n - 2 sigma > 0 (n = {n}, sigma = {sigma})")
    return 2.0 / (sigma * (n - 2.0 * sigma)), (2.0 - sigma) / sigma


def rhs_coupled(S, H, sigma, check=False, gauge_tol=GAUGE_TOL):
    """(dS/dt, dH/dt) of the gauge-fixed system; S + H (KN) id then evolves by Q"""
    n = S.dim
    quadratic, weight = _coupled_coefficients(n, sigma)
    drift = ricci_traceless(S)
    error = drift.scale()
    if error > gauge_tol * max(1.0, S.scale()):
        raise GaugeViolation(error, gauge_tol)
    identity = SymmetricForm.identity(n)
    t = H.trace()
    h = H.norm2()
    scal_s = scalar(S)
    H2 = H.square()
    dS = (
        q_quadratic(S)
        + kn_product(H, H) * (n - 2)
        - kn_product(H, identity) * (2.0 * t)
        + kn_product(H2, identity) * 2.0
        + sphere_tensor(n) * (quadratic * t * t - weight * h)
    )
    dH = (
        contract_sh(S, H) * 2.0
        + H * (2.0 * scal_s / n + 4.0 * t)
        - H2 * 4.0
        + identity * (-quadratic * t * t + (2.0 / sigma) * h)
    )
    if check:
        residual = step5_residual(S, H, sigma, derivatives=(dS, dH))
        logger.debug(f"Step 5 residual {residual:.3e}")
        if residual > STEP5_TOL:
            raise ReconstructionError(residual, STEP5_TOL)
    return dS, dH


def step5_residual(S, H, sigma, derivatives=None):
    """Relative mismatch between dS + dH (KN) id and Q(S + H (KN) id)"""
    dS, dH = derivatives if derivatives is not None else rhs_coupled(S, H, sigma)
    identity = SymmetricForm.identity(S.dim)
    expected = q_quadratic(S + kn_product(H, identity))
    return (dS + kn_product(dH, identity)).max_error(expected)


def _normalizing_rate(R, dR):
    scal_r = scalar(R)
    return -scalar(dR) / scal_r if scal_r != 0.0 else 0.0


def _vector_field(template, normalize):
    n = template.n
    identity = SymmetricForm.identity(n)

    def fun(t, y):
        state = template.with_vector(y, t, project=False)
        if not state.is_coupled:
            dR = rhs_full(state.R)
            if normalize:
                dR = dR + state.R * _normalizing_rate(state.R, dR)
            return dR.packed()
        dS, dH = rhs_coupled(state.S, state.H, state.sigma)
        if normalize:
            rho = _normalizing_rate(state.tensor(), dS + kn_product(dH, identity))
            dS, dH = dS + state.S * rho, dH + state.H * rho
        return np.concatenate([dS.packed(), _triu_pack(dH)])

    return fun


def integrate(state, t_end=None, scal_factor=None, slack_event=None, rtol=DEFAULT_RTOL, t_eval=None,
              project=True, normalize=None, monitor=None, monitor_every=1, event_tol=0.0,
              max_steps=MAX_STEPS, h_min=1e-14, h0=None):
    """Adaptive Dormand-Prince integration of the full or coupled system.

    Stops at ``t_end``, once scal has grown by ``scal_factor``, or as soon as
    ``slack_event(R)`` drops below ``-event_tol``. ``monitor(R)`` fills the
    slack column every ``monitor_every`` accepted steps. States at the times
    in ``t_eval`` are stored in ``record.samples``.
    """
    if t_end is None and scal_factor is None and slack_event is None:
        raise PreconditionError("integrate needs t_end, scal_factor or slack_event")
    normalize = state.normalized if normalize is None else normalize
    probe = monitor or slack_event
    solver = DormandPrince45(rtol=rtol)
    fun = _vector_field(state, normalize)
    record = TraceRecord()

    R = state.tensor()
    scal0 = scalar(R)
    if scal_factor is not None and scal0 <= 0.0:
        raise PreconditionError(f"scal_factor stop needs positive initial scal, got {scal0:.3e}")
    t = state.time
    pending = sorted(float(s) for s in (t_eval or []) if s >= t)
    first = probe(R) if probe is not None else float("nan")
    record.append(t, scal0, first)
    if pending and pending[0] == t:
        record.samples.append((t, state))
        pending.pop(0)
    if slack_event is not None and (first if monitor is None else slack_event(R)) < -event_tol:
        record.stop_reason = "slack_event"
        return record, state

    y = state.to_vector()
    k = fun(t, y)
    h = h0 if h0 is not None else solver.initial_step(fun, t, y, k)
    steps = 0
    while steps < max_steps:
        if t_end is not None:
            h = min(h, t_end - t)
        if pending:
            h = min(h, pending[0] - t)
        y_new, error, k_new = solver.step(fun, t, y, h, k)
        err = solver.error_norm(error, y, y_new) if np.all(np.isfinite(y_new)) else float("inf")
        if err > 1.0:
            h *= solver.factor(err) if math.isfinite(err) else solver.min_factor
            if h < h_min * max(1.0, abs(t)):
                raise StepSizeUnderflow(t, h, trace=record, state=state)
            logger.debug(f"step rejected at t = {t:.6e}, error {err:.3e}")
            continue

        steps += 1
        t_new = t + h
        if t_end is not None and abs(t_end - t_new) <= 1e-14 * max(1.0, abs(t_end)):
            t_new = t_end
        if pending and abs(pending[0] - t_new) <= 1e-14 * max(1.0, abs(pending[0])):
            t_new = pending[0]
        state = state.with_vector(y_new, t_new, project=project)
        y = state.to_vector() if project else y_new
        k = fun(t_new, y) if project else k_new

        R = state.tensor()
        scal_r = scalar(R)
        slack = probe(R) if probe is not None and (steps % monitor_every == 0) else float("nan")
        rho = _normalizing_rate(R, rhs_full(R)) if normalize else 0.0
        record.append(t_new, scal_r, slack, h, rho)
        t = t_new
        if pending and t == pending[0]:
            record.samples.append((t, state))
            pending.pop(0)
        h *= solver.factor(err)

        if slack_event is not None:
            value = slack if monitor is None and not math.isnan(slack) else slack_event(R)
            if value < -event_tol:
                record.stop_reason = "slack_event"
                break
        if scal_factor is not None and scal_r >= scal_factor * scal0:
            record.stop_reason = "scal_factor"
            break
        if t_end is not None and t >= t_end:
            record.stop_reason = "t_end"
            break
    else:
        record.stop_reason = "max_steps"
        logger.warning(f"integration stopped after {max_steps} steps at t = {t:.6e}")

    if probe is not None and math.isnan(record.slack[-1]):
        record.slack[-1] = float(probe(R))
    return record, state


def sphere_closed_form(r0, n, t):
    """r(t) for R = r id (KN) id with r' = (4n - 4) r^2"""
    return r0 / (1.0 - (4.0 * n - 4.0) * r0 * t)


def sphere_blowup_time(r0, n):
    return 1.0 / ((4.0 * n - 4.0) * r0)


def cylinder_tensor(n):
    P = SymmetricForm.diag([0.0] + [1.0] * (n - 1))
    return kn_product(P, P)


def cylinder_closed_form(c0, n, t):
    """c(t) for R = c * cylinder with c' = (4n - 8) c^2"""
    return c0 / (1.0 - (4.0 * n - 8.0) * c0 * t)


def cylinder_line_deviation(R):
    """(c, deviation) of R from the nearest multiple c of the cylinder tensor"""
    model = cylinder_tensor(R.dim)
    c = float(np.sum(R.block * model.block) / np.sum(model.block * model.block))
    deviation = float(np.max(np.abs(R.block - c * model.block))) / max(1.0, R.scale())
    return c, deviation


@dataclass
class ProbeReport:
    name: str
    cone: str
    n: int
    seed: int
    passed: bool
    min_slack: float
    samples: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "probe": self.name,
            "cone": self.cone,
            "n": self.n,
            "seed": self.seed,
            "verdict": "PASS" if self.passed else "FAIL",
            "min_slack": self.min_slack,
            "samples": self.samples,
            "details": self.details,
        }


def sample_seeds(seed, samples):
    """Independent per-sample seeds; identical for any thread count"""
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(samples)]


def _slack_monitor(target, restarts, seed):
    """Normalized slack of R in a cone or pinched set, warm-started along the trajectory"""
    memory = {"witness": None}

    def slack(R):
        terms = cone_terms(R, restarts=restarts, seed=seed, warm_start=memory["witness"])
        memory["witness"] = terms.witness
        if isinstance(target, ConeSpec):
            value = terms.slack(target)[0]
        else:
            value = pinched_membership(R, target, terms=terms).slack
        return value / max(R.scale(), 1e-300)

    return slack


def _invariance_sample(target, n, index, seed, horizon, restarts, rtol, monitor_every):
    if isinstance(target, ConeSpec):
        kind = "cone_member" if index % 2 == 0 else "cone_boundary"
        R = random_curvature(n, seed=seed, kind=kind, sigma=target.sigma, theta=target.theta, restarts=restarts)
    else:
        kind = "pinched_member"
        R = target.sample_member(seed=seed, restarts=restarts)
    monitor = _slack_monitor(target, restarts, seed)
    row = {"index": index, "seed": seed, "kind": kind}
    try:
        record, _ = integrate(OdeState.full(R), scal_factor=horizon, rtol=rtol, monitor=monitor,
                              monitor_every=monitor_every)
        row["error"] = None
    except StepSizeUnderflow as e:
        record = e.trace
        row["error"] = str(e)
    row.update({
        "initial_slack": record.slack[0],
        "min_slack": record.min_slack(),
        "scal_ratio": record.scal[-1] / record.scal[0],
        "steps": len(record.times) - 1,
        "t_final": record.times[-1],
    })
    return row


def invariance_probe(target, n, samples=50, seed=0, horizon=100.0, restarts=PROBE_RESTARTS, rtol=DEFAULT_RTOL,
                     threads=1, monitor_every=4, tol=PROBE_TOL):
    """Integrate sampled members of a cone (or pinched set) and track the minimum normalized slack"""
    if isinstance(target, ConeSpec):
        target.check_dim(n)
        label = target.label()
    else:
        if target.n != n:
            raise PreconditionError(f"pinching function built for n = {target.n}, probe asks for n = {n}")
        label = f"pinched(sigma0={target.sigma0:g}, theta={target.theta:g})"
    seeds = sample_seeds(seed, samples)
    rows = Parallel(n_jobs=threads)(
        delayed(_invariance_sample)(target, n, index, s, horizon, restarts, rtol, monitor_every)
        for index, s in enumerate(seeds)
    )
    for row in rows:
        row["passed"] = row["min_slack"] is not None and row["min_slack"] >= -tol
        logger.info(f"sample {row['index']}: min slack {row['min_slack']:.3e} over {row['steps']} steps")
    min_slack = min(row["min_slack"] for row in rows)
    passed = all(row["passed"] for row in rows)
    if not passed:
        failed = [row["index"] for row in rows if not row["passed"]]
        logger.warning(f"invariance probe for {label} FAIL on samples {failed}")
    return ProbeReport(name="invariance", cone=label, n=n, seed=seed, passed=passed, min_slack=min_slack,
                       samples=rows, details={"horizon": horizon, "tol": tol, "rtol": rtol})


def flow_direction(R):
    """Q(R) + rho R with rho keeping scal fixed, rescaled to the size of R"""
    Q = rhs_full(R)
    V = Q + R * _normalizing_rate(R, Q)
    size = V.scale()
    return V * (R.scale() / size) if size > 0.0 else V


def _transversality_sample(spec, n, index, seed, steps, restarts):
    active = "eigen" if index % 2 == 0 else "trace"
    R = random_curvature(n, seed=seed, kind="cone_boundary", sigma=spec.sigma, theta=spec.theta,
                         active=active, restarts=restarts)
    base = cone_terms(R, restarts=restarts, seed=seed)
    V = flow_direction(R)
    derivatives = []
    for h in steps:
        plus = cone_terms(R + V * h, restarts=restarts, seed=seed, warm_start=base.witness).slack(spec)[0]
        minus = cone_terms(R - V * h, restarts=restarts, seed=seed, warm_start=base.witness).slack(spec)[0]
        derivatives.append((plus - minus) / (2.0 * h))
    return {
        "index": index,
        "seed": seed,
        "active": active,
        "base_slack": base.slack(spec)[0],
        "derivatives": derivatives,
        "passed": all(d > 0.0 for d in derivatives),
    }


def transversality_probe(spec, n, samples=20, seed=0, steps=TRANSVERSALITY_STEPS, restarts=PROBE_RESTARTS,
                         threads=1):
    """Directional derivative of the slack along the normalized flow at constructed boundary points"""
    if not (0.0 < spec.sigma < 1.0 or 1.0 < spec.sigma < 2.0):
        raise PreconditionError(f"transversality needs sigma in (0,1) or (1,2), got {spec.sigma}")
    if spec.theta <= 0.0:
        raise PreconditionError("transversality needs theta > 0")
    spec.check_dim(n)
    seeds = sample_seeds(seed, samples)
    rows = Parallel(n_jobs=threads)(
        delayed(_transversality_sample)(spec, n, index, s, steps, restarts) for index, s in enumerate(seeds)
    )
    passed = all(row["passed"] for row in rows)
    smallest = min(min(row["derivatives"]) for row in rows)
    if not passed:
        logger.warning(f"transversality probe for {spec.label()} FAIL: smallest derivative {smallest:.3e}")
    return ProbeReport(name="transversality", cone=spec.label(), n=n, seed=seed, passed=passed,
                       min_slack=smallest, samples=rows, details={"steps": list(steps)})


def _eigen_vector(a):
    values = a.a if isinstance(a, EigenData) else np.asarray(a, dtype=float)
    if np.any(values < -1e-12):
        raise PreconditionError(f"eigenvalues of A must be nonnegative, got min {values.min():.3e}")
    return values


def _pair_terms(a, i, j):
    if i == j:
        raise PreconditionError("step 2 needs i != j")
    return float(a[i]), float(a[j]), float(np.sum(a)), float(np.sum(a * a))


def step2_expression(a, sigma, i, j):
    """(n-2) a_i a_j + a_i^2 + a_j^2 - tr(A)(a_i + a_j) + tr(A)^2 / sigma^2 - (2 - sigma)/sigma |A|^2"""
    values = _eigen_vector(a)
    n = len(values)
    ai, aj, tr, sq = _pair_terms(values, i, j)
    return ((n - 2) * ai * aj + ai * ai + aj * aj - tr * (ai + aj)
            + tr * tr / sigma ** 2 - (2.0 - sigma) / sigma * sq)


def _remainder(ai, aj, tr, sq):
    return (tr - ai - aj) ** 2 - (sq - ai * ai - aj * aj)


def step2_case1(a, sigma, i, j):
    """Sum-of-nonnegatives form of the step 2 expression, valid as such for sigma <= 4/3"""
    values = _eigen_vector(a)
    n = len(values)
    ai, aj, tr, sq = _pair_terms(values, i, j)
    return ((n - 3) * ai * aj + (1.0 - sigma) ** 2 / sigma ** 2 * tr * tr
            + (4.0 - 3.0 * sigma) / (2.0 * sigma) * (tr * tr - sq)
            + 0.5 * _remainder(ai, aj, tr, sq))


def step2_case2(a, sigma, i, j):
    """Sum-of-nonnegatives form of the step 2 expression, valid as such for sigma >= 4/3"""
    values = _eigen_vector(a)
    n = len(values)
    ai, aj, tr, sq = _pair_terms(values, i, j)
    return ((n - 4 + 2.0 * (2.0 - sigma) / sigma) * ai * aj + (2.0 - sigma) ** 2 / (4.0 * sigma ** 2) * tr * tr
            + (3.0 * sigma - 4.0) / sigma * (0.5 * tr - ai - aj) ** 2
            + (2.0 - sigma) / sigma * _remainder(ai, aj, tr, sq))


def step2_tensor(H, sigma):
    """The non-Q part T of dS/dt"""
    n = H.dim
    quadratic, weight = _coupled_coefficients(n, sigma)
    identity = SymmetricForm.identity(n)
    t = H.trace()
    return (kn_product(H, H) * (n - 2) - kn_product(H, identity) * (2.0 * t)
            + kn_product(H.square(), identity) * 2.0
            + sphere_tensor(n) * (quadratic * t * t - weight * H.norm2()))


def step4_direct(H, scal_s, theta, sigma):
    """d/dt tr(H) - theta d/dt scal(S) from the evolution of each, valid off the boundary"""
    n = H.dim
    quadratic, weight = _coupled_coefficients(n, sigma)
    t = H.trace()
    h = H.norm2()
    d_scal = (2.0 / n * scal_s ** 2 - 2.0 * n * (t * t - h)
              + 2.0 * n * (n - 1) * quadratic * t * t - 2.0 * n * (n - 1) * weight * h)
    d_trace = (4.0 / n * scal_s * t + 4.0 * (t * t - h)
               - n * quadratic * t * t + 2.0 * n / sigma * h)
    return d_trace - theta * d_scal


def _step4_value(t, h, theta, sigma, n):
    return (2.0 / (n * theta) * t * t + (4.0 + 2.0 * n * theta) * (t * t - h)
            + (2.0 + 2.0 * (n - 1) * (2.0 - sigma) * theta) / sigma * (n * h - t * t)
            - (4.0 + 2.0 * (n - 1) * (n + 4.0 - 2.0 * sigma) * theta) / (n - 2.0 * sigma) * t * t)


def step4_derivative(H, scal_s, theta, sigma, tol=1e-10):
    """d/dt (tr(H) - theta scal(S)) on the boundary tr(H) = theta scal(S)"""
    n = H.dim
    if theta <= 0.0:
        raise PreconditionError("step 4 needs theta > 0")
    _coupled_coefficients(n, sigma)
    t = H.trace()
    if abs(t - theta * scal_s) > tol * max(1.0, abs(t)):
        raise PreconditionError(f"off the boundary: tr(H) - theta scal(S) = {t - theta * scal_s:.3e}")
    return _step4_value(t, H.norm2(), theta, sigma, n)


def _h_extremes(n, sigma):
    """Range of |H|^2 over tr(H) = 1, H <= id / (n - 2 sigma)"""
    u = 1.0 / (n - 2.0 * sigma)
    return 1.0 / n, (n - 1) * u * u + (1.0 - (n - 1) * u) ** 2


def _sigma_grid(n, sigma_grid):
    grid = [float(s) for s in (DEFAULT_SIGMA_GRID if sigma_grid is None else sigma_grid)]
    grid = [s for s in grid if 0.0 < s <= 2.0 and n - 2.0 * s > 0.0]
    if not grid:
        raise PreconditionError(f"no admissible sigma in the grid for n = {n}")
    return grid


def _step4_holds(theta, n, grid):
    for sigma in grid:
        for h in _h_extremes(n, sigma):
            if _step4_value(1.0, h, theta, sigma, n) < 0.0:
                return False
    return True


def theta_bar_estimate(n, sigma_grid=None, tol=1e-13, max_doublings=80):
    """Largest theta keeping the step 4 derivative nonnegative over the grid; scan then bisect"""
    if n < 5:
        raise PreconditionError(f"theta bar needs n >= 5, got {n}")
    grid = _sigma_grid(n, sigma_grid)
    lo = 1e-8
    if not _step4_holds(lo, n, grid):
        raise PreconditionError(f"step 4 fails already at theta = {lo:g}")
    hi = lo
    for _ in range(max_doublings):
        hi *= 2.0
        if not _step4_holds(hi, n, grid):
            break
        lo = hi
    else:
        raise PreconditionError("no violation found while scanning theta")
    while hi - lo > tol * hi:
        mid = 0.5 * (lo + hi)
        if _step4_holds(mid, n, grid):
            lo = mid
        else:
            hi = mid
    return lo


def analytic_theta_bar(n, sigma_grid=None):
    """Smallest positive root of theta * step4 = B theta^2 + A theta + 2/n over the grid extremes"""
    grid = _sigma_grid(n, sigma_grid)
    best = math.inf
    for sigma in grid:
        for h in _h_extremes(n, sigma):
            A = 4.0 * (1.0 - h) + 2.0 * (n * h - 1.0) / sigma - 4.0 / (n - 2.0 * sigma)
            B = (2.0 * n * (1.0 - h) + 2.0 * (n - 1) * (2.0 - sigma) * (n * h - 1.0) / sigma
                 - 2.0 * (n - 1) * (n + 4.0 - 2.0 * sigma) / (n - 2.0 * sigma))
            roots = np.roots([B, A, 2.0 / n]) if B != 0.0 else np.array([-2.0 / (n * A)])
            positive = [r.real for r in roots if abs(r.imag) < 1e-14 and r.real > 0.0]
            if positive:
                best = min(best, min(positive))
    return best


def _feasible_eigenvalues(rng, n, sigma):
    """Random point of {sum = 1, each <= 1/(n - 2 sigma)} as a mix of its vertices"""
    u = 1.0 / (n - 2.0 * sigma)
    weights = rng.dirichlet(np.ones(n))
    return np.full(n, u) - weights * (n * u - 1.0)


def validate_step4(theta, n, sigma_grid=None, samples=1000, seed=0):
    """Randomized search for negative step 4 derivatives on the boundary, extremes included"""
    grid = _sigma_grid(n, sigma_grid)
    rng = np.random.default_rng(seed)
    worst = (math.inf, None, None)
    violations = 0
    checked = 0

    def visit(values, sigma):
        nonlocal worst, violations, checked
        H = SymmetricForm.diag(values)
        value = step4_derivative(H, H.trace() / theta, theta, sigma)
        checked += 1
        if value < -1e-9:
            violations += 1
        if value < worst[0]:
            worst = (value, sigma, values.tolist())

    for sigma in grid:
        u = 1.0 / (n - 2.0 * sigma)
        visit(np.full(n, 1.0 / n), sigma)
        visit(np.array([u] * (n - 1) + [1.0 - (n - 1) * u]), sigma)
    for _ in range(samples):
        sigma = grid[int(rng.integers(len(grid)))]
        visit(_feasible_eigenvalues(rng, n, sigma), sigma)
    return {"theta": theta, "n": n, "checked": checked, "violations": violations,
            "min_value": worst[0], "argmin_sigma": worst[1], "argmin_eigenvalues": worst[2]}


@dataclass
class Step3Check:
    relative_error: float
    boundary_gap: float
    boundary_derivative: float
    s_term: float


def step3_display(S, H, sigma):
    """d/dt (tr(H) id - (n - 2 sigma) H) as written in terms of S and H"""
    n = S.dim
    identity = SymmetricForm.identity(n)
    t = H.trace()
    X = identity * t - H * (n - 2.0 * sigma)
    return (contract_sh(S, X) * 2.0 + X * (2.0 / n * scalar(S) + 4.0 * t)
            + H.square() * (4.0 * (n - 2.0 * sigma)) - identity * (4.0 / (n - 2.0 * sigma) * t * t))


def step3_consistency(S, H, sigma, delta=1e-6):
    """Compare the step 3 display with a finite difference along rhs_coupled and probe the null direction"""
    n = S.dim
    identity = SymmetricForm.identity(n)
    _, dH = rhs_coupled(S, H, sigma)

    def constraint(form):
        return identity * form.trace() - form * (n - 2.0 * sigma)

    finite = (constraint(H + dH * delta) - constraint(H)) / delta
    display = step3_display(S, H, sigma)
    error = float(np.max(np.abs(finite.entries - display.entries))) / max(1.0, display.scale())
    X = constraint(H)
    values, vectors = X.eigh()
    u = vectors[:, 0]
    s_term = 2.0 * contract_sh(S, X).quadratic(u)
    return Step3Check(relative_error=error, boundary_gap=float(values[0]),
                      boundary_derivative=display.quadratic(u), s_term=s_term)
