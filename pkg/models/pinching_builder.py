"""The pinching function f and the shifted-cone family it is built from."""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from models.cone_membership import ConeSpec, ConeTerms, cone_terms, pinched_membership, pinched_terms
from models.curvature_algebra import q_quadratic, scalar, sphere_tensor
from models.hamilton_ode import (
    DEFAULT_RTOL,
    PROBE_RESTARTS,
    PROBE_TOL,
    OdeState,
    ProbeReport,
    integrate,
    invariance_probe,
    sample_seeds,
)
from models.sampling import random_curvature
from utils.errors import BuildError, PreconditionError

logger = logging.getLogger(__name__)

DEFAULT_DEPTH = 20
CONCAVITY_TOL = 1e-9
ASYMPTOTE_TOL = 0.01
SCAL_LADDER = tuple(10.0 ** k for k in range(0, 7))
MEMBER_HALVINGS = 80


def default_sigmas(sigma0, depth=DEFAULT_DEPTH):
    """sigma_j = 1 + (sigma0 - 1) 2^-j"""
    return [1.0 + (sigma0 - 1.0) * 2.0 ** (-j) for j in range(1, depth + 1)]


@dataclass
class PinchingFunction:
    n: int
    sigma0: float
    theta: float
    sigmas: list
    validation: dict = field(default_factory=dict)

    @property
    def sequence(self):
        """(sigma_j, shift 2^(j-1)) for j = 1..J"""
        return [(sigma, 2.0 ** (j - 1)) for j, sigma in enumerate(self.sigmas, start=1)]

    def _lines(self):
        """(slope, intercept) of every branch, branch 0 first"""
        n = self.n
        lines = [(1.0 / (n - 2.0 * self.sigma0), 0.0)]
        for j, sigma in enumerate(self.sigmas, start=1):
            lines.append((1.0 / (n - 2.0 * sigma), 2.0 ** j * sigma / (n - 2.0 * sigma)))
        return lines

    def evaluate(self, s):
        values = np.asarray(s, dtype=float)
        if np.any(values < 0.0):
            raise PreconditionError("f is defined for s >= 0 only")
        result = np.full(values.shape, np.inf)
        for slope, intercept in self._lines():
            result = np.minimum(result, slope * values + intercept)
        return float(result) if result.ndim == 0 else result

    __call__ = evaluate

    def small_s_threshold(self):
        """Largest s with f(s) = s / (n - 2 sigma0)"""
        n = self.n
        crossings = [2.0 ** (j - 1) * sigma * (n - 2.0 * self.sigma0) / (self.sigma0 - sigma)
                     for j, sigma in enumerate(self.sigmas, start=1)]
        return min(crossings) if crossings else math.inf

    def breakpoints(self):
        """Corners of the lower envelope as (s, f(s), left branch, right branch)"""
        hull = []
        for index, (slope, intercept) in enumerate(self._lines()):
            while hull:
                top_index, top_slope, top_intercept, start = hull[-1]
                s = (intercept - top_intercept) / (top_slope - slope)
                if s <= start:
                    hull.pop()
                    continue
                hull.append((index, slope, intercept, s))
                break
            else:
                hull.append((index, slope, intercept, 0.0))
        corners = []
        for (left, slope, intercept, _), (right, _, _, s) in zip(hull, hull[1:]):
            corners.append((s, slope * s + intercept, left, right))
        return corners

    def measure(self):
        """Concavity, small-s linearity and the asymptotic slope as {"passed", "value"} entries.

        The second item holds the points they were measured at.
        """
        n = self.n
        corners = self.breakpoints()
        last = corners[-1][0] if corners else 1.0
        far = max(1e6, last * 1e3)
        grid = np.concatenate([[0.0], np.geomspace(1e-6, far, 4000)])
        values = self.evaluate(grid)
        slopes = np.diff(values) / np.diff(grid)
        concavity = float(np.max(np.diff(slopes))) if len(slopes) > 1 else 0.0
        slope_scale = max(1.0, float(np.max(np.abs(slopes))))

        threshold = self.small_s_threshold()
        linear_grid = np.linspace(0.0, min(threshold, far), 200)
        linear_error = float(np.max(np.abs(self.evaluate(linear_grid) - linear_grid / (n - 2.0 * self.sigma0))))

        asymptote = abs(self.evaluate(far) / far - 1.0 / (n - 2))
        checks = {
            "concavity": {"passed": concavity <= CONCAVITY_TOL * slope_scale, "value": max(concavity, 0.0)},
            "small_s": {"passed": linear_error <= 1e-12 * max(1.0, float(linear_grid[-1])), "value": linear_error},
            "asymptote": {"passed": asymptote <= ASYMPTOTE_TOL, "value": asymptote},
        }
        return checks, {"small_s_threshold": threshold, "asymptote_point": far}

    def validate(self):
        """Raise BuildError naming the first invariant that fails; otherwise record the measurements"""
        checks, points = self.measure()
        messages = {
            "concavity": "slope increases by {:.3e}",
            "small_s": "f differs from s/(n - 2 sigma0) by {:.3e}",
            "asymptote": "|f(S)/S - 1/(n-2)| = {:.3e} at S = " + f"{points['asymptote_point']:.3e}",
        }
        for name, entry in checks.items():
            if not entry["passed"]:
                raise BuildError(name, messages[name].format(entry["value"]))
        self.validation = {
            "concavity_error": checks["concavity"]["value"],
            "small_s_threshold": points["small_s_threshold"],
            "small_s_error": checks["small_s"]["value"],
            "asymptote_point": points["asymptote_point"],
            "asymptote_error": checks["asymptote"]["value"],
        }
        return self.validation

    def truncated(self, depth):
        return PinchingFunction(self.n, self.sigma0, self.theta, list(self.sigmas[:depth]))

    def to_dict(self):
        return {
            "n": self.n,
            "sigma0": self.sigma0,
            "theta": self.theta,
            "sequence": [{"sigma": sigma, "shift": shift} for sigma, shift in self.sequence],
            "breakpoints": [{"s": s, "f": value, "left": left, "right": right}
                            for s, value, left, right in self.breakpoints()],
            "validation": self.validation,
        }

    @classmethod
    def from_dict(cls, data):
        sigmas = [float(item["sigma"]) for item in data["sequence"]]
        return build(float(data["sigma0"]), float(data["theta"]), int(data["n"]), sigmas)

    def sample_member(self, seed=0, restarts=PROBE_RESTARTS):
        """A cone member of C(sigma0, theta) scaled down until it is pinched"""
        rng = np.random.default_rng(seed)
        R = random_curvature(self.n, seed=seed, kind="cone_member", sigma=self.sigma0, theta=self.theta,
                             restarts=restarts)
        R = R * (10.0 ** rng.uniform(0.0, 3.0) / max(scalar(R), 1e-300))
        terms = cone_terms(R, restarts=restarts, seed=seed)
        factor = 1.0
        for _ in range(MEMBER_HALVINGS):
            scaled = ConeTerms(terms.n, terms.pic2 * factor, terms.scal * factor, terms.ricci_top * factor,
                               terms.witness, terms.evaluations)
            if min(row[3] for row in pinched_terms(scaled, self)) >= 0.0:
                return R * factor
            factor *= 0.5
        raise PreconditionError("no pinched rescaling of the sampled cone member")


def build(sigma0, theta, n, sigmas=None, depth=DEFAULT_DEPTH):
    """Pinching function for sigma0 and theta; the default sequence is 1 + (sigma0 - 1) 2^-j"""
    if not 1.0 < sigma0 < 2.0:
        raise PreconditionError(f"sigma0 must lie in (1, 2), got {sigma0}")
    if theta <= 0.0:
        raise PreconditionError(f"theta must be positive, got {theta}")
    ConeSpec(sigma0, theta).check_dim(n)
    sigmas = default_sigmas(sigma0, depth) if sigmas is None else [float(s) for s in sigmas]
    previous = sigma0
    for sigma in sigmas:
        if not 1.0 < sigma < previous:
            raise PreconditionError(f"sigma sequence must decrease strictly inside (1, sigma0): {sigma}")
        previous = sigma
    f = PinchingFunction(n=n, sigma0=sigma0, theta=theta, sigmas=sigmas)
    f.validate()
    logger.info(f"built f with {len(sigmas)} terms, small-s threshold {f.small_s_threshold():.6g}")
    return f


@dataclass
class EpsilonEvidence:
    epsilon: float
    n_hat: float
    certified: bool
    ladder: list = field(default_factory=list)
    inclusion: list = field(default_factory=list)
    bracket_violation: bool = None
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return dict(self.__dict__)


def _tangent_derivative(X, h, spec, restarts, seed, steps=(1e-4, 1e-5)):
    """Central differences of the slack of X along Q(X - 2h id (KN) id)"""
    V = q_quadratic(X - sphere_tensor(X.dim) * (2.0 * h))
    V = V * (X.scale() / max(V.scale(), 1e-300))
    base = cone_terms(X, restarts=restarts, seed=seed)
    values = []
    for step in steps:
        plus = cone_terms(X + V * step, restarts=restarts, seed=seed, warm_start=base.witness).slack(spec)[0]
        minus = cone_terms(X - V * step, restarts=restarts, seed=seed, warm_start=base.witness).slack(spec)[0]
        values.append((plus - minus) / (2.0 * step))
    return values


def _max_epsilon(terms, sigma, theta, h, cap, iterations=60):
    """Largest eps <= cap keeping X + h id (KN) id in C(sigma - eps, theta)"""
    def slack(eps):
        return terms.slack(ConeSpec(sigma - eps, theta), shift=h)[0]

    if slack(cap) >= 0.0:
        return cap
    lo, hi = 0.0, cap
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if slack(mid) >= 0.0:
            lo = mid
        else:
            hi = mid
    return lo


def epsilon_search(alpha, beta, theta, h, n, samples=100, seed=0, sigma_points=5, boundary_samples=4,
                   ladder=SCAL_LADDER, restarts=PROBE_RESTARTS):
    """Sampled estimate of the shift eps for which the next shifted cone stays invariant.

    First a scal threshold N is located above which Q(X - 2h id (KN) id) points
    into every sampled boundary point X of C(sigma, theta); then eps is the
    largest value keeping X + h id (KN) id in C(sigma - eps, theta) for sampled
    members X with scal(X - h id (KN) id) <= N h.
    """
    if not 1.0 < alpha <= beta < 2.0:
        raise PreconditionError(f"need 1 < alpha <= beta < 2, got [{alpha}, {beta}]")
    if theta <= 0.0:
        raise PreconditionError("epsilon search needs theta > 0")
    if h <= 0.0:
        raise PreconditionError(f"h must be positive, got {h}")
    grid = list(np.linspace(alpha, beta, sigma_points)) if beta > alpha else [alpha]
    for sigma in grid:
        ConeSpec(sigma, theta).check_dim(n)
    seeds = iter(sample_seeds(seed, len(grid) * boundary_samples + samples))
    sphere = sphere_tensor(n)

    boundary = []
    for sigma in grid:
        for index in range(boundary_samples):
            active = "eigen" if index % 2 == 0 else "trace"
            s = next(seeds)
            X = random_curvature(n, seed=s, kind="cone_boundary", sigma=sigma, theta=theta, active=active,
                                 restarts=restarts)
            boundary.append((sigma, s, X / scalar(X)))

    rows = []
    n_hat = None
    for level in sorted(ladder, reverse=True):
        worst = math.inf
        for sigma, s, X in boundary:
            derivatives = _tangent_derivative(X * (level * h), h, ConeSpec(sigma, theta), restarts, s)
            worst = min(worst, min(derivatives))
        rows.append({"scal": level * h, "min_derivative": worst, "passed": worst > 0.0})
        if worst <= 0.0:
            break
        n_hat = level
    rows.reverse()
    if n_hat is None:
        logger.warning("no scal level passed the tangent-cone test; eps not certified")
        return EpsilonEvidence(epsilon=0.0, n_hat=math.inf, certified=False, ladder=rows)

    cap = alpha / 2.0
    rng = np.random.default_rng(seed)
    inclusion = []
    for index in range(samples):
        sigma = grid[index % len(grid)]
        s = next(seeds)
        kind = "cone_member" if index % 2 == 0 else "cone_boundary"
        X = random_curvature(n, seed=s, kind=kind, sigma=sigma, theta=theta, restarts=restarts)
        target = rng.uniform(0.0, 1.0) * (2.0 * n * (n - 1) * h + n_hat * h)
        X = X * (target / scalar(X))
        terms = cone_terms(X, restarts=restarts, seed=s)
        eps = _max_epsilon(terms, sigma, theta, h, cap)
        inclusion.append({"index": index, "seed": s, "sigma": sigma, "scal": scalar(X - sphere * h),
                          "epsilon": eps, "terms": terms})

    best = min(inclusion, key=lambda row: row["epsilon"])
    epsilon = best["epsilon"]
    bracket = None
    if 0.0 < epsilon < cap:
        wider = min(2.0 * epsilon, best["sigma"] - 1e-9)
        bracket = best["terms"].slack(ConeSpec(best["sigma"] - wider, theta), shift=h)[0] < 0.0
    for row in inclusion:
        del row["terms"]
    certified = epsilon > 0.0
    if not certified:
        logger.warning(f"eps search on [{alpha}, {beta}] found no positive eps with {samples} samples")
    return EpsilonEvidence(epsilon=epsilon, n_hat=n_hat * h, certified=certified, ladder=rows,
                           inclusion=inclusion, bracket_violation=bracket,
                           details={"alpha": alpha, "beta": beta, "theta": theta, "h": h, "n": n, "cap": cap})


def search_sequence(sigma0, theta, n, depth=4, samples=50, seed=0, restarts=PROBE_RESTARTS, **options):
    """sigma_j from successive eps searches, each step at most halving the distance to 1"""
    sigmas = []
    previous = sigma0
    evidence = []
    for j, child in enumerate(np.random.SeedSequence(seed).spawn(depth), start=1):
        alpha = 1.0 + 0.5 * (previous - 1.0)
        result = epsilon_search(alpha, previous, theta, 2.0 ** (j - 2), n, samples=samples,
                                seed=int(child.generate_state(1)[0]), restarts=restarts, **options)
        evidence.append(result)
        if not result.certified:
            logger.warning(f"sequence search stopped at j = {j}")
            break
        previous = previous - min(result.epsilon, 0.5 * (previous - 1.0))
        sigmas.append(previous)
    return sigmas, evidence


def pinched_set_invariance(f, samples=30, seed=0, horizon=100.0, restarts=PROBE_RESTARTS, rtol=DEFAULT_RTOL,
                           threads=1, monitor_every=4, tol=PROBE_TOL):
    """invariance_probe against the pinched set of f"""
    return invariance_probe(f, f.n, samples=samples, seed=seed, horizon=horizon, restarts=restarts, rtol=rtol,
                            threads=threads, monitor_every=monitor_every, tol=tol)


def pinched_trajectory(f, R, horizon=100.0, restarts=PROBE_RESTARTS, seed=0, rtol=DEFAULT_RTOL, monitor_every=1,
                       tol=PROBE_TOL):
    """Follow one given initial tensor; refused when it starts outside the pinched set"""
    start = pinched_membership(R, f, restarts=restarts, seed=seed)
    if not start.member:
        raise PreconditionError(f"initial tensor is not pinched (slack {start.slack:.3e})")
    memory = {"witness": start.witness}

    def monitor(T):
        terms = cone_terms(T, restarts=restarts, seed=seed, warm_start=memory["witness"])
        memory["witness"] = terms.witness
        return pinched_membership(T, f, terms=terms).slack / max(T.scale(), 1e-300)

    record, _ = integrate(OdeState.full(R), scal_factor=horizon, rtol=rtol, monitor=monitor,
                          monitor_every=monitor_every)
    min_slack = record.min_slack()
    return ProbeReport(name="pinched_trajectory", cone=f"pinched(sigma0={f.sigma0:g}, theta={f.theta:g})",
                       n=f.n, seed=seed, passed=min_slack >= -tol, min_slack=min_slack,
                       samples=[{"initial_slack": record.slack[0], "min_slack": min_slack,
                                 "steps": len(record.times) - 1}],
                       details={"horizon": horizon})
