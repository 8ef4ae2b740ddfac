"""Command-line front end of the curvature cone lab.

Every subcommand builds a RunConfig (defaults, then --config TOML, then flags),
runs one verification and prints a versioned JSON report. Exit codes: 0 when
every check passes, 2 when a check fails, 3 on precondition or config errors.
"""
import argparse
import logging
import sys
from dataclasses import dataclass, field

import numpy as np

from database.models import get_db_manager
from models.cone_membership import ConeSpec, cone_membership, decompose, oracle_check
from models.curvature_algebra import (
    SymmetricForm,
    b_product,
    bianchi_project,
    contract_sh,
    kn_product,
    q_quadratic,
    ricci,
    scalar,
    sphere_tensor,
    weyl_part,
)
from models.hamilton_ode import (
    DEFAULT_SIGMA_GRID,
    OdeState,
    analytic_theta_bar,
    cylinder_closed_form,
    cylinder_line_deviation,
    integrate,
    invariance_probe,
    sphere_closed_form,
    step2_case1,
    step2_case2,
    step2_expression,
    step5_residual,
    theta_bar_estimate,
    transversality_probe,
    validate_step4,
)
from models.model_catalog import (
    MODEL_TAGS,
    ModelKind,
    boundary_audit,
    hull_evidence,
    load_catalog,
    model_tensor,
    rigidity_check,
)
from models.pinching_builder import build, epsilon_search, pinched_set_invariance
from models.sampling import TENSOR_CLASSES, CurvatureSampler, random_symmetric
from models.surgery_neck import NECK_PROFILES, GRID_POINTS, REFINE_POINTS, NeckGeometry, pinching_audit
from utils.data_processor import ReportProcessor
from utils.errors import LabError
from utils.run_config import RunConfig

logger = logging.getLogger("lab")

EXIT_PASS = 0
EXIT_FAIL = 2
EXIT_ERROR = 3
# relative error allowed against a closed form, in units of rtol
CLOSED_FORM_FACTOR = 10.0
# closed-form runs integrate this much tighter than the rtol they are judged by
CLOSED_FORM_TIGHTENING = 10.0
CLOSED_FORM_TAGS = ("sphere", "cylinder")
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
# sampler classes the oracle cross-check draws from; psd_operator also carries the sufficiency check
ORACLE_CLASSES = ("generic", "pic2_interior", "psd_operator")
# relative agreement expected between the weighted and the direct-sum PIC2 minima
PRODUCT_TOL = 1e-6


@dataclass
class Outcome:
    passed: bool
    checks: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    rows: list = None


def _check(passed, value):
    return {"passed": bool(passed), "value": None if value is None else float(value)}


def _model_kind(args, config):
    return ModelKind.parse(args.model, config.n)


def _source_tensor(args, config):
    """Tensor named by --model, --file or a seeded random draw of --kind"""
    if getattr(args, "model", None):
        return model_tensor(_model_kind(args, config)), args.model
    if getattr(args, "file", None):
        return ReportProcessor().read_tensor(args.file), str(args.file)
    kind = getattr(args, "kind", "generic")
    sampler = CurvatureSampler(config.n, seed=config.seed, restarts=min(config.restarts, 16))
    spec = ConeSpec(config.sigma, config.resolved_theta()) if kind.startswith("cone_") else None
    return sampler.sample(kind, spec=spec), f"random {kind} (seed {config.seed})"


def _identity_errors(n, rng):
    identity = SymmetricForm.identity(n)
    sampler = CurvatureSampler(n, seed=int(rng.integers(0, 2 ** 31 - 1)))
    S = sampler.sample("generic")
    A, B, H = (random_symmetric(rng, n) for _ in range(3))
    HI = kn_product(H, identity)
    weyl = weyl_part(S) + sphere_tensor(n) * float(rng.uniform(0.5, 1.5))
    expected_q = (kn_product(H, H) * (n - 2) + kn_product(H, identity) * (2.0 * H.trace())
                  - kn_product(H.square(), identity) * 2.0 + sphere_tensor(n) * H.norm2())
    ric = ricci(S)
    ones = [1.0] * (n - 1)
    P, D, E = (SymmetricForm.diag([first] + ones) for first in (0.0, -1.0, -3.0))
    diagonal_squares = max(kn_product(P, P).max_error(kn_product(D, identity)),
                           kn_product(D, D).max_error(kn_product(E, identity)))
    return {
        "kn_symmetry": kn_product(A, B).max_error(kn_product(B, A)),
        "ricci_of_kn": ricci(HI).max_error(H * (n - 2) + identity * H.trace()),
        "b_symmetry": b_product(S, HI).max_error(b_product(HI, S)),
        "b_with_kn": b_product(S, HI).max_error(kn_product(ric, H) + kn_product(contract_sh(S, H), identity)),
        "q_of_kn": q_quadratic(HI).max_error(expected_q),
        "q_of_sphere": q_quadratic(sphere_tensor(n)).max_error(sphere_tensor(n) * (4.0 * n - 4.0)),
        "diagonal_kn_squares": diagonal_squares,
        "scal_of_q": abs(scalar(q_quadratic(S)) - 2.0 * ric.norm2()) / max(1.0, ric.norm2()),
        "sphere_contraction": contract_sh(sphere_tensor(n), H).max_error((identity * H.trace() - H) * 2.0),
        "bianchi_idempotent": bianchi_project(S.full()).max_error(S),
        "bianchi_residual": S.bianchi_residual() / max(1.0, S.scale()),
        "coupled_reconstruction": step5_residual(weyl, H, 1.5),
    }


def cmd_identities(args, config):
    rng = np.random.default_rng(config.seed)
    worst = {}
    dims = [config.n] if args.single else range(4, config.n + 1)
    for n in dims:
        for _ in range(config.samples):
            for name, error in _identity_errors(n, rng).items():
                worst[name] = max(worst.get(name, 0.0), float(error))
    checks = {name: _check(error <= config.tol, error) for name, error in worst.items()}
    failed = [name for name, entry in checks.items() if not entry["passed"]]
    if failed:
        logger.warning(f"identity suite FAIL for {failed} (seed {config.seed})")
    return Outcome(not failed, checks, {"dimensions": list(dims), "samples": config.samples})


def cmd_membership(args, config):
    R, label = _source_tensor(args, config)
    spec = ConeSpec(config.sigma, config.resolved_theta())
    report = cone_membership(R, spec, restarts=config.restarts, seed=config.seed, tol=config.tol)
    results = {"tensor": label, "membership": report.to_dict()}
    if args.decompose:
        pieces = decompose(R, spec, restarts=config.restarts, seed=config.seed, tol=config.tol)
        results["decomposition"] = None if pieces is None else {
            "trace_H": pieces[1].trace(), "scal_S": scalar(pieces[0]), "H": pieces[1].entries.tolist()}
    if getattr(args, "model", None):
        audit = boundary_audit(_model_kind(args, config), spec, band=config.band, restarts=config.restarts,
                               seed=config.seed, threads=config.threads)
        results["classification"] = audit.classification
        results["audit"] = audit.to_dict()
    return Outcome(report.member, {"member": _check(report.member, report.slack)}, results)


def cmd_oracles(args, config):
    n = config.n
    sampler = CurvatureSampler(n, seed=config.seed, restarts=min(config.restarts, 16))
    rows = []
    for kind in ORACLE_CLASSES:
        for index in range(config.samples):
            R = sampler.sample(kind)
            check = oracle_check(R, restarts=config.restarts, seed=config.seed + index, product=args.product)
            rows.append({"kind": kind, "index": index, **check.to_dict(),
                         "agree": check.verdicts_agree(config.band), "nesting_gap": check.nesting_gap(),
                         "sufficiency_gap": check.sufficiency_gap() if kind == "psd_operator" else 0.0})
    disagreements = sum(not row["agree"] for row in rows)
    nesting = max(row["nesting_gap"] for row in rows)
    sufficiency = max(row["sufficiency_gap"] for row in rows)
    witness = max(row["witness_error"] / row["scale"] for row in rows)
    checks = {"verdict_agreement": _check(disagreements == 0, disagreements),
              "nesting": _check(nesting <= config.band, nesting),
              "psd_sufficiency": _check(sufficiency <= config.band, sufficiency),
              "witness_reproduction": _check(witness <= 1e-9, witness)}
    if args.product:
        product = max(abs(row["pic2_product"] - row["pic2"]) / row["scale"] for row in rows)
        checks["product_method"] = _check(product <= PRODUCT_TOL, product)
    passed = all(entry["passed"] for entry in checks.values())
    if disagreements:
        logger.warning(f"{disagreements} pic2 / complex sectional verdict disagreements (seed {config.seed})")
    return Outcome(passed, checks, {"n": n, "classes": list(ORACLE_CLASSES), "samples": config.samples}, rows)


def cmd_catalog(args, config):
    metadata, entries = load_catalog(args.path) if args.path else load_catalog()
    checks, rows = {}, []
    for kind, spec, expected in entries:
        audit = boundary_audit(kind, spec, band=config.band, restarts=config.restarts, seed=config.seed,
                               threads=config.threads)
        name = f"{kind.label()} in {spec.label()}"
        checks[name] = _check(audit.classification == expected, audit.report.slack)
        rows.append({"model": kind.label(), "cone": spec.label(), "expected": expected,
                     "classification": audit.classification, "slack": audit.report.slack})
        logger.info(f"{name}: {audit.classification} (expected {expected})")
    passed = all(entry["passed"] for entry in checks.values())
    return Outcome(passed, checks, {"catalog": metadata, "models": rows}, rows)


def cmd_evolve(args, config):
    R, label = _source_tensor(args, config)
    spec = ConeSpec(config.sigma, config.resolved_theta())
    spec.check_dim(R.dim)
    n = R.dim
    tag = ModelKind.parse(args.model, n).tag if args.model else None
    rtol = config.rtol / CLOSED_FORM_TIGHTENING if tag in CLOSED_FORM_TAGS else config.rtol

    def monitor(T):
        return cone_membership(T, spec, restarts=min(config.restarts, 16), seed=config.seed).slack / T.scale()

    record, state = integrate(OdeState.full(R), scal_factor=config.horizon, rtol=rtol, monitor=monitor,
                              monitor_every=args.monitor_every)
    final = state.tensor()
    checks = {}
    if tag == "sphere":
        r0 = scalar(R) / (2.0 * n * (n - 1))
        expected = sphere_closed_form(r0, n, state.time)
        error = abs(scalar(final) / (2.0 * n * (n - 1)) - expected) / expected
        checks["sphere_closed_form"] = _check(error <= CLOSED_FORM_FACTOR * config.rtol, error)
    elif tag == "cylinder":
        c0, _ = cylinder_line_deviation(R)
        c, deviation = cylinder_line_deviation(final)
        error = abs(c - cylinder_closed_form(c0, n, state.time)) / c
        checks["cylinder_line"] = _check(deviation <= config.tol, deviation)
        checks["cylinder_closed_form"] = _check(error <= CLOSED_FORM_FACTOR * config.rtol, error)
    results = {"tensor": label, "stop_reason": record.stop_reason, "t_final": state.time,
               "steps": len(record.times) - 1, "min_slack": record.min_slack(), "cone": spec.label(),
               "integration_rtol": rtol}
    passed = all(entry["passed"] for entry in checks.values())
    return Outcome(passed, checks, results, record.to_frame().to_dict("records"))


def _pinching_function(config):
    theta = config.resolved_theta()
    if theta == 0.0:
        theta = 0.5 * theta_bar_estimate(config.n)
        logger.info(f"pinching function needs theta > 0; using {theta:.6g}")
    return build(config.sigma, theta, config.n, depth=config.depth)


def cmd_invariance(args, config):
    if args.pinched:
        report = pinched_set_invariance(_pinching_function(config), samples=config.samples, seed=config.seed,
                                        horizon=config.horizon, restarts=config.restarts, rtol=config.rtol,
                                        threads=config.threads)
    else:
        report = invariance_probe(ConeSpec(config.sigma, config.resolved_theta()), config.n,
                                  samples=config.samples, seed=config.seed, horizon=config.horizon,
                                  restarts=config.restarts, rtol=config.rtol, threads=config.threads)
    checks = {"min_slack": _check(report.passed, report.min_slack)}
    return Outcome(report.passed, checks, report.to_dict(), report.samples)


def cmd_transversality(args, config):
    report = transversality_probe(ConeSpec(config.sigma, config.resolved_theta()), config.n,
                                  samples=config.samples, seed=config.seed, restarts=config.restarts,
                                  threads=config.threads)
    rows = [{"index": row["index"], "active": row["active"], "min_derivative": min(row["derivatives"])}
            for row in report.samples]
    return Outcome(report.passed, {"min_derivative": _check(report.passed, report.min_slack)},
                   report.to_dict(), rows)


def cmd_step2(args, config):
    n = config.n
    rng = np.random.default_rng(config.seed)
    grid = [s for s in DEFAULT_SIGMA_GRID if n - 2.0 * s > 0.0]
    lowest, mismatch = np.inf, 0.0
    for _ in range(config.samples):
        a = rng.exponential(size=n)
        i, j = (int(k) for k in rng.choice(n, size=2, replace=False))
        for sigma in grid:
            value = step2_expression(a, sigma, i, j)
            scale = max(1.0, float(np.sum(a)) ** 2)
            lowest = min(lowest, value / scale)
            for case in (step2_case1, step2_case2):
                mismatch = max(mismatch, abs(case(a, sigma, i, j) - value) / scale)
    checks = {"nonnegative": _check(lowest >= -config.tol, lowest),
              "case_identities": _check(mismatch <= config.tol, mismatch)}
    passed = all(entry["passed"] for entry in checks.values())
    return Outcome(passed, checks, {"n": n, "sigma_grid": grid, "samples": config.samples})


def cmd_theta_bar(args, config):
    n = config.n
    theta = theta_bar_estimate(n)
    analytic = analytic_theta_bar(n)
    validation = validate_step4(theta * (1.0 - 1e-9), n, samples=config.samples, seed=config.seed)
    bracket = validate_step4(2.0 * theta, n, samples=config.samples, seed=config.seed)
    checks = {"analytic_agreement": _check(abs(theta - analytic) <= 1e-9 * analytic, abs(theta - analytic)),
              "validation": _check(validation["violations"] == 0, validation["min_value"]),
              "bracket": _check(bracket["violations"] > 0, bracket["min_value"])}
    passed = all(entry["passed"] for entry in checks.values())
    return Outcome(passed, checks, {"n": n, "theta_bar": theta, "analytic": analytic, "validation": validation,
                                     "bracket": bracket})


def cmd_pinching(args, config):
    f = _pinching_function(config)
    results = {"function": f.to_dict()}
    invariants, _ = f.measure()
    checks = {name: _check(entry["passed"], entry["value"]) for name, entry in invariants.items()}
    rows = [{"s": s, "f": value, "left": left, "right": right} for s, value, left, right in f.breakpoints()]
    if args.action == "eval":
        values = [float(s) for s in args.s]
        rows = [{"s": s, "f": f(s)} for s in values]
        results["values"] = rows
    elif args.action == "verify":
        report = pinched_set_invariance(f, samples=config.samples, seed=config.seed, horizon=config.horizon,
                                        restarts=config.restarts, rtol=config.rtol, threads=config.threads)
        results["invariance"] = report.to_dict()
        checks["invariance"] = _check(report.passed, report.min_slack)
        rows = report.samples
    passed = all(entry["passed"] for entry in checks.values())
    return Outcome(passed, checks, results, rows)


def cmd_epsilon(args, config):
    evidence = epsilon_search(args.alpha, args.beta, config.resolved_theta(), args.h, config.n,
                              samples=config.samples, seed=config.seed, restarts=config.restarts)
    checks = {"certified": _check(evidence.certified, evidence.epsilon)}
    return Outcome(evidence.certified, checks, evidence.to_dict(), evidence.inclusion)


def cmd_surgery(args, config):
    geom = NeckGeometry(config.n, profile=config.profile, radius=config.radius, delta=config.delta,
                        points=args.points, refine=args.refine)
    f = _pinching_function(config)
    audit = pinching_audit(geom, f, restarts=config.restarts, seed=config.seed, threads=config.threads,
                           tol=config.tol)
    summary = audit.to_dict()
    checks = {"post_surgery_pinched": _check(audit.passed, summary["min_post_slack"]),
              "below_zero_unchanged": _check(all(row["unchanged"] for row in audit.rows if row["z"] <= 0.0), None)}
    passed = all(entry["passed"] for entry in checks.values())
    return Outcome(passed, checks, summary, audit.rows)


def cmd_hull(args, config):
    evidence = hull_evidence(config.n, samples=config.samples, seed=config.seed)
    checks = {"pseudo_cylinder_pattern": _check(evidence.supports, evidence.pattern_error)}
    return Outcome(evidence.supports, checks, evidence.to_dict())


def cmd_rigidity(args, config):
    R, label = _source_tensor(args, config)
    result = rigidity_check(R, tol=config.tol, restarts=config.restarts, seed=config.seed)
    passed = result.kind != "violation"
    return Outcome(passed, {"rigidity": _check(passed, result.residual)}, {"tensor": label, **result.to_dict()})


COMMANDS = {
    "identities": cmd_identities,
    "membership": cmd_membership,
    "oracles": cmd_oracles,
    "catalog": cmd_catalog,
    "evolve": cmd_evolve,
    "invariance": cmd_invariance,
    "transversality": cmd_transversality,
    "step2": cmd_step2,
    "theta-bar": cmd_theta_bar,
    "pinching": cmd_pinching,
    "epsilon": cmd_epsilon,
    "surgery": cmd_surgery,
    "hull": cmd_hull,
    "rigidity": cmd_rigidity,
}


def _theta(text):
    return text if text == "auto" else float(text)


def _common_parser():
    common = argparse.ArgumentParser(add_help=False)
    # flags default to None so that only explicit values override the config file
    common.add_argument("--config", help="TOML file with run settings")
    common.add_argument("--n", type=int)
    common.add_argument("--sigma", type=float)
    common.add_argument("--theta", type=_theta, help="number or 'auto' (half of theta bar)")
    common.add_argument("--seed", type=int)
    common.add_argument("--samples", type=int)
    common.add_argument("--restarts", type=int)
    common.add_argument("--horizon", type=float, help="stop once scal has grown by this factor")
    common.add_argument("--tol", type=float)
    common.add_argument("--band", type=float)
    common.add_argument("--rtol", type=float)
    common.add_argument("--threads", type=int)
    common.add_argument("--json", dest="json_path")
    common.add_argument("--csv", dest="csv_path")
    common.add_argument("--format", choices=("json", "csv"))
    common.add_argument("--record", action="store_true", default=None, help="store the run in the ledger")
    common.add_argument("--log-level", default="WARNING")
    common.add_argument("--verbose", action="store_true")
    return common


def _tensor_source(parser, kinds=TENSOR_CLASSES):
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--model", help=f"model tag, one of {MODEL_TAGS}; product_spheres(k=2) style for k")
    source.add_argument("--file", help="JSON tensor record")
    parser.add_argument("--kind", default="generic", choices=kinds)


def build_parser():
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="lab", description="Curvature cone verification runs")
    commands = parser.add_subparsers(dest="command", required=True)

    identities = commands.add_parser("identities", parents=[common])
    identities.add_argument("--single", action="store_true", help="only the dimension given by --n")

    membership = commands.add_parser("membership", parents=[common])
    _tensor_source(membership)
    membership.add_argument("--decompose", action="store_true")

    oracles = commands.add_parser("oracles", parents=[common])
    oracles.add_argument("--product", action="store_true", help="also compare the direct-sum PIC2 minimum")

    catalog = commands.add_parser("catalog", parents=[common])
    catalog.add_argument("--path", help="catalog JSON (default data/model_catalog.json)")

    evolve = commands.add_parser("evolve", parents=[common])
    _tensor_source(evolve)
    evolve.add_argument("--monitor-every", type=int, default=4)

    invariance = commands.add_parser("invariance", parents=[common])
    invariance.add_argument("--pinched", action="store_true", help="probe the pinched set of f(sigma0 = --sigma)")

    commands.add_parser("transversality", parents=[common])
    commands.add_parser("step2", parents=[common])
    commands.add_parser("theta-bar", parents=[common])

    pinching = commands.add_parser("pinching", parents=[common])
    pinching.add_argument("action", choices=("build", "eval", "verify"))
    pinching.add_argument("--depth", type=int)
    pinching.add_argument("--s", nargs="+", default=[], help="points for 'eval'")

    epsilon = commands.add_parser("epsilon", parents=[common])
    epsilon.add_argument("--alpha", type=float, required=True)
    epsilon.add_argument("--beta", type=float, required=True)
    epsilon.add_argument("--h", type=float, default=1.0)

    surgery = commands.add_parser("surgery", parents=[common])
    surgery.add_argument("--profile", choices=NECK_PROFILES)
    surgery.add_argument("--radius", type=float)
    surgery.add_argument("--delta", type=float)
    surgery.add_argument("--depth", type=int)
    surgery.add_argument("--points", type=int, default=GRID_POINTS)
    surgery.add_argument("--refine", type=int, default=REFINE_POINTS)

    commands.add_parser("hull", parents=[common])

    rigidity = commands.add_parser("rigidity", parents=[common])
    _tensor_source(rigidity)
    return parser


def load_config(args):
    keys = RunConfig.keys()
    overrides = {key: value for key, value in vars(args).items() if key in keys}
    overrides["command"] = args.command
    if args.config:
        return RunConfig.from_toml(args.config, **overrides).validate()
    return RunConfig().merged(**overrides).validate()


def _write_outputs(processor, report, outcome, config):
    if config.json_path:
        processor.write_json(report, config.json_path)
    if config.csv_path and outcome.rows:
        processor.write_csv(outcome.rows, config.csv_path)
    if config.format == "csv":
        frame = processor.checks_frame(report["checks"])
        sys.stdout.write(frame.to_csv(index=False))
    else:
        sys.stdout.write(processor.to_json(report) + "\n")


def _record(config, verdict, code, checks):
    try:
        ledger = get_db_manager()
        ledger.record_run(config.command, config.to_dict(), config.seed, verdict, code,
                          {name: (entry["passed"], entry["value"]) for name, entry in checks.items()})
    except Exception as e:
        logger.warning(f"could not record run in the ledger: {e}")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.INFO if args.verbose else getattr(logging, str(args.log_level).upper(), logging.WARNING)
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=[logging.StreamHandler(sys.stderr)],
                        force=True)
    processor = ReportProcessor()

    try:
        config = load_config(args)
        outcome = COMMANDS[args.command](args, config)
    except LabError as e:
        logger.error(f"{args.command}: {e}")
        if getattr(args, "record", None):
            _record(RunConfig(command=args.command), "ERROR", EXIT_ERROR, {})
        return EXIT_ERROR

    code = EXIT_PASS if outcome.passed else EXIT_FAIL
    verdict = "PASS" if outcome.passed else "FAIL"
    report = processor.create_report(args.command, config.to_dict(), verdict, code, outcome.checks,
                                     outcome.results)
    _write_outputs(processor, report, outcome, config)
    if config.record:
        _record(config, verdict, code, outcome.checks)
    return code


if __name__ == "__main__":
    sys.exit(main())
