"""Command-line interface: ``mjlq <command> ...``.

Reports are JSON, written to ``-o FILE`` (atomically) or to stdout; a one-line
human summary goes to stderr. Regimes are numbered from 1 on the command line.

Exit codes: 0 ok, 1 I/O error, 2 invalid input, 3 unstable, 4 not
stabilizable, 5 solver failure, 6 verification rejected, 7 simulation overflow.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
import warnings
from dataclasses import dataclass

import numpy as np

from . import mcsim, riccati, stability, synthesis
from .errors import (ArtifactIOError, MJLQError, NotStabilizable, ParseError, PreconditionError,
                     SingularN, SingularSystem, SolverFailure, UnsupportedInhomogeneous,
                     ValidationError)
from .model_io import (CoupledMatrixSet, FeedbackStrategy, dumps, load_artifact, load_problem,
                       load_strategy, write_json_atomic)

EXIT_OK = 0
EXIT_IO = 1
EXIT_INVALID = 2
EXIT_UNSTABLE = 3
EXIT_NOT_STABILIZABLE = 4
EXIT_SOLVER = 5
EXIT_REJECTED = 6
EXIT_OVERFLOW = 7


@dataclass
class CommandOutcome:
    exit_code: int
    summary: str
    report_path: str | None = None


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to its exit code."""
    if isinstance(exc, ArtifactIOError):
        return EXIT_IO
    if isinstance(exc, NotStabilizable):
        return EXIT_NOT_STABILIZABLE
    if isinstance(exc, (SolverFailure, SingularN, SingularSystem)):
        return EXIT_SOLVER
    if isinstance(exc, (ParseError, ValidationError, PreconditionError, UnsupportedInhomogeneous,
                        ValueError)):
        return EXIT_INVALID
    if isinstance(exc, MJLQError):
        return EXIT_SOLVER
    raise exc


def _emit(doc: dict, out: str | None) -> str | None:
    if out is None or out == "-":
        sys.stdout.write(dumps(doc) + "\n")
        return None
    write_json_atomic(doc, out)
    return out


def _P_of(obj) -> np.ndarray:
    P = getattr(obj, "P", obj)
    if isinstance(P, CoupledMatrixSet):
        return P.entries
    raise ParseError("solution file carries no P (expected a care_solution or coupled_matrix_set)")


def _fmt(v) -> str:
    return str(np.round(np.asarray(v, float), 4).tolist())


# --------------------------------------------------------------------------
# commands

def cmd_validate(args) -> CommandOutcome:
    p = load_problem(args.problem)
    kind = "homogeneous" if p.homogeneous else "inhomogeneous"
    return CommandOutcome(EXIT_OK, f"valid: n={p.n} m={p.m} L={p.L}, {kind}, "
                                   f"discount_r={p.discount_r:g}")


def cmd_stability(args) -> CommandOutcome:
    p = load_problem(args.problem)
    if args.strategy:
        strat = load_strategy(args.strategy)
        strat.check_against(p)
        sysm, which = stability.closed_loop_system(p, strat.theta), "closed loop"
    else:
        sysm, which = stability.open_loop_system(p), "open loop"
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        cert = stability.check_l2_stable(sysm)
    path = _emit(cert.to_dict(), args.output)
    verdict = "L2-stable" if cert.stable else "not L2-stable"
    code = EXIT_OK if cert.stable else EXIT_UNSTABLE
    return CommandOutcome(code, f"{which} is {verdict} (spectral abscissa "
                                f"{cert.spectral_abscissa:.6g}, sign screen {cert.sign_verdict})",
                          path)


def cmd_stabilize(args) -> CommandOutcome:
    p = synthesis.discount_transform(load_problem(args.problem))
    strat = riccati.synthesize_stabilizer(p, t_max=args.t_max)
    path = _emit(strat.to_dict(), args.output)
    return CommandOutcome(EXIT_OK, f"stabilizing gain found: {_fmt(strat.theta)}", path)


def cmd_solve(args) -> CommandOutcome:
    original = load_problem(args.problem)
    p = synthesis.discount_transform(original)
    kw = {"t_max": args.t_max}
    if args.stabilizer:
        kw["stabilizer"] = load_strategy(args.stabilizer)
    if args.eps_homotopy is not None:
        sol = riccati.solve_care_eps_homotopy(p, args.eps_homotopy, **kw)
    else:
        sol = riccati.solve_care(p, tol=args.tol, **kw)
    if not sol.accepted:
        note = sol.verification.note if sol.verification is not None else "not stabilizing"
        return CommandOutcome(EXIT_REJECTED, f"candidate rejected: {note}")
    strat = sol.strategy
    if not p.homogeneous and p.has_nonzero_inhomogeneous:
        strat = synthesis.build_closed_loop(p, sol)
    strat = synthesis.undiscount_strategy(strat, original.discount_r)
    sol = dataclasses.replace(sol, strategy=strat,
                              metadata={**sol.metadata, "discount_r": original.discount_r})
    path = _emit(sol.to_dict(), args.output)
    res = ", ".join(f"{r:.3g}" for r in sol.residuals)
    return CommandOutcome(EXIT_OK, f"solved ({sol.method}): residuals [{res}]", path)


def cmd_verify(args) -> CommandOutcome:
    p = synthesis.discount_transform(load_problem(args.problem))
    P = _P_of(load_artifact(args.solution))
    if P.shape != (p.L, p.n, p.n):
        raise ValidationError(f"P has shape {P.shape}, expected {(p.L, p.n, p.n)}")
    rep = riccati.verify_care(p, P)
    for i, (r, g) in enumerate(zip(rep.residuals, rep.range_residuals)):
        print(f"regime {i + 1}: ||E(P)|| = {r:.4e}  range residual = {g:.4e}  "
              f"min eig N = {rep.n_min_eigs[i]:.4e}", file=sys.stderr)
    path = _emit(rep.to_dict(), args.output)
    if rep.accepted:
        return CommandOutcome(EXIT_OK, "accepted", path)
    return CommandOutcome(EXIT_REJECTED, f"rejected: {rep.note}", path)


def _accepted_care(p, solution_path):
    sol = load_artifact(solution_path)
    if not isinstance(sol, riccati.CareSolution):
        P = _P_of(sol)
        coef = riccati.RiccatiCoefficients(p)
        sol = riccati.CareSolution(CoupledMatrixSet(P), coef.residual_norms(P), coef.n_margins(P),
                                   FeedbackStrategy(coef.gains(P)), True)
    return sol


def cmd_synthesize(args) -> CommandOutcome:
    original = load_problem(args.problem)
    p = synthesis.discount_transform(original)
    care = _accepted_care(p, args.solution)
    strat = synthesis.build_closed_loop(p, care)
    strat = synthesis.undiscount_strategy(strat, original.discount_r)
    path = _emit(strat.to_dict(), args.output)
    return CommandOutcome(EXIT_OK, f"theta = {_fmt(strat.theta)}, nu = {_fmt(strat.nu)}", path)


def cmd_value(args) -> CommandOutcome:
    p = synthesis.discount_transform(load_problem(args.problem))
    care = _accepted_care(p, args.solution)
    rep = synthesis.value_function(p, care)
    doc = rep.to_dict()
    summary = "value function written"
    if args.x is not None:
        i = args.regime - 1
        if not 0 <= i < p.L:
            raise ValidationError(f"--regime must be in 1..{p.L}")
        val = rep.evaluate(args.x, i)
        doc["evaluation"] = {"x": list(args.x), "regime": args.regime, "value": val,
                             "complete": rep.constant_term is not None}
        summary = f"V(x, {args.regime}) = {val:.10g}"
        if rep.constant_term is None:
            summary += " (up to an unavailable constant)"
    path = _emit(doc, args.output)
    return CommandOutcome(EXIT_OK, summary, path)


def cmd_simulate(args) -> CommandOutcome:
    p = load_problem(args.problem)
    strat = load_strategy(args.strategy)
    strat.check_against(p)
    x0 = np.asarray(args.x0 if args.x0 is not None else np.ones(p.n), float)
    if x0.shape != (p.n,):
        raise ValidationError(f"--x0 needs {p.n} values")
    if not 1 <= args.i0 <= p.L:
        raise ValidationError(f"--i0 must be in 1..{p.L}")
    workers = args.threads if args.threads is not None else mcsim.default_workers()
    cfg = mcsim.SimulationConfig(args.paths, args.horizon, args.dt, args.seed, x0, args.i0 - 1,
                                 p.discount_r, args.brownian_dt, workers)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = mcsim.simulate_paths(p, strat, cfg, backend=args.backend)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    doc = res.to_dict()
    doc["config"] = {**doc["config"], "i0": args.i0}
    path = _emit(doc, args.output)
    summary = (f"cost {res.cost_mean:.6g} +- {res.cost_stderr:.3g} over {res.n_paths_used} paths, "
               f"truncation bias {res.truncation_bias:.3g}")
    if res.diverged:
        return CommandOutcome(EXIT_OVERFLOW, f"diverged: overflow fraction "
                                             f"{res.overflow_fraction:.3g}, exploding "
                                             f"{res.exploding}; {summary}", path)
    return CommandOutcome(EXIT_OK, summary, path)


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mjlq", description="Stochastic LQ control of "
                                 "regime-switching linear systems.")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, func, help_, solution=False):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("problem", help="problem JSON file")
        if solution:
            sp.add_argument("solution", help="solution JSON file written by 'solve'")
        sp.add_argument("-o", "--output", help="report file (default: stdout)")
        sp.set_defaults(func=func)
        return sp

    sub.add_parser("validate", help="check a problem file").set_defaults(func=cmd_validate)
    sub.choices["validate"].add_argument("problem")

    sp = add("stability", cmd_stability, "L2-stability of the open or closed loop")
    sp.add_argument("--strategy", help="strategy or solution file for the closed loop")

    sp = add("stabilize", cmd_stabilize, "synthesize a stabilizing feedback gain")
    sp.add_argument("--t-max", type=float, default=1024.0)

    sp = add("solve", cmd_solve, "stabilizing solution of the coupled Riccati equations")
    sp.add_argument("--eps-homotopy", type=float, nargs="?", const=1.0, default=None,
                    metavar="EPS0", help="regularize R + eps I, eps -> 0 (default eps0 = 1)")
    sp.add_argument("--tol", type=float, default=1e-10, help="Newton residual tolerance")
    sp.add_argument("--t-max", type=float, default=1024.0, help="longest sweep horizon")
    sp.add_argument("--stabilizer", help="strategy file with a stabilizing gain to start from")

    add("verify", cmd_verify, "check a solution against the Riccati equations", solution=True)
    add("synthesize", cmd_synthesize, "optimal feedback strategy from a solution", solution=True)

    sp = add("value", cmd_value, "value function from a solution", solution=True)
    sp.add_argument("--x", type=float, nargs="+", help="state at which to evaluate")
    sp.add_argument("--regime", type=int, default=1)

    sp = sub.add_parser("simulate", help="Monte Carlo simulation of the closed loop")
    sp.add_argument("problem", help="problem JSON file")
    sp.add_argument("strategy", help="strategy or solution file")
    sp.add_argument("-o", "--output", help="result file (default: stdout)")
    sp.add_argument("--x0", type=float, nargs="+", help="initial state (default: ones)")
    sp.add_argument("--i0", type=int, default=1, help="initial regime (1-based)")
    sp.add_argument("--paths", type=int, default=10_000, help="number of paths")
    sp.add_argument("--horizon", type=float, default=20.0, help="time horizon T")
    sp.add_argument("--dt", type=float, default=1e-3, help="Euler step")
    sp.add_argument("--brownian-dt", type=float, default=None,
                    help="Brownian cell width, a multiple of dt (default: dt)")
    sp.add_argument("--seed", type=int, default=0, help="master seed")
    sp.add_argument("--threads", type=int, default=None,
                    help="worker threads (default: MJLQ_THREADS or 1); results do not depend on it")
    sp.add_argument("--backend", choices=mcsim.available_backends(), default=None,
                    help="path kernel (default: compiled if built)")
    sp.set_defaults(func=cmd_simulate)
    return ap


def run(argv=None) -> CommandOutcome:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (MJLQError, ValueError) as exc:
        return CommandOutcome(exit_code_for(exc), f"error: {exc}")


def main(argv=None) -> int:
    out = run(argv)
    print(out.summary, file=sys.stderr)
    return out.exit_code


if __name__ == "__main__":
    sys.exit(main())
