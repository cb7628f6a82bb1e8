"""Command-line entry point: ``fbdsdej {check,solve,verify,probe} --config run.json``.

Exit codes: 0 success, 1 configuration error, 2 hypothesis violation
(``check``), 3 solver failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import artifacts
from .config import ConfigError, RunConfig, build_problem, config_from_dict, parse_config
from .continuation import (
    ConfigurationError,
    ContinuationSolver,
    LadderStalledError,
    SolverFailure,
    StepContext,
    contraction_probe,
    random_start,
)
from .coefficients import MonotoneConstants
from .hypotheses import PairSampler, check_hypotheses, estimate_constants
from .kernel import KernelError, RegressionError, solve_decoupled_34
from .noise import TimeGrid, sample_noise
from .verification import closed_form_error, residual_report

log = logging.getLogger("fbdsdej")

EXIT_OK, EXIT_CONFIG, EXIT_VIOLATION, EXIT_SOLVER = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fbdsdej", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=("check", "solve", "verify", "probe"))
    p.add_argument("--config", required=True, type=Path, help="run configuration (JSON)")
    p.add_argument("--seed", type=int, help="override the noise seed")
    p.add_argument("--steps", type=int, help="override the number of time steps")
    p.add_argument("--paths", type=int, help="override the number of Monte Carlo paths")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--case", choices=("auto", "1", "2"), help="continuation family")
    p.add_argument("--tol", type=float, help="Picard tolerance")
    p.add_argument("--delta", type=float, help="initial continuation step")
    p.add_argument("--workers", type=int, help="worker processes for noise generation (results do not change)")
    p.add_argument("--solution", type=Path, help="verify: saved solution (.npz) instead of solving")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def apply_overrides(cfg: RunConfig, args) -> tuple[RunConfig, dict]:
    overrides = {}
    for key in ("seed", "steps", "paths", "workers"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = val
    if args.out is not None:
        overrides["output"] = str(args.out)
    cont = {}
    if args.case is not None:
        cont["case"] = "auto" if args.case == "auto" else f"case{args.case}"
    if args.tol is not None:
        cont["tol"] = args.tol
    if args.delta is not None:
        cont["delta"] = args.delta
    data = cfg.model_dump(mode="json")
    data.update(overrides)
    if cont:
        data["continuation"] = {**data["continuation"], **cont}
        overrides["continuation"] = cont
    return config_from_dict(data), overrides


class Run:
    """State shared by the subcommands of one invocation."""

    def __init__(self, cfg: RunConfig, command: str, overrides: dict):
        self.cfg = cfg
        self.command = command
        self.overrides = overrides
        self.out = Path(cfg.output)
        self.out.mkdir(parents=True, exist_ok=True)
        self.echo = cfg.hashed_fields()
        self.run_id = artifacts.run_id(self.echo, command)
        self.files: list[Path] = []
        self.timings: dict[str, float] = {}
        self.status: dict = {}
        self.coeffs, self.pert, self.closed = build_problem(cfg)

    def timed(self, name, fn, *a, **kw):
        t0 = time.perf_counter()
        try:
            return fn(*a, **kw)
        finally:
            self.timings[name] = time.perf_counter() - t0

    def json(self, name: str, obj) -> None:
        self.files.append(artifacts.write_json(self.out / name, {"run": self.run_id, **obj}))

    def csv(self, name: str, header, rows) -> None:
        self.files.append(artifacts.write_csv(self.out / name, header, rows, self.run_id))

    def finish(self, code: int) -> int:
        self.status["exit_code"] = code
        artifacts.write_manifest(self.out, self.command, self.echo, self.overrides, self.run_id,
                                 self.files, self.timings, self.status, self.cfg.workers)
        return code

    def noise(self):
        grid = TimeGrid(self.cfg.horizon, self.cfg.steps)
        return self.timed("noise", sample_noise, self.cfg.seed, self.cfg.paths, grid, self.coeffs.spec,
                          n_jobs=self.cfg.workers)

    def sampler(self) -> PairSampler:
        h = self.cfg.hypotheses
        return PairSampler(radii=h.radii, seed=h.seed)

    def constants(self) -> MonotoneConstants | None:
        if self.coeffs.declared_constants is not None:
            return self.coeffs.declared_constants
        rep = self.timed("estimate_constants", estimate_constants, self.coeffs, self.sampler(),
                         self.cfg.hypotheses.samples)
        c = rep.constants
        if c["theta1"] is None or c["beta"] is None:
            self.status["constants"] = "hypotheses violated on the sample; set continuation.case explicitly"
            return None
        return MonotoneConstants(c["theta1"], c["theta2"], c["beta"], direction=rep.direction)


def _ladder_dict(diag) -> dict:
    d = diag.to_dict()
    d.pop("total_seconds", None)
    for s in d["steps"]:
        s.pop("seconds", None)
    return d


def cmd_check(run: Run) -> int:
    h = run.cfg.hypotheses
    report = run.timed("check", check_hypotheses, run.coeffs, None, run.sampler(), h.samples)
    run.json("hypotheses.json", report.to_dict())
    print(report.summary_table())
    run.status["hypotheses"] = report.statuses
    return EXIT_VIOLATION if report.violated else EXIT_OK


def _solve(run: Run):
    cfg = run.cfg
    noise = run.noise()
    if cfg.problem == "decoupled":
        ens = run.timed("solve", solve_decoupled_34, cfg.decoupled.theta1, run.pert, noise,
                        run.coeffs.spec.x, features=None, basis=cfg.regression.basis())
        return noise, ens, None
    cont = cfg.continuation
    reg = cfg.regression
    solver = ContinuationSolver(
        run.coeffs, case=cont.case, delta=cont.delta, shrink=cont.shrink,
        min_delta=min(cont.min_delta, cont.delta), picard_tol=cont.tol, picard_max_iter=cont.max_iter,
        relaxation=cont.relaxation, degree=reg.degree, max_interaction=reg.max_interaction, ridge=reg.ridge,
        constants=run.constants(),
    )
    try:
        run.timed("solve", solver.fit, noise, run.pert)
    except SolverFailure as err:
        diag = getattr(err, "diagnostics", None)
        if diag is not None:
            run.json("ladder.json", _ladder_dict(diag))
            _write_trace(run, diag)
        raise
    run.status["case"] = solver.case_
    run.json("ladder.json", _ladder_dict(solver.diagnostics_))
    _write_trace(run, solver.diagnostics_)
    return noise, solver.solution_, solver.diagnostics_


def _write_trace(run: Run, diag) -> None:
    run.csv("trace.csv", ["alpha", "iter", "m2_dist", "ratio", "seconds"], diag.trace_rows())


def _write_solution(run: Run, ens) -> None:
    run.csv("trajectories.csv", artifacts.trajectory_header(ens), artifacts.trajectory_rows(ens, run.cfg.csv_paths))
    run.files.append(artifacts.save_solution(run.out / "solution.npz", ens))


def cmd_solve(run: Run) -> int:
    _, ens, _ = _solve(run)
    _write_solution(run, ens)
    return EXIT_OK


def cmd_verify(run: Run) -> int:
    sol_path = run.status.get("solution")
    if sol_path:
        ens = artifacts.load_solution(Path(sol_path))
        noise = run.noise()
        if ens.grid != noise.grid or ens.n_paths != noise.n_paths:
            raise ConfigError("solution: grid or path count differs from the configuration")
    else:
        noise, ens, _ = _solve(run)
        _write_solution(run, ens)
    rep = run.timed("verify", residual_report, run.coeffs, ens, noise, pert=run.pert)
    out = rep.to_dict()
    if run.closed is not None:
        forms = run.closed if isinstance(run.closed, tuple) else (run.closed,)
        out["closed_form_errors"] = [vars(closed_form_error(ens, f)) for f in forms]
    run.json("residuals.json", out)
    run.csv("residuals.csv", ["t", "fwd_res", "bwd_res"],
            zip(rep.t, rep.forward_residual, rep.backward_residual))
    run.status["residual_sup"] = rep.sup
    print(f"forward sup {rep.forward_sup:.3e}  backward sup {rep.backward_sup:.3e}  terminal {rep.terminal_defect:.3e}")
    return EXIT_OK


def cmd_probe(run: Run) -> int:
    cfg = run.cfg
    noise = run.noise()
    ctx = StepContext.build(run.coeffs, noise, case=cfg.continuation.case, constants=run.constants(),
                            pert=run.pert, basis=cfg.regression.basis())
    rows, summary = [], {}
    spec = run.coeffs.spec
    for delta in cfg.probe.deltas:
        ratios = []
        for p in range(cfg.probe.pairs):
            a = random_start(spec, noise, seed=cfg.seed * 1_000_003 + 2 * p + 1)
            b = random_start(spec, noise, seed=cfg.seed * 1_000_003 + 2 * p + 2)
            r = contraction_probe(ctx, delta, a, b)
            ratios.append(r)
            rows.append([delta, p, r])
        summary[repr(delta)] = {"max": max(ratios), "mean": float(np.mean(ratios))}
        print(f"delta {delta:<6g} max ratio {max(ratios):.4f}")
    run.csv("probe.csv", ["delta", "pair", "ratio"], rows)
    run.json("probe.json", {"case": ctx.case, "ratios": summary})
    return EXIT_OK


COMMANDS = {"check": cmd_check, "solve": cmd_solve, "verify": cmd_verify, "probe": cmd_probe}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            cfg, overrides = apply_overrides(parse_config(args.config), args)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        run = Run(cfg, args.command, overrides)
    except (ConfigError, ConfigurationError, ValueError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if args.solution is not None:
        run.status["solution"] = str(args.solution)
    try:
        code = COMMANDS[args.command](run)
    except (ConfigError, ConfigurationError) as err:
        print(f"config error: {err}", file=sys.stderr)
        run.status["error"] = str(err)
        return run.finish(EXIT_CONFIG)
    except (SolverFailure, KernelError, RegressionError) as err:
        print(f"solver failure: {err}", file=sys.stderr)
        run.status["error"] = str(err)
        if isinstance(err, LadderStalledError):
            run.status["error_code"] = err.code
        return run.finish(EXIT_SOLVER)
    return run.finish(code)


if __name__ == "__main__":
    sys.exit(main())
