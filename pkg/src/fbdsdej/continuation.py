"""Continuation in alpha from the decoupled system to the coupled one.

Each Picard step freezes every coefficient evaluation at the previous
iterate and keeps only the linear ``(1 - alpha) * theta`` feedback and the
terminal feedback live, so one step is a forward solve plus a backward solve
(order depends on the case).
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .coefficients import AffinePerturbation, CoefficientSet, MonotoneConstants, eval_A, eval_h
from .kernel import (
    BackwardDrivers,
    ConditioningFeatures,
    ForwardDrivers,
    FrozenDrivers,
    RegressionBasis,
    solve_backward_frozen,
    solve_forward_frozen,
)
from .noise import NoiseBundle
from .spaces import DimensionError, EnsembleProcess, StateQuintuple, m2_sq_norm, terminal_sq_norm


class ConfigurationError(ValueError):
    pass


class SolverFailure(RuntimeError):
    code = "SOLVER_FAILURE"

    def __init__(self, message: str, trace=None):
        super().__init__(f"{self.code}: {message}")
        self.trace = trace


class NonContractionError(SolverFailure):
    code = "NON_CONTRACTION"


class MaxIterError(SolverFailure):
    code = "MAX_ITER"


class LadderStalledError(SolverFailure):
    code = "LADDER_STALLED"

    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


CASES = ("auto", "case1", "case2")


@dataclass(frozen=True)
class ContinuationConfig:
    case: str = "auto"
    delta: float = 0.25
    shrink: float = 0.5
    min_delta: float = 1 / 64
    picard_tol: float = 1e-4
    picard_max_iter: int = 50
    warm_start: bool = True
    stall_patience: int = 3
    relaxation: float = 0.5
    basis: RegressionBasis = field(default_factory=RegressionBasis)

    def __post_init__(self):
        if self.case not in CASES:
            raise ConfigurationError(f"case must be one of {CASES}, got {self.case!r}")
        if not 0 < self.delta <= 1:
            raise ConfigurationError("delta must lie in (0, 1]")
        if not 0 < self.shrink < 1:
            raise ConfigurationError("shrink must lie in (0, 1)")
        if not 0 < self.min_delta <= self.delta:
            raise ConfigurationError("min_delta must lie in (0, delta]")
        if not self.picard_tol > 0:
            raise ConfigurationError("picard_tol must be positive")
        if not 0 < self.relaxation <= 1:
            raise ConfigurationError("relaxation must lie in (0, 1]")
        if self.picard_max_iter < 1:
            raise ConfigurationError("picard_max_iter must be at least 1")


def select_case(constants: MonotoneConstants) -> str:
    """case1 when theta1 > 0 and beta > 0, else case2 when theta2 > 0."""
    if constants.theta1 > 0 and constants.beta > 0:
        return "case1"
    if constants.theta2 > 0:
        return "case2"
    bad = [n for n in ("theta1", "theta2", "beta") if not getattr(constants, n) > 0]
    raise ConfigurationError(
        f"neither continuation case applies: need theta1 > 0 and beta > 0, or theta2 > 0 "
        f"(non-positive: {', '.join(bad)})"
    )


def _resolve_case(case: str, constants: MonotoneConstants | None) -> str:
    if case in ("case1", "case2"):
        return case
    if constants is None:
        raise ConfigurationError("case 'auto' needs monotonicity constants")
    return select_case(constants)


# --- frozen drivers -------------------------------------------------------------


def _frozen_A(coeffs: CoefficientSet, ens: EnsembleProcess):
    return eval_A(coeffs, ens.grid.nodes, ens.values)


def _check_grid(ens: EnsembleProcess, noise: NoiseBundle) -> None:
    if ens.grid != noise.grid or ens.n_paths != noise.n_paths:
        raise DimensionError("iterate and noise live on different grids or path sets")


def frozen_drivers_case1(coeffs, alpha, pert: AffinePerturbation, bar: EnsembleProcess, forward=None,
                         theta1: float = 0.0, noise: NoiseBundle | None = None) -> FrozenDrivers:
    """Drivers of the first family at ``bar``.

    The forward part never depends on the current step; the backward part
    needs the current forward output ``forward = (y, z)`` and is ``None``
    until it is supplied.
    """
    A = _frozen_A(coeffs, bar)
    fwd = ForwardDrivers(
        drift=alpha * A.b + pert.b0,
        diffusion=alpha * A.sigma + pert.sigma0,
        jump=alpha * A.phi + pert.phi0,
    )
    if forward is None:
        return FrozenDrivers(forward=fwd)
    y, z = forward
    P, d = y.shape[0], y.shape[-1]
    y_T = y[:, -1]
    bwd = BackwardDrivers(
        drift=alpha * A.f - (1 - alpha) * theta1 * y + pert.f0,
        bdiffusion=alpha * A.g - (1 - alpha) * theta1 * z + pert.g0,
        terminal=alpha * eval_h(coeffs, y_T) + (1 - alpha) * y_T + pert.terminal(noise, P, d),
    )
    return FrozenDrivers(forward=fwd, backward=bwd)


def frozen_drivers_case2(coeffs, alpha, pert: AffinePerturbation, bar: EnsembleProcess, backward=None,
                         theta2: float = 0.0, noise: NoiseBundle | None = None) -> FrozenDrivers:
    """Drivers of the second family: backward part first (terminal at ``bar``'s y_T),
    forward part once the current ``backward = (Y, Z, k)`` is known."""
    A = _frozen_A(coeffs, bar)
    P, d = bar.n_paths, coeffs.spec.d_H
    bwd = BackwardDrivers(
        drift=alpha * A.f + pert.f0,
        bdiffusion=alpha * A.g + pert.g0,
        terminal=alpha * eval_h(coeffs, bar.terminal_y()) + pert.terminal(noise, P, d),
    )
    if backward is None:
        return FrozenDrivers(backward=bwd)
    Y, Z, k = backward
    fwd = ForwardDrivers(
        drift=alpha * A.b - (1 - alpha) * theta2 * Y + pert.b0,
        diffusion=alpha * A.sigma - (1 - alpha) * theta2 * Z + pert.sigma0,
        jump=alpha * A.phi - (1 - alpha) * theta2 * k + pert.phi0,
    )
    return FrozenDrivers(forward=fwd, backward=bwd)


# --- Picard map ------------------------------------------------------------------


@dataclass
class StepContext:
    """Everything a Picard step needs besides the iterate."""

    coeffs: CoefficientSet
    noise: NoiseBundle
    x: np.ndarray
    case: str
    constants: MonotoneConstants
    pert: AffinePerturbation
    features: ConditioningFeatures

    @classmethod
    def build(cls, coeffs, noise, x=None, case="auto", constants=None, pert=None, basis=None, features=None):
        constants = coeffs.declared_constants if constants is None else constants
        case = _resolve_case(case, constants)
        if constants is None:
            constants = MonotoneConstants(0.0, 0.0, 0.0)
        x = coeffs.spec.x if x is None else np.asarray(x, dtype=float)
        if x.shape != (coeffs.spec.d_H,):
            raise DimensionError(f"x must have length {coeffs.spec.d_H}")
        pert = AffinePerturbation.zeros(coeffs.spec) if pert is None else pert
        features = ConditioningFeatures(noise, basis) if features is None else features
        return cls(coeffs, noise, x, case, constants, pert, features)


def picard_step(ctx: StepContext, alpha: float, bar: EnsembleProcess) -> EnsembleProcess:
    """One application of the full-freeze map at level ``alpha``."""
    _check_grid(bar, ctx.noise)
    if not 0 <= alpha <= 1:
        raise ConfigurationError("alpha must lie in [0, 1]")
    noise, feats = ctx.noise, ctx.features
    if ctx.case == "case1":
        drv = frozen_drivers_case1(ctx.coeffs, alpha, ctx.pert, bar, noise=noise)
        y, z = solve_forward_frozen(drv.forward, noise, ctx.x, feats)
        drv = frozen_drivers_case1(ctx.coeffs, alpha, ctx.pert, bar, (y, z), ctx.constants.theta1, noise)
        Y, Z, k = solve_backward_frozen(drv.backward, noise, feats)
    else:
        drv = frozen_drivers_case2(ctx.coeffs, alpha, ctx.pert, bar, noise=noise)
        Y, Z, k = solve_backward_frozen(drv.backward, noise, feats)
        drv = frozen_drivers_case2(ctx.coeffs, alpha, ctx.pert, bar, (Y, Z, k), ctx.constants.theta2, noise)
        y, z = solve_forward_frozen(drv.forward, noise, ctx.x, feats)
    return bar.with_values(StateQuintuple(y, Y, z, Z, k))


def sq_distance(a: EnsembleProcess, b: EnsembleProcess) -> float:
    """Squared distance on M^2 x L^2(F_T): M^2 part plus E|y_T - y'_T|^2."""
    diff = a - b
    return m2_sq_norm(diff) + terminal_sq_norm(diff.terminal_y())


def distance(a: EnsembleProcess, b: EnsembleProcess) -> float:
    return float(np.sqrt(sq_distance(a, b)))


def _size(a: EnsembleProcess) -> float:
    return float(np.sqrt(m2_sq_norm(a) + terminal_sq_norm(a.terminal_y())))


@dataclass
class PicardTrace:
    alpha: float
    distances: list[float] = field(default_factory=list)
    ratios: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    converged: bool = False
    error: str | None = None

    @property
    def iterations(self) -> int:
        return len(self.distances)


def picard_solve(ctx: StepContext, alpha: float, start: EnsembleProcess, config: ContinuationConfig):
    """Iterate ``v <- v + omega (I(v) - v)`` until ``|I(v) - v|`` drops below
    ``picard_tol * (1 + |I(v)|)``; returns ``(I(v), trace)``.

    ``omega = config.relaxation``; at alpha = 0 the map ignores its argument
    and plain steps are used.  Ratios are squared quotients of consecutive
    increments.
    """
    omega = 1.0 if alpha == 0 else config.relaxation
    trace = PicardTrace(alpha)
    cur = start
    rises = 0
    t0 = time.perf_counter()
    for _ in range(config.picard_max_iter):
        img = picard_step(ctx, alpha, cur)
        d = distance(img, cur)
        prev = trace.distances[-1] if trace.distances else None
        trace.distances.append(d)
        trace.ratios.append((d / prev) ** 2 if prev else float("nan"))
        trace.seconds.append(time.perf_counter() - t0)
        if d <= config.picard_tol * (1.0 + _size(img)):
            trace.converged = True
            return img, trace
        if not np.isfinite(d):
            trace.error = NonContractionError.code
            raise NonContractionError(f"non-finite increment at alpha={alpha:.6g}", trace)
        rises = rises + 1 if prev is not None and d >= prev else 0
        if rises >= config.stall_patience:
            trace.error = NonContractionError.code
            raise NonContractionError(
                f"increments grew {rises} times in a row at alpha={alpha:.6g} (last {d:.3e})", trace
            )
        cur = img if omega == 1.0 else cur + (img - cur) * omega
    trace.error = MaxIterError.code
    raise MaxIterError(f"no convergence in {config.picard_max_iter} iterations at alpha={alpha:.6g}", trace)


# --- ladder ---------------------------------------------------------------------


@dataclass
class LadderDiagnostics:
    case: str
    steps: list[dict] = field(default_factory=list)
    total_seconds: float = 0.0

    def record(self, trace: PicardTrace, delta: float, accepted: bool) -> None:
        self.steps.append({
            "alpha": trace.alpha,
            "delta": delta,
            "accepted": accepted,
            "iterations": trace.iterations,
            "final_distance": trace.distances[-1] if trace.distances else None,
            "ratios": trace.ratios,
            "distances": trace.distances,
            "seconds": trace.seconds,
            "error": trace.error,
        })

    @property
    def final_alpha(self) -> float:
        acc = [s["alpha"] for s in self.steps if s["accepted"]]
        return acc[-1] if acc else float("nan")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=_json_default)

    def trace_rows(self):
        """Rows ``(alpha, iter, m2_dist, ratio, seconds)`` for every recorded iteration."""
        for s in self.steps:
            for i, (d, r, sec) in enumerate(zip(s["distances"], s["ratios"], s["seconds"]), start=1):
                yield s["alpha"], i, d, r, sec


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def continuation_ladder(ctx: StepContext, config: ContinuationConfig, start: EnsembleProcess | None = None):
    """Advance alpha from 0 to 1; returns ``(solution at alpha = 1, diagnostics)``.

    On NON_CONTRACTION the step is rejected and delta shrinks; below
    ``min_delta`` the ladder stalls.
    """
    t0 = time.perf_counter()
    diag = LadderDiagnostics(ctx.case)
    spec = ctx.coeffs.spec
    zero = EnsembleProcess.zeros(spec, ctx.noise.grid, ctx.noise.n_paths)
    cur, trace = picard_solve(ctx, 0.0, zero if start is None else start, config)
    diag.record(trace, 0.0, True)
    alpha, delta = 0.0, config.delta
    while alpha < 1.0:
        nxt = 1.0 if alpha + delta >= 1.0 - 1e-12 else alpha + delta
        try:
            sol, trace = picard_solve(ctx, nxt, cur if config.warm_start else zero, config)
        except NonContractionError as err:
            diag.record(err.trace, delta, False)
            delta *= config.shrink
            if delta < config.min_delta * (1 - 1e-12):
                diag.total_seconds = time.perf_counter() - t0
                raise LadderStalledError(
                    f"delta fell below {config.min_delta:g} at alpha={alpha:.6g}", diag
                ) from err
            continue
        except MaxIterError as err:
            diag.record(err.trace, delta, False)
            diag.total_seconds = time.perf_counter() - t0
            err.diagnostics = diag
            raise
        diag.record(trace, delta, True)
        alpha, cur = nxt, sol
    diag.total_seconds = time.perf_counter() - t0
    return cur, diag


def contraction_probe(ctx: StepContext, alpha: float, bar: EnsembleProcess, bar_prime: EnsembleProcess) -> float:
    """Squared-distance quotient ``|I(a) - I(b)|^2 / |a - b|^2`` on M^2 x L^2(F_T)."""
    den = sq_distance(bar, bar_prime)
    if not den > 0:
        raise ValueError("probe points coincide")
    return sq_distance(picard_step(ctx, alpha, bar), picard_step(ctx, alpha, bar_prime)) / den


def random_start(spec, noise: NoiseBundle, seed: int = 0, scale: float = 1.0) -> EnsembleProcess:
    """An adapted random iterate: each coordinate an affine function of the
    node levels ``W_t``, ``N~_t`` and ``B_T - B_t`` with Gaussian weights."""
    rng = np.random.default_rng(seed)
    feats = np.concatenate(
        [np.ones(noise.W_levels().shape[:2] + (1,)), noise.W_levels(), noise.N_tilde_levels(),
         noise.B_backward_levels()], axis=2
    )
    D = spec.stacked_dim
    weights = rng.standard_normal((feats.shape[2], D)) * scale
    return EnsembleProcess(noise.grid, StateQuintuple.unstack(feats @ weights, spec), spec.markspace)


def deterministic_start(spec, noise: NoiseBundle, path_fn) -> EnsembleProcess:
    """Broadcast a function ``t -> StateQuintuple`` over every path."""
    v = path_fn(noise.grid.nodes)
    P = noise.n_paths
    vals = StateQuintuple(*(np.broadcast_to(a, (P,) + a.shape).copy() for a in v.components()))
    return EnsembleProcess(noise.grid, vals, spec.markspace)


class ContinuationSolver(BaseEstimator):
    """Estimator-style wrapper around the ladder.

    ``fit(noise)`` runs the ladder from alpha = 0 and stores ``solution_``
    (an EnsembleProcess at alpha = 1), ``diagnostics_`` and ``case_``.
    """

    def __init__(self, coefficients=None, x=None, case="auto", delta=0.25, shrink=0.5, min_delta=1 / 64,
                 picard_tol=1e-4, picard_max_iter=50, relaxation=0.5, degree=2, max_interaction=None,
                 ridge=None, constants=None):
        self.coefficients = coefficients
        self.x = x
        self.case = case
        self.delta = delta
        self.shrink = shrink
        self.min_delta = min_delta
        self.picard_tol = picard_tol
        self.picard_max_iter = picard_max_iter
        self.relaxation = relaxation
        self.degree = degree
        self.max_interaction = max_interaction
        self.ridge = ridge
        self.constants = constants

    def config(self) -> ContinuationConfig:
        return ContinuationConfig(
            case=self.case, delta=self.delta, shrink=self.shrink, min_delta=self.min_delta,
            picard_tol=self.picard_tol, picard_max_iter=self.picard_max_iter, relaxation=self.relaxation,
            basis=RegressionBasis(self.degree, self.max_interaction, self.ridge),
        )

    def context(self, noise: NoiseBundle, pert=None) -> StepContext:
        if self.coefficients is None:
            raise ConfigurationError("no coefficients given")
        cfg = self.config()
        return StepContext.build(self.coefficients, noise, self.x, cfg.case, self.constants, pert, cfg.basis)

    def fit(self, noise: NoiseBundle, pert=None):
        ctx = self.context(noise, pert)
        self.context_ = ctx
        self.case_ = ctx.case
        self.solution_, self.diagnostics_ = continuation_ladder(ctx, self.config())
        return self
