import numpy as np
import pytest
from sklearn.base import clone

from fbdsdej.coefficients import MonotoneConstants, builtin, problem_from_dict
from fbdsdej.continuation import (
    ConfigurationError,
    ContinuationConfig,
    ContinuationSolver,
    LadderStalledError,
    MaxIterError,
    NonContractionError,
    SolverFailure,
    StepContext,
    continuation_ladder,
    contraction_probe,
    distance,
    picard_solve,
    picard_step,
    random_start,
    select_case,
)
from fbdsdej.noise import TimeGrid, sample_noise
from fbdsdej.spaces import EnsembleProcess

TOL = 1e-5


@pytest.fixture(scope="module")
def ex1_x1():
    coeffs, _, _ = builtin("example1", x=np.ones(1))
    noise = sample_noise(11, 4000, TimeGrid(1.0, 20), coeffs.spec)
    return coeffs, noise


@pytest.fixture(scope="module")
def ladder_case1(ex1_x1):
    coeffs, noise = ex1_x1
    ctx = StepContext.build(coeffs, noise, case="case1")
    cfg = ContinuationConfig(picard_tol=TOL, picard_max_iter=300)
    sol, diag = continuation_ladder(ctx, cfg)
    return ctx, cfg, sol, diag


def _eps(sol):
    return TOL * (1 + distance(sol, sol * 0.0))


def test_select_case():
    assert select_case(MonotoneConstants(0.25, 0.25, 1.0)) == "case1"
    assert select_case(MonotoneConstants(0.0, 0.3, 0.0)) == "case2"
    assert select_case(MonotoneConstants(0.3, 0.2, 0.0)) == "case2"
    with pytest.raises(ConfigurationError, match="theta2"):
        select_case(MonotoneConstants(0.3, 0.0, 0.0))


def test_auto_case_needs_constants(example2):
    noise = sample_noise(0, 200, TimeGrid(1.0, 4), example2[0].spec)
    with pytest.raises(ConfigurationError):
        StepContext.build(example2[0], noise)


@pytest.mark.parametrize("kw", [{"delta": 0.0}, {"shrink": 1.0}, {"min_delta": 0.5, "delta": 0.25},
                                {"picard_tol": 0.0}, {"relaxation": 0.0}, {"case": "case3"}])
def test_config_validation(kw):
    with pytest.raises(ConfigurationError):
        ContinuationConfig(**kw)


def test_alpha_zero_converges_immediately(ex1_x1):
    coeffs, noise = ex1_x1
    ctx = StepContext.build(coeffs, noise)
    start = random_start(coeffs.spec, noise, seed=1)
    _, trace = picard_solve(ctx, 0.0, start, ContinuationConfig())
    assert trace.converged and trace.iterations <= 2


def test_probe_zero_at_alpha_zero_and_symmetric(ex1_x1):
    coeffs, noise = ex1_x1
    ctx = StepContext.build(coeffs, noise)
    a, b = random_start(coeffs.spec, noise, 1), random_start(coeffs.spec, noise, 2)
    assert contraction_probe(ctx, 0.0, a, b) == 0.0
    assert contraction_probe(ctx, 0.3, a, b) == pytest.approx(contraction_probe(ctx, 0.3, b, a), rel=1e-12)
    with pytest.raises(ValueError):
        contraction_probe(ctx, 0.3, a, a)


def test_quarter_step_from_trivial_start(ex1_x1):
    coeffs, noise = ex1_x1
    ctx = StepContext.build(coeffs, noise)
    zero = EnsembleProcess.zeros(coeffs.spec, noise.grid, noise.n_paths)
    _, trace = picard_solve(ctx, 0.25, zero, ContinuationConfig(picard_tol=1e-4))
    assert trace.converged and trace.iterations <= 30


def test_ladder_reaches_one(ladder_case1):
    _, _, _, diag = ladder_case1
    assert diag.final_alpha == 1.0
    assert [s["alpha"] for s in diag.steps] == [0.0, 0.25, 0.5, 0.75, 1.0]
    rows = list(diag.trace_rows())
    assert rows[0][:2] == (0.0, 1)
    assert diag.to_json().startswith("{")


def test_fixed_point_residual(ladder_case1):
    ctx, _, sol, _ = ladder_case1
    assert distance(picard_step(ctx, 1.0, sol), sol) <= 2 * _eps(sol)


def test_terminal_consistency(ladder_case1):
    _, _, sol, _ = ladder_case1
    v = sol.values
    # h is the identity for this problem
    assert np.sqrt(np.mean((v.Y[:, -1] - v.y[:, -1]) ** 2)) < 1e-12


def test_case_symmetry(ex1_x1, ladder_case1):
    coeffs, noise = ex1_x1
    _, cfg, sol1, _ = ladder_case1
    sol2, diag = continuation_ladder(StepContext.build(coeffs, noise, case="case2"), cfg)
    assert diag.case == "case2"
    assert distance(sol1, sol2) <= 5 * (_eps(sol1) + _eps(sol2))


def test_warm_start_consistency(ex1_x1, ladder_case1):
    ctx, cfg, sol, _ = ladder_case1
    half = ContinuationConfig(delta=0.125, min_delta=1 / 64, picard_tol=TOL, picard_max_iter=300)
    sol_half, diag = continuation_ladder(ctx, half)
    assert len(diag.steps) == 9
    assert distance(sol, sol_half) <= 5 * 2 * _eps(sol)


def test_full_step_schedule_completes(ex1_x1):
    coeffs, noise = ex1_x1
    ctx = StepContext.build(coeffs, noise)
    sol, diag = continuation_ladder(ctx, ContinuationConfig(delta=1.0, picard_tol=TOL, picard_max_iter=300))
    assert diag.final_alpha == 1.0


def test_non_contraction_shrinks_delta_then_stalls():
    # y_T = 1 + 4 alpha Y, Y = 4 y_T: plain Picard has gain 16 alpha, expansive for alpha >= 1/2
    coeffs = problem_from_dict({"b": {"matrix": [[0, 4, 0, 0, 0]]}, "h": {"matrix": [[4]]}, "x": [1.0]})
    noise = sample_noise(1, 500, TimeGrid(1.0, 10), coeffs.spec)
    ctx = StepContext.build(coeffs, noise, case="case1")
    with pytest.raises(LadderStalledError) as info:
        continuation_ladder(ctx, ContinuationConfig(delta=1.0, min_delta=0.5, relaxation=1.0))
    steps = info.value.diagnostics.steps
    assert [(s["delta"], s["error"]) for s in steps[1:]] == [(1.0, "NON_CONTRACTION"), (0.5, "NON_CONTRACTION")]
    assert info.value.code == "LADDER_STALLED"


def test_max_iter_reported(ex1_x1):
    coeffs, noise = ex1_x1
    ctx = StepContext.build(coeffs, noise)
    with pytest.raises(MaxIterError) as info:
        continuation_ladder(ctx, ContinuationConfig(picard_tol=1e-14, picard_max_iter=3))
    assert info.value.code == "MAX_ITER"
    assert info.value.diagnostics.steps[-1]["accepted"] is False


def test_example2_nontrivial_start_fails():
    coeffs, _, _ = builtin("example2", x=np.ones(1))
    noise = sample_noise(2, 1000, TimeGrid(coeffs.spec.T, 20), coeffs.spec)
    ctx = StepContext.build(coeffs, noise, case="case1")
    with pytest.raises((NonContractionError, MaxIterError, LadderStalledError)):
        continuation_ladder(ctx, ContinuationConfig(picard_max_iter=60))


def test_estimator_api(ex1_x1):
    coeffs, noise = ex1_x1
    est = ContinuationSolver(coeffs, picard_tol=TOL, picard_max_iter=300, degree=1)
    assert clone(est).get_params()["degree"] == 1
    est.fit(noise)
    assert est.case_ == "case1"
    assert est.diagnostics_.final_alpha == 1.0
    assert est.solution_.n_paths == noise.n_paths


def test_estimator_without_coefficients(small_noise):
    with pytest.raises(ConfigurationError):
        ContinuationSolver().fit(small_noise)
