"""Residuals of the integral equations, closed-form comparison and uniqueness checks.

The residual evaluator uses the same sums as the scheme (left nodes for
``dt`` and ``dW``, right nodes for ``dB``, left nodes for jumps), so a grid
solution of the discrete equations has residual exactly zero.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .coefficients import AffinePerturbation, CoefficientSet, eval_A, eval_h
from .continuation import ContinuationConfig, SolverFailure, StepContext, distance, picard_solve
from .noise import NoiseBundle, backward_ito_terms, compensated_jump_terms, forward_ito_terms
from .spaces import DimensionError, EnsembleProcess, quintuple_sq_norm


def _node_l2(defect: np.ndarray) -> np.ndarray:
    """sqrt(E|d_i|^2) per node for defect of shape (P, N+1, d)."""
    return np.sqrt(np.mean(np.sum(defect * defect, axis=-1), axis=0))


def _cum_from_left(terms: np.ndarray) -> np.ndarray:
    """S_i = sum_{j<i} terms_j for i = 0..N."""
    out = np.zeros((terms.shape[0], terms.shape[1] + 1) + terms.shape[2:])
    np.cumsum(terms, axis=1, out=out[:, 1:])
    return out


def _cum_to_right(terms: np.ndarray) -> np.ndarray:
    """R_i = sum_{j>=i} terms_j for i = 0..N (R_N = 0)."""
    total = _cum_from_left(terms)
    return total[:, -1:] - total


@dataclass
class ResidualReport:
    t: np.ndarray
    forward_residual: np.ndarray
    backward_residual: np.ndarray
    terminal_defect: float
    n_paths: int
    N: int
    T: float

    @property
    def forward_sup(self) -> float:
        return float(np.max(self.forward_residual))

    @property
    def backward_sup(self) -> float:
        return float(np.max(self.backward_residual))

    @property
    def sup(self) -> float:
        return max(self.forward_sup, self.backward_sup)

    def to_dict(self) -> dict:
        return {
            "forward_sup": self.forward_sup,
            "backward_sup": self.backward_sup,
            "terminal_defect": self.terminal_defect,
            "n_paths": self.n_paths,
            "N": self.N,
            "T": self.T,
            "t": self.t.tolist(),
            "forward_residual": self.forward_residual.tolist(),
            "backward_residual": self.backward_residual.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def write_csv(self, path, extra_header: list[str] | None = None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for line in extra_header or []:
                fh.write(f"# {line}\n")
            w.writerow(["t", "fwd_res", "bwd_res"])
            for row in zip(self.t, self.forward_residual, self.backward_residual):
                w.writerow([repr(float(v)) for v in row])


def _stochastic_terms(noise, sigma, z, phi, Z, g, k, P, N, d):
    if noise is None:
        if any(np.any(a) for a in (sigma, z, phi, Z, g, k)):
            raise ValueError("noise is required when any stochastic integrand is nonzero")
        zero = np.zeros((P, N, d))
        return zero, zero, zero, zero, zero, zero
    return (
        forward_ito_terms(sigma, noise.dW),
        backward_ito_terms(z, noise.dB),
        compensated_jump_terms(phi, noise),
        forward_ito_terms(Z, noise.dW),
        backward_ito_terms(g, noise.dB),
        compensated_jump_terms(k, noise),
    )


def residual_report(coeffs: CoefficientSet, ens: EnsembleProcess, noise: NoiseBundle | None, x=None,
                    pert: AffinePerturbation | None = None) -> ResidualReport:
    """Per-node L2 defects of both integral equations on the ensemble's grid.

    ``noise=None`` is allowed when every stochastic integrand vanishes.
    ``pert`` adds affine source terms and a terminal offset to the coefficients.
    """
    grid = ens.grid
    if noise is not None and (noise.grid != grid or noise.n_paths != ens.n_paths):
        raise DimensionError("solution and noise live on different grids or path sets")
    x = coeffs.spec.x if x is None else np.asarray(x, dtype=float)
    v = ens.values
    P, N, dt = ens.n_paths, grid.N, grid.dt
    d = v.y.shape[-1]
    A = eval_A(coeffs, grid.nodes, v)
    f, b, g, sigma, phi = A.f, A.b, A.g, A.sigma, A.phi
    hT = eval_h(coeffs, v.y[:, -1])
    if pert is not None:
        f, b, g = f + pert.f0, b + pert.b0, g + pert.g0
        sigma, phi = sigma + pert.sigma0, phi + pert.phi0
        hT = hT + pert.terminal(noise, P, d)
    s_W, s_B, s_N, S_W, S_B, S_N = _stochastic_terms(noise, sigma, v.z, phi, v.Z, g, v.k, P, N, d)

    fwd = x + _cum_from_left(b[:, :-1] * dt + s_W - s_B + s_N)
    bwd = hT[:, None, :] - _cum_to_right(f[:, :-1] * dt + S_W + S_B + S_N)
    term = v.Y[:, -1] - hT
    return ResidualReport(
        t=grid.nodes,
        forward_residual=_node_l2(v.y - fwd),
        backward_residual=_node_l2(v.Y - bwd),
        terminal_defect=float(np.sqrt(np.mean(np.sum(term * term, axis=-1)))),
        n_paths=P,
        N=N,
        T=grid.T,
    )


@dataclass
class ClosedFormError:
    """``sup``: max over nodes of the L2-over-paths distance; ``l2``: its RMS
    over time; ``m2``: the M^2 distance; ``per_component``: sup per component."""

    sup: float
    l2: float
    m2: float
    per_component: dict[str, float] = field(default_factory=dict)

    def __iter__(self):
        yield self.sup
        yield self.l2


def closed_form_error(ens: EnsembleProcess, analytic) -> ClosedFormError:
    """Compare with ``analytic: t -> StateQuintuple`` sampled on the grid."""
    ref = analytic(ens.grid.nodes)
    diff = ens.values - type(ens.values)(*(np.broadcast_to(a, b.shape) for a, b in zip(ref.components(), ens.values.components())))
    sq = quintuple_sq_norm(diff, ens.markspace)  # (P, N+1)
    node = np.sqrt(np.mean(sq, axis=0))
    dt = ens.grid.dt
    m2 = float(np.sqrt(np.mean(np.sum(sq[:, :-1], axis=1)) * dt))
    w = ens.markspace.weight_array
    per = {}
    for name, a in zip(diff._names, diff.components()):
        if name == "k":
            c = np.sum(w * np.sum(a * a, axis=-1), axis=-1)
        else:
            c = np.sum(a.reshape(a.shape[:2] + (-1,)) ** 2, axis=-1)
        per[name] = float(np.max(np.sqrt(np.mean(c, axis=0))))
    return ClosedFormError(float(np.max(node)), float(m2 / np.sqrt(ens.grid.T)), m2, per)


class UniquenessProbeError(SolverFailure):
    """A start failed to converge; ``code`` and ``trace`` come from the underlying failure."""

    def __init__(self, label: str, cause: SolverFailure):
        self.code = cause.code
        super().__init__(f"start {label!r}: {cause}", cause.trace)
        self.label = label
        self.cause = cause


def uniqueness_probe(ctx: StepContext, config: ContinuationConfig, starts, labels=("first", "second")):
    """Picard-solve at alpha = 1 from each start on the same noise; return the
    M^2 x L^2(F_T) distance between the limits and the two solutions."""
    a, b = starts
    sols = []
    for label, start in zip(labels, (a, b)):
        try:
            sol, _ = picard_solve(ctx, 1.0, start, config)
        except SolverFailure as err:
            raise UniquenessProbeError(label, err) from err
        sols.append(sol)
    return distance(*sols), sols
