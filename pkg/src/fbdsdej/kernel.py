"""Linear (frozen-driver) solves by least-squares Monte Carlo.

The forward equation ``dy = beta dt + Sigma dW - z dB<- + Phi dN~`` with
``y_0 = x`` is treated as a backward equation in reversed time: marching
``i -> i + 1`` we project the one-step functional onto information at
``t_{i+1}`` and read ``z_{i+1}`` off its covariation with ``dB_i``.  The
backward equation is solved by the usual backward induction, with ``Z`` and
``k`` from covariations with ``dW_i`` and ``dN~_i``.

Conditional expectations use a ridge-regularised polynomial regression on
node features that are measurable for ``F_t = F^W_t v F^B_{t,T} v F^N_t``:
the levels ``W_t`` and ``N~_t``, the backward level ``B_T - B_t`` and the
increment ``B_{t+dt} - B_t``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .coefficients import AffinePerturbation
from .noise import NoiseBundle, TimeGrid
from .spaces import EnsembleProcess, MarkSpace, StateQuintuple


class RegressionError(RuntimeError):
    pass


class KernelError(RuntimeError):
    """Non-finite state encountered during a frozen-driver solve."""

    def __init__(self, message: str, node: int):
        super().__init__(f"{message} (node {node})")
        self.node = node


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomial basis in the conditioning features.

    ``max_interaction`` caps the number of distinct features in one monomial
    (``None``: no cap).  ``ridge=None`` means ``1e-8 * n_paths``.
    """

    degree: int = 2
    max_interaction: int | None = None
    ridge: float | None = None

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")
        if self.ridge is not None and self.ridge < 0:
            raise ValueError("ridge must be nonnegative")

    def exponents(self, n_features: int) -> np.ndarray:
        """Exponent rows of every non-constant monomial, graded order."""
        rows = []
        for deg in range(1, self.degree + 1):
            for combo in itertools.combinations_with_replacement(range(n_features), deg):
                if self.max_interaction is not None and len(set(combo)) > self.max_interaction:
                    continue
                e = np.zeros(n_features, dtype=int)
                for j in combo:
                    e[j] += 1
                rows.append(e)
        return np.array(rows, dtype=int).reshape(-1, n_features)

    def size(self, n_features: int) -> int:
        """Number of basis functions, constant included."""
        return 1 + len(self.exponents(n_features))

    def ridge_for(self, n_paths: int) -> float:
        return 1e-8 * n_paths if self.ridge is None else float(self.ridge)


def _monomials(Xs: np.ndarray, exps: np.ndarray) -> np.ndarray:
    if exps.shape[0] == 0:
        return np.empty((Xs.shape[0], 0))
    max_deg = int(exps.max())
    powers = [np.ones_like(Xs)]
    for _ in range(max_deg):
        powers.append(powers[-1] * Xs)
    out = np.ones((Xs.shape[0], exps.shape[0]))
    for r, e in enumerate(exps):
        for j in np.flatnonzero(e):
            out[:, r] *= powers[e[j]][:, j]
    return out


class _Projector:
    """Least-squares projection onto span{1, monomials(features)} for one cross-section."""

    def __init__(self, X: np.ndarray, basis: RegressionBasis):
        n = X.shape[0]
        mu = X.mean(axis=0)
        sd = X.std(axis=0)
        keep = sd > 1e-300 * (1.0 + np.abs(mu))
        self.keep = keep
        self.mu = mu[keep]
        self.sd = sd[keep]
        self.exps = basis.exponents(int(keep.sum()))
        p = 1 + self.exps.shape[0]
        if p > max(1, n // 10):
            raise ValueError(f"basis size {p} exceeds n_paths / 10 = {n // 10}; use fewer features or more paths")
        Phi = _monomials((X[:, keep] - self.mu) / self.sd, self.exps)
        self.col_mean = Phi.mean(axis=0)
        self.Phi = Phi - self.col_mean
        self.ridge = basis.ridge_for(n)
        G = self.Phi.T @ self.Phi
        if G.size:
            G[np.diag_indices_from(G)] += self.ridge
            try:
                self.chol = linalg.cho_factor(G, lower=True, check_finite=False)
            except linalg.LinAlgError:
                raise RegressionError("normal equations are singular; use a positive ridge parameter") from None
            ev = np.linalg.eigvalsh(G)
            self.condition = float(ev[-1] / ev[0]) if ev[0] > 0 else np.inf
            if self.ridge == 0 and (ev[0] <= 0 or self.condition > 1e12):
                raise RegressionError(
                    f"rank-deficient normal equations (condition {self.condition:.3g}); set ridge > 0"
                )
        else:
            self.chol = None
            self.condition = 1.0

    @property
    def size(self) -> int:
        return 1 + self.Phi.shape[1]

    def coefficients(self, targets: np.ndarray):
        mean = targets.mean(axis=0)
        if self.chol is None:
            return mean, np.zeros((0, targets.shape[1]))
        beta = linalg.cho_solve(self.chol, self.Phi.T @ (targets - mean), check_finite=False)
        return mean, beta

    def project(self, targets: np.ndarray) -> np.ndarray:
        """Fitted values for the training cross-section; targets (n, q)."""
        targets = np.asarray(targets, dtype=float)
        flat = targets.reshape(targets.shape[0], -1)
        const = np.ptp(flat, axis=0) == 0
        mean, beta = self.coefficients(flat)
        fitted = mean + self.Phi @ beta if beta.size else np.broadcast_to(mean, flat.shape).copy()
        fitted[:, const] = flat[:, const]
        return fitted.reshape(targets.shape)

    def design(self, X: np.ndarray) -> np.ndarray:
        Phi = _monomials((X[:, self.keep] - self.mu) / self.sd, self.exps)
        return Phi - self.col_mean


class LSMCRegressor(RegressorMixin, BaseEstimator):
    """Polynomial ridge regression used as a conditional-expectation estimator.

    The intercept is never penalised; features are standardised internally and
    constant features dropped.  Multi-output targets share one factorisation.
    """

    def __init__(self, degree: int = 2, max_interaction: int | None = None, ridge: float | None = None):
        self.degree = degree
        self.max_interaction = max_interaction
        self.ridge = ridge

    def _basis(self) -> RegressionBasis:
        return RegressionBasis(self.degree, self.max_interaction, self.ridge)

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        y2 = y.reshape(y.shape[0], -1)
        proj = _Projector(X, self._basis())
        mean, beta = proj.coefficients(y2)
        self.projector_ = proj
        self.intercept_ = mean - proj.col_mean @ beta if beta.size else mean
        self.coef_ = beta
        self.n_features_in_ = X.shape[1]
        self._y_ndim = y.ndim
        fitted = proj.project(y2)
        self.residual_norm_ = float(np.sqrt(np.mean(np.sum((y2 - fitted) ** 2, axis=1))))
        self.condition_number_ = proj.condition
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        proj = self.projector_
        if self.coef_.size:
            Phi = _monomials((X[:, proj.keep] - proj.mu) / proj.sd, proj.exps)
            out = self.intercept_ + Phi @ self.coef_
        else:
            out = np.broadcast_to(self.intercept_, (X.shape[0], self.intercept_.size)).copy()
        return out.ravel() if self._y_ndim == 1 else out


def regress_condexp(targets, features, basis: RegressionBasis | None = None):
    """Project per-path ``targets`` onto the basis in ``features``.

    Returns ``(fitted, diagnostics)`` with the residual L2 norm and the
    condition number of the (regularised) normal equations.
    """
    basis = RegressionBasis() if basis is None else basis
    targets = np.asarray(targets, dtype=float)
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features[:, None]
    n = targets.shape[0]
    if features.shape[0] != n:
        raise ValueError("targets and features disagree on the number of paths")
    proj = _Projector(features, basis)
    if n <= proj.size:
        raise ValueError("need more paths than basis functions")
    fitted = proj.project(targets)
    resid = (targets - fitted).reshape(n, -1)
    diag = {
        "residual_norm": float(np.sqrt(np.mean(np.sum(resid**2, axis=1)))),
        "condition_number": proj.condition,
        "basis_size": proj.size,
    }
    return fitted, diag


# --- conditioning features --------------------------------------------------


class ConditioningFeatures:
    """Per-node regression features built from the noise, with cached projectors.

    Node ``i`` features: ``W_{t_i}``, ``N~_{t_i}``, ``B_T - B_{t_i}`` and
    ``dB_i`` (zero at the last node).  Projectors are cached while the
    estimated memory stays below ``cache_bytes``.
    """

    def __init__(self, noise: NoiseBundle, basis: RegressionBasis | None = None, cache_bytes: float = 3e8):
        self.noise = noise
        self.basis = RegressionBasis() if basis is None else basis
        dB_node = np.concatenate([noise.dB, np.zeros_like(noise.dB[:, :1])], axis=1)
        self.levels = np.concatenate(
            [noise.W_levels(), noise.N_tilde_levels(), noise.B_backward_levels(), dB_node], axis=2
        )
        n_raw = self.levels.shape[2]
        est = noise.n_paths * self.basis.size(n_raw) * (noise.grid.N + 1) * 8
        self._cache_enabled = est <= cache_bytes
        self._cache: dict[int, _Projector] = {}
        self.conditions: dict[int, float] = {}

    def at(self, i: int, extra: np.ndarray | None = None) -> np.ndarray:
        X = self.levels[:, i]
        return X if extra is None else np.concatenate([X, extra.reshape(X.shape[0], -1)], axis=1)

    def projector(self, i: int, extra: np.ndarray | None = None) -> _Projector:
        if extra is None and i in self._cache:
            return self._cache[i]
        proj = _Projector(self.at(i, extra), self.basis)
        self.conditions[i] = proj.condition
        if extra is None and self._cache_enabled:
            self._cache[i] = proj
        return proj


def _features_for(noise, features, basis):
    if features is None:
        return ConditioningFeatures(noise, basis)
    if features.noise is not noise:
        raise ValueError("conditioning features were built for a different noise bundle")
    return features


# --- frozen drivers ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ForwardDrivers:
    """Known forward right-hand sides, node-indexed (left nodes are used)."""

    drift: np.ndarray  # (P|1, N+1|1, d_H)
    diffusion: np.ndarray  # (P|1, N+1|1, d_H, d_E1)
    jump: np.ndarray  # (P|1, N+1|1, m, d_H)


@dataclass(frozen=True, eq=False)
class BackwardDrivers:
    drift: np.ndarray  # (P|1, N+1|1, d_H), left nodes
    bdiffusion: np.ndarray  # (P|1, N+1|1, d_H, d_E2), right nodes
    terminal: np.ndarray  # (P|1, d_H)


@dataclass(frozen=True, eq=False)
class FrozenDrivers:
    forward: ForwardDrivers | None = None
    backward: BackwardDrivers | None = None


@dataclass
class KernelDiagnostics:
    residuals: list = field(default_factory=list)  # (stage, node, residual L2 norm)

    def record(self, stage: str, node: int, resid: np.ndarray) -> None:
        r = resid.reshape(resid.shape[0], -1)
        self.residuals.append((stage, node, float(np.sqrt(np.mean(np.sum(r * r, axis=1))))))


def _nodes(a, P, N, tail):
    a = np.asarray(a, dtype=float)
    return np.broadcast_to(a, (P, N + 1) + tail)


def _check_finite(a, stage, node):
    if not np.all(np.isfinite(a)):
        raise KernelError(f"non-finite {stage} state", node)


def solve_forward_frozen(
    drivers: ForwardDrivers,
    noise: NoiseBundle,
    x,
    features: ConditioningFeatures | None = None,
    basis: RegressionBasis | None = None,
    diagnostics: KernelDiagnostics | None = None,
):
    """Solve the forward equation with known drivers; returns ``(y, z)`` on nodes 0..N.

    ``z_0`` (never used by a right-endpoint sum) is the projection of ``z_1``
    onto node-0 information.
    """
    feats = _features_for(noise, features, basis)
    grid = noise.grid
    P, N, dt = noise.n_paths, grid.N, grid.dt
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    d2, m = noise.d_E2, noise.markspace.m
    beta = _nodes(drivers.drift, P, N, (d,))
    Sig = _nodes(drivers.diffusion, P, N, (d, noise.d_E1))
    Phi = _nodes(drivers.jump, P, N, (m, d))
    dW, dB, dN = noise.dW, noise.dB, noise.dN_tilde

    y = np.empty((P, N + 1, d))
    z = np.empty((P, N + 1, d, d2))
    y[:, 0] = x
    for i in range(N):
        X = (
            y[:, i]
            + beta[:, i] * dt
            + np.einsum("pde,pe->pd", Sig[:, i], dW[:, i])
            + np.einsum("pjd,pj->pd", Phi[:, i], dN[:, i])
        )
        proj = feats.projector(i + 1)
        y[:, i + 1] = proj.project(X)
        R = X - y[:, i + 1]
        z[:, i + 1] = proj.project(R[:, :, None] * dB[:, i, None, :] / dt)
        _check_finite(y[:, i + 1], "forward", i + 1)
        _check_finite(z[:, i + 1], "forward", i + 1)
        if diagnostics is not None:
            diagnostics.record("forward", i + 1, R[:, :, None] - z[:, i + 1] * dB[:, i, None, :])
    z[:, 0] = feats.projector(0).project(z[:, 1])
    return y, z


def solve_backward_frozen(
    drivers: BackwardDrivers,
    noise: NoiseBundle,
    features: ConditioningFeatures | None = None,
    basis: RegressionBasis | None = None,
    diagnostics: KernelDiagnostics | None = None,
):
    """Backward induction for ``(Y, Z, k)`` with known drivers and per-path terminal.

    ``Z`` and ``k`` are left-indexed; their value at node N repeats node N-1 and
    enters no sum.
    """
    feats = _features_for(noise, features, basis)
    grid = noise.grid
    P, N, dt = noise.n_paths, grid.N, grid.dt
    term = np.asarray(drivers.terminal, dtype=float)
    d = term.shape[-1]
    d1, d2, m = noise.d_E1, noise.d_E2, noise.markspace.m
    F = _nodes(drivers.drift, P, N, (d,))
    G = _nodes(drivers.bdiffusion, P, N, (d, d2))
    w = noise.markspace.weight_array
    dW, dB, dN = noise.dW, noise.dB, noise.dN_tilde

    Y = np.empty((P, N + 1, d))
    Z = np.empty((P, N + 1, d, d1))
    k = np.empty((P, N + 1, m, d))
    Y[:, N] = np.broadcast_to(term, (P, d))
    _check_finite(Y[:, N], "terminal", N)
    nz = d * d1
    for i in range(N - 1, -1, -1):
        target = Y[:, i + 1] - F[:, i] * dt - np.einsum("pde,pe->pd", G[:, i + 1], dB[:, i])
        proj = feats.projector(i)
        Y[:, i] = proj.project(target)
        R = target - Y[:, i]
        Zt = (R[:, :, None] * dW[:, i, None, :] / dt).reshape(P, nz)
        kt = (dN[:, i, :, None] * R[:, None, :] / (w[:, None] * dt)).reshape(P, m * d)
        fit = proj.project(np.concatenate([Zt, kt], axis=1))
        Z[:, i] = fit[:, :nz].reshape(P, d, d1)
        k[:, i] = fit[:, nz:].reshape(P, m, d)
        for a in (Y[:, i], Z[:, i], k[:, i]):
            _check_finite(a, "backward", i)
        if diagnostics is not None:
            mart = np.einsum("pde,pe->pd", Z[:, i], dW[:, i]) + np.einsum("pjd,pj->pd", k[:, i], dN[:, i])
            diagnostics.record("backward", i, R - mart)
    Z[:, N] = Z[:, N - 1]
    k[:, N] = k[:, N - 1]
    return Y, Z, k


def solve_decoupled_34(
    theta1: float,
    pert: AffinePerturbation,
    noise: NoiseBundle,
    x,
    markspace: MarkSpace | None = None,
    features: ConditioningFeatures | None = None,
    basis: RegressionBasis | None = None,
) -> EnsembleProcess:
    """Solve the decoupled system: forward with the perturbations, then
    backward with drift ``-theta1 y + f0``, coefficient ``-theta1 z + g0`` and
    terminal ``y_T + phi_T``."""
    if theta1 < 0:
        raise ValueError("theta1 must be nonnegative")
    feats = _features_for(noise, features, basis)
    P = noise.n_paths
    y, z = solve_forward_frozen(ForwardDrivers(pert.b0, pert.sigma0, pert.phi0), noise, x, feats)
    d = y.shape[-1]
    back = BackwardDrivers(
        drift=-theta1 * y + np.asarray(pert.f0),
        bdiffusion=-theta1 * z + np.asarray(pert.g0),
        terminal=y[:, -1] + pert.terminal(noise, P, d),
    )
    Y, Z, k = solve_backward_frozen(back, noise, feats)
    ms = noise.markspace if markspace is None else markspace
    return EnsembleProcess(noise.grid, StateQuintuple(y, Y, z, Z, k), ms)


def grid_of(noise: NoiseBundle) -> TimeGrid:
    return noise.grid
