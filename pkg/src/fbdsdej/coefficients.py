"""Problem coefficients (b, sigma, phi, f, g, h), their aggregate A, and built-in instances."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .spaces import DimensionError, DriverQuintuple, MarkSpace, ProblemSpec, StateQuintuple

DIRECTIONS = ("A1/A2", "A1'/A2'")

Evaluator = Callable[[np.ndarray, StateQuintuple], np.ndarray]


class CoefficientError(ValueError):
    """An evaluator produced non-finite output or the wrong shape."""


@dataclass(frozen=True)
class MonotoneConstants:
    theta1: float
    theta2: float
    beta: float
    c: float = 1.0
    gamma: float = 0.5
    direction: str = "A1/A2"

    def __post_init__(self):
        for name in ("theta1", "theta2", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")

    def requirement_violations(self) -> list[str]:
        out = []
        if not self.theta1 + self.theta2 > 0:
            out.append("theta1 + theta2 > 0")
        if not self.theta2 + self.beta > 0:
            out.append("theta2 + beta > 0")
        if not self.c > 0:
            out.append("c > 0")
        if not 0 < self.gamma < 1:
            out.append("0 < gamma < 1")
        return out


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """Markovian coefficient maps, vectorised over leading batch dimensions.

    ``phi(t, v)`` returns every mark at once, shape ``(..., m, d_H)``; ``t`` is
    broadcast against the batch shape of ``v``.
    """

    spec: ProblemSpec
    b: Evaluator
    sigma: Evaluator
    phi: Evaluator
    f: Evaluator
    g: Evaluator
    h: Callable[[np.ndarray], np.ndarray]
    declared_constants: MonotoneConstants | None = None
    name: str = "custom"
    linear: bool = False


def _time_like(t, batch_shape):
    t = np.asarray(t, dtype=float)
    return np.broadcast_to(t, batch_shape) if t.ndim else t


def eval_A(coeffs: CoefficientSet, t, v: StateQuintuple) -> DriverQuintuple:
    """A(t, v) = (f, b, g, sigma, phi)(t, v), in that order."""
    spec = coeffs.spec
    v.check(spec)
    batch = v.batch_shape
    t = _time_like(t, batch)
    if np.any(t < -1e-12) or np.any(t > spec.T * (1 + 1e-12)):
        raise ValueError("t outside [0, T]")
    shapes = spec.component_shapes()
    out = []
    for name, key in (("f", "y"), ("b", "y"), ("g", "z"), ("sigma", "Z"), ("phi", "k")):
        val = np.asarray(getattr(coeffs, name)(t, v), dtype=float)
        val = np.broadcast_to(val, batch + shapes[key])
        if not np.all(np.isfinite(val)):
            raise CoefficientError(f"{coeffs.name}: evaluator {name} returned non-finite values")
        out.append(val)
    return DriverQuintuple(*out)


def eval_h(coeffs: CoefficientSet, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    val = np.broadcast_to(np.asarray(coeffs.h(y), dtype=float), y.shape)
    if not np.all(np.isfinite(val)):
        raise CoefficientError(f"{coeffs.name}: terminal map h returned non-finite values")
    return val


@dataclass(frozen=True, eq=False)
class AffinePerturbation:
    """Grid processes added to the continuation family, plus the terminal offset.

    Node-indexed arrays broadcast over ``(n_paths, N + 1)``; ``phi_T`` is either
    an array broadcastable to ``(n_paths, d_H)`` or a callable of the noise
    bundle returning one.
    """

    b0: np.ndarray
    f0: np.ndarray
    sigma0: np.ndarray
    g0: np.ndarray
    phi0: np.ndarray
    phi_T: np.ndarray | Callable = field(default_factory=lambda: np.zeros(1))

    @classmethod
    def zeros(cls, spec: ProblemSpec, phi_T=None) -> "AffinePerturbation":
        d, d1, d2, m = spec.d_H, spec.d_E1, spec.d_E2, spec.m
        return cls(
            b0=np.zeros((1, 1, d)),
            f0=np.zeros((1, 1, d)),
            sigma0=np.zeros((1, 1, d, d1)),
            g0=np.zeros((1, 1, d, d2)),
            phi0=np.zeros((1, 1, m, d)),
            phi_T=np.zeros((1, d)) if phi_T is None else phi_T,
        )

    def terminal(self, noise, n_paths: int, d_H: int) -> np.ndarray:
        val = self.phi_T(noise) if callable(self.phi_T) else self.phi_T
        val = np.asarray(val, dtype=float)
        if val.ndim == 1:
            val = val[None, :]
        return np.broadcast_to(val, (n_paths, d_H))

    def m2_sq_norm(self, grid, markspace: MarkSpace) -> float:
        """E int_0^T of the perturbation quintuple's squared norm (left Riemann)."""
        parts = (self.f0, self.b0, self.g0, self.sigma0)
        tot = 0.0
        for a in parts:
            a = np.asarray(a)
            nodes = np.broadcast_to(a, (a.shape[0], grid.N + 1) + a.shape[2:])[:, :-1]
            tot += float(np.mean(np.sum(nodes.reshape(nodes.shape[0], grid.N, -1) ** 2, axis=(1, 2))))
        k = np.asarray(self.phi0)
        k = np.broadcast_to(k, (k.shape[0], grid.N + 1) + k.shape[2:])[:, :-1]
        tot += float(np.mean(np.sum(markspace.weight_array * np.sum(k * k, axis=-1), axis=(1, 2))))
        return tot * grid.dt


# --- built-in problems ------------------------------------------------------


def _example1(d_H=1, d_E=1, weights=(1.0,), T=1.0, x=None) -> CoefficientSet:
    spec = ProblemSpec(d_H, d_E, d_E, T, x, MarkSpace(tuple(weights)))
    # signs read from the system of equations (f = -y, g = -(z + Z/4))
    return CoefficientSet(
        spec=spec,
        b=lambda t, v: -v.Y,
        sigma=lambda t, v: 0.25 * (v.z - v.Z),
        phi=lambda t, v: -0.25 * v.k,
        f=lambda t, v: -v.y,
        g=lambda t, v: -(v.z + 0.25 * v.Z),
        h=lambda y: y,
        declared_constants=MonotoneConstants(theta1=0.25, theta2=0.25, beta=1.0, c=1.0, gamma=0.25),
        name="example1",
        linear=True,
    )


EXAMPLE2_T = 3 * np.pi / 4


def _example2(T=EXAMPLE2_T, x=None) -> CoefficientSet:
    spec = ProblemSpec(1, 1, 1, T, x, MarkSpace((1.0,)))
    zero = lambda t, v: np.zeros_like(v.Z)  # noqa: E731
    return CoefficientSet(
        spec=spec,
        b=lambda t, v: v.Y,
        sigma=zero,
        phi=lambda t, v: np.zeros_like(v.k),
        f=lambda t, v: -v.y,
        g=lambda t, v: -v.z,
        h=lambda y: -y,
        declared_constants=None,
        name="example2",
        linear=True,
    )


def example2_closed_forms(spec: ProblemSpec):
    """The trivial solution and (sin t, cos t, 0, 0, 0)."""

    def trivial(t):
        t = np.asarray(t, dtype=float)
        return StateQuintuple.zeros(spec, t.shape)

    def oscillating(t):
        t = np.asarray(t, dtype=float)
        v = StateQuintuple.zeros(spec, t.shape)
        return StateQuintuple(np.sin(t)[..., None], np.cos(t)[..., None], v.z, v.Z, v.k)

    return trivial, oscillating


def _decoupled(spec: ProblemSpec, theta1: float, pert: AffinePerturbation | None = None):
    """alpha = 0 member of the continuation family: b = sigma = phi = 0, f = -theta1 y, g = -theta1 z, h = id."""
    if theta1 < 0:
        raise ValueError("theta1 must be nonnegative")
    coeffs = CoefficientSet(
        spec=spec,
        b=lambda t, v: np.zeros_like(v.y),
        sigma=lambda t, v: np.zeros_like(v.Z),
        phi=lambda t, v: np.zeros_like(v.k),
        f=lambda t, v: -theta1 * v.y,
        g=lambda t, v: -theta1 * v.z,
        h=lambda y: y,
        declared_constants=None,
        name="decoupled",
        linear=True,
    )
    pert = AffinePerturbation.zeros(spec) if pert is None else pert
    closed = None
    if _is_deterministic_constant_phi_T(pert) and _all_zero(pert):
        p = np.asarray(pert.phi_T, dtype=float).reshape(-1, spec.d_H)[0]
        x = spec.x

        def closed(t):
            t = np.asarray(t, dtype=float)
            v = StateQuintuple.zeros(spec, t.shape)
            y = np.broadcast_to(x, t.shape + (spec.d_H,))
            Y = x + p + theta1 * x * (spec.T - t)[..., None]
            return StateQuintuple(y, Y, v.z, v.Z, v.k)

    return coeffs, pert, closed


def _all_zero(pert: AffinePerturbation) -> bool:
    return all(not np.any(np.asarray(a)) for a in (pert.b0, pert.f0, pert.sigma0, pert.g0, pert.phi0))


def _is_deterministic_constant_phi_T(pert: AffinePerturbation) -> bool:
    if callable(pert.phi_T):
        return False
    a = np.asarray(pert.phi_T)
    return a.ndim <= 1 or a.shape[0] == 1


def builtin(name: str, **params):
    """Return ``(coeffs, perturbation or None, closed forms or None)``.

    ``example1`` takes ``d_H``, ``d_E``, ``weights``, ``T``, ``x``; its closed
    form (the zero solution) is returned only for ``x = 0``.
    ``example2`` takes ``T`` and ``x`` only (dimensions are fixed to 1).
    ``decoupled`` takes ``spec``, ``theta1`` and optionally ``pert``.
    """
    if name == "example1":
        coeffs = _example1(**params)
        if np.any(coeffs.spec.x):
            return coeffs, None, None
        # zero data: the unique solution is identically zero
        return coeffs, None, example2_closed_forms(coeffs.spec)[0]
    if name == "example2":
        bad = {k for k in params if k not in ("T", "x")}
        if bad or any(params.get(k, 1) != 1 for k in ("d_H", "d_E", "d_E1", "d_E2")):
            raise DimensionError(f"example2 has fixed dimensions d_H = d_E1 = d_E2 = 1; got {sorted(bad)}")
        coeffs = _example2(**params)
        return coeffs, None, example2_closed_forms(coeffs.spec)
    if name == "decoupled":
        coeffs, pert, closed = _decoupled(**params)
        return coeffs, pert, closed
    raise KeyError(f"unknown builtin problem {name!r}")


# --- linear problems defined by matrices -------------------------------------

_OUT_KEYS = {"b": "y", "sigma": "Z", "phi": "k", "f": "y", "g": "z"}


def linear_coefficients(spec: ProblemSpec, definition: dict, name: str = "linear") -> CoefficientSet:
    """Coefficients ``M @ stack(v) + offset`` on the stacked coordinates (y, Y, vec z, vec Z, vec k).

    ``definition[key] = {"matrix": [[...]], "offset": [...]}`` for key in
    b, sigma, phi, f, g (rows = flattened output size) and h (d_H x d_H
    acting on y). Missing keys are zero maps.
    """
    D = spec.stacked_dim
    shapes = spec.component_shapes()
    maps = {}
    for key, out in _OUT_KEYS.items():
        size = int(np.prod(shapes[out]))
        entry = definition.get(key, {}) or {}
        M = np.asarray(entry.get("matrix", np.zeros((size, D))), dtype=float)
        if M.shape != (size, D):
            raise DimensionError(f"{key}: matrix must be {size} x {D}, got {M.shape}")
        c = np.asarray(entry.get("offset", np.zeros(size)), dtype=float).reshape(size)
        maps[key] = (M, c, shapes[out])
    h_entry = definition.get("h", {}) or {}
    Hm = np.asarray(h_entry.get("matrix", np.eye(spec.d_H)), dtype=float).reshape(spec.d_H, spec.d_H)
    hc = np.asarray(h_entry.get("offset", np.zeros(spec.d_H)), dtype=float).reshape(spec.d_H)

    def make(key):
        M, c, shape = maps[key]

        def ev(t, v):
            s = v.stack()
            return (s @ M.T + c).reshape(s.shape[:-1] + shape)

        return ev

    consts = definition.get("constants")
    declared = MonotoneConstants(**consts) if consts else None
    return CoefficientSet(
        spec=spec,
        b=make("b"),
        sigma=make("sigma"),
        phi=make("phi"),
        f=make("f"),
        g=make("g"),
        h=lambda y: y @ Hm.T + hc,
        declared_constants=declared,
        name=name,
        linear=True,
    )


def load_problem_file(path: str | Path, T: float | None = None, x=None) -> CoefficientSet:
    """Read a linear-matrix problem definition (JSON)."""
    data = json.loads(Path(path).read_text())
    return problem_from_dict(data, T=T, x=x)


def problem_from_dict(data: dict, T: float | None = None, x=None) -> CoefficientSet:
    allowed = {"name", "d_H", "d_E1", "d_E2", "T", "x", "mark_weights", "b", "sigma", "phi", "f", "g", "h", "constants"}
    unknown = set(data) - allowed
    if unknown:
        raise ValueError(f"unknown problem keys: {sorted(unknown)}")
    spec = ProblemSpec(
        d_H=data.get("d_H", 1),
        d_E1=data.get("d_E1", 1),
        d_E2=data.get("d_E2", 1),
        T=T if T is not None else data.get("T", 1.0),
        x=x if x is not None else data.get("x"),
        markspace=MarkSpace(tuple(data.get("mark_weights", (1.0,)))),
    )
    return linear_coefficients(spec, data, name=data.get("name", "linear"))
