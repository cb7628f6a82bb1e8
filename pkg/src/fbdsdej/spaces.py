"""Truncated state spaces, norms and pairings.

Every quintuple stores its components as numpy arrays with arbitrary leading
batch dimensions, so one class represents a single point, a cross-section of
paths, or a full ``(n_paths, N + 1)`` ensemble:

    y, Y : (..., d_H)
    z    : (..., d_H, d_E2)
    Z    : (..., d_H, d_E1)
    k    : (..., m, d_H)       one H-vector per mark
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .noise import TimeGrid


class DimensionError(ValueError):
    """Component shapes do not agree with the problem dimensions."""


@dataclass(frozen=True)
class MarkSpace:
    """Finite mark space: ``m`` atoms with positive characteristic-measure weights."""

    weights: tuple[float, ...] = (1.0,)
    marks: tuple[str, ...] | None = None

    def __post_init__(self):
        w = tuple(float(v) for v in np.atleast_1d(self.weights))
        if len(w) < 1:
            raise ValueError("mark space needs at least one atom")
        if not all(np.isfinite(v) and v > 0 for v in w):
            raise ValueError(f"mark weights must be positive and finite, got {w}")
        object.__setattr__(self, "weights", w)
        if self.marks is None:
            object.__setattr__(self, "marks", tuple(f"rho{j + 1}" for j in range(len(w))))
        elif len(self.marks) != len(w):
            raise ValueError("one identifier per mark weight required")

    @property
    def m(self) -> int:
        return len(self.weights)

    @property
    def weight_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)

    @property
    def total_mass(self) -> float:
        return float(sum(self.weights))


@dataclass(frozen=True)
class ProblemSpec:
    d_H: int = 1
    d_E1: int = 1
    d_E2: int = 1
    T: float = 1.0
    x: np.ndarray | None = None
    markspace: MarkSpace = field(default_factory=MarkSpace)

    def __post_init__(self):
        for name in ("d_H", "d_E1", "d_E2"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if not (np.isfinite(self.T) and self.T > 0):
            raise ValueError(f"T must be positive, got {self.T!r}")
        object.__setattr__(self, "T", float(self.T))
        x = np.zeros(self.d_H) if self.x is None else np.asarray(self.x, dtype=float).reshape(-1)
        if x.shape != (self.d_H,):
            raise DimensionError(f"x must have length d_H={self.d_H}, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("x must be finite")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)

    @property
    def m(self) -> int:
        return self.markspace.m

    @property
    def stacked_dim(self) -> int:
        """Length of the stacked coordinate vector (y, Y, vec z, vec Z, vec k)."""
        d = self.d_H
        return 2 * d + d * self.d_E2 + d * self.d_E1 + self.m * d

    def component_shapes(self) -> dict[str, tuple[int, ...]]:
        d = self.d_H
        return {"y": (d,), "Y": (d,), "z": (d, self.d_E2), "Z": (d, self.d_E1), "k": (self.m, d)}

    def with_x(self, x) -> "ProblemSpec":
        return replace(self, x=np.asarray(x, dtype=float))


class _Quintuple:
    """Shared arithmetic for the two five-component containers."""

    _names: tuple[str, ...] = ()

    def components(self) -> tuple[np.ndarray, ...]:
        return tuple(getattr(self, n) for n in self._names)

    def _combine(self, other, op):
        if type(other) is not type(self):
            return NotImplemented
        return type(self)(*(op(a, b) for a, b in zip(self.components(), other.components())))

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __mul__(self, s):
        return type(self)(*(np.multiply(s, a) for a in self.components()))

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.components()[0].shape[:-1]

    def __getitem__(self, idx):
        """Index the leading batch dimensions of every component."""
        if not isinstance(idx, tuple):
            idx = (idx,)
        return type(self)(*(a[idx] for a in self.components()))

    def check(self, spec: ProblemSpec) -> None:
        shapes = spec.component_shapes()
        batch = None
        for name, key, a in zip(self._names, ("y", "Y", "z", "Z", "k"), self.components()):
            want = shapes[key]
            if a.shape[a.ndim - len(want):] != want:
                raise DimensionError(f"component {name} has shape {a.shape}, expected (..., {want})")
            b = a.shape[: a.ndim - len(want)]
            if batch is None:
                batch = b
            elif b != batch:
                raise DimensionError(f"component {name} batch shape {b} differs from {batch}")

    def copy(self):
        return type(self)(*(np.array(a, copy=True) for a in self.components()))


@dataclass(frozen=True, eq=False)
class StateQuintuple(_Quintuple):
    """One state point (y, Y, z, Z, k), possibly batched."""

    y: np.ndarray
    Y: np.ndarray
    z: np.ndarray
    Z: np.ndarray
    k: np.ndarray

    _names = ("y", "Y", "z", "Z", "k")

    def __post_init__(self):
        for n in self._names:
            object.__setattr__(self, n, np.asarray(getattr(self, n), dtype=float))

    @classmethod
    def zeros(cls, spec: ProblemSpec, batch_shape: tuple[int, ...] = ()) -> "StateQuintuple":
        s = spec.component_shapes()
        return cls(*(np.zeros(batch_shape + s[n]) for n in ("y", "Y", "z", "Z", "k")))

    def as_driver(self) -> "DriverQuintuple":
        """Reinterpret in pairing order: f<-y, b<-Y, g<-z, sigma<-Z, phi<-k."""
        return DriverQuintuple(self.y, self.Y, self.z, self.Z, self.k)

    def stack(self) -> np.ndarray:
        """Flatten into stacked coordinates ``(..., D)``."""
        batch = self.batch_shape
        return np.concatenate([a.reshape(batch + (-1,)) for a in self.components()], axis=-1)

    @classmethod
    def unstack(cls, s: np.ndarray, spec: ProblemSpec) -> "StateQuintuple":
        s = np.asarray(s, dtype=float)
        batch = s.shape[:-1]
        if s.shape[-1] != spec.stacked_dim:
            raise DimensionError(f"stacked vector has length {s.shape[-1]}, expected {spec.stacked_dim}")
        out, pos = [], 0
        for shape in spec.component_shapes().values():
            size = int(np.prod(shape))
            out.append(s[..., pos:pos + size].reshape(batch + shape))
            pos += size
        return cls(*out)


@dataclass(frozen=True, eq=False)
class DriverQuintuple(_Quintuple):
    """Coefficient evaluations A = (f, b, g, sigma, phi), in pairing order."""

    f: np.ndarray
    b: np.ndarray
    g: np.ndarray
    sigma: np.ndarray
    phi: np.ndarray

    _names = ("f", "b", "g", "sigma", "phi")

    def __post_init__(self):
        for n in self._names:
            object.__setattr__(self, n, np.asarray(getattr(self, n), dtype=float))

    def as_state(self) -> StateQuintuple:
        return StateQuintuple(self.f, self.b, self.g, self.sigma, self.phi)


def _inner(a, b, ndim):
    axes = tuple(range(-ndim, 0))
    return np.sum(a * b, axis=axes)


def jump_sq_norm(k, weights) -> np.ndarray:
    """|||k|||^2 = sum_j Pi_j |k_j|^2 for k of shape (..., m, d_H)."""
    k = np.asarray(k, dtype=float)
    return np.sum(np.asarray(weights) * np.sum(k * k, axis=-1), axis=-1)


def jump_inner(k, phi, weights) -> np.ndarray:
    return np.sum(np.asarray(weights) * np.sum(np.asarray(k) * np.asarray(phi), axis=-1), axis=-1)


def quintuple_sq_norm(v: StateQuintuple, markspace: MarkSpace | ProblemSpec) -> np.ndarray:
    """|y|^2 + |Y|^2 + ||z||^2 + ||Z||^2 + |||k|||^2, Frobenius norms for the operators.

    Returns an array over the batch dimensions (a 0-d array for a single point).
    """
    ms = markspace.markspace if isinstance(markspace, ProblemSpec) else markspace
    _check_pair_shapes(v.components(), v.components(), ms)
    return (
        _inner(v.y, v.y, 1)
        + _inner(v.Y, v.Y, 1)
        + _inner(v.z, v.z, 2)
        + _inner(v.Z, v.Z, 2)
        + jump_sq_norm(v.k, ms.weight_array)
    )


def pairing_A(A: DriverQuintuple, v: StateQuintuple, markspace: MarkSpace | ProblemSpec) -> np.ndarray:
    """<y,f> + <Y,b> + <z,g> + <Z,sigma> + sum_j Pi_j <k_j, phi_j>."""
    ms = markspace.markspace if isinstance(markspace, ProblemSpec) else markspace
    _check_pair_shapes(A.components(), v.components(), ms)
    return (
        _inner(v.y, A.f, 1)
        + _inner(v.Y, A.b, 1)
        + _inner(v.z, A.g, 2)
        + _inner(v.Z, A.sigma, 2)
        + jump_inner(v.k, A.phi, ms.weight_array)
    )


def _check_pair_shapes(a_parts, v_parts, ms: MarkSpace) -> None:
    names = ("y", "Y", "z", "Z", "k")
    for name, a, b, nd in zip(names, a_parts, v_parts, (1, 1, 2, 2, 2)):
        if a.shape[-nd:] != b.shape[-nd:]:
            raise DimensionError(f"{name}: component shapes {a.shape} and {b.shape} do not match")
    if a_parts[0].shape[-1] != a_parts[1].shape[-1]:
        raise DimensionError("y and Y must live in the same space H")
    for part in (a_parts[2], a_parts[3]):
        if part.shape[-2] != a_parts[0].shape[-1]:
            raise DimensionError("operator rows must equal d_H")
    if a_parts[4].shape[-2] != ms.m:
        raise DimensionError(f"jump kernel has {a_parts[4].shape[-2]} marks, mark space has {ms.m}")
    if a_parts[4].shape[-1] != a_parts[0].shape[-1]:
        raise DimensionError("jump kernel values must live in H")


@dataclass(frozen=True, eq=False)
class EnsembleProcess:
    """Grid-indexed, path-indexed quintuple values: component arrays are ``(n_paths, N + 1, ...)``."""

    grid: "TimeGrid"
    values: StateQuintuple
    markspace: MarkSpace

    def __post_init__(self):
        shape = self.values.batch_shape
        if len(shape) != 2:
            raise DimensionError(f"ensemble values need batch shape (n_paths, N+1), got {shape}")
        if shape[0] < 1:
            raise ValueError("ensemble is empty")
        if shape[1] != self.grid.N + 1:
            raise DimensionError(f"ensemble has {shape[1]} nodes, grid has {self.grid.N + 1}")

    @property
    def n_paths(self) -> int:
        return self.values.batch_shape[0]

    @classmethod
    def zeros(cls, spec: ProblemSpec, grid: "TimeGrid", n_paths: int) -> "EnsembleProcess":
        return cls(grid, StateQuintuple.zeros(spec, (n_paths, grid.N + 1)), spec.markspace)

    def with_values(self, values: StateQuintuple) -> "EnsembleProcess":
        return EnsembleProcess(self.grid, values, self.markspace)

    def __sub__(self, other: "EnsembleProcess") -> "EnsembleProcess":
        _check_same_grid(self, other)
        return self.with_values(self.values - other.values)

    def __add__(self, other: "EnsembleProcess") -> "EnsembleProcess":
        _check_same_grid(self, other)
        return self.with_values(self.values + other.values)

    def __mul__(self, s) -> "EnsembleProcess":
        return self.with_values(self.values * s)

    __rmul__ = __mul__

    def terminal_y(self) -> np.ndarray:
        return self.values.y[:, -1]

    def paths(self, idx) -> "EnsembleProcess":
        idx = np.atleast_1d(idx) if not isinstance(idx, slice) else idx
        return self.with_values(self.values[idx])


def _check_same_grid(a: EnsembleProcess, b: EnsembleProcess) -> None:
    if a.grid != b.grid or a.n_paths != b.n_paths:
        raise DimensionError("ensembles live on different grids or path sets")


def m2_sq_norm(ens: EnsembleProcess) -> float:
    """Monte Carlo estimate of E[int_0^T ||v_t||^2 dt] with left-Riemann time sums.

    Paths are reduced in index order.
    """
    if ens.n_paths < 1:
        raise ValueError("empty ensemble")
    left = ens.values[:, :-1]
    per_node = quintuple_sq_norm(left, ens.markspace)  # (n_paths, N)
    per_path = per_node.sum(axis=1) * ens.grid.dt
    return float(np.mean(per_path))


def terminal_sq_norm(y_T: np.ndarray) -> float:
    """E|y_T|^2 over paths."""
    return float(np.mean(np.sum(np.asarray(y_T) ** 2, axis=-1)))
