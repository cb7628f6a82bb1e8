"""Discretised two-sided noise and the Ito sum primitives.

Randomness comes from counter-based Philox substreams keyed by
``(seed, stream, block)``; a path's draws depend only on the seed, its index
and the grid/dimension layout, never on the number of workers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from .spaces import DimensionError, MarkSpace, ProblemSpec

BLOCK_PATHS = 1024

STREAM_W = 0
STREAM_B = 1
STREAM_N = 2

MAGIC = b"FBDSNOIS"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"number of steps must be a positive integer, got {self.N!r}")
        if not (np.isfinite(self.T) and self.T > 0):
            raise ValueError(f"T must be positive, got {self.T!r}")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "T", float(self.T))

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt


@dataclass(frozen=True, eq=False)
class NoiseBundle:
    """Increments for an ensemble of paths.

    dW: (P, N, d_E1), dB: (P, N, d_E2), counts: (P, N, m) uint32.
    """

    grid: TimeGrid
    markspace: MarkSpace
    dW: np.ndarray
    dB: np.ndarray
    counts: np.ndarray
    seed: int = 0

    def __post_init__(self):
        P, N = self.dW.shape[:2]
        if N != self.grid.N:
            raise DimensionError(f"increments have {N} steps, grid has {self.grid.N}")
        if self.dB.shape[:2] != (P, N) or self.counts.shape[:2] != (P, N):
            raise DimensionError("W, B and jump increments disagree on (paths, steps)")
        if self.counts.shape[2] != self.markspace.m:
            raise DimensionError(f"counts carry {self.counts.shape[2]} marks, mark space has {self.markspace.m}")

    @property
    def n_paths(self) -> int:
        return self.dW.shape[0]

    @property
    def d_E1(self) -> int:
        return self.dW.shape[2]

    @property
    def d_E2(self) -> int:
        return self.dB.shape[2]

    @property
    def dN_tilde(self) -> np.ndarray:
        """Compensated increments n_{i,j} - Pi_j dt."""
        return self.counts - self.markspace.weight_array * self.grid.dt

    def W_levels(self) -> np.ndarray:
        """W at every node, W_0 = 0: (P, N + 1, d_E1)."""
        return _levels(self.dW)

    def B_levels(self) -> np.ndarray:
        return _levels(self.dB)

    def N_tilde_levels(self) -> np.ndarray:
        return _levels(self.dN_tilde)

    def B_backward_levels(self) -> np.ndarray:
        """B_T - B_{t_i} at every node; F^B_{t_i,T}-measurable."""
        rev = np.cumsum(self.dB[:, ::-1], axis=1)[:, ::-1]
        return np.concatenate([rev, np.zeros_like(self.dB[:, :1])], axis=1)

    def paths(self, idx) -> "NoiseBundle":
        return NoiseBundle(self.grid, self.markspace, self.dW[idx], self.dB[idx], self.counts[idx], self.seed)

    def with_increments(self, dW=None, dB=None, counts=None) -> "NoiseBundle":
        return NoiseBundle(
            self.grid,
            self.markspace,
            self.dW if dW is None else dW,
            self.dB if dB is None else dB,
            self.counts if counts is None else counts,
            self.seed,
        )


def _levels(inc: np.ndarray) -> np.ndarray:
    out = np.zeros((inc.shape[0], inc.shape[1] + 1) + inc.shape[2:])
    np.cumsum(inc, axis=1, out=out[:, 1:])
    return out


def _substream(seed: int, stream: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(stream, block))
    return np.random.Generator(np.random.Philox(ss))


def _sample_block(seed, block, n, N, d1, d2, dt, lam):
    sq = np.sqrt(dt)
    dW = _substream(seed, STREAM_W, block).standard_normal((n, N, d1)) * sq
    dB = _substream(seed, STREAM_B, block).standard_normal((n, N, d2)) * sq
    counts = _substream(seed, STREAM_N, block).poisson(lam, size=(n, N, lam.size))
    return dW, dB, counts.astype(np.uint32)


def sample_noise(
    seed: int,
    n_paths: int,
    grid: TimeGrid,
    spec: ProblemSpec,
    n_jobs: int | None = None,
) -> NoiseBundle:
    """Draw W, B and Poisson increments for ``n_paths`` paths.

    Paths are grouped into fixed blocks of ``BLOCK_PATHS``; block ``b`` of
    stream ``s`` is generated from its own Philox key, so results do not
    depend on ``n_jobs``.
    """
    if int(n_paths) != n_paths or n_paths < 1:
        raise ValueError(f"n_paths must be a positive integer, got {n_paths!r}")
    n_paths = int(n_paths)
    N, dt = grid.N, grid.dt
    lam = spec.markspace.weight_array * dt
    blocks = [(b, min(BLOCK_PATHS, n_paths - b * BLOCK_PATHS)) for b in range(-(-n_paths // BLOCK_PATHS))]
    args = (N, spec.d_E1, spec.d_E2, dt, lam)
    if n_jobs in (None, 1) or len(blocks) == 1:
        parts = [_sample_block(seed, b, n, *args) for b, n in blocks]
    else:
        parts = Parallel(n_jobs=n_jobs)(delayed(_sample_block)(seed, b, n, *args) for b, n in blocks)
    dW = np.concatenate([p[0] for p in parts])
    dB = np.concatenate([p[1] for p in parts])
    counts = np.concatenate([p[2] for p in parts])
    return NoiseBundle(grid, spec.markspace, dW, dB, counts, int(seed))


# --- Ito sum primitives -----------------------------------------------------


def _apply(h: np.ndarray, inc: np.ndarray) -> np.ndarray:
    """Per-step products h_i * inc_i.

    ``h`` is either an operator array ``(..., steps, d_H, d_E)`` acting on
    ``inc`` ``(..., steps, d_E)``, or has exactly the shape of ``inc``
    (componentwise scalar integrands).
    """
    h = np.asarray(h, dtype=float)
    inc = np.asarray(inc, dtype=float)
    if h.ndim == inc.ndim + 1:
        return np.einsum("...ij,...j->...i", h, inc)
    if h.ndim == inc.ndim:
        return h * inc
    raise DimensionError(f"integrand shape {h.shape} incompatible with increments {inc.shape}")


def _check_range(a: int, b: int, n_steps: int) -> None:
    if not (0 <= a <= b <= n_steps):
        raise IndexError(f"step range [{a}, {b}] outside [0, {n_steps}]")


def forward_ito_terms(h, dW) -> np.ndarray:
    """Terms h_i dW_i, h indexed by the left node of each step; h may carry N or N + 1 nodes."""
    dW = np.asarray(dW, dtype=float)
    n = dW.shape[1]
    return _apply(np.asarray(h)[:, :n], dW)


def backward_ito_terms(h, dB) -> np.ndarray:
    """Terms h_{i+1} dB_i, h indexed by node (N + 1 values along axis 1)."""
    dB = np.asarray(dB, dtype=float)
    n = dB.shape[1]
    h = np.asarray(h)
    if h.shape[1] != n + 1:
        raise DimensionError(f"backward integrand needs {n + 1} node values, got {h.shape[1]}")
    return _apply(h[:, 1:], dB)


def forward_ito_sum(h, dW, a: int = 0, b: int | None = None) -> np.ndarray:
    """sum_{i=a}^{b-1} h_i dW_i (left-endpoint evaluation)."""
    dW = np.asarray(dW, dtype=float)
    b = dW.shape[1] if b is None else b
    _check_range(a, b, dW.shape[1])
    return forward_ito_terms(h, dW)[:, a:b].sum(axis=1)


def backward_ito_sum(h, dB, a: int = 0, b: int | None = None) -> np.ndarray:
    """sum_{i=a}^{b-1} h_{i+1} dB_i (right-endpoint evaluation)."""
    dB = np.asarray(dB, dtype=float)
    b = dB.shape[1] if b is None else b
    _check_range(a, b, dB.shape[1])
    return backward_ito_terms(h, dB)[:, a:b].sum(axis=1)


def compensated_jump_terms(k, noise: NoiseBundle) -> np.ndarray:
    """Per-step sum_j k_{i,j} dN~_{i,j}; k has shape (P, steps(+1), m, d_H)."""
    k = np.asarray(k, dtype=float)
    dN = noise.dN_tilde
    if k.shape[-2] != dN.shape[-1]:
        raise DimensionError(f"kernel has {k.shape[-2]} marks, noise has {dN.shape[-1]}")
    return np.einsum("pijd,pij->pid", k[:, : dN.shape[1]], dN)


def compensated_jump_sum(k, noise: NoiseBundle, a: int = 0, b: int | None = None) -> np.ndarray:
    b = noise.grid.N if b is None else b
    _check_range(a, b, noise.grid.N)
    return compensated_jump_terms(k, noise)[:, a:b].sum(axis=1)


def reverse_time(values: np.ndarray, kind: str = "node") -> np.ndarray:
    """Reverse along axis 1.

    ``kind="node"``: v_i -> v_{N-i}.  ``kind="step"``: per-step values,
    i -> N-1-i.  ``kind="increment"``: reversed and negated, so that
    dB^rev_i = -dB_{N-1-i} are the increments of B^rev_s = B_{T-s} - B_T.
    """
    v = np.asarray(values)[:, ::-1]
    if kind in ("node", "step"):
        return v
    if kind == "increment":
        return -v
    raise ValueError(f"unknown kind {kind!r}")


# --- binary replay format ---------------------------------------------------

_HEADER = struct.Struct("<8sIQQQIIId")


def dump_noise(noise: NoiseBundle, path: str | Path) -> None:
    """Write little-endian header, mark weights, dW, dB (float64) and counts (uint32)."""
    P, N = noise.dW.shape[:2]
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, noise.seed & 0xFFFFFFFFFFFFFFFF, P, N,
        noise.d_E1, noise.d_E2, noise.markspace.m, noise.grid.T,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(noise.markspace.weight_array.astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(noise.dW, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(noise.dB, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(noise.counts, dtype="<u4").tobytes())


def load_noise(path: str | Path) -> NoiseBundle:
    raw = Path(path).read_bytes()
    magic, version, seed, P, N, d1, d2, m, T = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a noise dump")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    pos = _HEADER.size

    def take(dtype, count, shape):
        nonlocal pos
        a = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
        pos += a.nbytes
        return a.reshape(shape).astype(np.dtype(dtype).newbyteorder("="))

    weights = take("<f8", m, (m,))
    dW = take("<f8", P * N * d1, (P, N, d1))
    dB = take("<f8", P * N * d2, (P, N, d2))
    counts = take("<u4", P * N * m, (P, N, m))
    return NoiseBundle(TimeGrid(T, N), MarkSpace(tuple(weights)), dW, dB, counts, int(seed))
