"""Trajectory containers, block-Hankel matrices and the affine Fundamental Lemma.

All sequences are stored as 2-D arrays of shape ``(N, q)`` (one row per
sample).  Windows ``[a, b]`` are inclusive and 0-indexed.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

RANK_RTOL = 1e-12
REPRESENTATION_TOL = 1e-8
SUM_TO_ONE_TOL = 1e-10


class DimensionError(ValueError):
    """Raised when array shapes are inconsistent."""


class InsufficientDataError(ValueError):
    """Raised when a sequence is too short for the requested construction."""


def as_sequence(x, name: str = "sequence") -> np.ndarray:
    """Return ``x`` as a float array of shape ``(N, q)``.

    1-D input is interpreted as a scalar-valued sequence.
    """
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 1-D or 2-D, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled input/output (and optionally state) sequence."""

    inputs: np.ndarray
    outputs: np.ndarray
    states: Optional[np.ndarray] = None

    def __post_init__(self):
        u = as_sequence(self.inputs, "inputs")
        y = as_sequence(self.outputs, "outputs")
        if u.shape[0] != y.shape[0]:
            raise DimensionError(
                f"inputs and outputs differ in length ({u.shape[0]} vs {y.shape[0]})")
        if u.shape[0] == 0:
            raise DimensionError("trajectory must contain at least one sample")
        object.__setattr__(self, "inputs", _frozen(u))
        object.__setattr__(self, "outputs", _frozen(y))
        if self.states is not None:
            x = as_sequence(self.states, "states")
            if x.shape[0] != u.shape[0]:
                raise DimensionError(
                    f"states have length {x.shape[0]}, expected {u.shape[0]}")
            object.__setattr__(self, "states", _frozen(x))

    @property
    def length(self) -> int:
        return self.inputs.shape[0]

    @property
    def m(self) -> int:
        return self.inputs.shape[1]

    @property
    def p(self) -> int:
        return self.outputs.shape[1]

    @property
    def n(self) -> Optional[int]:
        return None if self.states is None else self.states.shape[1]

    def __len__(self) -> int:
        return self.length

    def window(self, start: int, stop: int) -> "Trajectory":
        """Sub-trajectory of samples ``start..stop-1`` (Python slice semantics)."""
        states = None if self.states is None else self.states[start:stop]
        return Trajectory(self.inputs[start:stop], self.outputs[start:stop], states)

    def to_csv(self, path) -> None:
        write_trajectory_csv(self, path)

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        return read_trajectory_csv(path)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class HankelMatrix:
    """Depth-``L`` block-Hankel matrix of a ``q``-dimensional sequence."""

    depth: int
    source_dim: int
    data: np.ndarray

    @property
    def columns(self) -> int:
        return self.data.shape[1]

    def block(self, i: int, j: int) -> np.ndarray:
        q = self.source_dim
        return self.data[i * q:(i + 1) * q, j]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


def hankel(seq, depth: int) -> np.ndarray:
    """Dense ``(q*depth, N-depth+1)`` Hankel matrix of ``seq``.

    Column ``j`` is the stacked window ``seq[j], ..., seq[j+depth-1]``.

    Raises:
        InsufficientDataError: if the sequence is shorter than ``depth``.
    """
    x = as_sequence(seq)
    N, q = x.shape
    if depth < 1:
        raise ValueError(f"depth must be positive, got {depth}")
    if N < depth:
        raise InsufficientDataError(f"sequence length {N} < Hankel depth {depth}")
    cols = N - depth + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, (depth, q))[:, 0]
    # windows: (cols, depth, q) -> column j = windows[j].ravel()
    return np.ascontiguousarray(windows.reshape(cols, depth * q).T)


def build_hankel(seq, depth: int) -> HankelMatrix:
    x = as_sequence(seq)
    return HankelMatrix(depth=depth, source_dim=x.shape[1], data=hankel(x, depth))


def stacked_window(seq, a: int, b: int) -> np.ndarray:
    """Column stack ``x_{[a,b]}`` of samples ``a..b`` (inclusive)."""
    if isinstance(seq, Trajectory):
        raise TypeError("pass a channel (e.g. traj.inputs), not a Trajectory")
    x = as_sequence(seq)
    if not 0 <= a <= b < x.shape[0]:
        raise IndexError(f"window [{a}, {b}] out of range for length {x.shape[0]}")
    return x[a:b + 1].ravel().copy()


def numerical_rank(M: np.ndarray, rtol: float = RANK_RTOL) -> tuple[int, np.ndarray]:
    """Rank with cutoff ``max(rows, cols) * sigma_max * rtol``; also returns singular values."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return 0, np.zeros(0)
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0, s
    cutoff = max(M.shape) * s[0] * rtol
    return int(np.sum(s > cutoff)), s


class PeReport(NamedTuple):
    rank: int
    required: int
    satisfied: bool
    min_singular_value: float


def affine_pe_matrix(u, x, L: int) -> np.ndarray:
    """Stack ``[H_L(u); H_1(x_{[0,N-L]}); 1^T]``."""
    u = as_sequence(u, "u")
    x = as_sequence(x, "x")
    N = u.shape[0]
    cols = N - L + 1
    if x.shape[0] < cols:
        raise DimensionError(f"state sequence needs at least {cols} samples, got {x.shape[0]}")
    return np.vstack([hankel(u, L), x[:cols].T, np.ones((1, cols))])


def pe_check_affine(u, x, L: int) -> PeReport:
    """Persistence of excitation of order ``L`` for affine systems.

    Checks ``rank [H_L(u); H_1(x); 1^T] == m*L + n + 1``.

    Raises:
        InsufficientDataError: if there are fewer than ``m*L + n + 1`` columns.
    """
    u = as_sequence(u, "u")
    x = as_sequence(x, "x")
    m, n = u.shape[1], x.shape[1]
    required = m * L + n + 1
    cols = u.shape[0] - L + 1
    if cols < required:
        raise InsufficientDataError(
            f"{cols} Hankel columns cannot reach rank {required}")
    M = affine_pe_matrix(u, x, L)
    rank, s = numerical_rank(M)
    smin = float(s[required - 1]) if s.size >= required else 0.0
    return PeReport(rank, required, rank == required, smin)


def pe_check_input_richness(u, L: int, n: int) -> bool:
    """True iff ``H_{L+n+1}(u)`` has full row rank ``m(L+n+1)``."""
    u = as_sequence(u, "u")
    depth = L + n + 1
    if u.shape[0] < depth:
        raise InsufficientDataError(f"need at least {depth} samples, got {u.shape[0]}")
    H = hankel(u, depth)
    if H.shape[1] < H.shape[0]:
        return False
    rank, _ = numerical_rank(H)
    return rank == H.shape[0]


def trajectory_matrix(data: Trajectory, L: int, ones_row: bool = True) -> np.ndarray:
    """``[H_L(u^d); H_L(y^d); 1^T]`` (ones row optional)."""
    blocks = [hankel(data.inputs, L), hankel(data.outputs, L)]
    if ones_row:
        blocks.append(np.ones((1, blocks[0].shape[1])))
    return np.vstack(blocks)


class Representation(NamedTuple):
    alpha: Optional[np.ndarray]
    residual: float
    alpha_ls: np.ndarray


def affine_lemma_represent(data: Trajectory, candidate: Trajectory,
                           tol: float = REPRESENTATION_TOL,
                           ones_row: bool = True) -> Representation:
    """Minimum-norm ``alpha`` with ``[H_L(u^d); H_L(y^d); 1^T] alpha = [u; y; 1]``.

    ``alpha`` is ``None`` when the residual exceeds ``tol``; the least-squares
    solution is returned in ``alpha_ls`` either way.  With ``ones_row=False``
    the classical linear parametrization (no sum-to-one row) is used.
    """
    if candidate.m != data.m or candidate.p != data.p:
        raise DimensionError("candidate and data channel dimensions differ")
    L = candidate.length
    M = trajectory_matrix(data, L, ones_row=ones_row)
    rhs = [candidate.inputs.ravel(), candidate.outputs.ravel()]
    if ones_row:
        rhs.append(np.ones(1))
    rhs = np.concatenate(rhs)
    alpha, *_ = np.linalg.lstsq(M, rhs, rcond=None)
    residual = float(np.linalg.norm(M @ alpha - rhs))
    return Representation(alpha if residual <= tol else None, residual, alpha)


def affine_lemma_generate(data: Trajectory, alpha, L: int,
                          tol: float = SUM_TO_ONE_TOL) -> Trajectory:
    """Trajectory ``(H_L(u^d) alpha, H_L(y^d) alpha)`` for a sum-to-one ``alpha``.

    When ``data`` carries states the returned trajectory carries the
    reconstructed states ``H_L(x^d) alpha`` (its first sample is the initial
    condition ``sum_i alpha_i x^d_i``).
    """
    alpha = np.asarray(alpha, dtype=float).ravel()
    cols = data.length - L + 1
    if alpha.size != cols:
        raise DimensionError(f"alpha has {alpha.size} entries, expected {cols}")
    total = alpha.sum()
    if abs(total - 1.0) > tol:
        raise ValueError(f"alpha must sum to one (sum = {total:.3e})")
    u = (hankel(data.inputs, L) @ alpha).reshape(L, data.m)
    y = (hankel(data.outputs, L) @ alpha).reshape(L, data.p)
    x = None
    if data.states is not None:
        x = (hankel(data.states, L) @ alpha).reshape(L, data.n)
    return Trajectory(u, y, x)


def build_hux(u_window, x_states, L: int, n: int) -> np.ndarray:
    """``[H_{L+n+1}(u); H_1(x_{[0, N-L-n-1]}); 1^T]`` for an ``N``-sample window.

    ``x_states`` holds the (linearized) states aligned with ``u_window``;
    rows must equal ``m(L+n+1) + n_x + 1``.
    """
    u = as_sequence(u_window, "u_window")
    x = as_sequence(x_states, "x_states")
    depth = L + n + 1
    Hu = hankel(u, depth)
    cols = Hu.shape[1]
    if x.shape[0] < cols:
        raise DimensionError(f"need {cols} states, got {x.shape[0]}")
    return np.vstack([Hu, x[:cols].T, np.ones((1, cols))])


class PinvNorm(NamedTuple):
    norm: float
    full_row_rank: bool
    min_singular_value: float


def pinv_norm(M: np.ndarray, rtol: float = RANK_RTOL) -> PinvNorm:
    """``||M^+||_2 = 1/sigma_min`` and a full-row-rank flag."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    rank, s = numerical_rank(M, rtol)
    full = rank == M.shape[0]
    if rank == 0:
        return PinvNorm(np.inf, False, 0.0)
    smin = float(s[rank - 1])
    return PinvNorm(1.0 / smin, full, float(s[M.shape[0] - 1]) if s.size >= M.shape[0] else 0.0)


def extended_state(u_past, y_past) -> np.ndarray:
    """Stack ``xi = [u_{[t-n,t-1]}; y_{[t-n,t-1]}]``."""
    return np.concatenate([as_sequence(u_past).ravel(), as_sequence(y_past).ravel()])


def split_extended_state(xi, n: int, m: int, p: int) -> tuple[np.ndarray, np.ndarray]:
    xi = np.asarray(xi, dtype=float).ravel()
    if xi.size != n * (m + p):
        raise DimensionError(f"extended state has {xi.size} entries, expected {n * (m + p)}")
    return xi[:n * m].reshape(n, m), xi[n * m:].reshape(n, p)


# --- CSV -------------------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_trajectory_csv(traj: Trajectory, path) -> None:
    header = ["t"] + [f"u_{i}" for i in range(traj.m)] + [f"y_{i}" for i in range(traj.p)]
    if traj.states is not None:
        header += [f"x_{i}" for i in range(traj.n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t in range(traj.length):
            row = [str(t)] + [_fmt(v) for v in traj.inputs[t]] + [_fmt(v) for v in traj.outputs[t]]
            if traj.states is not None:
                row += [_fmt(v) for v in traj.states[t]]
            w.writerow(row)


def read_trajectory_csv(path) -> Trajectory:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if header[0] != "t":
        raise ValueError(f"{path}: first column must be 't'")
    cols = {"u": [], "y": [], "x": []}
    for j, name in enumerate(header[1:], start=1):
        prefix = name.split("_", 1)[0]
        if prefix not in cols:
            raise ValueError(f"{path}: unexpected column {name!r}")
        cols[prefix].append(j)
    data = np.array([[float(v) for v in r] for r in body]) if body else np.zeros((0, len(header)))
    states = data[:, cols["x"]] if cols["x"] else None
    return Trajectory(data[:, cols["u"]], data[:, cols["y"]], states)
