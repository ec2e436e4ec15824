"""Half-space polytopes ``{v : A v <= b}``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog


@dataclass(frozen=True)
class Polytope:
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, float))
        b = np.asarray(self.b, float).reshape(A.shape[0])
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @classmethod
    def box(cls, lower, upper) -> "Polytope":
        lo = np.atleast_1d(np.asarray(lower, float))
        hi = np.atleast_1d(np.asarray(upper, float))
        if lo.shape != hi.shape:
            raise ValueError("box bounds differ in shape")
        d = lo.size
        keep_hi = np.isfinite(hi)
        keep_lo = np.isfinite(lo)
        A = np.vstack([np.eye(d)[keep_hi], -np.eye(d)[keep_lo]])
        b = np.concatenate([hi[keep_hi], -lo[keep_lo]])
        return cls(A.reshape(-1, d), b)

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def contains(self, v, tol: float = 1e-9) -> bool:
        v = np.asarray(v, float).reshape(self.dim)
        return bool(np.all(self.A @ v <= self.b + tol))

    def is_empty(self) -> bool:
        if self.A.shape[0] == 0:
            return False
        res = linprog(np.zeros(self.dim), A_ub=self.A, b_ub=self.b,
                      bounds=[(None, None)] * self.dim, method="highs")
        return res.status == 2

    def box_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Bounding box via LPs (exact for axis-aligned boxes)."""
        lo, hi = np.empty(self.dim), np.empty(self.dim)
        for i in range(self.dim):
            c = np.zeros(self.dim)
            c[i] = 1.0
            for sign, out in ((1.0, lo), (-1.0, hi)):
                res = linprog(sign * c, A_ub=self.A, b_ub=self.b,
                              bounds=[(None, None)] * self.dim, method="highs")
                out[i] = sign * res.fun if res.status == 0 else -sign * np.inf
        return lo, hi

    def lifted(self, dim: int, offset: int) -> "Polytope":
        """Same constraint acting on coordinates ``offset:offset+self.dim`` of a ``dim``-vector."""
        A = np.zeros((self.A.shape[0], dim))
        A[:, offset:offset + self.dim] = self.A
        return Polytope(A, self.b)

    def to_dict(self) -> dict:
        return {"A": self.A.tolist(), "b": self.b.tolist()}
