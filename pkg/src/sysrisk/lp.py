"""Small sparse LP assembly layer over HiGHS (via :func:`scipy.optimize.linprog`)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog


class LPError(RuntimeError):
    pass


class LPInfeasible(LPError):
    pass


class LPUnbounded(LPError):
    pass


@dataclass
class LPSolution:
    objective: float
    x: np.ndarray
    eq_duals: np.ndarray
    ub_duals: np.ndarray
    status: str


@dataclass
class LinearProgram:
    """``min c'x + const  s.t.  A_eq x = b_eq,  A_ub x <= b_ub,  lb <= x <= ub``.

    Variables are added in named blocks so that callers can address them by
    name; rows are accumulated as sparse triplets.
    """

    c: list = field(default_factory=list)
    lb: list = field(default_factory=list)
    ub: list = field(default_factory=list)
    blocks: dict = field(default_factory=dict)
    const: float = 0.0
    _eq: list = field(default_factory=list)
    _ub: list = field(default_factory=list)
    eq_names: list = field(default_factory=list)
    ub_names: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.c)

    def add_vars(self, name, size: int, lb=0.0, ub=np.inf, cost=0.0) -> np.ndarray:
        start = self.n
        self.c.extend(np.broadcast_to(np.asarray(cost, dtype=float), (size,)).tolist())
        self.lb.extend(np.broadcast_to(np.asarray(lb, dtype=float), (size,)).tolist())
        self.ub.extend(np.broadcast_to(np.asarray(ub, dtype=float), (size,)).tolist())
        idx = np.arange(start, start + size)
        self.blocks[name] = idx
        return idx

    def add_eq(self, cols, coefs, rhs: float, name=None) -> None:
        self._eq.append((np.asarray(cols, dtype=int), np.asarray(coefs, dtype=float), float(rhs)))
        self.eq_names.append(name)

    def add_ub(self, cols, coefs, rhs: float, name=None) -> None:
        self._ub.append((np.asarray(cols, dtype=int), np.asarray(coefs, dtype=float), float(rhs)))
        self.ub_names.append(name)

    def add_dense_rows(self, cols, A, b, kind: str, names=None) -> None:
        cols = np.asarray(cols, dtype=int)
        A = np.atleast_2d(np.asarray(A, dtype=float))
        for k in range(A.shape[0]):
            nz = np.flatnonzero(A[k])
            add = self.add_eq if kind == "eq" else self.add_ub
            add(cols[nz], A[k, nz], b[k], None if names is None else names[k])

    @staticmethod
    def _matrix(rows, n):
        if not rows:
            return None, None
        data, ri, ci, rhs = [], [], [], []
        for r, (cols, coefs, b) in enumerate(rows):
            data.append(coefs)
            ci.append(cols)
            ri.append(np.full(cols.size, r))
            rhs.append(b)
        A = sp.csr_matrix(
            (np.concatenate(data), (np.concatenate(ri), np.concatenate(ci))), shape=(len(rows), n)
        )
        return A, np.array(rhs)

    @property
    def n_eq(self) -> int:
        return len(self._eq)

    @property
    def n_ub(self) -> int:
        return len(self._ub)

    def matrices(self):
        A_eq, b_eq = self._matrix(self._eq, self.n)
        A_ub, b_ub = self._matrix(self._ub, self.n)
        return A_eq, b_eq, A_ub, b_ub

    def solve(self, tol: float = 1e-9) -> LPSolution:
        A_eq, b_eq, A_ub, b_ub = self.matrices()
        bounds = np.column_stack([self.lb, self.ub])
        bounds = [(None if not np.isfinite(lo) else lo, None if not np.isfinite(hi) else hi)
                  for lo, hi in bounds]
        res = linprog(
            np.asarray(self.c),
            A_ub=A_ub,
            b_ub=b_ub,
            A_eq=A_eq,
            b_eq=b_eq,
            bounds=bounds,
            method="highs",
            options={
                "primal_feasibility_tolerance": tol,
                "dual_feasibility_tolerance": tol,
                "presolve": True,
            },
        )
        if res.status == 2:
            raise LPInfeasible(res.message)
        if res.status == 3:
            raise LPUnbounded(res.message)
        if res.status != 0:
            raise LPError(res.message)
        eq_duals = res.eqlin.marginals if A_eq is not None else np.zeros(0)
        ub_duals = res.ineqlin.marginals if A_ub is not None else np.zeros(0)
        return LPSolution(float(res.fun) + self.const, res.x, eq_duals, ub_duals, "optimal")
