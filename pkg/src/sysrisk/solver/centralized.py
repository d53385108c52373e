"""Monolithic reference solves.

:func:`solve_centralized` builds one LP over all agents and scenarios with the
exact epigraphs of every inner measure and of the outer measure, so no cutting
planes are involved.  :func:`solve_extended_lp` solves the consensus + cut form
as a single LP, which is what the distributed method converges to.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..lp import LinearProgram, LPSolution
from ..measures import epigraph_reformulation
from ..model import ExtendedProblem, TwoStageSystemProblem


@dataclass
class CentralizedSolution:
    objective: float
    x: np.ndarray  # (m, n1)
    y: np.ndarray  # (m, N, n2)
    z: np.ndarray  # (N, d3)
    r: np.ndarray  # (m, N)
    theta: np.ndarray  # (m,)
    risk: float  # outer measure of theta
    lp: LPSolution

    def losses(self, problem: TwoStageSystemProblem) -> np.ndarray:
        """Realized second-stage losses ``Q_i^s`` (including systemic shares)."""
        return np.einsum("isk,isk->is", problem.q, self.y) + self.r


def _add_epigraph(lp: LinearProgram, tmpl, q_cols, q_weights, theta_col, name):
    """Append epigraph rows for ``Q_s = q_weights[s] @ x[q_cols[s]]``."""
    aux = lp.add_vars(f"{name}/aux", tmpl.n_aux, tmpl.aux_lb, tmpl.aux_ub)
    n = tmpl.n_scenarios

    def emit(theta_coef, qc, auxc, rhs, kind):
        for k in range(rhs.size):
            cols, vals = [theta_col], [theta_coef[k]]
            for s in range(n):
                if qc[k, s] != 0.0:
                    cols.extend(q_cols[s])
                    vals.extend(qc[k, s] * np.asarray(q_weights[s]))
            nz = np.flatnonzero(auxc[k])
            cols.extend(aux[nz])
            vals.extend(auxc[k, nz])
            (lp.add_eq if kind == "eq" else lp.add_ub)(cols, vals, rhs[k])

    emit(tmpl.eq_theta, tmpl.eq_q, tmpl.eq_aux, tmpl.eq_rhs, "eq")
    emit(tmpl.ub_theta, tmpl.ub_q, tmpl.ub_aux, tmpl.ub_rhs, "ub")
    return aux


def _add_polytope(lp: LinearProgram, cols, P):
    for k in range(P.G.shape[0]):
        nz = np.flatnonzero(P.G[k])
        if nz.size:
            lp.add_ub(cols[nz], P.G[k, nz], P.g[k])


def build_centralized_lp(problem: TwoStageSystemProblem) -> LinearProgram:
    """The direct risk-epigraph LP (no homogenization required)."""
    p = problem
    m, N = p.m, p.N
    c = p.weights.c
    lp = LinearProgram(const=float(p.cost0.sum()))
    xs, ys, rs, thetas = [], [], [], []
    for i in range(m):
        xs.append(lp.add_vars(("x", i), p.n1, p.X[i].lb, p.X[i].ub, p.cost[i]))
        _add_polytope(lp, xs[i], p.X[i])
        row = []
        for s in range(N):
            cols = lp.add_vars(("y", i, s), p.n2, p.Y[i][s].lb, p.Y[i][s].ub)
            _add_polytope(lp, cols, p.Y[i][s])
            row.append(cols)
        ys.append(row)
    zs = []
    if p.d3:
        for s in range(N):
            zs.append(lp.add_vars(("z", s), p.d3, p.Z[s].lb, p.Z[s].ub))
            _add_polytope(lp, zs[s], p.Z[s])
        for i in range(m):
            rs.append(lp.add_vars(("r", i), N, 0.0, np.inf))
    for i in range(m):
        thetas.append(int(lp.add_vars(("theta", i), 1, -np.inf, np.inf)[0]))

    for k in range(p.d1):
        cols = np.concatenate(xs)
        lp.add_eq(cols, np.concatenate([p.A[i, k] for i in range(m)]), p.b[k], ("first_stage", k))
    for s in range(N):
        for blk in range(m):
            for r in range(p.d2):
                cols = [xs[blk]] + [ys[j][s] for j in range(m)]
                vals = [p.T[blk, s, r]] + [p.W[s, blk, j, r] for j in range(m)]
                if p.d3:
                    cols.append(zs[s])
                    vals.append(p.B[s, r])
                lp.add_eq(np.concatenate(cols), np.concatenate(vals), p.h[blk, s, r],
                          ("dynamics", blk, s, r))
        if p.d3:
            cols = np.concatenate([zs[s]] + [rs[i][s:s + 1] for i in range(m)])
            vals = np.concatenate([p.u[s], -np.ones(m)])
            lp.add_eq(cols, vals, 0.0, ("syscost", s))

    for i in range(m):
        tmpl = epigraph_reformulation(p.risk.inner[i], p.prob)
        q_cols, q_w = [], []
        for s in range(N):
            cols = list(ys[i][s])
            w = list(p.q[i, s])
            if p.d3:
                cols.append(rs[i][s])
                w.append(1.0)
            q_cols.append(cols)
            q_w.append(w)
        _add_epigraph(lp, tmpl, q_cols, q_w, thetas[i], ("inner", i))

    outer = lp.add_vars("rho0", 1, -np.inf, np.inf, 1.0)
    tmpl0 = epigraph_reformulation(p.risk.outer, p.weights.as_probability())
    _add_epigraph(lp, tmpl0, [[t] for t in thetas], [[1.0]] * m, int(outer[0]), "outer")
    lp.blocks["theta"] = np.array(thetas)
    return lp


def solve_centralized(problem: TwoStageSystemProblem, tol: float = 1e-9) -> CentralizedSolution:
    """Solve the whole problem as one LP.

    Raises :class:`~sysrisk.lp.LPInfeasible` or :class:`~sysrisk.lp.LPUnbounded`.
    """
    p = problem
    lp = build_centralized_lp(p)
    sol = lp.solve(tol=tol)
    v = sol.x
    B = lp.blocks
    x = np.array([v[B[("x", i)]] for i in range(p.m)]).reshape(p.m, p.n1)
    y = np.array([[v[B[("y", i, s)]] for s in range(p.N)] for i in range(p.m)]).reshape(p.m, p.N, p.n2)
    if p.d3:
        z = np.array([v[B[("z", s)]] for s in range(p.N)])
        r = np.array([v[B[("r", i)]] for i in range(p.m)])
    else:
        z = np.zeros((p.N, 0))
        r = np.zeros((p.m, p.N))
    theta = v[B["theta"]]
    return CentralizedSolution(sol.objective, x, y, z, r, theta, float(v[B["rho0"]][0]), sol)


def solve_extended_lp(ext: ExtendedProblem, tol: float = 1e-9) -> LPSolution:
    """Single-LP solve of the extended (consensus + cut) problem.

    The returned ``x`` is the concatenation of the agent blocks ``V_i``.
    """
    lp = LinearProgram(const=ext.const)
    cols = []
    for i, blk in enumerate(ext.local):
        idx = lp.add_vars(("V", i), blk.lb.size, blk.lb, blk.ub, ext.cost[i])
        cols.append(idx)
        lp.add_dense_rows(idx, blk.A_eq, blk.b_eq, "eq")
        lp.add_dense_rows(idx, blk.A_ub, blk.b_ub, "ub")
    C = ext.C.tocsr()
    for r in range(C.shape[0]):
        sl = slice(C.indptr[r], C.indptr[r + 1])
        lp.add_eq(C.indices[sl], C.data[sl], 0.0, ext.row_keys[r])
    return lp.solve(tol=tol)
