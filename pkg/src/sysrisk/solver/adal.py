"""Distributed augmented-Lagrangian method for the extended problem.

Every coupling row ``a_r(V) = (C V)_r = 0`` carries a weight ``omega_r``
(the scenario probability for scenario rows, one otherwise) and a multiplier
``mu_r``.  The augmented Lagrangian is

    sum_i cost_i' V_i + sum_r omega_r mu_r a_r(V) + kappa/2 sum_r omega_r a_r(V)^2.

One iteration: each agent minimizes it over its own local set with the other
blocks frozen at the current iterate (Jacobi), the primal point moves a step
``tau`` towards the local minimizers, and every multiplier moves by
``kappa * tau`` times its residual at the new point.  Cutting planes for the
outer measure are added between iterations when the incumbent risk profile
violates the current pool.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from ..measures import DiscreteRandomVariable, evaluate
from ..model import FAMILIES, CutPool, ExtendedProblem, build_extended, generate_cut
from .qp import QPMaxIterError, QPWorkspace, stack_constraints


class SolverError(ValueError):
    pass


@dataclass(frozen=True)
class SolverParams:
    kappa: float = 0.3
    tau: Optional[float] = None  # defaults to 0.9 / m
    tol: float = 1e-5
    max_iter: int = 20000
    cut_period: int = 25
    max_cut_rounds: int = 200
    workers: int = 1
    qp_tol: float = 1e-8
    seed: int = 0

    def step(self, m: int) -> float:
        return 0.9 / m if self.tau is None else self.tau

    def check(self, m: int) -> None:
        if not self.kappa > 0:
            raise SolverError(f"penalty kappa must be positive, got {self.kappa}")
        tau = self.step(m)
        if not 0.0 < tau < 1.0 / m:
            raise SolverError(f"step tau={tau} must satisfy 0 < tau < 1/m = {1.0 / m:.6g}")
        if self.tol <= 0 or self.max_iter < 1 or self.cut_period < 1 or self.workers < 1:
            raise SolverError("tol, max_iter, cut_period and workers must be positive")


# --- states ----------------------------------------------------------------------


@dataclass(frozen=True)
class PrimalState:
    """Agent blocks ``V_i`` of an extended problem (treated as immutable)."""

    ext: ExtendedProblem
    blocks: tuple

    @classmethod
    def from_vector(cls, ext: ExtendedProblem, V: np.ndarray) -> "PrimalState":
        return cls(ext, tuple(np.array(V[ext.agent_slice(i)]) for i in range(ext.m)))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate(self.blocks)

    def field(self, i: int, name: str):
        return self.blocks[i][self.ext.layouts[i].names()[name]]

    @property
    def theta(self) -> np.ndarray:
        return np.array([b[lay.theta] for b, lay in zip(self.blocks, self.ext.layouts)])

    @property
    def eta(self) -> np.ndarray:
        return np.array([b[lay.eta] for b, lay in zip(self.blocks, self.ext.layouts)])

    def objective(self) -> float:
        return self.ext.objective(self.vector)

    def to_dict(self) -> dict:
        out = []
        for i, lay in enumerate(self.ext.layouts):
            b = self.blocks[i]
            p = self.ext.problem
            entry = {
                "x": b[lay.x].tolist(),
                "y": [b[lay.y(s)].tolist() for s in range(p.N)],
                "z": [b[lay.z(s)].tolist() for s in range(p.N)] if lay.has_systemic else [],
                "r": b[lay.names()["r"]].tolist(),
                "eta": float(b[lay.eta]),
                "theta": float(b[lay.theta]),
                "aux": b[lay.aux].tolist(),
                "w": b[lay.w0:].tolist(),
            }
            out.append(entry)
        return {"agents": out}


@dataclass(frozen=True)
class DualState:
    """Multipliers ``mu`` of the coupling rows, with per-family views."""

    ext: ExtendedProblem
    mu: np.ndarray

    @classmethod
    def zeros(cls, ext: ExtendedProblem) -> "DualState":
        return cls(ext, np.zeros(ext.n_rows))

    def family(self, name: str) -> dict:
        """Multipliers of one family keyed by their row labels."""
        f = FAMILIES.index(name)
        return {self.ext.row_keys[r]: float(self.mu[r]) for r in np.flatnonzero(self.ext.row_family == f)}

    @property
    def lam(self) -> np.ndarray:
        return self._dense("cut", (len(self.ext.cuts),), lambda k: (k[1],))

    @property
    def alpha(self) -> np.ndarray:
        return self._dense("first_stage", (self.ext.problem.d1,), lambda k: (k[1],))

    @property
    def beta(self) -> np.ndarray:
        p = self.ext.problem
        return self._dense("dynamics", (p.m, p.N, p.d2), lambda k: k[1:])

    @property
    def gamma(self) -> np.ndarray:
        return self._dense("syscost", (self.ext.problem.N,), lambda k: (k[1],))

    @property
    def delta(self) -> np.ndarray:
        return self._dense("consensus_v", (len(self.ext.tree.arcs), 1 + len(self.ext.cuts)), lambda k: k[1:])

    @property
    def sigma(self) -> list:
        p = self.ext.problem
        out = [np.zeros((len(t.arcs), p.d3)) for t in self.ext.scenario_trees]
        for key, v in self.family("consensus_z").items():
            _, s, a, k = key
            out[s][a, k] = v
        return out

    def _dense(self, name, shape, index):
        out = np.zeros(shape)
        for key, v in self.family(name).items():
            out[index(key)] = v
        return out

    @property
    def Delta(self) -> np.ndarray:
        """Net consensus multiplier on each agent's stack ``v_i`` (outgoing minus incoming)."""
        d = self.delta
        out = np.zeros((self.ext.m, d.shape[1]))
        for a, (i, j) in enumerate(self.ext.tree.arcs):
            out[i] += d[a]
            out[j] -= d[a]
        return out

    @property
    def pi(self) -> np.ndarray:
        """Net scenario-consensus multipliers ``pi_i^s`` of shape ``(m, N, d3)``."""
        p = self.ext.problem
        out = np.zeros((p.m, p.N, p.d3))
        for s, (t, sig) in enumerate(zip(self.ext.scenario_trees, self.sigma)):
            for a, (i, j) in enumerate(t.arcs):
                out[i, s] += sig[a]
                out[j, s] -= sig[a]
        return out

    @property
    def beta_bar(self) -> np.ndarray:
        """``sum_k beta_k^s`` per scenario, shape ``(N, d2)``."""
        return self.beta.sum(axis=0)

    def to_dict(self) -> dict:
        return {name: {json.dumps(list(k)): v for k, v in self.family(name).items()} for name in FAMILIES}


# --- elementary steps --------------------------------------------------------------


def residual_vector(ext: ExtendedProblem, primal: PrimalState) -> np.ndarray:
    return ext.C @ primal.vector


def residuals(ext: ExtendedProblem, primal: PrimalState, relative: bool = False) -> dict:
    """Weighted Euclidean residual norm of each coupling family.

    With ``relative`` each norm is divided by ``1 +`` the norm of the
    constraint data carried by the unit columns of the homogenized problem.
    """
    a = residual_vector(ext, primal)
    out = {}
    for f, name in enumerate(FAMILIES):
        mask = ext.row_family == f
        val = float(np.sqrt(np.sum(ext.row_weight[mask] * a[mask] ** 2)))
        out[name] = val / ext.family_scale[name] if relative else val
    return out


def primal_update(primal: PrimalState, bars, tau: float) -> PrimalState:
    """``V + tau (V_bar - V)`` blockwise."""
    return PrimalState(primal.ext, tuple(v + tau * (b - v) for v, b in zip(primal.blocks, bars)))


def dual_update(dual: DualState, primal: PrimalState, kappa: float, tau: float) -> DualState:
    """``mu + kappa tau a(V)`` with ``a`` the coupling residual at ``primal``."""
    return DualState(dual.ext, dual.mu + kappa * tau * residual_vector(dual.ext, primal))


class LocalSubproblem:
    """Agent ``i``'s local augmented-Lagrangian QP with a cached factorization.

    For fixed other blocks ``e = C V - C_i V_i`` the agent minimizes
    ``cost_i'V_i + (mu + kappa e)' Omega C_i V_i + kappa/2 V_i' C_i' Omega C_i V_i``
    over ``{A_eq V_i = b_eq, A_ub V_i <= b_ub, lb <= V_i <= ub}``.
    """

    def __init__(self, ext: ExtendedProblem, i: int, kappa: float):
        self.ext, self.i, self.kappa = ext, i, kappa
        Ci = ext.agent_columns(i).tocsc()
        rows = np.unique(Ci.indices)
        self.rows = rows
        self.Ci = Ci[rows].toarray()
        self.omega = ext.row_weight[rows]
        self.CtO = self.Ci.T * self.omega[None, :]
        P = kappa * self.CtO @ self.Ci
        blk = ext.local[i]
        n = blk.lb.size
        A, l, u = stack_constraints(n, blk.A_eq, blk.b_eq, blk.A_ub, blk.b_ub, blk.lb, blk.ub)
        self.ws = QPWorkspace(P, A, l, u)
        self.cost = ext.cost[i]

    def linear_term(self, a: np.ndarray, Vi: np.ndarray, mu: np.ndarray) -> np.ndarray:
        e = a[self.rows] - self.Ci @ Vi
        return self.cost + self.CtO @ (mu[self.rows] + self.kappa * e)

    def value(self, Vi, a, Vi_ref, mu) -> float:
        """Local augmented Lagrangian at ``Vi`` (others frozen), up to a constant."""
        q = self.linear_term(a, Vi_ref, mu)
        Cv = self.Ci @ Vi
        return float(q @ Vi + 0.5 * self.kappa * np.sum(self.omega * Cv ** 2))

    def solve(self, a, Vi, mu, tol: float = 1e-8) -> np.ndarray:
        res = self.ws.solve(self.linear_term(a, Vi, mu), tol=tol)
        if res.status != "solved":
            raise QPMaxIterError(
                f"local QP of agent {self.i}: KKT residual {res.kkt:.2e} after {res.iterations} iterations",
                res,
            )
        return res.x


def local_step(
    i: int, primal: PrimalState, dual: DualState, params: SolverParams,
    sub: Optional[LocalSubproblem] = None,
) -> np.ndarray:
    """Minimizer ``V_bar_i`` of agent ``i``'s local augmented Lagrangian."""
    ext = primal.ext
    sub = LocalSubproblem(ext, i, params.kappa) if sub is None else sub
    a = residual_vector(ext, primal)
    return sub.solve(a, primal.blocks[i], dual.mu, params.qp_tol)


# --- trace -------------------------------------------------------------------------


@dataclass
class Trace:
    """Per-iteration history; rows are only ever appended."""

    m: int
    rows: list = field(default_factory=list)
    events: list = field(default_factory=list)

    @property
    def columns(self) -> list:
        return (["iter", "objective"] + [f"res_{f}" for f in FAMILIES]
                + [f"theta_{i + 1}" for i in range(self.m)] + ["eta_spread", "elapsed_ms"])

    def append(self, it, objective, res, theta, eta_spread, elapsed_ms) -> None:
        self.rows.append((it, objective, *[res[f] for f in FAMILIES], *theta, eta_spread, elapsed_ms))

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[self.columns.index(name)] for r in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])


@dataclass
class Solution:
    ext: ExtendedProblem
    primal: PrimalState
    dual: DualState
    objective: float
    converged: bool
    iterations: int
    residuals: dict
    cuts_added: int
    trace: Trace
    qp_stats: dict

    @property
    def theta(self) -> np.ndarray:
        return self.primal.theta

    @property
    def x(self) -> np.ndarray:
        return np.array([self.primal.field(i, "x") for i in range(self.ext.m)])

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "converged": self.converged,
            "iterations": self.iterations,
            "residuals": self.residuals,
            "cuts": [list(map(float, v)) for v in self.ext.cuts],
            "theta": self.theta.tolist(),
            "primal": self.primal.to_dict(),
            "dual": self.dual.to_dict(),
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


# --- driver ------------------------------------------------------------------------


def _extend_states(old: ExtendedProblem, new: ExtendedProblem, primal: PrimalState, dual: DualState):
    """Carry iterates over to an extended problem with more cuts (new entries start at 0)."""
    blocks = []
    for i, (b, lay) in enumerate(zip(primal.blocks, new.layouts)):
        nb = np.zeros(lay.size)
        nb[: b.size] = b  # cut variables sit at the end of each block
        blocks.append(nb)
    index = new.row_index()
    mu = np.zeros(new.n_rows)
    for r, key in enumerate(old.row_keys):
        mu[index[key]] = dual.mu[r]
    return PrimalState(new, tuple(blocks)), DualState(new, mu)


def _outer_value(ext: ExtendedProblem, theta) -> float:
    p = ext.problem
    return evaluate(p.risk.outer, DiscreteRandomVariable(theta, p.weights.as_probability()))


def run(
    ext: ExtendedProblem,
    params: SolverParams = SolverParams(),
    primal: Optional[PrimalState] = None,
    dual: Optional[DualState] = None,
    callback: Optional[Callable] = None,
) -> Solution:
    """Iterate local solves, primal averaging and multiplier updates until the
    relative coupling residuals and the multiplier change fall below
    ``params.tol`` and no cut is violated, or ``params.max_iter`` is reached.

    Without a starting point each agent first minimizes its own cost plus
    the penalty on its share of the coupling rows.
    """
    m = ext.m
    params.check(m)
    tau, kappa = params.step(m), params.kappa
    pool = ext.pool()
    subs = [LocalSubproblem(ext, i, kappa) for i in range(m)]
    dual = DualState.zeros(ext) if dual is None else dual
    if primal is None:
        zero = np.zeros(ext.n_rows)
        primal = PrimalState(ext, tuple(
            subs[i].solve(zero, np.zeros(ext.layouts[i].size), zero, params.qp_tol) for i in range(m)
        ))
    trace = Trace(m)
    pool_exec = ThreadPoolExecutor(params.workers) if params.workers > 1 else None
    t0 = time.perf_counter()
    cut_rounds = cuts_added = 0
    best = None
    converged = False
    it = 0
    try:
        a = residual_vector(ext, primal)
        for it in range(1, params.max_iter + 1):
            mu = dual.mu

            def solve_agent(i, a=a, mu=mu, primal=primal):
                return subs[i].solve(a, primal.blocks[i], mu, params.qp_tol)

            if pool_exec is None:
                bars = [solve_agent(i) for i in range(m)]
            else:
                bars = list(pool_exec.map(solve_agent, range(m)))
            primal = primal_update(primal, bars, tau)
            a = residual_vector(ext, primal)
            wa = np.sqrt(ext.row_weight) * a
            res = {}
            for f, name in enumerate(FAMILIES):
                mask = ext.row_family == f
                res[name] = float(np.linalg.norm(wa[mask])) / ext.family_scale[name]
            dual_change = kappa * tau * float(np.linalg.norm(wa))
            theta, eta = primal.theta, primal.eta
            trace.append(it, primal.objective(), res, theta, float(eta.max() - eta.min()),
                         1e3 * (time.perf_counter() - t0))
            worst = max(res.values(), default=0.0)
            if best is None or worst < best[0]:
                best = (worst, primal, dual, it)
            if callback is not None:
                callback(it, primal, dual, res)

            small = worst < params.tol and dual_change < params.tol
            if small or it % params.cut_period == 0:
                violated = False
                if cut_rounds < params.max_cut_rounds:
                    gap = _outer_value(ext, theta) - np.max(pool.values(theta))
                    if gap > params.tol:
                        nu = generate_cut(theta, ext.problem.risk.outer, ext.problem.weights)
                        if pool.add(nu):
                            violated = True
                            cut_rounds += 1
                            cuts_added += 1
                            new = build_extended(ext.problem, ext.tree, ext.scenario_trees, pool.copy())
                            primal, dual = _extend_states(ext, new, primal, dual)
                            ext = new
                            subs = [LocalSubproblem(ext, i, kappa) for i in range(m)]
                            a = residual_vector(ext, primal)
                            best = None
                            trace.events.append((it, "cut", nu.tolist()))
                            continue
                if small and not violated:
                    converged = True
                    break
            dual = dual_update(dual, primal, kappa, tau)
    finally:
        if pool_exec is not None:
            pool_exec.shutdown()
    if not converged and best is not None and best[1].ext is ext:
        _, primal, dual, _ = best
    stats = {"solves": 0, "warm_hits": 0, "admm_iters": 0}
    for s in subs:
        for k in stats:
            stats[k] += s.ws.stats[k]
    return Solution(
        ext=ext,
        primal=primal,
        dual=dual,
        objective=primal.objective(),
        converged=converged,
        iterations=it,
        residuals=residuals(ext, primal, relative=True),
        cuts_added=cuts_added,
        trace=trace,
        qp_stats=stats,
    )
