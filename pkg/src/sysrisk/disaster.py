"""Disaster-relief resource allocation benchmark.

Resources are pre-positioned at facilities before a disaster strikes a random
point of the unit square; afterwards they are shipped along capacitated arcs
to meet the realized demand.  Each facility's loss is its shipping, salvage
and shortage cost, measured by a mean-upper-semideviation; the facilities'
risks are aggregated either linearly or by a semideviation on the weighted
facility space, the latter penalizing facilities that are worse off than the
weighted average.

Scenario epicenters are drawn with numpy's PCG64 generator
(``numpy.random.default_rng(seed).random((N, 2))``).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .lp import LinearProgram, LPSolution
from .measures import (
    DiscreteRandomVariable,
    Expectation,
    MeanUpperSemiDeviation,
    ProbabilityVector,
    evaluate,
)
from .model import Polytope, TwoStageSystemProblem
from .systemic import ScalarizationWeights, SystemicMeasureSpec

INSTANCE_SCHEMA = "sysrisk/disaster-instance@1"
DEFAULT_COORDS = ((0.15, 0.25), (0.70, 0.15), (0.45, 0.55), (0.85, 0.75), (0.25, 0.85))
AGGREGATIONS = ("expectation", "semideviation")


class DisasterError(ValueError):
    pass


def demand(distance, nu1: float = 20.0, nu2: float = 2.0):
    """Logistic demand ``nu1 / (1 + exp(nu2 * distance))``."""
    return nu1 / (1.0 + np.exp(nu2 * np.asarray(distance, dtype=float)))


@dataclass
class FacilityNetwork:
    """Facilities, directed arcs and cost data (scenario-independent defaults)."""

    coords: np.ndarray
    arcs: tuple
    d: np.ndarray
    h: np.ndarray
    b: np.ndarray
    a: np.ndarray  # per arc
    U: np.ndarray  # per arc
    gamma: np.ndarray  # per facility
    M: float

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float).reshape(-1, 2)
        self.arcs = tuple((int(i), int(j)) for i, j in self.arcs)
        m, n_arcs = self.m, len(self.arcs)
        for name, size in (("d", m), ("h", m), ("b", m), ("gamma", m), ("a", n_arcs), ("U", n_arcs)):
            setattr(self, name, np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (size,)).copy())
        issues = self.issues()
        if issues:
            raise DisasterError("; ".join(issues))

    @classmethod
    def complete(
        cls, coords=DEFAULT_COORDS, d=0.0, h=5.0, b=5.0, a=1.0, U=1.5, gamma=0.95, M=25.0
    ) -> "FacilityNetwork":
        m = len(coords)
        arcs = tuple((i, j) for i in range(m) for j in range(m) if i != j)
        return cls(coords, arcs, d, h, b, a, U, gamma, M)

    @property
    def m(self) -> int:
        return self.coords.shape[0]

    def issues(self) -> list:
        out = []
        m = self.m
        if len(set(self.arcs)) != len(self.arcs):
            out.append("duplicate arcs")
        if any(i == j or not (0 <= i < m and 0 <= j < m) for i, j in self.arcs):
            out.append("arc endpoint outside the facility set or self-loop")
        if np.any(self.U < 0):
            out.append("negative arc capacity")
        if np.any((self.gamma < 0) | (self.gamma > 1)):
            out.append("usable fraction outside [0, 1]")
        if not self.M > 0:
            out.append("budget must be positive")
        return out

    def outgoing(self, i: int) -> list:
        return [k for k, (s, _) in enumerate(self.arcs) if s == i]

    def incoming(self, i: int) -> list:
        return [k for k, (_, t) in enumerate(self.arcs) if t == i]

    def neighbors(self, i: int) -> list:
        return [self.arcs[k][1] for k in self.outgoing(i)]

    def to_dict(self) -> dict:
        return {"coords": self.coords.tolist(), "arcs": [list(a) for a in self.arcs],
                "d": self.d.tolist(), "h": self.h.tolist(), "b": self.b.tolist(),
                "a": self.a.tolist(), "U": self.U.tolist(), "gamma": self.gamma.tolist(),
                "M": self.M}

    @classmethod
    def from_dict(cls, d: dict) -> "FacilityNetwork":
        return cls(d["coords"], d["arcs"], d["d"], d["h"], d["b"], d["a"], d["U"], d["gamma"], d["M"])


@dataclass
class DisasterInstance:
    network: FacilityNetwork
    epicenters: np.ndarray  # (N, 2)
    demand: np.ndarray  # (N, m)
    prob: ProbabilityVector
    kappa0: float = 0.5
    kappa: np.ndarray = None
    weights: ScalarizationWeights = None
    ship_cost: np.ndarray = None  # (N, arcs)
    capacity: np.ndarray = None  # (N, arcs)
    usable: np.ndarray = None  # (N, m)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        net = self.network
        self.epicenters = np.asarray(self.epicenters, dtype=float).reshape(-1, 2)
        self.demand = np.asarray(self.demand, dtype=float)
        if not isinstance(self.prob, ProbabilityVector):
            self.prob = ProbabilityVector(self.prob)
        N, m = self.N, net.m
        self.kappa = np.broadcast_to(np.asarray(0.5 if self.kappa is None else self.kappa, float), (m,)).copy()
        if self.weights is None:
            self.weights = ScalarizationWeights.uniform(m)
        elif not isinstance(self.weights, ScalarizationWeights):
            self.weights = ScalarizationWeights(self.weights)
        n_arcs = len(net.arcs)
        self.ship_cost = np.broadcast_to(net.a if self.ship_cost is None else self.ship_cost, (N, n_arcs)).astype(float)
        self.capacity = np.broadcast_to(net.U if self.capacity is None else self.capacity, (N, n_arcs)).astype(float)
        self.usable = np.broadcast_to(net.gamma if self.usable is None else self.usable, (N, m)).astype(float)
        if self.demand.shape != (N, m):
            raise DisasterError(f"demand has shape {self.demand.shape}, expected {(N, m)}")
        if len(self.prob) != N:
            raise DisasterError("probabilities do not match the scenario count")
        if np.any(self.demand < 0):
            raise DisasterError("negative demand")
        if np.any(self.capacity < 0) or np.any((self.usable < 0) | (self.usable > 1)):
            raise DisasterError("invalid capacities or usable fractions")

    @property
    def m(self) -> int:
        return self.network.m

    @property
    def N(self) -> int:
        return self.epicenters.shape[0]

    def to_dict(self) -> dict:
        return {
            "schema": INSTANCE_SCHEMA,
            "network": self.network.to_dict(),
            "epicenters": self.epicenters.tolist(),
            "demand": self.demand.tolist(),
            "prob": self.prob.probs.tolist(),
            "kappa0": self.kappa0,
            "kappa": self.kappa.tolist(),
            "weights": self.weights.c.tolist(),
            "ship_cost": self.ship_cost.tolist(),
            "capacity": self.capacity.tolist(),
            "usable": self.usable.tolist(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DisasterInstance":
        if d.get("schema") != INSTANCE_SCHEMA:
            raise DisasterError(f"unsupported schema {d.get('schema')!r}, expected {INSTANCE_SCHEMA!r}")
        return cls(
            FacilityNetwork.from_dict(d["network"]), d["epicenters"], d["demand"],
            ProbabilityVector(d["prob"]), d["kappa0"], d["kappa"], ScalarizationWeights(d["weights"]),
            np.asarray(d["ship_cost"]), np.asarray(d["capacity"]), np.asarray(d["usable"]),
            d.get("meta", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "DisasterInstance":
        return cls.from_dict(json.loads(Path(path).read_text()))


def generate_instance(
    seed: int,
    N: int = 10,
    nu1: float = 20.0,
    nu2: float = 2.0,
    network: Optional[FacilityNetwork] = None,
    kappa0: float = 0.5,
    kappa: float = 0.5,
) -> DisasterInstance:
    """Seeded instance with ``N`` equally likely epicenters."""
    if N < 1:
        raise DisasterError("need at least one scenario")
    net = FacilityNetwork.complete() if network is None else network
    rng = np.random.default_rng(seed)
    epi = rng.random((N, 2))
    dist = np.linalg.norm(epi[:, None, :] - net.coords[None, :, :], axis=2)
    return DisasterInstance(
        net, epi, demand(dist, nu1, nu2), ProbabilityVector.uniform(N), kappa0, kappa,
        meta={"seed": seed, "nu1": nu1, "nu2": nu2, "rng": "PCG64"},
    )


# --- solutions -----------------------------------------------------------------


@dataclass
class DisasterSolution:
    r: np.ndarray  # (m,)
    flows: np.ndarray  # (N, arcs)
    surplus: np.ndarray  # (N, m)
    shortage: np.ndarray  # (N, m)
    theta: np.ndarray  # (m,)
    fairness: np.ndarray  # (m,)
    objective: float
    aggregation: str
    converged: bool = True

    def losses(self, inst: DisasterInstance) -> np.ndarray:
        """``Q_i^s`` with shape ``(m, N)``."""
        net = inst.network
        Q = np.zeros((inst.m, inst.N))
        for i in range(inst.m):
            out = net.outgoing(i)
            Q[i] = (inst.ship_cost[:, out] * self.flows[:, out]).sum(axis=1)
            Q[i] += net.h[i] * self.surplus[:, i] + net.b[i] * self.shortage[:, i]
        return Q

    def individual_risks(self, inst: DisasterInstance) -> np.ndarray:
        Q = self.losses(inst)
        return np.array([
            evaluate(MeanUpperSemiDeviation(float(inst.kappa[i])), DiscreteRandomVariable(Q[i], inst.prob))
            for i in range(inst.m)
        ])

    def violations(self, inst: DisasterInstance) -> dict:
        """Largest violation of each constraint family."""
        net = inst.network
        bal = np.zeros((inst.N, inst.m))
        for i in range(inst.m):
            bal[:, i] = (inst.usable[:, i] * self.r[i] + self.flows[:, net.incoming(i)].sum(axis=1)
                         - self.flows[:, net.outgoing(i)].sum(axis=1) - inst.demand[:, i]
                         - self.surplus[:, i] + self.shortage[:, i])
        neg = min(self.r.min(), self.flows.min(initial=0.0), self.surplus.min(), self.shortage.min())
        return {
            "flow_balance": float(np.abs(bal).max()),
            "budget": float(max(self.r.sum() - net.M, 0.0)),
            "capacity": float(max((self.flows - inst.capacity).max(initial=0.0), 0.0)),
            "sign": float(max(-neg, 0.0)),
        }

    def spread(self) -> float:
        return float(self.theta.max() - self.theta.min())


def systemic_risk(theta, inst: DisasterInstance, aggregation: str) -> float:
    outer = _outer(inst, aggregation)
    return evaluate(outer, DiscreteRandomVariable(np.asarray(theta, float), inst.weights.as_probability()))


def linear_scalarization_risk(sol: DisasterSolution, inst: DisasterInstance) -> float:
    """Semideviation (coefficient ``kappa_1``) of the c-weighted total loss."""
    total = inst.weights.c @ sol.losses(inst)
    return evaluate(MeanUpperSemiDeviation(float(inst.kappa[0])), DiscreteRandomVariable(total, inst.prob))


def _outer(inst: DisasterInstance, aggregation: str):
    if aggregation == "expectation":
        return Expectation()
    if aggregation == "semideviation":
        return MeanUpperSemiDeviation(inst.kappa0)
    raise DisasterError(f"unknown aggregation {aggregation!r}; choose from {AGGREGATIONS}")


# --- direct formulation -----------------------------------------------------------


def _loss_terms(inst: DisasterInstance, lp: LinearProgram, i: int, s: int):
    """Columns and coefficients of ``Q_i^s``."""
    net = inst.network
    cols = list(lp.blocks[("flow", i, s)]) + [lp.blocks[("u", s)][i], lp.blocks[("z", s)][i]]
    vals = list(inst.ship_cost[s, net.outgoing(i)]) + [net.h[i], net.b[i]]
    return cols, vals


def _flow_blocks(inst: DisasterInstance, lp: LinearProgram) -> None:
    net = inst.network
    for s in range(inst.N):
        for i in range(inst.m):
            out = net.outgoing(i)
            lp.add_vars(("flow", i, s), len(out), 0.0, inst.capacity[s, out])
        lp.add_vars(("u", s), inst.m, 0.0, np.inf)
        lp.add_vars(("z", s), inst.m, 0.0, np.inf)


def _arc_column(inst: DisasterInstance, lp: LinearProgram, s: int, k: int) -> int:
    i = inst.network.arcs[k][0]
    return int(lp.blocks[("flow", i, s)][inst.network.outgoing(i).index(k)])


def _balance_rows(inst: DisasterInstance, lp: LinearProgram) -> None:
    net = inst.network
    for s in range(inst.N):
        for i in range(inst.m):
            cols = [lp.blocks["r"][i], lp.blocks[("u", s)][i], lp.blocks[("z", s)][i]]
            vals = [inst.usable[s, i], -1.0, 1.0]
            for k in net.incoming(i):
                cols.append(_arc_column(inst, lp, s, k))
                vals.append(1.0)
            for k in net.outgoing(i):
                cols.append(_arc_column(inst, lp, s, k))
                vals.append(-1.0)
            lp.add_eq(cols, vals, inst.demand[s, i], ("balance", i, s))


def _semideviation_rows(inst: DisasterInstance, lp: LinearProgram, i: int, target: int, kappa: float) -> None:
    """``target = mean + kappa E[v]``, ``v_s >= Q_s - mean``, ``mean = E[Q]``."""
    p = inst.prob.probs
    mean = int(lp.blocks["mean"][i])
    v = lp.blocks[("v", i)]
    cols, vals = [mean], [1.0]
    for s in range(inst.N):
        c, w = _loss_terms(inst, lp, i, s)
        cols += c
        vals += list(-p[s] * np.asarray(w))
    lp.add_eq(cols, vals, 0.0, ("mean", i))
    lp.add_eq([target, mean] + list(v), [1.0, -1.0] + list(-kappa * p), 0.0, ("risk", i))
    for s in range(inst.N):
        c, w = _loss_terms(inst, lp, i, s)
        lp.add_ub(c + [mean, v[s]], list(w) + [-1.0, -1.0], 0.0, ("shortfall", i, s))


def formulate_direct(inst: DisasterInstance, aggregation: str = "semideviation") -> LinearProgram:
    """The allocation LP with per-facility semideviation risks and explicit fairness terms.

    Variables: ``r, theta, vartheta`` (``m`` each), per facility and scenario
    the outgoing flows, surplus and shortage, shortfalls ``v`` (``m N``) and
    per-facility mean losses (``m``).  With ``aggregation="expectation"`` the
    fairness rows are dropped and ``vartheta`` is fixed to zero.
    """
    _outer(inst, aggregation)
    net = inst.network
    m, c = inst.m, inst.weights.c
    k0 = inst.kappa0 if aggregation == "semideviation" else 0.0
    lp = LinearProgram()
    lp.add_vars("r", m, 0.0, np.inf, net.d)
    lp.add_vars("theta", m, -np.inf, np.inf, c)
    lp.add_vars("vartheta", m, 0.0, np.inf if aggregation == "semideviation" else 0.0, c * k0)
    _flow_blocks(inst, lp)
    # reorder so per-(i, s) blocks read (flows, u, z) in the variable listing
    for i in range(m):
        lp.add_vars(("v", i), inst.N, 0.0, np.inf)
    lp.add_vars("mean", m, -np.inf, np.inf)
    theta = lp.blocks["theta"]
    if aggregation == "semideviation":
        vt = lp.blocks["vartheta"]
        for i in range(m):
            vals = -c.copy()
            vals[i] += 1.0
            lp.add_ub(list(theta) + [vt[i]], list(vals) + [-1.0], 0.0, ("fairness", i))
    for i in range(m):
        _semideviation_rows(inst, lp, i, int(theta[i]), float(inst.kappa[i]))
    _balance_rows(inst, lp)
    lp.add_ub(lp.blocks["r"], np.ones(m), net.M, "budget")
    return lp


def _extract(inst: DisasterInstance, lp: LinearProgram, x: np.ndarray, objective, aggregation) -> DisasterSolution:
    net = inst.network
    N, m = inst.N, inst.m
    flows = np.zeros((N, len(net.arcs)))
    for s in range(N):
        for k in range(len(net.arcs)):
            flows[s, k] = x[_arc_column(inst, lp, s, k)]
    u = np.array([x[lp.blocks[("u", s)]] for s in range(N)])
    z = np.array([x[lp.blocks[("z", s)]] for s in range(N)])
    theta = x[lp.blocks["theta"]] if "theta" in lp.blocks else np.zeros(m)
    vt = x[lp.blocks["vartheta"]] if "vartheta" in lp.blocks else np.zeros(m)
    return DisasterSolution(x[lp.blocks["r"]], flows, u, z, theta, vt, float(objective), aggregation)


def solve_direct(inst: DisasterInstance, aggregation: str = "semideviation") -> DisasterSolution:
    lp = formulate_direct(inst, aggregation)
    sol = lp.solve()
    out = _extract(inst, lp, sol.x, sol.objective, aggregation)
    out.lp = sol
    return out


def formulate_linear_scalarization(inst: DisasterInstance) -> LinearProgram:
    """Minimize ``sum d r`` plus the semideviation of the c-weighted total loss."""
    net = inst.network
    m, c, p = inst.m, inst.weights.c, inst.prob.probs
    lp = LinearProgram()
    lp.add_vars("r", m, 0.0, np.inf, net.d)
    _flow_blocks(inst, lp)
    rho = int(lp.add_vars("rho", 1, -np.inf, np.inf, 1.0)[0])
    v = lp.add_vars("v_total", inst.N, 0.0, np.inf)
    mean = int(lp.add_vars("mean_total", 1, -np.inf, np.inf)[0])

    def total(s):
        cols, vals = [], []
        for i in range(m):
            cc, w = _loss_terms(inst, lp, i, s)
            cols += cc
            vals += list(c[i] * np.asarray(w))
        return cols, vals

    cols, vals = [mean], [1.0]
    for s in range(inst.N):
        cc, w = total(s)
        cols += cc
        vals += list(-p[s] * np.asarray(w))
    lp.add_eq(cols, vals, 0.0, "mean_total")
    lp.add_eq([rho, mean] + list(v), [1.0, -1.0] + list(-inst.kappa[0] * p), 0.0, "risk_total")
    for s in range(inst.N):
        cc, w = total(s)
        lp.add_ub(cc + [mean, v[s]], w + [-1.0, -1.0], 0.0, ("shortfall_total", s))
    _balance_rows(inst, lp)
    lp.add_ub(lp.blocks["r"], np.ones(m), net.M, "budget")
    return lp


def solve_linear_scalarization(inst: DisasterInstance) -> DisasterSolution:
    lp = formulate_linear_scalarization(inst)
    sol = lp.solve()
    out = _extract(inst, lp, sol.x, sol.objective, "linear")
    out.theta = out.individual_risks(inst)
    out.lp = sol
    return out


# --- generic two-stage form --------------------------------------------------------


def to_two_stage(inst: DisasterInstance, aggregation: str = "semideviation") -> TwoStageSystemProblem:
    """Map onto the generic model: one agent per facility, no systemic block.

    ``x_i = (r_i, s_i)`` with a budget row ``sum_i (r_i + s_i) = M``;
    ``y_i^s`` stacks the outgoing flows of facility ``i``, its surplus and
    its shortage.  Flow balance of facility ``i`` is dynamics block ``i``.
    Surplus and shortage get the implied bounds ``gamma M + sum of incoming
    capacities`` and ``D + sum of outgoing capacities``, which no optimal
    solution exceeds.
    """
    net = inst.network
    m, N = inst.m, inst.N
    deg = [len(net.outgoing(i)) for i in range(m)]
    n2 = max(deg) + 2
    n1 = 2
    cost = np.zeros((m, n1))
    cost[:, 0] = net.d
    X = [Polytope.box([0.0, 0.0], [net.M, net.M]) for _ in range(m)]
    A = np.ones((m, 1, n1))
    q = np.zeros((m, N, n2))
    T = np.zeros((m, N, 1, n1))
    W = np.zeros((N, m, m, 1, n2))
    h = np.zeros((m, N, 1))
    Y = []
    for i in range(m):
        out = net.outgoing(i)
        row = []
        for s in range(N):
            lb = np.zeros(n2)
            ub = np.zeros(n2)  # padding columns stay at zero
            ub[: len(out)] = inst.capacity[s, out]
            ub[-2] = inst.usable[s, i] * net.M + inst.capacity[s, net.incoming(i)].sum()
            ub[-1] = inst.demand[s, i] + inst.capacity[s, out].sum()
            row.append(Polytope.box(lb, ub))
            q[i, s, : len(out)] = inst.ship_cost[s, out]
            q[i, s, -2] = net.h[i]
            q[i, s, -1] = net.b[i]
            T[i, s, 0, 0] = inst.usable[s, i]
            h[i, s, 0] = inst.demand[s, i]
            W[s, i, i, 0, : len(out)] = -1.0
            W[s, i, i, 0, -2] = -1.0
            W[s, i, i, 0, -1] = 1.0
            for k in net.incoming(i):
                src = net.arcs[k][0]
                W[s, i, src, 0, net.outgoing(src).index(k)] = 1.0
        Y.append(row)
    risk = SystemicMeasureSpec(
        _outer(inst, aggregation),
        tuple(MeanUpperSemiDeviation(float(k)) for k in inst.kappa),
        inst.weights,
    )
    return TwoStageSystemProblem(
        prob=inst.prob, risk=risk, cost=cost, X=X, A=A, b=np.array([net.M]), q=q, T=T, h=h,
        Y=Y, W=W, B=np.zeros((N, 1, 0)), u=np.zeros((N, 0)),
        Z=[Polytope.box(np.zeros(0), np.zeros(0)) for _ in range(N)],
        meta={"source": "disaster", "aggregation": aggregation, "outgoing": deg},
    )


def from_two_stage(inst: DisasterInstance, x: np.ndarray, y: np.ndarray, theta, objective,
                   aggregation: str, converged: bool = True) -> DisasterSolution:
    """Disaster-level solution from generic ``x (m, n1)`` and ``y (m, N, n2)``."""
    net = inst.network
    flows = np.zeros((inst.N, len(net.arcs)))
    for i in range(inst.m):
        for pos, k in enumerate(net.outgoing(i)):
            flows[:, k] = y[i, :, pos]
    theta = np.asarray(theta, dtype=float)
    vt = np.maximum(theta - inst.weights.c @ theta, 0.0) if aggregation == "semideviation" else np.zeros(inst.m)
    return DisasterSolution(
        np.asarray(x)[:, 0].copy(), flows, y[:, :, -2].T.copy(), y[:, :, -1].T.copy(),
        theta, vt, float(objective), aggregation, converged,
    )


def from_distributed(inst: DisasterInstance, solution, aggregation: str) -> DisasterSolution:
    """Disaster-level view of a distributed-method :class:`~sysrisk.solver.adal.Solution`."""
    ext = solution.ext
    p = ext.problem
    x = np.array([solution.primal.field(i, "x")[: 2] for i in range(p.m)])
    y = np.array([[solution.primal.blocks[i][ext.layouts[i].y(s)][: p.n2 - ("y" in p.meta.get("unit", {}))]
                   for s in range(p.N)] for i in range(p.m)])
    return from_two_stage(inst, x, y, solution.theta, solution.objective, aggregation, solution.converged)


# --- per-location relaxation -------------------------------------------------------


@dataclass
class RelaxedLocation:
    value: float
    r: float
    theta: float
    vartheta: float
    status: str


def local_relaxed_subproblem(
    i: int,
    alpha: float,
    beta,
    delta,
    inst: DisasterInstance,
    aggregation: str = "semideviation",
) -> RelaxedLocation:
    """Facility ``i``'s part of the Lagrangian relaxation of budget, fairness and flow balance.

    ``alpha >= 0`` prices the budget, ``beta >= 0`` (length ``m``) the fairness
    rows and ``delta`` (shape ``(N, m)``) the flow-balance rows.  A shipment
    on arc ``(i, j)`` is priced ``delta_j^s - delta_i^s`` and assigned to its
    source.  The value includes the constant terms ``-alpha c_i M`` and
    ``-sum_s delta_i^s D_i^s``; it is ``-inf`` when the relaxed problem is
    unbounded below.
    """
    from .lp import LPUnbounded

    net = inst.network
    c = inst.weights.c
    beta = np.zeros(inst.m) if beta is None else np.asarray(beta, dtype=float)
    delta = np.asarray(delta, dtype=float).reshape(inst.N, inst.m)
    use_fair = aggregation == "semideviation"
    k0 = inst.kappa0 if use_fair else 0.0
    lp = LinearProgram()
    r = int(lp.add_vars("r", 1, 0.0, np.inf, net.d[i] + alpha + delta[:, i] @ inst.usable[:, i])[0])
    theta_cost = c[i] + (beta[i] - c[i] * beta.sum() if use_fair else 0.0)
    theta = int(lp.add_vars("theta", 1, -np.inf, np.inf, theta_cost)[0])
    vt = int(lp.add_vars("vartheta", 1, 0.0, np.inf if use_fair else 0.0,
                         c[i] * k0 - (beta[i] if use_fair else 0.0))[0])
    out = net.outgoing(i)
    p = inst.prob.probs
    mean = int(lp.add_vars("mean", 1, -np.inf, np.inf)[0])
    v = lp.add_vars("v", inst.N, 0.0, np.inf)
    loss = []
    for s in range(inst.N):
        prices = np.array([delta[s, net.arcs[k][1]] - delta[s, i] for k in out])
        fl = lp.add_vars(("flow", s), len(out), 0.0, inst.capacity[s, out], prices)
        uu = int(lp.add_vars(("u", s), 1, 0.0, np.inf, -delta[s, i])[0])
        zz = int(lp.add_vars(("z", s), 1, 0.0, np.inf, delta[s, i])[0])
        loss.append((list(fl) + [uu, zz], list(inst.ship_cost[s, out]) + [net.h[i], net.b[i]]))
    lp.const = -alpha * c[i] * net.M - float(delta[:, i] @ inst.demand[:, i])
    cols, vals = [mean], [1.0]
    for s, (cc, w) in enumerate(loss):
        cols += cc
        vals += list(-p[s] * np.asarray(w))
    lp.add_eq(cols, vals, 0.0)
    lp.add_eq([theta, mean] + list(v), [1.0, -1.0] + list(-inst.kappa[i] * p), 0.0)
    for s, (cc, w) in enumerate(loss):
        lp.add_ub(cc + [mean, int(v[s])], w + [-1.0, -1.0], 0.0)
    try:
        sol = lp.solve()
    except LPUnbounded:
        return RelaxedLocation(-np.inf, np.nan, np.nan, np.nan, "unbounded")
    return RelaxedLocation(sol.objective, sol.x[r], sol.x[theta], sol.x[vt], "optimal")


def relaxation_value(alpha, beta, delta, inst: DisasterInstance, aggregation: str = "semideviation") -> float:
    """Lagrangian dual function: the sum of all per-location values."""
    return float(sum(
        local_relaxed_subproblem(i, alpha, beta, delta, inst, aggregation).value for i in range(inst.m)
    ))


def direct_multipliers(inst: DisasterInstance, lp: LinearProgram, sol: LPSolution):
    """``(alpha, beta, delta)`` from the dual solution of :func:`formulate_direct`.

    Signs follow the relaxation ``f + alpha (sum r - M) + sum beta_i (fairness_i)
    + sum delta (balance slack)`` with ``alpha, beta >= 0``.
    """
    eq = {name: k for k, name in enumerate(lp.eq_names)}
    ub = {name: k for k, name in enumerate(lp.ub_names)}
    alpha = -float(sol.ub_duals[ub["budget"]])
    beta = np.array([-float(sol.ub_duals[ub[("fairness", i)]]) if ("fairness", i) in ub else 0.0
                     for i in range(inst.m)])
    delta = np.array([[-float(sol.eq_duals[eq[("balance", i, s)]]) for i in range(inst.m)]
                      for s in range(inst.N)])
    return alpha, beta, delta


# --- reporting ---------------------------------------------------------------------


@dataclass
class Report:
    risk_header: list
    risk_rows: list
    alloc_header: list
    alloc_rows: list

    @staticmethod
    def _csv(header, rows) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in r])
        return buf.getvalue()

    @staticmethod
    def _text(header, rows) -> str:
        cells = [header] + [[f"{v:.2f}" if isinstance(v, float) else str(v) for v in r] for r in rows]
        widths = [max(len(row[k]) for row in cells) for k in range(len(header))]
        lines = ["  ".join(c.rjust(w) if k else c.ljust(w) for k, (c, w) in enumerate(zip(row, widths)))
                 for row in cells]
        return "\n".join(lines)

    def risk_csv(self) -> str:
        return self._csv(self.risk_header, self.risk_rows)

    def allocation_csv(self) -> str:
        return self._csv(self.alloc_header, self.alloc_rows)

    def text(self) -> str:
        return self._text(self.risk_header, self.risk_rows) + "\n\n" + self._text(self.alloc_header, self.alloc_rows)


MODE_LABELS = {"expectation": "expectation", "semideviation": "semideviation", "linear": "linear scalarization"}


def report(solutions: dict, inst: DisasterInstance) -> Report:
    """Risk and allocation tables for solutions keyed by aggregation mode.

    The risk table lists individual risks, the systemic risk under the mode's
    own aggregation (blank for linear scalarization) and the semideviation of
    the c-weighted total loss.  Non-converged solutions are marked.
    """
    m = inst.m
    risk_header = ["N", "aggregation"] + [f"theta_{i + 1}" for i in range(m)] + ["rho_sys", "rho_c", "status"]
    alloc_header = ["N", "aggregation"] + [f"r_{i + 1}" for i in range(m)] + ["total", "status"]
    risk_rows, alloc_rows = [], []
    for mode, sol in solutions.items():
        status = "converged" if sol.converged else "NOT CONVERGED"
        theta = sol.individual_risks(inst) if mode == "linear" else sol.theta
        rs = systemic_risk(theta, inst, mode) if mode in AGGREGATIONS else ""
        label = MODE_LABELS.get(mode, mode)
        risk_rows.append([inst.N, label] + [float(t) for t in theta]
                         + [rs if rs == "" else float(rs), float(linear_scalarization_risk(sol, inst)), status])
        alloc_rows.append([inst.N, label] + [float(v) for v in sol.r] + [float(sol.r.sum()), status])
    return Report(risk_header, risk_rows, alloc_header, alloc_rows)
