"""Risk-averse two-stage system problems and their distributed reformulation.

A :class:`TwoStageSystemProblem` couples ``m`` agents through first-stage
linear constraints, per-scenario dynamics and a systemic cost shared by all
agents.  :func:`build_extended` rewrites it into the form the distributed
method works on: every agent keeps private copies of the systemic variables
and of the stacked vector ``v_i = (eta_i, w_i^1..w_i^L)``, copies agree along
spanning trees, the outer risk measure enters through a pool of cutting planes
and each inner risk measure through its exact linear epigraph.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .measures import (
    DiscreteRandomVariable,
    ProbabilityVector,
    RiskMeasureSpec,
    epigraph_reformulation,
    subgradient,
)
from .systemic import ScalarizationWeights, SystemicMeasureSpec

SCHEMA = "sysrisk/two-stage-problem@1"
FAMILIES = ("cut", "first_stage", "dynamics", "syscost", "consensus_v", "consensus_z")


class ModelError(ValueError):
    pass


# --- sets ---------------------------------------------------------------------


def _num_list(arr):
    return [None if not np.isfinite(v) else float(v) for v in np.asarray(arr, dtype=float).ravel()]


def _from_num_list(values, fill):
    return np.array([fill if v is None else float(v) for v in values], dtype=float)


@dataclass
class Polytope:
    """``{x : lb <= x <= ub, G x <= g}``."""

    lb: np.ndarray
    ub: np.ndarray
    G: np.ndarray = None
    g: np.ndarray = None

    def __post_init__(self):
        self.lb = np.asarray(self.lb, dtype=float).reshape(-1)
        self.ub = np.asarray(self.ub, dtype=float).reshape(-1)
        n = self.lb.size
        if self.G is None:
            self.G = np.zeros((0, n))
            self.g = np.zeros(0)
        G = np.asarray(self.G, dtype=float)
        self.G = G.reshape(G.size // n if n else G.shape[0] if G.ndim == 2 else 0, n)
        self.g = np.asarray(self.g, dtype=float).reshape(-1)

    @classmethod
    def box(cls, lb, ub) -> "Polytope":
        return cls(lb, ub)

    @property
    def dim(self) -> int:
        return self.lb.size

    def append_fixed(self, value: float = 1.0) -> "Polytope":
        G = np.hstack([self.G, np.zeros((self.G.shape[0], 1))])
        return Polytope(np.append(self.lb, value), np.append(self.ub, value), G, self.g.copy())

    def contains(self, x, tol: float = 1e-9) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(
            np.all(x >= self.lb - tol)
            and np.all(x <= self.ub + tol)
            and np.all(self.G @ x <= self.g + tol)
        )

    def is_bounded(self) -> bool:
        if np.all(np.isfinite(self.lb)) and np.all(np.isfinite(self.ub)):
            return True
        from .lp import LinearProgram, LPError, LPUnbounded

        for j in range(self.dim):
            for sign in (1.0, -1.0):
                lp = LinearProgram()
                cols = lp.add_vars("x", self.dim, self.lb, self.ub)
                lp.c[j] = -sign
                lp.add_dense_rows(cols, self.G, self.g, "ub")
                try:
                    lp.solve()
                except LPUnbounded:
                    return False
                except LPError:
                    return True  # empty set
        return True

    def to_dict(self) -> dict:
        return {"lb": _num_list(self.lb), "ub": _num_list(self.ub),
                "G": self.G.tolist(), "g": self.g.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Polytope":
        lb = _from_num_list(d["lb"], -np.inf)
        G = np.asarray(d.get("G", []), dtype=float).reshape(-1, lb.size)
        return cls(lb, _from_num_list(d["ub"], np.inf), G, np.asarray(d.get("g", []), dtype=float))


# --- the two-stage problem ------------------------------------------------------


@dataclass
class TwoStageSystemProblem:
    """Data of the risk-averse two-stage problem on ``m`` agents and ``N`` scenarios.

    Array shapes (``i`` agent, ``s`` scenario, ``k`` dynamics block)::

        cost (m, n1), cost0 (m,)      affine first-stage costs f_i
        A (m, d1, n1), b (d1,)        sum_i A_i x_i = b
        q (m, N, n2)                  second-stage cost vectors
        T (m, N, d2, n1), h (m, N, d2)
        W (N, m, m, d2, n2)           W[s, k, j] multiplies y_j^s in block k
        B (N, d2, d3), u (N, d3)      systemic dynamics and cost

    Block ``(k, s)`` of the dynamics reads
    ``T_k^s x_k + sum_j W[s,k,j] y_j^s + B^s z^s = h_k^s``.
    """

    prob: ProbabilityVector
    risk: SystemicMeasureSpec
    cost: np.ndarray
    X: list
    A: np.ndarray
    b: np.ndarray
    q: np.ndarray
    T: np.ndarray
    h: np.ndarray
    Y: list
    W: np.ndarray
    B: np.ndarray
    u: np.ndarray
    Z: list
    cost0: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.prob, ProbabilityVector):
            self.prob = ProbabilityVector(self.prob)
        for name in ("cost", "A", "b", "q", "T", "h", "W", "B", "u"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        m = self.cost.shape[0]
        if self.cost0 is None:
            self.cost0 = np.zeros(m)
        self.cost0 = np.asarray(self.cost0, dtype=float).reshape(m)
        if self.b.ndim == 0:
            self.b = self.b.reshape(1)
        self.X = list(self.X)
        self.Y = [list(row) for row in self.Y]
        self.Z = list(self.Z)
        problems = self.dimension_issues()
        if problems:
            raise ModelError("; ".join(f"{loc}: {msg}" for loc, msg in problems))

    # dimensions
    @property
    def m(self) -> int:
        return self.cost.shape[0]

    @property
    def N(self) -> int:
        return len(self.prob)

    @property
    def n1(self) -> int:
        return self.cost.shape[1]

    @property
    def n2(self) -> int:
        return self.q.shape[2]

    @property
    def d1(self) -> int:
        return self.b.size

    @property
    def d2(self) -> int:
        return self.h.shape[2]

    @property
    def d3(self) -> int:
        return self.u.shape[1]

    @property
    def weights(self) -> ScalarizationWeights:
        return self.risk.weights

    @property
    def is_homogeneous(self) -> bool:
        return not np.any(self.b) and not np.any(self.h)

    def dimension_issues(self) -> list:
        out = []
        m, N = self.cost.shape[0], len(self.prob)
        n1 = self.cost.shape[1]

        def want(name, arr, shape):
            if arr.shape != shape:
                out.append((name, f"shape {arr.shape}, expected {shape}"))

        if self.q.ndim != 3 or self.h.ndim != 3 or self.u.ndim != 2:
            return [("arrays", "q, h must be 3-d and u 2-d")]
        n2, d2, d3 = self.q.shape[2], self.h.shape[2], self.u.shape[1]
        d1 = self.b.size
        want("A", self.A, (m, d1, n1))
        want("q", self.q, (m, N, n2))
        want("T", self.T, (m, N, d2, n1))
        want("h", self.h, (m, N, d2))
        want("W", self.W, (N, m, m, d2, n2))
        want("B", self.B, (N, d2, d3))
        want("u", self.u, (N, d3))
        if self.risk.m != m:
            out.append(("risk", f"measure defined for {self.risk.m} agents, problem has {m}"))
        if len(self.X) != m:
            out.append(("X", f"{len(self.X)} sets for {m} agents"))
        for i, Xi in enumerate(self.X):
            if Xi.dim != n1:
                out.append((f"X[{i}]", f"dimension {Xi.dim}, expected {n1}"))
        if len(self.Y) != m or any(len(row) != N for row in self.Y):
            out.append(("Y", f"expected {m} x {N} second-stage sets"))
        else:
            for i, row in enumerate(self.Y):
                for s, Ys in enumerate(row):
                    if Ys.dim != n2:
                        out.append((f"Y[{i}][{s}]", f"dimension {Ys.dim}, expected {n2}"))
        if len(self.Z) != N:
            out.append(("Z", f"{len(self.Z)} systemic sets for {N} scenarios"))
        else:
            for s, Zs in enumerate(self.Z):
                if Zs.dim != d3:
                    out.append((f"Z[{s}]", f"dimension {Zs.dim}, expected {d3}"))
        return out

    # (de)serialization
    def to_dict(self) -> dict:
        agents = []
        for i in range(self.m):
            agents.append({
                "cost": self.cost[i].tolist(),
                "cost0": float(self.cost0[i]),
                "X": self.X[i].to_dict(),
                "A": self.A[i].tolist(),
                "scenarios": [
                    {"q": self.q[i, s].tolist(), "T": self.T[i, s].tolist(),
                     "h": self.h[i, s].tolist(), "Y": self.Y[i][s].to_dict()}
                    for s in range(self.N)
                ],
            })
        systemic = [
            {"B": self.B[s].tolist(), "u": self.u[s].tolist(), "Z": self.Z[s].to_dict(),
             "W": self.W[s].tolist()}
            for s in range(self.N)
        ]
        return {
            "schema": SCHEMA,
            "dims": {"m": self.m, "N": self.N, "n1": self.n1, "n2": self.n2,
                     "d1": self.d1, "d2": self.d2, "d3": self.d3},
            "prob": self.prob.probs.tolist(),
            "risk": self.risk.to_dict(),
            "b": self.b.tolist(),
            "agents": agents,
            "scenarios": systemic,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TwoStageSystemProblem":
        if d.get("schema") != SCHEMA:
            raise ModelError(f"unsupported schema {d.get('schema')!r}, expected {SCHEMA!r}")
        dims = d["dims"]
        m, N = dims["m"], dims["N"]
        n1, n2, d1, d2, d3 = dims["n1"], dims["n2"], dims["d1"], dims["d2"], dims["d3"]
        ag = d["agents"]
        sc = d["scenarios"]

        def arr(values, shape):
            return np.asarray(values, dtype=float).reshape(shape)

        return cls(
            prob=ProbabilityVector(d["prob"]),
            risk=SystemicMeasureSpec.from_dict(d["risk"]),
            cost=arr([a["cost"] for a in ag], (m, n1)),
            cost0=np.array([a.get("cost0", 0.0) for a in ag]),
            X=[Polytope.from_dict(a["X"]) for a in ag],
            A=arr([a["A"] for a in ag], (m, d1, n1)),
            b=arr(d["b"], (d1,)),
            q=arr([[s["q"] for s in a["scenarios"]] for a in ag], (m, N, n2)),
            T=arr([[s["T"] for s in a["scenarios"]] for a in ag], (m, N, d2, n1)),
            h=arr([[s["h"] for s in a["scenarios"]] for a in ag], (m, N, d2)),
            Y=[[Polytope.from_dict(s["Y"]) for s in a["scenarios"]] for a in ag],
            W=arr([s["W"] for s in sc], (N, m, m, d2, n2)),
            B=arr([s["B"] for s in sc], (N, d2, d3)),
            u=arr([s["u"] for s in sc], (N, d3)),
            Z=[Polytope.from_dict(s["Z"]) for s in sc],
            meta=d.get("meta", {}),
        )


def save_problem(problem: TwoStageSystemProblem, path) -> None:
    Path(path).write_text(json.dumps(problem.to_dict(), indent=1, sort_keys=True))


def load_problem(path) -> TwoStageSystemProblem:
    return TwoStageSystemProblem.from_dict(json.loads(Path(path).read_text()))


def homogenize(problem: TwoStageSystemProblem) -> TwoStageSystemProblem:
    """Equivalent problem with ``b = 0`` and ``h = 0``.

    A nonzero ``b`` is absorbed by a first-stage component fixed to one whose
    column in ``A_i`` is ``-c_i b``; a nonzero ``h`` by a second-stage
    component fixed to one whose column in the own-block ``W[s, i, i]`` is
    ``-h_i^s``.  The unit components are recorded in ``meta["unit"]``.
    """
    if problem.is_homogeneous:
        return problem
    p = problem
    c = p.weights.c
    unit = dict(p.meta.get("unit", {}))
    cost, A, T, X = p.cost, p.A, p.T, p.X
    if np.any(p.b):
        cost = np.concatenate([cost, np.zeros((p.m, 1))], axis=1)
        col = -c[:, None] * p.b[None, :]
        A = np.concatenate([A, col[:, :, None]], axis=2)
        T = np.concatenate([T, np.zeros(T.shape[:3] + (1,))], axis=3)
        X = [Xi.append_fixed(1.0) for Xi in X]
        unit["x"] = p.n1
    q, W, Y = p.q, p.W, p.Y
    if np.any(p.h):
        q = np.concatenate([q, np.zeros(q.shape[:2] + (1,))], axis=2)
        extra = np.zeros(W.shape[:4] + (1,))
        for s in range(p.N):
            for i in range(p.m):
                extra[s, i, i, :, 0] = -p.h[i, s]
        W = np.concatenate([W, extra], axis=4)
        Y = [[Ys.append_fixed(1.0) for Ys in row] for row in Y]
        unit["y"] = p.n2
    meta = dict(p.meta)
    meta["unit"] = unit
    return replace(
        p, cost=cost, A=A, b=np.zeros(p.d1), T=T, X=X, q=q, W=W, Y=Y,
        h=np.zeros_like(p.h), meta=meta,
    )


# --- trees and cuts ---------------------------------------------------------------


@dataclass(frozen=True)
class SpanningTree:
    """Undirected arcs over agents ``0..m-1``; validity is checked on demand."""

    m: int
    arcs: tuple

    def __post_init__(self):
        object.__setattr__(self, "arcs", tuple((int(i), int(j)) for i, j in self.arcs))

    @classmethod
    def path(cls, m: int) -> "SpanningTree":
        return cls(m, tuple((i, i + 1) for i in range(m - 1)))

    @classmethod
    def star(cls, m: int, center: int = 0) -> "SpanningTree":
        return cls(m, tuple((center, j) for j in range(m) if j != center))

    def defects(self) -> list:
        out = []
        if any(not (0 <= i < self.m and 0 <= j < self.m) or i == j for i, j in self.arcs):
            out.append("arc endpoint outside the agent set or self-loop")
            return out
        parent = list(range(self.m))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        cyclic = False
        for i, j in self.arcs:
            ri, rj = find(i), find(j)
            if ri == rj:
                cyclic = True
            parent[ri] = rj
        components = len({find(a) for a in range(self.m)})
        if components > 1:
            out.append(f"disconnected consensus graph ({components} components)")
        if cyclic:
            out.append("consensus graph contains a cycle")
        if len(self.arcs) != self.m - 1 and not out:
            out.append(f"{len(self.arcs)} arcs, a spanning tree needs {self.m - 1}")
        return out

    @property
    def is_valid(self) -> bool:
        return not self.defects()


class CutPool:
    """Finite set of outer-measure densities ``nu^l`` approximating its envelope."""

    def __init__(self, weights: ScalarizationWeights, vectors: Iterable = ()):
        self.weights = weights
        self.vectors: list = []
        for v in vectors:
            self.add(v)

    @classmethod
    def expectation(cls, weights: ScalarizationWeights) -> "CutPool":
        return cls(weights, [np.ones(len(weights))])

    def __len__(self) -> int:
        return len(self.vectors)

    def copy(self) -> "CutPool":
        return CutPool(self.weights, [v.copy() for v in self.vectors])

    def is_density(self, nu, tol: float = 1e-10) -> bool:
        nu = np.asarray(nu, dtype=float)
        return bool(
            nu.shape == (len(self.weights),)
            and np.all(nu >= -tol)
            and abs(float(self.weights.c @ nu) - 1.0) <= tol
        )

    def add(self, nu, tol: float = 1e-9) -> bool:
        """Append ``nu`` unless it duplicates a pooled vector; returns whether added."""
        nu = np.array(nu, dtype=float)
        if not self.is_density(nu):
            raise ModelError("cut vector is not a density on the weighted agent space")
        if any(np.max(np.abs(nu - v)) <= tol for v in self.vectors):
            return False
        self.vectors.append(nu)
        return True

    def values(self, theta) -> np.ndarray:
        """``<nu^l, theta>_c`` for every pooled cut."""
        if not self.vectors:
            return np.zeros(0)
        return np.vstack(self.vectors) @ (self.weights.c * np.asarray(theta, dtype=float))


def generate_cut(theta, outer: RiskMeasureSpec, c: ScalarizationWeights) -> np.ndarray:
    """Supporting density of the outer measure at the risk profile ``theta``."""
    return subgradient(outer, DiscreteRandomVariable(np.asarray(theta, float), c.as_probability()))


# --- extended problem --------------------------------------------------------------


@dataclass(frozen=True)
class AgentLayout:
    """Column slices of one agent's variable block ``V_i``."""

    N: int
    n1: int
    n2: int
    d3: int
    n_aux: int
    n_cuts: int

    @property
    def has_systemic(self) -> bool:
        return self.d3 > 0

    @property
    def x(self) -> slice:
        return slice(0, self.n1)

    @property
    def y0(self) -> int:
        return self.n1

    def y(self, s: int) -> slice:
        a = self.n1 + s * self.n2
        return slice(a, a + self.n2)

    @property
    def z0(self) -> int:
        return self.n1 + self.N * self.n2

    def z(self, s: int) -> slice:
        a = self.z0 + s * self.d3
        return slice(a, a + self.d3)

    @property
    def r0(self) -> int:
        return self.z0 + self.N * self.d3

    def r(self, s: int) -> int:
        return self.r0 + s

    @property
    def n_r(self) -> int:
        return self.N if self.has_systemic else 0

    @property
    def eta(self) -> int:
        return self.r0 + self.n_r

    @property
    def theta(self) -> int:
        return self.eta + 1

    @property
    def aux(self) -> slice:
        return slice(self.theta + 1, self.theta + 1 + self.n_aux)

    @property
    def w0(self) -> int:
        return self.theta + 1 + self.n_aux

    def w(self, l: int) -> int:
        return self.w0 + l

    @property
    def v(self) -> np.ndarray:
        """Indices of the consensus stack ``(eta, w^1..w^L)``."""
        return np.concatenate([[self.eta], self.w0 + np.arange(self.n_cuts)]).astype(int)

    @property
    def size(self) -> int:
        return self.w0 + self.n_cuts

    def names(self) -> dict:
        return {"x": self.x, "y": slice(self.n1, self.z0), "z": slice(self.z0, self.r0),
                "r": slice(self.r0, self.eta), "eta": self.eta, "theta": self.theta,
                "aux": self.aux, "w": slice(self.w0, self.size)}


@dataclass
class LocalBlock:
    """Private constraints of one agent: ``A_eq V = b_eq, A_ub V <= b_ub, lb <= V <= ub``."""

    A_eq: np.ndarray
    b_eq: np.ndarray
    A_ub: np.ndarray
    b_ub: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    unbounded: list = field(default_factory=list)


@dataclass(frozen=True)
class ExtendedProblem:
    """Consensus + cutting-plane form.  Treat as immutable; build a new one to add cuts.

    Coupling rows are ``C V = 0`` over the concatenated agent blocks with
    per-row weights (``p_s`` for scenario rows, 1 otherwise).
    """

    problem: TwoStageSystemProblem
    tree: SpanningTree
    scenario_trees: tuple
    cuts: tuple
    layouts: tuple
    offsets: np.ndarray
    cost: tuple
    const: float
    local: tuple
    C: sp.csr_matrix
    row_keys: tuple
    row_family: np.ndarray
    row_weight: np.ndarray
    local_rows: tuple
    const_cols: np.ndarray
    family_scale: dict

    @property
    def m(self) -> int:
        return self.problem.m

    @property
    def n_total(self) -> int:
        return int(self.offsets[-1])

    @property
    def n_rows(self) -> int:
        return self.C.shape[0]

    def agent_slice(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def agent_columns(self, i: int) -> sp.csr_matrix:
        return self.C[:, self.agent_slice(i)]

    def row_index(self) -> dict:
        return {k: r for r, k in enumerate(self.row_keys)}

    def pool(self) -> CutPool:
        return CutPool(self.problem.weights, [np.array(v) for v in self.cuts])

    def objective(self, V: np.ndarray) -> float:
        return self.const + sum(
            float(self.cost[i] @ V[self.agent_slice(i)]) for i in range(self.m)
        )

    def split(self, V: np.ndarray) -> list:
        return [V[self.agent_slice(i)] for i in range(self.m)]


def _agent_loss_map(problem, lay: AgentLayout, i: int) -> np.ndarray:
    """Rows ``s`` of the affine map ``V_i -> Q_i^s = q_i^s y_i^s + r_i^s``."""
    Q = np.zeros((problem.N, lay.theta + 1))
    for s in range(problem.N):
        Q[s, lay.y(s)] = problem.q[i, s]
        if lay.has_systemic:
            Q[s, lay.r(s)] = 1.0
    return Q


def build_extended(
    problem: TwoStageSystemProblem,
    tree: Optional[SpanningTree] = None,
    scenario_trees: Optional[Sequence[SpanningTree]] = None,
    pool: Optional[CutPool] = None,
    strict: bool = True,
) -> ExtendedProblem:
    """Assemble the consensus + cut reformulation of a homogeneous problem.

    Coupling rows that touch a single agent (always the case for ``m = 1``)
    are moved into that agent's local equality constraints.  With
    ``strict=False`` defective trees are accepted so that :func:`validate`
    can report them.
    """
    p = problem
    if not p.is_homogeneous:
        raise ModelError("problem must be homogenized first (b = 0, h = 0)")
    m, N = p.m, p.N
    tree = SpanningTree.path(m) if tree is None else tree
    if scenario_trees is None:
        scenario_trees = tuple(tree for _ in range(N))
    scenario_trees = tuple(scenario_trees)
    if len(scenario_trees) != N:
        raise ModelError(f"{len(scenario_trees)} scenario trees for {N} scenarios")
    pool = CutPool.expectation(p.weights) if pool is None else pool
    if len(pool) == 0:
        raise ModelError("cut pool is empty")
    if strict:
        for label, t in [("tree", tree)] + [(f"scenario tree {s}", t) for s, t in enumerate(scenario_trees)]:
            bad = t.defects()
            if bad:
                raise ModelError(f"{label}: {'; '.join(bad)}")

    c = p.weights.c
    d3 = p.d3
    L = len(pool)
    layouts, templates = [], []
    for i in range(m):
        tmpl = epigraph_reformulation(p.risk.inner[i], p.prob)
        templates.append(tmpl)
        layouts.append(AgentLayout(N, p.n1, p.n2, d3, tmpl.n_aux, L))
    offsets = np.concatenate([[0], np.cumsum([lay.size for lay in layouts])]).astype(int)

    # coupling rows as (key, family, weight, {agent: {col: coef}})
    rows = []

    def add_row(key, family, weight, parts):
        rows.append((key, family, weight, parts))

    for l, nu in enumerate(pool.vectors):
        parts = {}
        for i, lay in enumerate(layouts):
            if c[i] == 0.0:
                continue
            parts[i] = {lay.theta: c[i] * nu[i], lay.w(l): c[i], lay.eta: -c[i]}
        add_row(("cut", l), "cut", 1.0, parts)
    for k in range(p.d1):
        parts = {i: {j: p.A[i, k, j] for j in range(p.n1)} for i in range(m)}
        add_row(("first_stage", k), "first_stage", 1.0, parts)
    for s in range(N):
        ps = p.prob.probs[s]
        for blk in range(m):
            for r in range(p.d2):
                parts = {}
                lay = layouts[blk]
                own = {j: p.T[blk, s, r, j] for j in range(p.n1)}
                if d3:
                    zs = lay.z(s)
                    own.update({zs.start + j: p.B[s, r, j] for j in range(d3)})
                parts[blk] = own
                for j in range(m):
                    ys = layouts[j].y(s)
                    coefs = {ys.start + t: p.W[s, blk, j, r, t] for t in range(p.n2)}
                    parts.setdefault(j, {})
                    for col, v in coefs.items():
                        parts[j][col] = parts[j].get(col, 0.0) + v
                add_row(("dynamics", blk, s, r), "dynamics", ps, parts)
        if d3:
            parts = {}
            for i, lay in enumerate(layouts):
                zs = lay.z(s)
                entry = {zs.start + j: c[i] * p.u[s, j] for j in range(d3)}
                entry[lay.r(s)] = -1.0
                parts[i] = entry
            add_row(("syscost", s), "syscost", ps, parts)
    for a, (i, j) in enumerate(tree.arcs):
        vi, vj = layouts[i].v, layouts[j].v
        for comp in range(1 + L):
            add_row(("consensus_v", a, comp), "consensus_v", 1.0,
                    {i: {int(vi[comp]): 1.0}, j: {int(vj[comp]): -1.0}})
    if d3:
        for s, t in enumerate(scenario_trees):
            ps = p.prob.probs[s]
            for a, (i, j) in enumerate(t.arcs):
                zi, zj = layouts[i].z(s), layouts[j].z(s)
                for k in range(d3):
                    add_row(("consensus_z", s, a, k), "consensus_z", ps,
                            {i: {zi.start + k: 1.0}, j: {zj.start + k: -1.0}})

    # local constraints
    local_eq = [[] for _ in range(m)]
    local_rows = [[] for _ in range(m)]
    kept = []
    for key, fam, wgt, parts in rows:
        parts = {i: {col: v for col, v in d.items() if v != 0.0} for i, d in parts.items()}
        parts = {i: d for i, d in parts.items() if d}
        if not parts:
            continue
        if len(parts) == 1:
            (i, d), = parts.items()
            vec = np.zeros(layouts[i].size)
            for col, v in d.items():
                vec[col] = v
            local_eq[i].append(vec)
            local_rows[i].append(key)
            continue
        kept.append((key, fam, wgt, parts))

    local = []
    for i, lay in enumerate(layouts):
        n = lay.size
        lb = np.full(n, -np.inf)
        ub = np.full(n, np.inf)
        ub_rows, ub_rhs = [], []
        unbounded = []
        Xi = p.X[i]
        lb[lay.x], ub[lay.x] = Xi.lb, Xi.ub
        for k in range(Xi.G.shape[0]):
            row = np.zeros(n)
            row[lay.x] = Xi.G[k]
            ub_rows.append(row)
            ub_rhs.append(Xi.g[k])
        for s in range(N):
            Ys = p.Y[i][s]
            lb[lay.y(s)], ub[lay.y(s)] = Ys.lb, Ys.ub
            for k in range(Ys.G.shape[0]):
                row = np.zeros(n)
                row[lay.y(s)] = Ys.G[k]
                ub_rows.append(row)
                ub_rhs.append(Ys.g[k])
            if d3:
                Zs = p.Z[s]
                lb[lay.z(s)], ub[lay.z(s)] = Zs.lb, Zs.ub
                for k in range(Zs.G.shape[0]):
                    row = np.zeros(n)
                    row[lay.z(s)] = Zs.G[k]
                    ub_rows.append(row)
                    ub_rhs.append(Zs.g[k])
                lb[lay.r(s)] = 0.0
        lb[lay.w0:] = 0.0
        tmpl = templates[i]
        lb[lay.aux], ub[lay.aux] = tmpl.aux_lb, tmpl.aux_ub
        Qmap = _agent_loss_map(p, lay, i)
        Aeq_t, beq_t, Aub_t, bub_t = tmpl.instantiate(Qmap, 0.0, lay.theta, lay.theta + 1)
        pad = n - Aeq_t.shape[1]
        eq_rows = [np.concatenate([r, np.zeros(pad)]) for r in Aeq_t]
        eq_rhs = list(beq_t)
        ub_rows += [np.concatenate([r, np.zeros(pad)]) for r in Aub_t]
        ub_rhs += list(bub_t)
        eq_rows += local_eq[i]
        eq_rhs += [0.0] * len(local_eq[i])
        local.append(LocalBlock(
            np.array(eq_rows).reshape(-1, n), np.array(eq_rhs, dtype=float),
            np.array(ub_rows).reshape(-1, n), np.array(ub_rhs, dtype=float),
            lb, ub, unbounded,
        ))

    # global coupling matrix
    data, ri, ci = [], [], []
    for r, (key, fam, wgt, parts) in enumerate(kept):
        for i, d in parts.items():
            for col, v in d.items():
                data.append(v)
                ri.append(r)
                ci.append(offsets[i] + col)
    C = sp.csr_matrix((data, (ri, ci)), shape=(len(kept), int(offsets[-1])))
    row_family = np.array([FAMILIES.index(fam) for _, fam, _, _ in kept], dtype=int)
    row_weight = np.array([w for _, _, w, _ in kept], dtype=float)

    const_cols = np.zeros(int(offsets[-1]), dtype=bool)
    unit = p.meta.get("unit", {})
    for i, lay in enumerate(layouts):
        base = offsets[i]
        if "x" in unit:
            const_cols[base + unit["x"]] = True
        if "y" in unit:
            for s in range(N):
                const_cols[base + lay.y(s).start + unit["y"]] = True
    data_vec = C[:, const_cols] @ np.ones(int(const_cols.sum())) if const_cols.any() else np.zeros(C.shape[0])
    family_scale = {}
    for f, name in enumerate(FAMILIES):
        mask = row_family == f
        family_scale[name] = 1.0 + float(np.sqrt(np.sum(row_weight[mask] * data_vec[mask] ** 2)))

    cost = []
    for i, lay in enumerate(layouts):
        vec = np.zeros(lay.size)
        vec[lay.x] = p.cost[i]
        vec[lay.eta] = c[i]
        cost.append(vec)
    return ExtendedProblem(
        problem=p,
        tree=tree,
        scenario_trees=scenario_trees,
        cuts=tuple(np.array(v) for v in pool.vectors),
        layouts=tuple(layouts),
        offsets=offsets,
        cost=tuple(cost),
        const=float(p.cost0.sum()),
        local=tuple(local),
        C=C,
        row_keys=tuple(k for k, _, _, _ in kept),
        row_family=row_family,
        row_weight=row_weight,
        local_rows=tuple(tuple(r) for r in local_rows),
        const_cols=const_cols,
        family_scale=family_scale,
    )


# --- diagnostics ---------------------------------------------------------------


@dataclass
class ValidationReport:
    issues: list

    @property
    def ok(self) -> bool:
        return not self.issues

    def __str__(self) -> str:
        if self.ok:
            return "pass"
        return "fail\n" + "\n".join(f"  {loc}: {msg}" for loc, msg in self.issues)


COMPACTNESS = "unbounded local set; convergence of the distributed method requires compact local sets"


def validate(ext: ExtendedProblem) -> ValidationReport:
    """Structural diagnostics of an extended problem (never raises)."""
    issues = list(ext.problem.dimension_issues())
    p = ext.problem
    for label, t in [("tree", ext.tree)] + [
        (f"scenario_tree[{s}]", t) for s, t in enumerate(ext.scenario_trees)
    ]:
        if t.m != p.m:
            issues.append((label, f"tree over {t.m} agents, problem has {p.m}"))
        for msg in t.defects():
            issues.append((label, msg))
    for i, Xi in enumerate(p.X):
        if not Xi.is_bounded():
            issues.append((f"X[{i}]", COMPACTNESS))
    for i, row in enumerate(p.Y):
        for s, Ys in enumerate(row):
            if not Ys.is_bounded():
                issues.append((f"Y[{i}][{s}]", COMPACTNESS))
    if p.d3:
        for s, Zs in enumerate(p.Z):
            if not Zs.is_bounded():
                issues.append((f"Z[{s}]", COMPACTNESS))
    pool = CutPool(p.weights)
    for l, nu in enumerate(ext.cuts):
        if not pool.is_density(nu):
            issues.append((f"cut[{l}]", "not a density on the weighted agent space"))
    if not ext.cuts:
        issues.append(("cuts", "cut pool is empty"))
    C = ext.C.tocsr()
    for r in range(C.shape[0]):
        cols = C.indices[C.indptr[r]:C.indptr[r + 1]]
        agents = set(np.searchsorted(ext.offsets, cols, side="right") - 1)
        if len(agents) < 2:
            issues.append((f"row {ext.row_keys[r]}", "coupling row references a single agent"))
    for i, lay in enumerate(ext.layouts):
        if lay.size != ext.offsets[i + 1] - ext.offsets[i]:
            issues.append((f"agent {i}", "layout size does not match column offsets"))
        if len(lay.v) != 1 + len(ext.cuts):
            issues.append((f"agent {i}", "consensus stack length differs from 1 + |cuts|"))
    return ValidationReport(issues)
