"""Seeded random two-stage system problems with compact, nonempty feasible sets.

Right-hand sides are produced from a random interior point so that every
instance is feasible by construction.
"""

from __future__ import annotations

import numpy as np

from .measures import AverageValueAtRisk, Expectation, MeanUpperSemiDeviation, ProbabilityVector
from .model import Polytope, TwoStageSystemProblem
from .systemic import ScalarizationWeights, SystemicMeasureSpec


def random_measure(rng: np.random.Generator):
    kind = rng.integers(3)
    if kind == 0:
        return Expectation()
    if kind == 1:
        return AverageValueAtRisk(float(rng.uniform(0.2, 0.9)))
    return MeanUpperSemiDeviation(float(rng.uniform(0.1, 1.0)))


def random_problem(
    seed: int,
    m: int = None,
    N: int = None,
    n1: int = 2,
    n2: int = 2,
    d1: int = 1,
    d2: int = 1,
    d3: int = 1,
    risk: SystemicMeasureSpec = None,
    shared_w: bool = False,
) -> TwoStageSystemProblem:
    """A small random problem; ``m`` and ``N`` default to draws from 1..4 and 2..10.

    With ``shared_w`` every dynamics block carries ``sum_j W_j^s y_j^s``;
    otherwise block ``i`` only involves agent ``i``'s own recourse and a
    neighbour's, which keeps the coupling sparse.
    """
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 5)) if m is None else m
    N = int(rng.integers(2, 11)) if N is None else N
    p = rng.uniform(0.5, 1.5, N)
    prob = ProbabilityVector(p / p.sum())
    w = rng.uniform(0.5, 1.5, m)
    weights = ScalarizationWeights(w / w.sum())
    if risk is None:
        risk = SystemicMeasureSpec(
            random_measure(rng), tuple(random_measure(rng) for _ in range(m)), weights
        )

    X = [Polytope.box(np.zeros(n1), np.full(n1, 2.0)) for _ in range(m)]
    Y = [[Polytope.box(np.zeros(n2), np.full(n2, 2.0)) for _ in range(N)] for _ in range(m)]
    Z = [Polytope.box(np.zeros(d3), np.full(d3, 2.0)) for _ in range(N)]
    x0 = rng.uniform(0.5, 1.5, (m, n1))
    y0 = rng.uniform(0.5, 1.5, (m, N, n2))
    z0 = rng.uniform(0.5, 1.5, (N, d3))

    A = rng.normal(size=(m, d1, n1))
    b = np.einsum("ikj,ij->k", A, x0)
    T = rng.normal(size=(m, N, d2, n1))
    W = np.zeros((N, m, m, d2, n2))
    if shared_w:
        Wj = rng.normal(size=(N, m, d2, n2))
        W[:] = Wj[:, None]
    else:
        for s in range(N):
            for i in range(m):
                W[s, i, i] = rng.normal(size=(d2, n2))
                if m > 1:
                    W[s, i, (i + 1) % m] = 0.5 * rng.normal(size=(d2, n2))
    Bm = rng.normal(size=(N, d2, d3))
    h = np.einsum("isrj,ij->isr", T, x0) + np.einsum("sijrt,jst->isr", W, y0)
    h = h + np.einsum("srk,sk->sr", Bm, z0)[None, :, :]
    u = rng.uniform(0.0, 1.0, (N, d3))
    return TwoStageSystemProblem(
        prob=prob,
        risk=risk,
        cost=rng.uniform(-1.0, 1.0, (m, n1)),
        X=X,
        A=A,
        b=b,
        q=rng.uniform(-0.5, 1.5, (m, N, n2)),
        T=T,
        h=h,
        Y=Y,
        W=W,
        B=Bm,
        u=u,
        Z=Z,
        meta={"generator": "random_problem", "seed": seed},
    )
