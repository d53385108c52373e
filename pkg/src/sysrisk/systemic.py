"""Systemic risk measures on random vectors.

A random vector holds one loss row per agent.  Its systemic risk is computed
either by aggregating the individual risks ``rho_i(X_i)`` with an outer
measure on the agent space weighted by ``c`` (:func:`rho_sys`), or by
aggregating outcomes first through a scalarization set (:func:`rho_scalarized`).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .measures import (
    PROB_TOL,
    DiscreteRandomVariable,
    ProbabilityVector,
    RiskMeasureError,
    RiskMeasureSpec,
    evaluate,
    spec_from_dict,
    subgradient,
)


@dataclass(frozen=True)
class RandomVector:
    """An ``m x N`` loss matrix (agent, scenario) with scenario probabilities."""

    values: np.ndarray
    prob: ProbabilityVector

    def __post_init__(self):
        arr = np.array(self.values, dtype=float)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2 or not np.all(np.isfinite(arr)):
            raise RiskMeasureError("random vector must be a finite m x N matrix")
        if not isinstance(self.prob, ProbabilityVector):
            object.__setattr__(self, "prob", ProbabilityVector(self.prob))
        if arr.shape[1] != len(self.prob):
            raise RiskMeasureError(
                f"dimension mismatch: {arr.shape[1]} scenarios vs {len(self.prob)} probabilities"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def n_scenarios(self) -> int:
        return self.values.shape[1]

    def component(self, i: int) -> DiscreteRandomVariable:
        return DiscreteRandomVariable(self.values[i], self.prob)


@dataclass(frozen=True)
class ScalarizationWeights:
    """A point ``c`` of the probability simplex over the agents."""

    c: np.ndarray

    def __post_init__(self):
        arr = np.array(self.c, dtype=float).reshape(-1)
        if arr.size == 0 or not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise RiskMeasureError("scalarization weights must be finite and nonnegative")
        if abs(arr.sum() - 1.0) > PROB_TOL * max(1, arr.size):
            raise RiskMeasureError(f"scalarization weights sum to {arr.sum()!r}, expected 1")
        arr.setflags(write=False)
        object.__setattr__(self, "c", arr)

    @classmethod
    def uniform(cls, m: int) -> "ScalarizationWeights":
        return cls(np.full(m, 1.0 / m))

    def __len__(self) -> int:
        return self.c.size

    def as_probability(self) -> ProbabilityVector:
        return ProbabilityVector(self.c)


@dataclass(frozen=True)
class SystemicMeasureSpec:
    """Outer measure ``rho_0``, inner measures ``rho_i`` and weights ``c``."""

    outer: RiskMeasureSpec
    inner: tuple
    weights: ScalarizationWeights

    def __post_init__(self):
        object.__setattr__(self, "inner", tuple(self.inner))
        if not isinstance(self.weights, ScalarizationWeights):
            object.__setattr__(self, "weights", ScalarizationWeights(self.weights))
        if len(self.inner) != len(self.weights):
            raise RiskMeasureError(
                f"{len(self.inner)} inner measures for {len(self.weights)} weights"
            )

    @classmethod
    def homogeneous(cls, outer, inner, m: int, weights=None) -> "SystemicMeasureSpec":
        w = ScalarizationWeights.uniform(m) if weights is None else weights
        return cls(outer, (inner,) * m, w)

    @property
    def m(self) -> int:
        return len(self.inner)

    def to_dict(self) -> dict:
        return {
            "outer": self.outer.to_dict(),
            "inner": [s.to_dict() for s in self.inner],
            "weights": self.weights.c.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SystemicMeasureSpec":
        return cls(
            spec_from_dict(data["outer"]),
            tuple(spec_from_dict(d) for d in data["inner"]),
            ScalarizationWeights(data["weights"]),
        )


@dataclass(frozen=True)
class ScalarizationSet:
    """A finite set ``S`` of simplex weights."""

    members: tuple

    def __post_init__(self):
        members = tuple(
            w if isinstance(w, ScalarizationWeights) else ScalarizationWeights(w)
            for w in self.members
        )
        if not members:
            raise RiskMeasureError("scalarization set must be nonempty")
        if len({len(w) for w in members}) != 1:
            raise RiskMeasureError("scalarization weights of different lengths")
        object.__setattr__(self, "members", members)

    @classmethod
    def unit_vectors(cls, m: int) -> "ScalarizationSet":
        return cls(tuple(np.eye(m)))

    def matrix(self) -> np.ndarray:
        return np.vstack([w.c for w in self.members])


@dataclass(frozen=True)
class SystemicSubgradient:
    """``zeta_i = nu_i * xi_i``: outer density ``nu`` times inner densities ``xi``."""

    zeta: np.ndarray
    nu: np.ndarray
    xi: np.ndarray


def _check_dims(X: RandomVector, spec: SystemicMeasureSpec) -> None:
    if X.m != spec.m:
        raise RiskMeasureError(f"random vector has {X.m} components, measure expects {spec.m}")


def risk_profile(X: RandomVector, spec: SystemicMeasureSpec) -> np.ndarray:
    """Vector of individual risks ``rho_i(X_i)``."""
    _check_dims(X, spec)
    return np.array([evaluate(spec.inner[i], X.component(i)) for i in range(X.m)])


def aggregate(profile, outer: RiskMeasureSpec, weights: ScalarizationWeights) -> float:
    """Outer measure of a risk profile viewed as a random variable on ``(agents, c)``."""
    return evaluate(outer, DiscreteRandomVariable(profile, weights.as_probability()))


def rho_sys(X: RandomVector, spec: SystemicMeasureSpec) -> float:
    return aggregate(risk_profile(X, spec), spec.outer, spec.weights)


def rho_sys_subgradient(X: RandomVector, spec: SystemicMeasureSpec) -> SystemicSubgradient:
    """A subgradient of :func:`rho_sys` at ``X``.

    Satisfies ``sum_i c_i nu_i sum_s p_s xi_is X_is = rho_sys(X)``.
    """
    _check_dims(X, spec)
    xi = np.vstack([subgradient(spec.inner[i], X.component(i)) for i in range(X.m)])
    profile = risk_profile(X, spec)
    nu = subgradient(spec.outer, DiscreteRandomVariable(profile, spec.weights.as_probability()))
    return SystemicSubgradient(zeta=nu[:, None] * xi, nu=nu, xi=xi)


def rho_scalarized(X: RandomVector, S: ScalarizationSet, outer: RiskMeasureSpec) -> float:
    """``rho[max_{c in S} c^T X]`` evaluated scenario-wise."""
    C = S.matrix()
    if C.shape[1] != X.m:
        raise RiskMeasureError("scalarization set dimension does not match the random vector")
    worst = np.max(C @ X.values, axis=0)
    return evaluate(outer, DiscreteRandomVariable(worst, X.prob))


def simplex_grid(m: int, size: int) -> np.ndarray:
    """Barycentric grid ``{k / size : k in N^m, sum k = size}`` in lexicographic order."""
    if size < 1:
        raise ValueError("grid size must be positive")
    pts = [
        np.array(k, dtype=float) / size
        for k in itertools.product(range(size + 1), repeat=m)
        if sum(k) == size
    ]
    return np.vstack(pts)


def _expected_excess(values: np.ndarray, p: np.ndarray, etas: np.ndarray) -> np.ndarray:
    return np.maximum(values[None, :] - etas[:, None], 0.0) @ p


def icx_dominates(
    X: RandomVector,
    Y: RandomVector,
    c_grid_size: int = 10,
    eta_grid_size: int = 50,
    tol: float = 1e-9,
) -> bool:
    """Grid check of the linear increasing convex order ``X <= Y``.

    For each ``c`` on a simplex grid the expected excesses
    ``E[(c^T X - eta)_+] <= E[(c^T Y - eta)_+] + tol`` are compared on an
    ``eta`` grid spanning all scalarized values, plus every kink point.
    """
    if X.values.shape != Y.values.shape:
        raise RiskMeasureError("random vectors must have identical dimensions")
    if c_grid_size < 2 or eta_grid_size < 2:
        raise ValueError("grids must have at least two points")
    for c in simplex_grid(X.m, c_grid_size):
        sx, sy = c @ X.values, c @ Y.values
        lo = min(sx.min(), sy.min())
        hi = max(sx.max(), sy.max())
        etas = np.concatenate([np.linspace(lo, hi, eta_grid_size), sx, sy])
        ex = _expected_excess(sx, X.prob.probs, etas)
        ey = _expected_excess(sy, Y.prob.probs, etas)
        if np.any(ex > ey + tol):
            return False
    return True


def as_random_vector(values: Sequence[Sequence[float]], prob=None) -> RandomVector:
    arr = np.asarray(values, dtype=float)
    if prob is None:
        prob = ProbabilityVector.uniform(arr.shape[-1])
    return RandomVector(arr, prob)
