"""Univariate coherent risk measures on finite probability spaces.

Three families are supported: the expectation, Average Value-at-Risk and the
first-order mean-upper-semideviation.  Every measure can be evaluated
directly, through brute-force enumeration of its risk envelope, and through a
linear epigraph template which is what the optimisation models embed.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Union

import numpy as np

PROB_TOL = 1e-12
ENUM_LIMIT = 12


class RiskMeasureError(ValueError):
    """Invalid risk-measure parameters or incompatible inputs."""


def _as_vector(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise RiskMeasureError(f"{name} must contain finite numbers")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ProbabilityVector:
    """Scenario probabilities ``p_s`` of a finite probability space."""

    probs: np.ndarray

    def __post_init__(self):
        arr = _as_vector(self.probs, "probabilities")
        if arr.size == 0:
            raise RiskMeasureError("probability vector must be nonempty")
        if np.any(arr < 0):
            raise RiskMeasureError("probabilities must be nonnegative")
        if abs(arr.sum() - 1.0) > PROB_TOL * max(1, arr.size):
            raise RiskMeasureError(f"probabilities sum to {arr.sum()!r}, expected 1")
        object.__setattr__(self, "probs", arr)

    @classmethod
    def uniform(cls, n: int) -> "ProbabilityVector":
        return cls(np.full(n, 1.0 / n))

    def __len__(self) -> int:
        return self.probs.size

    def expect(self, values) -> float:
        return float(np.dot(self.probs, values))


@dataclass(frozen=True)
class DiscreteRandomVariable:
    """Scenario-indexed losses ``Z_s`` together with their probabilities."""

    values: np.ndarray
    prob: ProbabilityVector

    def __post_init__(self):
        arr = _as_vector(self.values, "values")
        if not isinstance(self.prob, ProbabilityVector):
            object.__setattr__(self, "prob", ProbabilityVector(self.prob))
        if arr.size != len(self.prob):
            raise RiskMeasureError(
                f"dimension mismatch: {arr.size} values vs {len(self.prob)} probabilities"
            )
        object.__setattr__(self, "values", arr)

    @classmethod
    def uniform(cls, values) -> "DiscreteRandomVariable":
        values = np.asarray(values, dtype=float)
        return cls(values, ProbabilityVector.uniform(values.size))

    def __len__(self) -> int:
        return self.values.size

    def mean(self) -> float:
        return self.prob.expect(self.values)


# --- measure specifications -------------------------------------------------


class RiskMeasureSpec:
    """Base class of the supported measure descriptions."""

    kind: str = ""

    def to_dict(self) -> dict:
        raise NotImplementedError

    @property
    def is_expectation(self) -> bool:
        """True when the measure degenerates to the plain expectation."""
        return False


@dataclass(frozen=True)
class Expectation(RiskMeasureSpec):
    kind = "expectation"

    def to_dict(self) -> dict:
        return {"kind": self.kind}

    @property
    def is_expectation(self) -> bool:
        return True


@dataclass(frozen=True)
class AverageValueAtRisk(RiskMeasureSpec):
    """Mean of the worst ``alpha``-fraction of losses (``alpha`` in (0, 1])."""

    alpha: float
    kind = "avar"

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise RiskMeasureError(f"AVaR level alpha={self.alpha} outside (0, 1]")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "alpha": self.alpha}

    @property
    def is_expectation(self) -> bool:
        return self.alpha == 1.0


@dataclass(frozen=True)
class MeanUpperSemiDeviation(RiskMeasureSpec):
    """``E[Z] + kappa * E[(Z - E[Z])_+]``; only the first order is supported."""

    kappa: float
    order: int = 1
    kind = "semideviation"

    def __post_init__(self):
        if not (0.0 <= self.kappa <= 1.0):
            raise RiskMeasureError(f"semideviation kappa={self.kappa} outside [0, 1]")
        if self.order != 1:
            raise RiskMeasureError("only first-order semideviation is supported")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "kappa": self.kappa}

    @property
    def is_expectation(self) -> bool:
        return self.kappa == 0.0


Spec = Union[Expectation, AverageValueAtRisk, MeanUpperSemiDeviation]


def spec_from_dict(data: dict) -> RiskMeasureSpec:
    kind = data.get("kind")
    if kind == "expectation":
        return Expectation()
    if kind == "avar":
        return AverageValueAtRisk(float(data["alpha"]))
    if kind == "semideviation":
        return MeanUpperSemiDeviation(float(data["kappa"]), int(data.get("order", 1)))
    raise RiskMeasureError(f"unknown risk measure kind {kind!r}")


def _check_spec(spec) -> None:
    if not isinstance(spec, (Expectation, AverageValueAtRisk, MeanUpperSemiDeviation)):
        raise RiskMeasureError(f"unsupported risk measure {spec!r}")


def _avar_quantile(Z: DiscreteRandomVariable, alpha: float) -> float:
    # left (1 - alpha)-quantile of the loss distribution
    order = np.lexsort((np.arange(len(Z)), Z.values))
    cum = np.cumsum(Z.prob.probs[order])
    k = int(np.searchsorted(cum, 1.0 - alpha - PROB_TOL, side="left"))
    k = min(k, len(Z) - 1)
    # skip zero-probability atoms sitting below the quantile
    while Z.prob.probs[order[k]] == 0.0 and k + 1 < len(Z):
        k += 1
    return float(Z.values[order[k]])


def evaluate(spec: RiskMeasureSpec, Z: DiscreteRandomVariable) -> float:
    """Return the risk ``rho[Z]``.

    >>> evaluate(MeanUpperSemiDeviation(0.5), DiscreteRandomVariable.uniform([0, 10]))
    6.25
    """
    _check_spec(spec)
    if spec.is_expectation:
        return Z.mean()
    p, z = Z.prob.probs, Z.values
    if isinstance(spec, AverageValueAtRisk):
        eta = _avar_quantile(Z, spec.alpha)
        return eta + float(np.dot(p, np.maximum(z - eta, 0.0))) / spec.alpha
    mean = Z.mean()
    return mean + spec.kappa * float(np.dot(p, np.maximum(z - mean, 0.0)))


def subgradient(spec: RiskMeasureSpec, Z: DiscreteRandomVariable) -> np.ndarray:
    """A maximising density of the risk envelope at ``Z``.

    The returned ``xi`` satisfies ``xi >= 0``, ``E[xi] = 1`` and
    ``E[xi Z] = evaluate(spec, Z)``.  AVaR ties are broken by filling the
    density greedily in (value descending, index ascending) order; zero
    deviations of the semideviation get ``h_s = 0``.
    """
    _check_spec(spec)
    n = len(Z)
    if spec.is_expectation:
        return np.ones(n)
    p, z = Z.prob.probs, Z.values
    if isinstance(spec, AverageValueAtRisk):
        cap = 1.0 / spec.alpha
        xi = np.zeros(n)
        remaining = 1.0
        for s in np.lexsort((np.arange(n), -z)):
            if p[s] == 0.0:
                continue
            take = min(cap, remaining / p[s])
            xi[s] = take
            remaining -= p[s] * take
            if remaining <= 0.0:
                break
        return xi
    mean = Z.mean()
    scale = 1.0 + np.max(np.abs(z))
    h = np.where(z - mean > 1e-13 * scale, spec.kappa, 0.0)
    if np.all(h == h[0]):
        return np.ones(n)
    return 1.0 + h - float(np.dot(p, h))


# --- risk envelopes ----------------------------------------------------------


@dataclass(frozen=True)
class RiskEnvelope:
    """The dual set of a measure on a fixed finite probability space.

    Every envelope lies in ``{xi >= 0, E_p[xi] = 1}``.  AVaR adds the box
    ``xi <= 1/alpha``; the semideviation adds the spread bound
    ``max xi - min xi <= kappa`` (over scenarios of positive probability),
    which is the image of ``xi = 1 + h - E[h]`` with ``0 <= h <= kappa``.
    """

    spec: RiskMeasureSpec
    prob: ProbabilityVector
    upper: float = field(init=False)
    spread: float = field(init=False)

    def __post_init__(self):
        _check_spec(self.spec)
        upper, spread = np.inf, np.inf
        if self.spec.is_expectation:
            upper, spread = 1.0, 0.0
        elif isinstance(self.spec, AverageValueAtRisk):
            upper = 1.0 / self.spec.alpha
        else:
            spread = self.spec.kappa
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "spread", spread)

    def contains(self, xi, tol: float = 1e-10) -> bool:
        xi = np.asarray(xi, dtype=float)
        p = self.prob.probs
        if xi.shape != p.shape or np.any(xi < -tol):
            return False
        if abs(float(np.dot(p, xi)) - 1.0) > tol:
            return False
        live = xi[p > 0]
        if np.any(live > self.upper + tol):
            return False
        return bool(live.max() - live.min() <= self.spread + tol)

    def vertices(self) -> np.ndarray:
        """Enumerate extreme densities (rows); practical for ``N <= 12``."""
        n = len(self.prob)
        if n > ENUM_LIMIT:
            raise RiskMeasureError(f"vertex enumeration limited to N <= {ENUM_LIMIT}, got {n}")
        p = self.prob.probs
        if self.spec.is_expectation:
            return np.ones((1, n))
        if isinstance(self.spec, MeanUpperSemiDeviation):
            h = np.array(list(itertools.product((0.0, self.spec.kappa), repeat=n)))
            return 1.0 + h - (h @ p)[:, None]
        cap = self.upper
        found = []
        pattern = np.array(list(itertools.product((0.0, cap), repeat=n - 1)))
        for free in range(n):
            others = [s for s in range(n) if s != free]
            mass = pattern @ p[others]
            if p[free] == 0.0:
                ok = np.abs(mass - 1.0) <= 1e-12
                vals = np.zeros(ok.sum())
            else:
                vals = (1.0 - mass) / p[free]
                ok = (vals >= -1e-12) & (vals <= cap + 1e-12)
                vals = np.clip(vals[ok], 0.0, cap)
            block = np.empty((vals.size, n))
            block[:, others] = pattern[ok]
            block[:, free] = vals
            found.append(block)
        return np.unique(np.vstack(found), axis=0)


def risk_envelope(spec: RiskMeasureSpec, prob: ProbabilityVector) -> RiskEnvelope:
    return RiskEnvelope(spec, prob)


def dual_evaluate_bruteforce(spec: RiskMeasureSpec, Z: DiscreteRandomVariable) -> float:
    """``max <xi, Z>`` over the enumerated envelope vertices (test oracle)."""
    verts = RiskEnvelope(spec, Z.prob).vertices()
    return float(np.max(verts @ (Z.prob.probs * Z.values)))


# --- epigraph templates ------------------------------------------------------


@dataclass(frozen=True)
class EpigraphTemplate:
    """Linear rows expressing ``theta >= rho[Q]`` for scenario losses ``Q``.

    Each row is written over the column blocks ``(theta, Q_1..Q_N, aux)``:
    ``eq_*`` rows hold with equality, ``ub_*`` rows as ``<=``.
    """

    n_scenarios: int
    n_aux: int
    aux_lb: np.ndarray
    aux_ub: np.ndarray
    eq_theta: np.ndarray
    eq_q: np.ndarray
    eq_aux: np.ndarray
    eq_rhs: np.ndarray
    ub_theta: np.ndarray
    ub_q: np.ndarray
    ub_aux: np.ndarray
    ub_rhs: np.ndarray

    @property
    def n_eq(self) -> int:
        return self.eq_rhs.size

    @property
    def n_ub(self) -> int:
        return self.ub_rhs.size

    def instantiate(self, q_map: np.ndarray, q_offset, theta_col: int, n_cols: int):
        """Rows over ``[decision (n_cols), aux (n_aux)]`` for ``Q = q_map @ x + q_offset``.

        Returns ``(A_eq, b_eq, A_ub, b_ub)``; auxiliary columns come last.
        """
        q_map = np.asarray(q_map, dtype=float).reshape(self.n_scenarios, n_cols)
        q_offset = np.broadcast_to(np.asarray(q_offset, dtype=float), (self.n_scenarios,))

        def rows(theta, qc, aux, rhs):
            A = np.zeros((rhs.size, n_cols + self.n_aux))
            A[:, :n_cols] = qc @ q_map
            A[:, theta_col] += theta
            A[:, n_cols:] = aux
            return A, rhs - qc @ q_offset

        A_eq, b_eq = rows(self.eq_theta, self.eq_q, self.eq_aux, self.eq_rhs)
        A_ub, b_ub = rows(self.ub_theta, self.ub_q, self.ub_aux, self.ub_rhs)
        return A_eq, b_eq, A_ub, b_ub


def epigraph_reformulation(spec: RiskMeasureSpec, prob: ProbabilityVector) -> EpigraphTemplate:
    """Exact linear epigraph of ``rho`` on the scenario space ``prob``."""
    _check_spec(spec)
    p = prob.probs
    n = p.size
    empty = np.zeros(0)
    if spec.is_expectation:
        # theta >= sum_s p_s Q_s
        return EpigraphTemplate(
            n, 0, empty, empty,
            empty, np.zeros((0, n)), np.zeros((0, 0)), empty,
            np.array([-1.0]), p[None, :].copy(), np.zeros((1, 0)), np.zeros(1),
        )
    if isinstance(spec, MeanUpperSemiDeviation):
        # theta = E[Q] + kappa E[v],  v_s >= Q_s - E[Q],  v >= 0
        kappa = spec.kappa
        return EpigraphTemplate(
            n, n, np.zeros(n), np.full(n, np.inf),
            np.array([1.0]), -p[None, :].copy(), -kappa * p[None, :], np.zeros(1),
            np.zeros(n), np.eye(n) - p[None, :], -np.eye(n), np.zeros(n),
        )
    # AVaR: theta >= eta + (1/alpha) E[t],  t_s >= Q_s - eta,  t >= 0, eta free
    alpha = spec.alpha
    ub_aux = np.zeros((n + 1, n + 1))
    ub_aux[0, 0] = 1.0
    ub_aux[0, 1:] = p / alpha
    ub_aux[1:, 0] = -1.0
    ub_aux[1:, 1:] = -np.eye(n)
    ub_q = np.zeros((n + 1, n))
    ub_q[1:] = np.eye(n)
    ub_theta = np.zeros(n + 1)
    ub_theta[0] = -1.0
    return EpigraphTemplate(
        n, n + 1,
        np.concatenate([[-np.inf], np.zeros(n)]), np.full(n + 1, np.inf),
        empty, np.zeros((0, n)), np.zeros((0, n + 1)), empty,
        ub_theta, ub_q, ub_aux, np.zeros(n + 1),
    )
