import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sysrisk.measures import (
    AverageValueAtRisk,
    Expectation,
    MeanUpperSemiDeviation,
    ProbabilityVector,
    RiskMeasureError,
)
from sysrisk.systemic import (
    RandomVector,
    ScalarizationSet,
    ScalarizationWeights,
    SystemicMeasureSpec,
    aggregate,
    as_random_vector,
    icx_dominates,
    rho_scalarized,
    rho_sys,
    rho_sys_subgradient,
    risk_profile,
    simplex_grid,
)

EXPECTED_PROFILE = (20.49, 9.44, 6.27, 16.46, 6.84)
SEMIDEV_PROFILE = (13.67, 12.35, 12.35, 12.35, 11.03)


def semi_spec(m, kappa=0.5, weights=None):
    return SystemicMeasureSpec.homogeneous(MeanUpperSemiDeviation(kappa), MeanUpperSemiDeviation(kappa), m, weights)


def test_weights_validation():
    with pytest.raises(RiskMeasureError):
        ScalarizationWeights([0.5, 0.6])
    with pytest.raises(RiskMeasureError):
        ScalarizationWeights([1.2, -0.2])
    with pytest.raises(RiskMeasureError):
        SystemicMeasureSpec(Expectation(), (Expectation(),), ScalarizationWeights.uniform(2))


def test_random_vector_validation():
    with pytest.raises(RiskMeasureError):
        RandomVector(np.zeros((2, 3)), ProbabilityVector.uniform(2))
    with pytest.raises(RiskMeasureError):
        RandomVector(np.array([[0.0, np.nan]]), ProbabilityVector.uniform(2))


def test_spec_round_trip():
    spec = SystemicMeasureSpec(AverageValueAtRisk(0.4), (Expectation(), MeanUpperSemiDeviation(0.2)),
                               ScalarizationWeights([0.3, 0.7]))
    assert SystemicMeasureSpec.from_dict(spec.to_dict()).to_dict() == spec.to_dict()


# --- profiles and aggregation --------------------------------------------------------------


def test_profile_examples():
    spec = semi_spec(2)
    assert np.allclose(risk_profile(as_random_vector(np.zeros((2, 3))), spec), 0.0)
    X = as_random_vector([[0, 10], [4, 4]])
    assert np.allclose(risk_profile(X, spec), [6.25, 4.0])
    det = as_random_vector(np.repeat(np.array(EXPECTED_PROFILE)[:, None], 3, axis=1))
    assert np.allclose(risk_profile(det, semi_spec(5)), EXPECTED_PROFILE)


def test_table_aggregates():
    c = ScalarizationWeights.uniform(5)
    assert aggregate(EXPECTED_PROFILE, Expectation(), c) == pytest.approx(11.90, abs=0.005)
    assert aggregate(SEMIDEV_PROFILE, MeanUpperSemiDeviation(0.5), c) == pytest.approx(12.48, abs=0.005)


def test_dimension_mismatch():
    with pytest.raises(RiskMeasureError):
        rho_sys(as_random_vector(np.zeros((3, 2))), semi_spec(2))


@st.composite
def instances(draw, uniform=False):
    m = draw(st.integers(1, 4))
    n = draw(st.integers(1, 6))
    vals = np.array(draw(st.lists(st.floats(-20, 20), min_size=m * n, max_size=m * n))).reshape(m, n)
    if uniform:
        p = ProbabilityVector.uniform(n)
    else:
        w = np.array(draw(st.lists(st.floats(0.05, 1), min_size=n, max_size=n)))
        p = ProbabilityVector(w / w.sum())
    cw = np.array(draw(st.lists(st.floats(0.0, 1), min_size=m, max_size=m))) + 1e-3
    kinds = st.one_of(st.just(Expectation()), st.floats(0.1, 1.0).map(AverageValueAtRisk),
                      st.floats(0.0, 1.0).map(MeanUpperSemiDeviation))
    spec = SystemicMeasureSpec(draw(kinds), tuple(draw(kinds) for _ in range(m)),
                               ScalarizationWeights(cw / cw.sum()))
    return RandomVector(vals, p), spec


@given(instances())
@settings(max_examples=200, deadline=None)
def test_expectation_outer_is_weighted_sum(inst):
    X, spec = inst
    lin = SystemicMeasureSpec(Expectation(), spec.inner, spec.weights)
    assert rho_sys(X, lin) == pytest.approx(float(spec.weights.c @ risk_profile(X, spec)), abs=1e-12)


@given(instances(), st.data())
@settings(max_examples=200, deadline=None)
def test_axioms(inst, data):
    X, spec = inst
    m, n = X.values.shape
    Y = RandomVector(np.array(data.draw(st.lists(st.floats(-20, 20), min_size=m * n, max_size=m * n)))
                     .reshape(m, n), X.prob)
    a = data.draw(st.floats(-10, 10))
    t = data.draw(st.floats(0.01, 10))
    rx, ry = rho_sys(X, spec), rho_sys(Y, spec)
    assert rho_sys(RandomVector(0.5 * (X.values + Y.values), X.prob), spec) <= 0.5 * (rx + ry) + 1e-9
    assert rho_sys(RandomVector(np.maximum(X.values, Y.values), X.prob), spec) >= max(rx, ry) - 1e-9
    assert rho_sys(RandomVector(X.values + a, X.prob), spec) == pytest.approx(rx + a, abs=1e-9)
    assert rho_sys(RandomVector(t * X.values, X.prob), spec) == pytest.approx(t * rx, abs=1e-9 * (1 + t))
    assert rho_sys(RandomVector(np.ones((m, n)), X.prob), spec) == pytest.approx(1.0, abs=1e-12)
    assert rho_sys(RandomVector(np.zeros((m, n)), X.prob), spec) == 0.0


@given(instances(), st.randoms(use_true_random=False))
@settings(max_examples=100, deadline=None)
def test_law_invariance(inst, rnd):
    X, spec = inst
    perm = list(range(X.values.shape[1]))
    rnd.shuffle(perm)
    Y = RandomVector(X.values[:, perm], ProbabilityVector(X.prob.probs[perm]))
    assert rho_sys(Y, spec) == pytest.approx(rho_sys(X, spec), abs=1e-12)


# --- subgradients --------------------------------------------------------------------------


def test_expectation_subgradient_is_ones():
    spec = SystemicMeasureSpec.homogeneous(Expectation(), Expectation(), 3)
    g = rho_sys_subgradient(as_random_vector(np.arange(12.0).reshape(3, 4)), spec)
    assert np.allclose(g.zeta, 1.0)


@given(instances(), st.data())
@settings(max_examples=200, deadline=None)
def test_subgradient_identity_and_inequality(inst, data):
    X, spec = inst
    m, n = X.values.shape
    g = rho_sys_subgradient(X, spec)
    c, p = spec.weights.c, X.prob.probs
    assert np.allclose(g.zeta, g.nu[:, None] * g.xi)
    assert np.allclose(g.xi @ p, 1.0) and float(c @ g.nu) == pytest.approx(1.0)
    support = float(np.sum(c[:, None] * p[None, :] * g.zeta * X.values))
    assert support == pytest.approx(rho_sys(X, spec), abs=1e-8)
    Y = np.array(data.draw(st.lists(st.floats(-20, 20), min_size=m * n, max_size=m * n))).reshape(m, n)
    lin = float(np.sum(c[:, None] * p[None, :] * g.zeta * (Y - X.values)))
    assert rho_sys(RandomVector(Y, X.prob), spec) >= rho_sys(X, spec) + lin - 1e-8


# --- scalarization set ----------------------------------------------------------------------


def test_scalarized_examples():
    S = ScalarizationSet.unit_vectors(2)
    X = as_random_vector([[0, 10], [10, 0]])
    assert rho_scalarized(X, S, Expectation()) == pytest.approx(10.0)
    single = ScalarizationSet((ScalarizationWeights([0.25, 0.75]),))
    assert rho_scalarized(as_random_vector(np.full((2, 3), 4.0)), single, MeanUpperSemiDeviation(0.5)) == \
        pytest.approx(4.0)
    with pytest.raises(RiskMeasureError):
        ScalarizationSet(())


def test_scalarized_unit_vectors_is_expected_max():
    rng = np.random.default_rng(5)
    for _ in range(50):
        m, n = int(rng.integers(1, 5)), int(rng.integers(1, 8))
        X = as_random_vector(rng.normal(size=(m, n)))
        brute = float(np.mean([max(X.values[:, s]) for s in range(n)]))
        assert rho_scalarized(X, ScalarizationSet.unit_vectors(m), Expectation()) == pytest.approx(brute)


def test_uniform_singleton_is_linear_total():
    rng = np.random.default_rng(8)
    X = as_random_vector(rng.normal(size=(5, 10)))
    c = ScalarizationWeights.uniform(5)
    from sysrisk.measures import DiscreteRandomVariable, evaluate
    total = evaluate(MeanUpperSemiDeviation(0.5), DiscreteRandomVariable(c.c @ X.values, X.prob))
    assert rho_scalarized(X, ScalarizationSet((c,)), MeanUpperSemiDeviation(0.5)) == pytest.approx(total)


# --- order -------------------------------------------------------------------------------------


def test_simplex_grid():
    G = simplex_grid(3, 4)
    assert G.shape == (15, 3)
    assert np.allclose(G.sum(axis=1), 1.0)


def test_icx_examples():
    rng = np.random.default_rng(2)
    X = as_random_vector(rng.normal(size=(2, 4)))
    assert icx_dominates(X, as_random_vector(X.values + 0.7))
    assert icx_dominates(X, as_random_vector(X.values + rng.uniform(0, 1, X.values.shape)))
    assert not icx_dominates(as_random_vector(X.values + 1.0), X)
    with pytest.raises(RiskMeasureError):
        icx_dominates(X, as_random_vector(np.zeros((3, 4))))


def mean_preserving_spread(X: np.ndarray, rng) -> np.ndarray:
    """Duplicate every scenario and push the copies apart along a random direction.

    With uniform probabilities the two copies average back to the original
    outcome, so every scalarization of the result is a mean-preserving spread.
    """
    d = rng.normal(size=X.shape)
    return np.concatenate([X + d, X - d], axis=1), np.concatenate([X, X], axis=1)


def test_order_consistency():
    rng = np.random.default_rng(4)
    checked = 0
    for _ in range(30):
        m, n = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        X0 = rng.normal(size=(m, n)) * 3
        Yv, Xv = mean_preserving_spread(X0, rng)
        X, Y = as_random_vector(Xv), as_random_vector(Yv)
        assert icx_dominates(X, Y)
        for kappa in (0.0, 0.5, 1.0):
            spec = semi_spec(m, kappa)
            assert rho_sys(X, spec) <= rho_sys(Y, spec) + 1e-9
            checked += 1
    assert checked == 90
