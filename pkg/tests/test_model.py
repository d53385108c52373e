import json
from dataclasses import replace
from collections import Counter

import numpy as np
import pytest

from sysrisk.instances import random_problem
from sysrisk.measures import (
    AverageValueAtRisk,
    DiscreteRandomVariable,
    Expectation,
    MeanUpperSemiDeviation,
    ProbabilityVector,
    evaluate,
    risk_envelope,
)
from sysrisk.model import (
    COMPACTNESS,
    CutPool,
    ModelError,
    Polytope,
    SpanningTree,
    TwoStageSystemProblem,
    build_extended,
    generate_cut,
    homogenize,
    load_problem,
    save_problem,
    validate,
)
from sysrisk.solver.centralized import solve_centralized, solve_extended_lp
from sysrisk.systemic import ScalarizationWeights, SystemicMeasureSpec

TABLE_PROFILE = np.array([13.67, 12.35, 12.35, 12.35, 11.03])


# --- data types ----------------------------------------------------------------------------


def test_polytope_round_trip_and_bounds():
    P = Polytope([0.0, -np.inf], [1.0, np.inf], [[1.0, 1.0]], [3.0])
    Q = Polytope.from_dict(json.loads(json.dumps(P.to_dict())))
    assert np.array_equal(Q.lb, P.lb) and np.array_equal(Q.ub, P.ub)
    assert not P.is_bounded()
    B = Polytope([0.0, -np.inf], [1.0, np.inf], [[1.0, 1.0], [-1.0, -1.0]], [3.0, 1.0])
    assert B.is_bounded()
    assert B.contains([0.5, 1.0]) and not B.contains([0.5, 3.0])
    F = Polytope.box([0.0], [1.0]).append_fixed(1.0)
    assert F.dim == 2 and F.lb[1] == F.ub[1] == 1.0


def test_problem_file_round_trip(tmp_path, toy):
    path = tmp_path / "toy.json"
    save_problem(toy, path)
    back = load_problem(path)
    assert back.to_dict() == toy.to_dict()
    assert solve_centralized(back).objective == pytest.approx(solve_centralized(toy).objective, abs=1e-12)


def test_schema_is_checked(toy):
    d = toy.to_dict()
    d["schema"] = "something/else@1"
    with pytest.raises(ModelError):
        TwoStageSystemProblem.from_dict(d)


def test_dimension_issues(toy):
    assert toy.dimension_issues() == []
    with pytest.raises(ModelError, match="q: shape"):
        replace(toy, q=np.zeros((2, 3, 1)))


# --- homogenization -------------------------------------------------------------------------


def test_homogenize_bookkeeping(toy):
    H = homogenize(toy)
    assert H.is_homogeneous
    assert H.n1 == toy.n1 + 1 and H.d1 == toy.d1
    assert H.n2 == toy.n2 + 1
    assert H.meta["unit"] == {"x": toy.n1, "y": toy.n2}
    assert homogenize(H) is H


def test_homogenize_single_agent_toy():
    box = Polytope.box
    p = TwoStageSystemProblem(
        prob=ProbabilityVector([0.3, 0.7]),
        risk=SystemicMeasureSpec.homogeneous(Expectation(), MeanUpperSemiDeviation(0.5), 1),
        cost=np.array([[1.0, -0.5]]),
        X=[box([0, 0], [4, 4])],
        A=np.array([[[1.0, 1.0]]]),
        b=np.array([3.0]),
        q=np.array([[[1.0], [2.0]]]),
        T=np.array([[[[1.0, 0.0]], [[0.0, 1.0]]]]),
        h=np.array([[[4.0], [2.5]]]),
        Y=[[box([0.0], [10.0]), box([0.0], [10.0])]],
        W=np.ones((2, 1, 1, 1, 1)),
        B=np.zeros((2, 1, 0)),
        u=np.zeros((2, 0)),
        Z=[box(np.zeros(0), np.zeros(0)) for _ in range(2)],
    )
    direct = solve_centralized(p).objective
    assert solve_centralized(homogenize(p)).objective == pytest.approx(direct, abs=1e-7)
    assert solve_extended_lp(build_extended(homogenize(p))).objective == pytest.approx(direct, abs=1e-7)


@pytest.mark.parametrize("seed", range(20))
def test_homogenize_and_extend_preserve_optimum(seed):
    p = random_problem(seed)
    direct = solve_centralized(p).objective
    H = homogenize(p)
    assert solve_centralized(H).objective == pytest.approx(direct, abs=1e-7)
    # with every vertex of the outer envelope pooled, the cut model is exact
    verts = risk_envelope(p.risk.outer, p.weights.as_probability()).vertices()
    pool = CutPool(p.weights, verts)
    ext = build_extended(H, pool=pool)
    assert validate(ext).ok, str(validate(ext))
    assert solve_extended_lp(ext).objective == pytest.approx(direct, abs=1e-6 * (1 + abs(direct)))


# --- trees ---------------------------------------------------------------------------------


def test_tree_defects():
    assert SpanningTree.path(4).is_valid and SpanningTree.star(4, 2).is_valid
    short = SpanningTree(4, ((0, 1), (1, 2)))
    assert any("disconnected consensus graph" in d for d in short.defects())
    cyc = SpanningTree(3, ((0, 1), (1, 2), (2, 0)))
    assert any("cycle" in d for d in cyc.defects())
    assert SpanningTree(3, ((0, 0), (1, 2))).defects()


def test_single_agent_has_no_coupling():
    p = homogenize(random_problem(1, m=1, N=4))
    ext = build_extended(p)
    assert ext.n_rows == 0
    assert solve_extended_lp(ext).objective == pytest.approx(solve_centralized(p).objective, abs=1e-7)


def test_star_tree_consensus_blocks():
    p = homogenize(random_problem(0, m=3, N=2))
    ext = build_extended(p, tree=SpanningTree.star(3))
    fam = Counter(k[0] for k in ext.row_keys)
    arcs_v = {k[1] for k in ext.row_keys if k[0] == "consensus_v"}
    arcs_z = {(k[1], k[2]) for k in ext.row_keys if k[0] == "consensus_z"}
    assert len(arcs_v) == 2
    assert len(arcs_z) == 2 * p.N
    # one v row per stacked coordinate (eta and one w per cut) per arc
    assert fam["consensus_v"] == 2 * (1 + len(ext.cuts))
    assert fam["consensus_z"] == 2 * p.N * p.d3


def test_consensus_holds_at_optimum():
    for seed in range(5):
        p = homogenize(random_problem(seed, m=3))
        ext = build_extended(p)
        V = solve_extended_lp(ext).x
        stacks = np.array([V[ext.agent_slice(i)][lay.v] for i, lay in enumerate(ext.layouts)])
        assert np.max(np.abs(stacks - stacks[0])) < 1e-6


# --- cuts ------------------------------------------------------------------------------------


def test_cut_examples():
    c = ScalarizationWeights.uniform(5)
    assert np.allclose(generate_cut(TABLE_PROFILE, Expectation(), c), 1.0)
    nu = generate_cut(TABLE_PROFILE, MeanUpperSemiDeviation(0.5), c)
    assert float(c.c @ (nu * TABLE_PROFILE)) == pytest.approx(12.48, abs=0.005)


def test_cut_soundness():
    rng = np.random.default_rng(0)
    for _ in range(200):
        m = int(rng.integers(1, 6))
        w = rng.uniform(0.1, 1, m)
        c = ScalarizationWeights(w / w.sum())
        outer = [Expectation(), AverageValueAtRisk(float(rng.uniform(0.1, 1))),
                 MeanUpperSemiDeviation(float(rng.uniform(0, 1)))][int(rng.integers(3))]
        theta = rng.normal(size=m) * 5
        nu = generate_cut(theta, outer, c)
        pc = c.as_probability()
        assert float(c.c @ (nu * theta)) == pytest.approx(evaluate(outer, DiscreteRandomVariable(theta, pc)),
                                                         abs=1e-9)
        other = rng.normal(size=m) * 5
        assert float(c.c @ (nu * other)) <= evaluate(outer, DiscreteRandomVariable(other, pc)) + 1e-9


def test_cut_pool():
    c = ScalarizationWeights.uniform(3)
    pool = CutPool.expectation(c)
    assert not pool.add(np.ones(3) + 1e-12)
    assert pool.add([1.5, 1.5, 0.0]) and len(pool) == 2
    with pytest.raises(ModelError):
        pool.add([1.0, 1.0, 2.0])
    assert np.allclose(pool.values([3.0, 0.0, 0.0]), [1.0, 1.5])


def test_cut_monotonicity():
    for seed in range(8):
        p = random_problem(seed)
        if isinstance(p.risk.outer, Expectation) or p.m == 1:
            continue
        H = homogenize(p)
        true = solve_centralized(p)
        pool = CutPool.expectation(p.weights)
        prev = solve_extended_lp(build_extended(H, pool=pool.copy())).objective
        theta = true.theta
        rng = np.random.default_rng(seed)
        for _ in range(3):
            pool.add(generate_cut(theta + rng.normal(size=p.m), p.risk.outer, p.weights))
            val = solve_extended_lp(build_extended(H, pool=pool.copy())).objective
            assert val >= prev - 1e-7
            assert val <= true.objective + 1e-7
            prev = val


# --- validation -------------------------------------------------------------------------------


def test_validate_reports():
    p = homogenize(random_problem(2, m=3, N=3))
    assert validate(build_extended(p)).ok
    bad_tree = SpanningTree(3, ((0, 1),))
    rep = validate(build_extended(p, tree=bad_tree, strict=False))
    assert not rep.ok and "disconnected consensus graph" in str(rep)
    with pytest.raises(ModelError):
        build_extended(p, tree=bad_tree)
    d = p.to_dict()
    d["agents"][1]["scenarios"][0]["Y"]["ub"] = [None] * p.n2
    d["agents"][1]["scenarios"][0]["Y"]["lb"][-1] = 1.0
    d["agents"][1]["scenarios"][0]["Y"]["ub"][-1] = 1.0
    unb = TwoStageSystemProblem.from_dict(d)
    rep = validate(build_extended(unb, strict=False))
    assert (f"Y[1][0]", COMPACTNESS) in rep.issues


def test_extended_requires_homogeneous(toy):
    with pytest.raises(ModelError):
        build_extended(toy)


def test_theta_bounds_individual_risk():
    for seed in range(10):
        p = random_problem(seed)
        sol = solve_centralized(p)
        losses = sol.losses(p)
        for i in range(p.m):
            rho = evaluate(p.risk.inner[i], DiscreteRandomVariable(losses[i], p.prob))
            assert sol.theta[i] >= rho - 1e-7
            if isinstance(p.risk.outer, Expectation):
                assert sol.theta[i] == pytest.approx(rho, abs=1e-7)
