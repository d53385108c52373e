from dataclasses import replace

import numpy as np
import pytest

from sysrisk.disaster import (
    AGGREGATIONS,
    DisasterError,
    DisasterInstance,
    FacilityNetwork,
    demand,
    direct_multipliers,
    formulate_direct,
    from_two_stage,
    generate_instance,
    local_relaxed_subproblem,
    relaxation_value,
    report,
    solve_direct,
    solve_linear_scalarization,
    systemic_risk,
    to_two_stage,
)
from sysrisk.model import build_extended, homogenize
from sysrisk.solver.centralized import solve_centralized


@pytest.fixture(scope="module")
def inst():
    return generate_instance(0)


@pytest.fixture(scope="module")
def solutions(inst):
    return {
        "expectation": solve_direct(inst, "expectation"),
        "semideviation": solve_direct(inst, "semideviation"),
        "linear": solve_linear_scalarization(inst),
    }


# --- instance -----------------------------------------------------------------------------


def test_demand_examples():
    assert demand(0.0) == pytest.approx(10.0)
    assert demand(1.0) == pytest.approx(20.0 / (1.0 + np.exp(2.0)), abs=1e-12)
    assert demand(1.0) == pytest.approx(2.3840, abs=1e-4)  # 2.38406 truncated to four places
    d = demand(np.linspace(0, 2, 50))
    assert np.all(np.diff(d) < 0) and np.all(d > 0)


def test_generation_is_seeded():
    a, b = generate_instance(3), generate_instance(3)
    assert np.array_equal(a.demand, b.demand) and np.array_equal(a.epicenters, b.epicenters)
    assert not np.array_equal(a.demand, generate_instance(4).demand)
    assert generate_instance(0, N=50).demand.shape == (50, 5)
    with pytest.raises(DisasterError):
        generate_instance(0, N=0)


def test_network_defaults_and_checks():
    net = FacilityNetwork.complete()
    assert net.m == 5 and len(net.arcs) == 20 and net.M == 25.0
    assert all(len(net.neighbors(i)) == 4 for i in range(5))
    with pytest.raises(DisasterError):
        FacilityNetwork.complete(gamma=1.5)
    with pytest.raises(DisasterError):
        FacilityNetwork(net.coords, ((0, 0),), 0, 5, 5, 1, 1.5, 0.95, 25)


def test_save_load(tmp_path, inst):
    path = tmp_path / "inst.json"
    inst.save(path)
    back = DisasterInstance.load(path)
    assert back.to_dict() == inst.to_dict()
    d = inst.to_dict()
    d["schema"] = "nope"
    with pytest.raises(DisasterError):
        DisasterInstance.from_dict(d)


def test_variable_count(inst):
    # r, theta, vartheta: 3m; per scenario 20 flows + m surplus + m shortage; m N shortfalls; m means
    for agg in AGGREGATIONS:
        assert formulate_direct(inst, agg).n == 3 * 5 + 10 * (20 + 10) + 5 * 10 + 5 == 370


# --- direct solutions ------------------------------------------------------------------------


def test_feasibility(inst, solutions):
    for sol in solutions.values():
        v = sol.violations(inst)
        assert max(v.values()) < 1e-6, v
        assert sol.r.sum() <= 25.0 + 1e-6


def test_theta_equals_recomputed_risk(inst, solutions):
    for mode in AGGREGATIONS:
        sol = solutions[mode]
        assert np.allclose(sol.theta, sol.individual_risks(inst), atol=1e-6)
        assert sol.objective == pytest.approx(systemic_risk(sol.theta, inst, mode), abs=1e-6)


def test_more_weight_on_dispersion_costs_more(inst):
    lo = solve_direct(replace(inst, kappa0=0.0), "semideviation").objective
    hi = solve_direct(inst, "semideviation").objective
    assert lo <= hi + 1e-9
    assert lo == pytest.approx(solve_direct(inst, "expectation").objective, abs=1e-7)


def test_fairness_and_equalization():
    hits = 0
    for seed in range(10):
        inst = generate_instance(seed)
        semi = solve_direct(inst, "semideviation")
        exp = solve_direct(inst, "expectation")
        hits += semi.spread() <= exp.spread() + 1e-9
        # the semideviation optimum never pays for dispersion it could remove
        assert systemic_risk(exp.theta, inst, "semideviation") >= semi.objective - 1e-7
    assert hits >= 9


def test_more_demand_never_helps(inst):
    heavier = replace(inst, demand=inst.demand * 1.2)
    for agg in AGGREGATIONS:
        assert solve_direct(heavier, agg).objective >= solve_direct(inst, agg).objective - 1e-9


# --- the generic two-stage form ------------------------------------------------------------------


def test_two_stage_form_matches_direct(inst):
    for agg in AGGREGATIONS:
        p = to_two_stage(inst, agg)
        assert p.d3 == 0
        c = solve_centralized(p)
        d = solve_direct(inst, agg)
        assert c.objective == pytest.approx(d.objective, abs=1e-6 * (1 + abs(d.objective)))
        back = from_two_stage(inst, c.x, c.y, c.theta, c.objective, agg)
        assert max(back.violations(inst).values()) < 1e-6
        assert np.allclose(back.individual_risks(inst), c.theta, atol=1e-6)


def test_two_stage_has_no_systemic_rows(inst):
    ext = build_extended(homogenize(to_two_stage(inst)))
    fams = {k[0] for k in ext.row_keys}
    assert "syscost" not in fams and "consensus_z" not in fams
    assert {"cut", "first_stage", "dynamics", "consensus_v"} <= fams


# --- relaxation --------------------------------------------------------------------------------


def test_strong_duality(inst):
    for agg in AGGREGATIONS:
        lp = formulate_direct(inst, agg)
        sol = lp.solve()
        alpha, beta, delta = direct_multipliers(inst, lp, sol)
        assert alpha >= -1e-9 and np.all(beta >= -1e-9)
        assert relaxation_value(alpha, beta, delta, inst, agg) == pytest.approx(sol.objective, abs=1e-6)


def test_weak_duality(inst):
    rng = np.random.default_rng(0)
    for agg in AGGREGATIONS:
        lp = formulate_direct(inst, agg)
        sol = lp.solve()
        alpha, beta, delta = direct_multipliers(inst, lp, sol)
        for _ in range(10):
            a = alpha + rng.uniform(0, 1)
            b = np.maximum(beta + rng.normal(scale=0.1, size=beta.shape), 0.0)
            d = delta * rng.uniform(0.5, 1.5)
            assert relaxation_value(a, b, d, inst, agg) <= sol.objective + 1e-7


def test_zero_multipliers(inst):
    # without prices the relaxed facilities ship nothing, stock nothing and pay only shortages
    loc = local_relaxed_subproblem(0, 0.0, None, np.zeros((inst.N, inst.m)), inst, "expectation")
    assert loc.status == "optimal"
    assert loc.value == pytest.approx(0.0, abs=1e-9)
    assert relaxation_value(0.0, None, np.zeros((inst.N, inst.m)), inst, "expectation") == \
        pytest.approx(0.0, abs=1e-9)


# --- reporting ---------------------------------------------------------------------------------


def test_report(inst, solutions):
    rep = report(solutions, inst)
    assert len(rep.risk_rows) == len(rep.alloc_rows) == 3
    for row in rep.alloc_rows:
        assert row[-2] <= 25.0 + 1e-6
        assert row[-2] == pytest.approx(sum(row[2:7]))
    exp_row = rep.risk_rows[0]
    assert exp_row[7] == pytest.approx(np.mean(exp_row[2:7]), abs=1e-9)
    semi = solutions["semideviation"]
    assert rep.risk_rows[1][7] == pytest.approx(systemic_risk(semi.theta, inst, "semideviation"), abs=1e-9)
    assert rep.risk_rows[2][7] == ""
    assert "linear scalarization" in rep.text()
    assert rep.risk_csv().splitlines()[0].startswith("N,aggregation,theta_1")
