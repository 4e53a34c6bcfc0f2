import json

import numpy as np
import pytest

from _instances import random_instance
from bilevel_portfolio.blifp import (FORMULATIONS, brute_force_blifp, build_blifp1, build_blifp2,
                                     initial_big_m, model_size, required_sigma, solve_blifp)
from bilevel_portfolio.errors import CertificateFailure, EnumerationCapError, InfeasibleError
from bilevel_portfolio.follower import solve_follower
from bilevel_portfolio.market import CostStructure, InvestorProfile, ProblemInstance, ScenarioPanel
from bilevel_portfolio.milp import SolveLimits, solve_milp

BACKENDS = ("bnb", "highs")


@pytest.mark.parametrize("formulation", FORMULATIONS)
@pytest.mark.parametrize("backend", BACKENDS)
def test_tiny(tiny, formulation, backend):
    inst, prof = tiny
    sol = solve_blifp(inst, prof, formulation, SolveLimits(mip_gap=1e-9, backend=backend))
    assert sol.status == "Optimal"
    assert sol.profit == pytest.approx(0.005, abs=1e-9)
    assert sol.cvar == pytest.approx(0.015, abs=1e-9)
    np.testing.assert_allclose(sol.x, [0, 1], atol=1e-9)
    assert sol.p[1] == pytest.approx(0.005)
    assert sol.diagnostics["certificate_gap"] <= 1e-6
    assert sol.diagnostics["strong_duality_residual"] <= 1e-6


def test_tiny_oracle(tiny):
    inst, prof = tiny
    oracle = brute_force_blifp(inst, prof)
    assert oracle.iterations == 2  # cost vectors enumerated
    assert oracle.profit == pytest.approx(0.005, abs=1e-12)
    assert oracle.cvar == pytest.approx(0.015, abs=1e-12)
    # both p1 values tie; the first grid index wins
    assert oracle.choice == (0, 0)


def test_oracle_cap(tiny):
    with pytest.raises(EnumerationCapError):
        brute_force_blifp(*tiny, cap=1)


@pytest.mark.parametrize("formulation", FORMULATIONS)
def test_no_chargeable_securities(formulation):
    panel = ScenarioPanel.uniform([[0.05, -0.01, 0.02], [0.01, 0.015, 0.0]])
    inst = ProblemInstance(panel, CostStructure((), ()))
    prof = InvestorProfile(0.5)
    sol = solve_blifp(inst, prof, formulation)
    assert sol.profit == 0.0
    assert sol.cvar == pytest.approx(solve_follower(panel, prof, inst.costs, np.zeros(0)).cvar, abs=1e-9)


@pytest.mark.parametrize("formulation", FORMULATIONS)
def test_singleton_grids(formulation):
    panel = ScenarioPanel.uniform([[0.05, -0.01, 0.02], [0.01, 0.015, 0.0], [0.03, 0.03, -0.02]])
    inst = ProblemInstance(panel, CostStructure((0, 2), ([0.004], [0.002])))
    prof = InvestorProfile(0.9)
    sol = solve_blifp(inst, prof, formulation)
    oracle = brute_force_blifp(inst, prof)
    assert sol.choice == (0, 0)
    assert sol.profit == pytest.approx(oracle.profit, abs=1e-9)


@pytest.mark.parametrize("seed", range(12))
def test_formulations_match_oracle(seed):
    inst, prof = random_instance(seed)
    oracle = brute_force_blifp(inst, prof)
    for formulation in FORMULATIONS:
        sol = solve_blifp(inst, prof, formulation)
        assert sol.profit == pytest.approx(oracle.profit, abs=1e-6)
        assert sol.diagnostics["certificate_gap"] <= 1e-6
        assert sol.profit == pytest.approx(float(sol.p @ sol.x[list(inst.costs.chargeable)]), abs=1e-9)


@pytest.mark.parametrize("seed", range(6))
def test_polyhedron_matches_oracle(seed):
    inst, prof = random_instance(seed, polyhedron=True)
    oracle = brute_force_blifp(inst, prof)
    for formulation in FORMULATIONS:
        sol = solve_blifp(inst, prof, formulation)
        assert inst.costs.in_polyhedron(sol.p)
        assert sol.profit == pytest.approx(oracle.profit, abs=1e-6)


@pytest.mark.parametrize("seed", range(8))
def test_leader_dominates_maximal_costs(seed):
    inst, prof = random_instance(seed)
    p_max = inst.costs.max_costs()
    try:
        follower = solve_follower(inst.panel, prof, inst.costs, p_max)
    except InfeasibleError:
        pytest.skip("follower infeasible at maximal costs")
    mimic = float(p_max @ follower.x[list(inst.costs.chargeable)])
    assert solve_blifp(inst, prof).profit >= mimic - 1e-9


@pytest.mark.parametrize("formulation", FORMULATIONS)
def test_small_initial_m(tiny, formulation):
    inst, prof = tiny
    M0 = initial_big_m(inst, prof) / 64
    sol = solve_blifp(inst, prof, formulation, M0=M0)
    assert sol.M_final >= M0
    assert sol.profit == pytest.approx(0.005, abs=1e-9)
    assert sol.diagnostics["certificate_gap"] <= 1e-6


def test_small_initial_m_escalates_blifp1(tiny):
    inst, prof = tiny
    sol = solve_blifp(inst, prof, "blifp1", M0=1e-3, max_escalations=20)
    assert sol.diagnostics["escalations"] > 0
    assert sol.profit == pytest.approx(0.005, abs=1e-9)


def test_escalations_exhausted_is_not_reported_infeasible(tiny):
    inst, prof = tiny
    with pytest.raises(CertificateFailure, match="escalations"):
        solve_blifp(inst, prof, "blifp1", M0=1e-6, max_escalations=1)


def test_infeasible_mu0(tiny):
    inst, _ = tiny
    for formulation in FORMULATIONS:
        with pytest.raises(InfeasibleError):
            solve_blifp(inst, InvestorProfile(0.5, 1.0), formulation)


def test_bad_arguments(tiny):
    inst, prof = tiny
    with pytest.raises(ValueError):
        build_blifp1(inst, prof, 0.0)
    with pytest.raises(ValueError):
        build_blifp2(inst, prof, -1.0)
    with pytest.raises(ValueError):
        solve_blifp(inst, prof, "blifp3")


def test_sigma_closed_form_at_optimum(tiny):
    inst, prof = tiny
    model = build_blifp2(inst, prof, initial_big_m(inst, prof))
    sol = solve_milp(model.problem, SolveLimits(mip_gap=1e-9))
    need = required_sigma(model, inst, sol.x)
    assert np.all(sol.x[model.sigma] >= need - 1e-9)
    # replacing sigma by its closed form keeps the point feasible and optimal
    z = sol.x.copy()
    z[model.sigma] = need
    lp = model.problem.lp
    act = lp.A @ z
    for i, rel in enumerate(lp.relations):
        if rel == "<=":
            assert act[i] <= lp.rhs[i] + 1e-9, lp.row_name(i)
        elif rel == ">=":
            assert act[i] >= lp.rhs[i] - 1e-9, lp.row_name(i)
        else:
            assert act[i] == pytest.approx(lp.rhs[i], abs=1e-9), lp.row_name(i)
    assert lp.objective(z) == pytest.approx(sol.objective, abs=1e-9)


def expected_sizes(inst):
    n_b, T = inst.costs.size, inst.panel.T
    R, d = inst.panel.n - n_b, inst.costs.num_choices
    return {
        "blifp1": dict(binaries=d, continuous=R + 4 * T + d + d * T + 3,
                       constraints=2 * n_b + 6 * T + 2 * R + 2 * d + 4 * d * T + 6),
        "blifp2": dict(binaries=d, continuous=R + 4 * T + 3 * d + 3,
                       constraints=n_b + 6 * T + 2 * R + 8 * d + 6),
    }


@pytest.mark.parametrize("seed", [None, 0, 3, 7])
def test_model_sizes(tiny, seed):
    inst, prof = tiny if seed is None else random_instance(seed)
    sizes = expected_sizes(inst)
    for build, name in ((build_blifp1, "blifp1"), (build_blifp2, "blifp2")):
        size = model_size(build(inst, prof, 10.0))
        assert size.binaries == sizes[name]["binaries"]
        assert size.continuous == sizes[name]["continuous"]
        assert size.constraints == sizes[name]["constraints"]


def test_blifp2_smaller_than_blifp1():
    inst, prof = random_instance(5)
    s1 = model_size(build_blifp1(inst, prof, 10.0))
    s2 = model_size(build_blifp2(inst, prof, 10.0))
    assert s2.continuous < s1.continuous and s2.constraints < s1.constraints


def test_record_is_json(tiny):
    rec = solve_blifp(*tiny).to_record()
    back = json.loads(json.dumps(rec))
    for key in ("p", "x", "profit", "cvar", "expected_return", "status", "nodes", "time_s", "M_final"):
        assert key in back
    assert back["status"] == "Optimal"
