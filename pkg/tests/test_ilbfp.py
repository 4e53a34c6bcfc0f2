import numpy as np
import pytest

from _instances import random_instance
from bilevel_portfolio.errors import EnumerationCapError, InfeasibleError
from bilevel_portfolio.follower import solve_follower
from bilevel_portfolio.ilbfp import (CutPool, brute_force_ilbfp, build_compact_lp, enumerate_cost_vectors,
                                     pareto_maximal, solve_ilbfp_cutting_plane, solve_ilbfp_lp)
from bilevel_portfolio.lp import solve_lp
from bilevel_portfolio.market import CostStructure, InvestorProfile, PolyRow, ProblemInstance, ScenarioPanel


def test_tiny_closed_form(tiny):
    sol = solve_ilbfp_lp(*tiny)
    np.testing.assert_allclose(sol.x, [0, 1], atol=1e-9)
    assert sol.cvar == pytest.approx(0.015, abs=1e-9)
    assert sol.profit == pytest.approx(0.005, abs=1e-9)
    np.testing.assert_array_equal(sol.p, [0.02, 0.005])


def test_tiny_cutting_plane_and_oracle(tiny):
    cp = solve_ilbfp_cutting_plane(*tiny)
    oracle = brute_force_ilbfp(*tiny)
    assert cp.status == "Optimal"
    assert cp.cvar == pytest.approx(solve_ilbfp_lp(*tiny).cvar, abs=1e-8)
    assert oracle.diagnostics["compact_value"] == pytest.approx(0.015, abs=1e-9)
    assert oracle.cvar == pytest.approx(0.015, abs=1e-9)


def test_tiny_polyhedron(tiny_p):
    cp = solve_ilbfp_cutting_plane(*tiny_p)
    np.testing.assert_allclose(cp.x, [0, 1], atol=1e-9)
    assert cp.p[1] == pytest.approx(0.005)
    assert cp.cvar == pytest.approx(0.015, abs=1e-9)
    assert brute_force_ilbfp(*tiny_p).cvar == pytest.approx(0.015, abs=1e-9)
    with pytest.raises(ValueError):
        solve_ilbfp_lp(*tiny_p)


def test_no_chargeable_securities():
    panel = ScenarioPanel.uniform([[0.05, -0.01, 0.02], [0.01, 0.015, 0.0]])
    inst = ProblemInstance(panel, CostStructure((), ()))
    prof = InvestorProfile(0.5)
    plain = solve_follower(panel, prof, inst.costs, np.zeros(0)).cvar
    assert solve_ilbfp_lp(inst, prof).cvar == pytest.approx(plain, abs=1e-12)
    assert solve_ilbfp_cutting_plane(inst, prof).cvar == pytest.approx(plain, abs=1e-9)


def test_singleton_grids_equal_follower():
    panel = ScenarioPanel.uniform([[0.05, -0.01, 0.02], [0.01, 0.015, 0.0]])
    inst = ProblemInstance(panel, CostStructure((0,), ([0.003],)))
    prof = InvestorProfile(0.5)
    plain = solve_follower(panel, prof, inst.costs, np.array([0.003])).cvar
    assert solve_ilbfp_lp(inst, prof).cvar == pytest.approx(plain, abs=1e-12)
    assert brute_force_ilbfp(inst, prof).cvar == pytest.approx(plain, abs=1e-9)


def test_zero_start_terminates():
    # no portfolio meets the return under maximal costs, so the loop starts from x = 0
    panel = ScenarioPanel.uniform([[0.03, 0.01], [0.002, 0.004]])
    costs = CostStructure((0, 1), ([0.005, 0.03], [0.001, 0.002]), (PolyRow((1.0, 0.0), "<=", 0.02),))
    inst, prof = ProblemInstance(panel, costs), InvestorProfile(0.5, 0.01)
    cp = solve_ilbfp_cutting_plane(inst, prof)
    assert cp.status == "Optimal"
    assert cp.cvar == pytest.approx(brute_force_ilbfp(inst, prof).cvar, abs=1e-8)


@pytest.mark.parametrize("seed", range(15))
def test_methods_agree(seed):
    inst, prof = random_instance(seed)
    lp, cp, oracle = (solve_ilbfp_lp(inst, prof), solve_ilbfp_cutting_plane(inst, prof),
                      brute_force_ilbfp(inst, prof))
    assert cp.cvar == pytest.approx(lp.cvar, abs=1e-8)
    assert oracle.cvar == pytest.approx(lp.cvar, abs=1e-8)
    trace = cp.diagnostics["cut_pool"].cvar_trace
    assert np.all(np.diff(trace) <= 1e-12)
    assert cp.iterations <= len(enumerate_cost_vectors(inst)) + 1


@pytest.mark.parametrize("seed", range(15))
def test_polyhedron_agrees_with_oracle(seed):
    inst, prof = random_instance(seed, polyhedron=True)
    try:
        oracle = brute_force_ilbfp(inst, prof)
    except InfeasibleError:
        with pytest.raises(InfeasibleError):
            solve_ilbfp_cutting_plane(inst, prof)
        return
    cp = solve_ilbfp_cutting_plane(inst, prof)
    assert cp.status == "Optimal"
    assert cp.cvar == pytest.approx(oracle.cvar, abs=1e-8)
    assert inst.costs.in_polyhedron(cp.p)
    pool = cp.diagnostics["cut_pool"]
    assert len({tuple(p) for p in pool.cuts}) == len(pool.cuts)


def test_compact_lp_value_is_net_cvar(tiny):
    inst, prof = tiny
    sol = solve_lp(build_compact_lp(inst, prof, [inst.costs.max_costs()]))
    assert sol.objective == pytest.approx(solve_ilbfp_lp(inst, prof).cvar, abs=1e-9)


def test_cut_pool_rejects_duplicates():
    pool = CutPool()
    assert pool.add(np.array([0.1, 0.2]))
    assert not pool.add(np.array([0.1, 0.2]))
    assert pool.contains(np.array([0.1, 0.2]))


def test_pareto_maximal():
    vecs = [np.array(v) for v in ([1, 1], [2, 1], [1, 2], [2, 1], [0, 0])]
    assert pareto_maximal(vecs) == [1, 2]


def test_enumeration_cap(tiny):
    with pytest.raises(EnumerationCapError):
        brute_force_ilbfp(*tiny, cap=1)


def test_infeasible_mu0(tiny):
    inst, _ = tiny
    with pytest.raises(InfeasibleError):
        solve_ilbfp_lp(inst, InvestorProfile(0.5, 1.0))
    with pytest.raises(InfeasibleError):
        solve_ilbfp_cutting_plane(inst, InvestorProfile(0.5, 1.0))


def test_highs_unknown_status_falls_back():
    # HiGHS dual simplex reports "model status unknown" on this infeasible master
    from bilevel_portfolio.experiments import instance_seed
    from bilevel_portfolio.lp import SolverTolerances
    from bilevel_portfolio.market import generate_instance, synthetic_panel

    inst = generate_instance("B", synthetic_panel(30, 60, seed=0), instance_seed(0, "B", 2))
    lp = build_compact_lp(inst, InvestorProfile(0.05, 0.05), [inst.costs.max_costs()])
    assert solve_lp(lp, SolverTolerances(backend="highs")).status == "Infeasible"
    assert solve_lp(lp).status == "Infeasible"
