import numpy as np
import pytest

from _instances import random_instance
from bilevel_portfolio.broker import max_cost_selection, pricing_profit, solve_pricp
from bilevel_portfolio.errors import InfeasibleError
from bilevel_portfolio.ilbfp import enumerate_cost_vectors
from bilevel_portfolio.market import CostStructure, PolyRow


def test_max_cost_tiny(tiny):
    inst, _ = tiny
    sel = max_cost_selection(inst.costs)
    np.testing.assert_array_equal(sel.p, [0.02, 0.005])
    assert sel.choice == (1, 0)


def test_singleton_and_duplicate_grids():
    costs = CostStructure((0, 1), ([0.004], [0.01, 0.01, 0.003]))
    np.testing.assert_array_equal(max_cost_selection(costs).p, [0.004, 0.01])


def test_max_cost_refuses_polyhedron(tiny_p):
    with pytest.raises(ValueError, match="solve_pricp"):
        max_cost_selection(tiny_p[0].costs)


def test_pricp_with_polyhedron(tiny_p):
    inst, _ = tiny_p
    sel = solve_pricp(np.array([0.5, 0.5]), inst.costs)
    np.testing.assert_allclose(sel.p, [0.01, 0.005])
    assert sel.profit == pytest.approx(0.0075, abs=1e-12)


def test_pricp_zero_portfolio(tiny_p):
    inst, _ = tiny_p
    sel = solve_pricp(np.zeros(2), inst.costs)
    assert sel.profit == 0.0
    assert inst.costs.in_polyhedron(sel.p)


def test_pricp_idle_security_gets_max_cost(tiny):
    inst, _ = tiny
    sel = solve_pricp(np.array([0.0, 1.0]), inst.costs)
    np.testing.assert_array_equal(sel.p, [0.02, 0.005])


def test_empty_polyhedron_infeasible(tiny_p):
    inst, _ = tiny_p
    costs = inst.costs.with_polyhedron([PolyRow((1.0, 1.0), "<=", 0.0)])
    with pytest.raises(InfeasibleError):
        solve_pricp(np.array([0.5, 0.5]), costs)


@pytest.mark.parametrize("seed", range(20))
def test_closed_form_without_polyhedron(seed):
    inst, _ = random_instance(seed)
    x = np.random.default_rng(seed).dirichlet(np.ones(inst.panel.n))
    sel = solve_pricp(x, inst.costs)
    assert sel.profit == pytest.approx(float(inst.costs.max_costs() @ x[list(inst.costs.chargeable)]), abs=0)


@pytest.mark.parametrize("seed", range(20))
def test_pricp_matches_enumeration(seed):
    inst, _ = random_instance(seed, polyhedron=True)
    x = np.random.default_rng(seed).dirichlet(np.ones(inst.panel.n))
    best = max(pricing_profit(p, x, inst.costs) for _, p in enumerate_cost_vectors(inst))
    sel = solve_pricp(x, inst.costs)
    assert inst.costs.in_polyhedron(sel.p)
    assert sel.profit == pytest.approx(best, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("k", [0.25, 0.7, 1.0])
def test_profit_homogeneous(seed, k):
    inst, _ = random_instance(seed, polyhedron=True)
    x = np.random.default_rng(seed).dirichlet(np.ones(inst.panel.n))
    base = solve_pricp(x, inst.costs)
    scaled = solve_pricp(k * x, inst.costs)
    assert scaled.profit == pytest.approx(k * base.profit, abs=1e-12)
    assert pricing_profit(base.p, k * x, inst.costs) == pytest.approx(scaled.profit, abs=1e-12)
