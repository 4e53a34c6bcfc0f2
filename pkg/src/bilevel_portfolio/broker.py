"""The broker-dealer's pricing problem for a fixed portfolio."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleError
from .lp import EQ, LpBuilder
from .market import CostStructure
from .milp import MilpProblem, SolveLimits, solve_milp


@dataclass(frozen=True)
class CostSelection:
    choice: tuple[int, ...]   # index into each grid
    p: np.ndarray             # induced costs, aligned with costs.chargeable
    profit: float             # sum_j p_j x_j for the evaluating portfolio


def selection_from_choice(costs: CostStructure, choice, x_charge=None) -> CostSelection:
    choice = tuple(int(k) for k in choice)
    p = np.array([g[k] for g, k in zip(costs.grids, choice)])
    profit = 0.0 if x_charge is None else float(p @ np.asarray(x_charge, float))
    return CostSelection(choice, p, profit)


def add_cost_selection(builder: LpBuilder, costs: CostStructure, prefix: str = "a"):
    """Add one-hot selection binaries and the polyhedron rows to ``builder``.

    Returns ``(a, groups)``: ``a[i]`` holds the variable indices of the
    selection binaries for the ``i``-th chargeable security.
    """
    a = []
    for i, (j, grid) in enumerate(zip(costs.chargeable, costs.grids)):
        idx = builder.add_vars(f"{prefix}[{j}]", len(grid), lb=0.0, ub=1.0)
        builder.add_row(idx, np.ones(len(grid)), EQ, 1.0, f"one_hot[{j}]")
        a.append(idx)
    for r, row in enumerate(costs.polyhedron):
        idx = np.concatenate(a) if a else np.array([], int)
        vals = np.concatenate([coef * g for coef, g in zip(row.coeffs, costs.grids)]) if a else []
        builder.add_row(idx, vals, row.relation, row.rhs, f"cost_polyhedron[{r}]")
    groups = tuple(tuple(int(v) for v in idx) for idx in a)
    return a, groups


def max_cost_selection(costs: CostStructure) -> CostSelection:
    """Charge the largest admissible cost on every security.

    Optimal for any portfolio when no polyhedron couples the costs.
    """
    if costs.polyhedron:
        raise ValueError("cost polyhedron present: use solve_pricp")
    return selection_from_choice(costs, [len(g) - 1 for g in costs.grids])


def solve_pricp(x, costs: CostStructure, limits: SolveLimits | None = None) -> CostSelection:
    """Profit-maximizing cost selection against portfolio ``x`` (all securities)."""
    x = np.asarray(x, dtype=float)
    xb = x[list(costs.chargeable)] if costs.size else np.zeros(0)
    if not costs.polyhedron:
        sel = max_cost_selection(costs)
        return selection_from_choice(costs, sel.choice, xb)

    b = LpBuilder("max")
    a, groups = add_cost_selection(b, costs)
    for i, idx in enumerate(a):
        for k, v in enumerate(idx):
            b.set_obj(v, costs.grids[i][k] * xb[i])
    lp = b.build()
    limits = limits or SolveLimits(mip_gap=1e-12)
    problem = MilpProblem(lp, tuple(int(v) for g in groups for v in g), groups)
    sol = solve_milp(problem, limits)
    if sol.x is None:
        raise InfeasibleError("the cost polyhedron excludes every grid combination")
    best = sol.objective

    idle = np.flatnonzero(np.abs(xb) <= 1e-12)
    if idle.size:
        # among profit-optimal selections prefer the largest costs on idle securities
        c2 = np.zeros(lp.num_vars)
        for i in idle:
            c2[a[i]] = costs.grids[i]
        lp2 = lp.with_objective(c2).with_rows(
            [({int(v): float(lp.c[v]) for v in np.concatenate(a)}, ">=", best - 1e-12)])
        sol2 = solve_milp(MilpProblem(lp2, problem.binaries, groups), limits)
        if sol2.x is not None:
            sol = sol2
    choice = [int(np.argmax(sol.x[idx])) for idx in a]
    return selection_from_choice(costs, choice, xb)


def pricing_profit(p, x, costs: CostStructure) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.asarray(p, float) @ x[list(costs.chargeable)]) if costs.size else 0.0
