"""Investor-leader / broker-follower problem.

The investor only feels the broker's response through the charge
``lambda = max_p sum_j p_j x_j``, and CVaR falls one for one with it, so the
problem is the CVaR LP with ``y_t = sum_j r_jt x_j - lambda`` and one cut
``lambda >= p . x_B`` per admissible cost vector.  Without a cost polyhedron
the maximal costs dominate every other vector and a single cut suffices.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from .broker import solve_pricp
from .errors import EnumerationCapError, InfeasibleError
from .follower import solve_follower
from .lp import EQ, GE, LE, LpBuilder, LpProblem, SolverTolerances, solve_lp
from .market import InvestorProfile, ProblemInstance
from .milp import SolveLimits
from .solution import OPTIMAL, BilevelSolution, evaluate

ITERATION_LIMIT = "IterationLimit"


@dataclass
class CutPool:
    """Cost vectors discovered so far and the master value after each round."""

    cuts: list[np.ndarray] = field(default_factory=list)
    cvar_trace: list[float] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.cvar_trace)

    def contains(self, p: np.ndarray, tol: float = 1e-12) -> bool:
        return any(np.allclose(p, q, rtol=0.0, atol=tol) for q in self.cuts)

    def add(self, p: np.ndarray) -> bool:
        if self.contains(p):
            return False
        self.cuts.append(np.asarray(p, dtype=float).copy())
        return True


def solve_ilbfp_lp(instance: ProblemInstance, profile: InvestorProfile,
                   tolerances: SolverTolerances | None = None) -> BilevelSolution:
    """Without a cost polyhedron the broker always answers with maximal costs."""
    costs = instance.costs
    if costs.polyhedron:
        raise ValueError("cost polyhedron present: use solve_ilbfp_cutting_plane")
    start = time.perf_counter()
    p = costs.max_costs()
    sol = solve_follower(instance.panel, profile, costs, p, tolerances)
    choice = [len(g) - 1 for g in costs.grids]
    return evaluate(instance, profile, "ilbfp-lp", OPTIMAL, sol.x, p, choice,
                    time_s=time.perf_counter() - start)


def build_compact_lp(instance: ProblemInstance, profile: InvestorProfile, cuts) -> LpProblem:
    """CVaR LP with the broker's charge modeled by ``lambda`` and the given cuts.

    Layout: ``x[0..n) y[n..n+T) eta d[..T) lambda``.
    """
    panel, costs = instance.panel, instance.costs
    n, T = panel.n, panel.T
    B = list(costs.chargeable)
    b = LpBuilder("max")
    x = b.add_vars("x", n)
    y = b.add_vars("y", T, lb=-np.inf)
    eta = b.add_var("eta", lb=-np.inf, obj=1.0)
    d = b.add_vars("d", T, obj=-panel.probs / profile.alpha)
    lam = b.add_var("lambda", lb=-np.inf)
    for t in range(T):
        b.add_row(np.r_[y[t], x, lam], np.r_[1.0, -panel.returns[:, t], 1.0], EQ, 0.0,
                  f"scenario[{t}]")
    b.add_row(y, panel.probs, GE, profile.mu0, "expected_return")
    for t in range(T):
        b.add_row([d[t], eta, y[t]], [1.0, -1.0, 1.0], GE, 0.0, f"shortfall[{t}]")
    b.add_row(x, np.ones(n), LE, 1.0, "budget")
    for i, p in enumerate(cuts):
        b.add_row(np.r_[lam, x[B]], np.r_[1.0, -np.asarray(p, float)], GE, 0.0, f"cut[{i}]")
    return b.build()


def _solve_master(instance, profile, cuts, tolerances):
    lp = build_compact_lp(instance, profile, cuts)
    sol = solve_lp(lp, tolerances)
    if sol.status == "Infeasible":
        raise InfeasibleError(f"no portfolio reaches expected return {profile.mu0}")
    if not sol.optimal:
        raise RuntimeError(f"master LP ended with status {sol.status}")
    n = instance.panel.n
    return np.maximum(sol.x[:n], 0.0), float(sol.x[-1]), sol.objective


def _initial_portfolio(instance, profile, tolerances) -> np.ndarray:
    costs = instance.costs
    p_max = costs.max_costs()
    if costs.in_polyhedron(p_max):
        try:
            return solve_follower(instance.panel, profile, costs, p_max, tolerances).x
        except InfeasibleError:
            pass
    return np.zeros(instance.panel.n)


def solve_ilbfp_cutting_plane(instance: ProblemInstance, profile: InvestorProfile, *,
                              cut_tol: float = 1e-8, max_iterations: int | None = None,
                              limits: SolveLimits | None = None) -> BilevelSolution:
    """Alternate broker best responses and the master LP over the cuts found.

    Stops as soon as the broker's best response to the master portfolio
    charges no more than the master's ``lambda`` (plus ``cut_tol``).
    """
    start = time.perf_counter()
    limits = limits or SolveLimits(mip_gap=1e-12)
    tol = limits.lp
    costs = instance.costs
    if max_iterations is None:
        max_iterations = min(10 * costs.product_size(), 10_000)
    pool = CutPool()
    x = _initial_portfolio(instance, profile, tol)
    pool.add(solve_pricp(x, costs, limits).p)
    status = ITERATION_LIMIT
    while pool.iterations < max_iterations:
        x, lam, value = _solve_master(instance, profile, pool.cuts, tol)
        pool.cvar_trace.append(value)
        response = solve_pricp(x, costs, limits)
        if response.profit <= lam + cut_tol:
            status = OPTIMAL
            break
        if not pool.add(response.p):
            # violated cut already in the pool: numerical trouble, not progress
            status = "Stalled"
            break
    result = evaluate(instance, profile, "ilbfp-cp", status, x, response.p, response.choice,
                      iterations=pool.iterations, time_s=time.perf_counter() - start)
    result.diagnostics["cut_pool"] = pool
    result.diagnostics["master_cvar"] = pool.cvar_trace[-1]
    return result


def enumerate_cost_vectors(instance: ProblemInstance, cap: int = 2000) -> list[tuple[tuple[int, ...], np.ndarray]]:
    """Every admissible grid combination inside the polyhedron, in lexicographic order."""
    costs = instance.costs
    if costs.product_size() > cap:
        raise EnumerationCapError(f"{costs.product_size()} cost vectors exceed the cap of {cap}")
    out = []
    for choice in itertools.product(*(range(len(g)) for g in costs.grids)):
        p = np.array([g[k] for g, k in zip(costs.grids, choice)])
        if costs.in_polyhedron(p):
            out.append((choice, p))
    return out


def pareto_maximal(vectors: list[np.ndarray]) -> list[int]:
    """Indices of vectors not dominated componentwise by another (first copy kept)."""
    keep = []
    for i, p in enumerate(vectors):
        dominated = False
        for j, q in enumerate(vectors):
            if j != i and np.all(q >= p) and (np.any(q > p) or j < i):
                dominated = True
                break
        if not dominated:
            keep.append(i)
    return keep


def brute_force_ilbfp(instance: ProblemInstance, profile: InvestorProfile, *, cap: int = 2000,
                      tolerances: SolverTolerances | None = None) -> BilevelSolution:
    """Compact LP with one cut per admissible cost vector."""
    start = time.perf_counter()
    omega = enumerate_cost_vectors(instance, cap)
    if not omega:
        raise InfeasibleError("the cost polyhedron excludes every grid combination")
    vectors = [p for _, p in omega]
    cuts = [vectors[i] for i in pareto_maximal(vectors)]
    x, _, value = _solve_master(instance, profile, cuts, tolerances)
    xb = x[list(instance.costs.chargeable)]
    profits = [float(p @ xb) for p in vectors]
    top = max(profits)
    # the broker's answer; among equal-profit vectors take the largest costs
    best = max((i for i, v in enumerate(profits) if v >= top - 1e-12),
               key=lambda i: (tuple(vectors[i]), -i))
    choice, p = omega[best]
    result = evaluate(instance, profile, "ilbfp-oracle", OPTIMAL, x, p, choice,
                      iterations=len(omega), time_s=time.perf_counter() - start)
    result.diagnostics["compact_value"] = value
    return result
