"""Maximum social welfare: broker and investor optimize a joint objective.

The weighted model maximizes ``xi * profit + (1 - xi) * CVaR`` directly as a
MILP.  For the unweighted sum ``profit + CVaR`` a Benders scheme keeps the
broker/portfolio variables in the master and outer-approximates the CVaR of
the scenario returns ``y`` by cuts ``q <= w . y``, where ``w`` are the worst-
scenario weights returned by :func:`cvar_by_inspection`.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .blifp import add_investor_block
from .errors import InfeasibleError
from .follower import cvar_by_inspection
from .lp import GE, LE, LpBuilder
from .market import InvestorProfile, ProblemInstance
from .milp import (INFEASIBLE, OPTIMAL, MilpProblem, SolveLimits, fix_binaries_and_resolve,
                   group_choice, solve_milp)
from .solution import BilevelSolution, evaluate

DEFAULT_LIMITS = SolveLimits(mip_gap=1e-9)
BENDERS_TOL = 1e-7
SPLIT_TOL = 1e-11


@dataclass
class WelfareSolution:
    solution: BilevelSolution
    xi: float | None           # None for the unweighted sum
    welfare: float
    method: str                # "milp" or "benders"
    master_trace: list[float] = field(default_factory=list)
    cuts: int = 0
    alternative_split: bool | None = None

    @property
    def status(self) -> str:
        return self.solution.status

    @property
    def profit(self) -> float:
        return self.solution.profit

    @property
    def cvar(self) -> float:
        return self.solution.cvar

    def to_record(self) -> dict:
        rec = self.solution.to_record()
        rec.update(xi=self.xi, welfare=None if not np.isfinite(self.welfare) else float(self.welfare),
                   cuts=self.cuts, method=self.method, alternative_split=self.alternative_split)
        return rec


def welfare_value(profit: float, cvar: float, xi: float | None) -> float:
    if xi is None:
        return profit + cvar
    return xi * profit + (1.0 - xi) * cvar


def _check_xi(xi):
    if xi is not None and not 0.0 <= xi <= 1.0:
        raise ValueError(f"xi must lie in [0, 1], got {xi}")


def _build_welfare(instance: ProblemInstance, profile: InvestorProfile, xi: float | None):
    w_profit, w_cvar = (1.0, 1.0) if xi is None else (xi, 1.0 - xi)
    T = instance.panel.T
    b = LpBuilder("max")
    inv = add_investor_block(b, instance, profile, profit_weight=w_profit)
    eta = b.add_var("eta", lb=-np.inf, obj=w_cvar)
    d = b.add_vars("d", T, obj=-w_cvar * instance.panel.probs / profile.alpha)
    for t in range(T):
        b.add_row([d[t], eta, inv.y[t]], [1.0, -1.0, 1.0], GE, 0.0, f"shortfall[{t}]")
    binaries = tuple(int(v) for g in inv.groups for v in g)
    lp = b.build()
    profit_c = np.zeros(lp.num_vars)
    profit_c[inv.ahat_all] = inv.cost_all
    cvar_c = np.zeros(lp.num_vars)
    cvar_c[eta] = 1.0
    cvar_c[d] = -instance.panel.probs / profile.alpha
    return MilpProblem(lp, binaries, inv.groups), inv, profit_c, cvar_c


def _finish(instance, profile, inv, z, status, model, **extra):
    choice = group_choice(z, inv.a)
    p = np.array([g[k] for g, k in zip(instance.costs.grids, choice)])
    return evaluate(instance, profile, model, status, inv.portfolio(z, instance), p, choice, **extra)


def _lexicographic(problem: MilpProblem, z: np.ndarray, secondary: np.ndarray,
                   limits: SolveLimits) -> np.ndarray | None:
    """Best point for ``secondary`` among those keeping the primary objective at ``z``'s value."""
    lp = problem.lp
    value = lp.objective(z)
    row = {int(j): float(v) for j, v in enumerate(lp.c) if v != 0.0}
    lex = lp.with_objective(secondary).with_rows([(row, GE, value - SPLIT_TOL * max(1.0, abs(value)))])
    lex_problem = MilpProblem(lex, problem.binaries, problem.sos1)
    sol = solve_milp(lex_problem, limits)
    if not sol.has_incumbent:
        return None
    return fix_binaries_and_resolve(lex_problem, sol.x, limits.lp)


def solve_mswp_milp(instance: ProblemInstance, profile: InvestorProfile, xi: float | None = None,
                    limits: SolveLimits | None = None, *, check_split: bool = True) -> WelfareSolution:
    """Direct MILP; ``xi=None`` maximizes the unweighted sum ``profit + CVaR``."""
    _check_xi(xi)
    limits = limits or DEFAULT_LIMITS
    start = time.perf_counter()
    problem, inv, profit_c, cvar_c = _build_welfare(instance, profile, xi)
    sol = solve_milp(problem, limits)
    if sol.status == INFEASIBLE:
        raise InfeasibleError("no cost selection admits a portfolio meeting the expected return")
    if not sol.has_incumbent:
        empty = BilevelSolution("mswp-milp", sol.status, nodes=sol.nodes, time_s=time.perf_counter() - start)
        return WelfareSolution(empty, xi, float("nan"), "milp")
    z = fix_binaries_and_resolve(problem, sol.x, limits.lp)
    if xi in (0.0, 1.0):
        # a zero weight leaves the other objective free; pin it to its best value
        lex = _lexicographic(problem, z, profit_c if xi == 0.0 else cvar_c, limits.remaining(start))
        z = z if lex is None else lex
    split = None
    if check_split:
        lex = _lexicographic(problem, z, profit_c, limits.remaining(start))
        split = lex is not None and float(profit_c @ lex) > float(profit_c @ z) + 1e-7
    result = _finish(instance, profile, inv, z, sol.status, "mswp-milp", nodes=sol.nodes)
    result.time_s = time.perf_counter() - start
    return WelfareSolution(result, xi, welfare_value(result.profit, result.cvar, xi), "milp",
                           alternative_split=split)


def solve_mswp_benders(instance: ProblemInstance, profile: InvestorProfile,
                       limits: SolveLimits | None = None, *, tol: float = BENDERS_TOL,
                       max_iterations: int = 500) -> WelfareSolution:
    """Benders decomposition of the unweighted welfare problem."""
    limits = limits or DEFAULT_LIMITS
    start = time.perf_counter()
    panel = instance.panel
    T = panel.T
    b = LpBuilder("max")
    inv = add_investor_block(b, instance, profile)
    # the CVaR of y never exceeds max_t y_t <= max(r_max, 0)
    q = b.add_var("q", lb=-np.inf, ub=max(float(panel.returns.max()), 0.0), obj=1.0)
    base = b.build()
    binaries = tuple(int(v) for g in inv.groups for v in g)

    cuts: list[np.ndarray] = []
    trace: list[float] = []
    nodes = 0
    status = "IterationLimit"
    z = None
    for _ in range(max_iterations + 1):
        rows = [({q: 1.0, **{int(inv.y[t]): -float(w[t]) for t in range(T) if w[t] != 0.0}}, LE, 0.0)
                for w in cuts]
        lp = base.with_rows(rows) if rows else base
        problem = MilpProblem(lp, binaries, inv.groups)
        sol = solve_milp(problem, limits.remaining(start))
        nodes += sol.nodes
        if sol.status == INFEASIBLE:
            raise InfeasibleError("no cost selection admits a portfolio meeting the expected return")
        if sol.status != OPTIMAL:
            status = sol.status
            break
        z = fix_binaries_and_resolve(problem, sol.x, limits.lp)
        y = z[inv.y]
        q_value, weights = cvar_by_inspection(y, panel.probs, profile.alpha, return_weights=True)
        if cuts:
            # the first solve (no cuts) only supplies the starting point
            trace.append(float(sol.objective))
            if z[q] - q_value <= tol:
                status = OPTIMAL
                break
        cuts.append(weights)
    if z is None:
        empty = BilevelSolution("mswp-benders", status, nodes=nodes, time_s=time.perf_counter() - start)
        return WelfareSolution(empty, None, float("nan"), "benders", trace, len(cuts))
    result = _finish(instance, profile, inv, z, status, "mswp-benders", nodes=nodes,
                     iterations=len(trace), time_s=time.perf_counter() - start)
    return WelfareSolution(result, None, welfare_value(result.profit, result.cvar, None), "benders",
                           trace, len(cuts))


def pareto_sweep(instance: ProblemInstance, profile: InvestorProfile,
                 xis=(0.0, 0.25, 0.5, 0.75, 1.0), limits: SolveLimits | None = None):
    """One weighted solve per ``xi``; failures are returned in place of the point."""
    points = []
    for xi in sorted(xis):
        try:
            points.append(solve_mswp_milp(instance, profile, xi, limits, check_split=False))
        except (InfeasibleError, ValueError) as exc:
            points.append(exc)
    return points
