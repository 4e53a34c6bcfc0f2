"""Broker-leader / investor-follower pricing as single-level MILPs.

Both formulations replace the investor's CVaR problem by its primal
constraints, the constraints of a dual and a strong-duality row, with the
products between the cost-selection binaries ``a_jk`` and continuous
variables linearized.  ``blifp1`` dualizes the problem with ``p`` as data and
linearizes ``a_jk * delta_t`` (one variable per security, cost and scenario);
``blifp2`` dualizes after substituting ``x_j = sum_k ahat_jk`` and only needs
``a_jk * sigma_jk``.

Restricting the dual variables through a finite ``M`` never admits a
portfolio that is not follower-optimal (the strong-duality row still forces
primal value = dual value), it can only cut off cost selections.  The
adaptive loop therefore doubles ``M`` while a bounded dual quantity sits at
the bound, and the final answer is certified by re-solving the follower.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from .broker import add_cost_selection
from .errors import CertificateFailure, EnumerationCapError, InfeasibleError
from .follower import CvarLayout, build_cvar_lp, solve_follower
from .lp import EQ, GE, LE, LpBuilder, SolverTolerances, solve_lp
from .market import InvestorProfile, ProblemInstance
from .milp import (INFEASIBLE, MilpProblem, SolveLimits, fix_binaries_and_resolve,
                   group_choice, solve_milp)
from .solution import OPTIMAL, BilevelSolution, evaluate

FORMULATIONS = ("blifp1", "blifp2")
DEFAULT_LIMITS = SolveLimits(mip_gap=1e-9)
NEAR_BOUND = 1e-3
CERTIFICATE_TOL = 1e-6


@dataclass
class BlifpModel:
    problem: MilpProblem
    formulation: str
    M: float
    investor: "InvestorBlock"
    eta: int
    d: np.ndarray
    beta: int
    mu: int
    gamma: np.ndarray
    delta: np.ndarray
    sigma: np.ndarray | None = None   # blifp2 only, one per (j, k) in grid order
    linked: np.ndarray | None = None  # delta-hat (d x T) or sigma-hat (d)

    def portfolio(self, z: np.ndarray, instance: ProblemInstance) -> np.ndarray:
        return self.investor.portfolio(z, instance)

    def choice(self, z: np.ndarray) -> list[int]:
        return group_choice(z, self.investor.a)


@dataclass(frozen=True)
class ModelSize:
    binaries: int
    continuous: int
    rows: int
    constraints: int  # rows plus finite bounds on continuous variables


@dataclass
class InvestorBlock:
    """Indices of the cost selection and the linearized portfolio variables."""

    a: list[np.ndarray]
    groups: tuple[tuple[int, ...], ...]
    ahat: list[np.ndarray]
    x_other: np.ndarray
    y: np.ndarray
    ahat_all: np.ndarray
    cost_all: np.ndarray
    owner: np.ndarray  # security of each entry of ahat_all

    def portfolio(self, z: np.ndarray, instance: ProblemInstance) -> np.ndarray:
        x = np.zeros(instance.panel.n)
        for j, idx in zip(instance.costs.chargeable, self.ahat):
            x[j] = z[idx].sum()
        x[list(instance.others)] = z[self.x_other]
        return np.maximum(x, 0.0)


def add_investor_block(b: LpBuilder, instance: ProblemInstance, profile: InvestorProfile,
                       profit_weight: float = 1.0) -> InvestorBlock:
    """Cost selection, ``ahat_jk = a_jk x_j`` and the scenario, return and budget rows.

    The broker's profit ``sum c_jk ahat_jk`` enters the objective with ``profit_weight``.
    """
    panel, costs = instance.panel, instance.costs
    r, T = panel.returns, panel.T
    others = list(instance.others)
    B = list(costs.chargeable)
    a, groups = add_cost_selection(b, costs)
    ahat = [b.add_vars(f"ahat[{j}]", len(g), obj=profit_weight * g) for j, g in zip(B, costs.grids)]
    x_other = b.add_vars("x", len(others))
    y = b.add_vars("y", T, lb=-np.inf)
    ahat_all = np.concatenate(ahat) if B else np.array([], int)
    cost_all = np.concatenate(costs.grids) if B else np.array([])
    owner = (np.concatenate([[j] * len(g) for j, g in zip(B, costs.grids)]).astype(int)
             if B else np.array([], int))
    for t in range(T):
        b.add_row(np.r_[y[t], ahat_all, x_other],
                  np.r_[1.0, -(r[owner, t] - cost_all), -r[others, t]], EQ, 0.0, f"scenario[{t}]")
    b.add_row(y, panel.probs, GE, profile.mu0, "expected_return")
    b.add_row(np.r_[ahat_all, x_other], np.ones(len(ahat_all) + len(others)), LE, 1.0, "budget")
    for i, j in enumerate(B):
        for k in range(len(a[i])):
            b.add_row([ahat[i][k], a[i][k]], [1.0, -1.0], LE, 0.0, f"ahat_link[{j},{k}]")
    return InvestorBlock(a, groups, ahat, x_other, y, ahat_all, cost_all, owner)


def initial_big_m(instance: ProblemInstance, profile: InvestorProfile) -> float:
    panel, costs = instance.panel, instance.costs
    c_min = float(costs.min_costs().min()) if costs.size else 0.0
    m0 = panel.T / profile.alpha * (float(panel.returns.max()) - c_min + 1.0)
    return m0 if m0 > 0 else 1.0


def _build(instance: ProblemInstance, profile: InvestorProfile, M: float, formulation: str) -> BlifpModel:
    if formulation not in FORMULATIONS:
        raise ValueError(f"unknown formulation {formulation!r}")
    if not M > 0:
        raise ValueError(f"big-M must be positive, got {M}")
    panel, costs = instance.panel, instance.costs
    r, probs, T = panel.returns, panel.probs, panel.T
    others = list(instance.others)
    B = list(costs.chargeable)
    alpha, mu0 = profile.alpha, profile.mu0

    b = LpBuilder("max")
    inv = add_investor_block(b, instance, profile)
    a, groups, y = inv.a, inv.groups, inv.y
    eta = b.add_var("eta", lb=-np.inf)
    d = b.add_vars("d", T)
    for t in range(T):
        b.add_row([d[t], eta, y[t]], [1.0, -1.0, 1.0], GE, 0.0, f"shortfall[{t}]")
    ahat_all, cost_all, owner = inv.ahat_all, inv.cost_all, inv.owner
    beta = b.add_var("beta")
    mu = b.add_var("mu", lb=-np.inf, ub=0.0)
    gamma = b.add_vars("gamma", T, lb=-probs / alpha, ub=0.0)
    delta = b.add_vars("delta", T, lb=-np.inf)

    # dual rows shared by both formulations
    for j in others:
        b.add_row(np.r_[beta, delta], np.r_[1.0, -r[j]], GE, 0.0, f"dual_security[{j}]")
    b.add_row(gamma, -np.ones(T), EQ, 1.0, "gamma_mass")
    for t in range(T):
        b.add_row([gamma[t], delta[t], mu], [1.0, 1.0, probs[t]], EQ, 0.0, f"dual_link[{t}]")

    sd_idx = [eta, *d, beta, mu]
    sd_val = [1.0, *(-probs / alpha), -1.0, -mu0]
    sigma = linked = None
    if formulation == "blifp1":
        linked = np.array([b.add_vars(f"dhat[{j},{k}]", T) for i, j in enumerate(B)
                           for k in range(len(a[i]))], dtype=int).reshape(-1, T)
        row = 0
        for i, j in enumerate(B):
            idx, val = [beta, *delta], [1.0, *(-r[j])]
            for k, c in enumerate(costs.grids[i]):
                idx += list(linked[row + k])
                val += [c] * T
            b.add_row(idx, val, GE, 0.0, f"dual_security[{j}]")
            row += len(a[i])
        for q, (av, dh) in enumerate(zip(np.concatenate(a) if B else [], linked)):
            for t in range(T):
                b.add_row([dh[t], delta[t]], [1.0, -1.0], LE, 0.0, f"dhat_le_delta[{q},{t}]")
                b.add_row([dh[t], av], [1.0, -M], LE, 0.0, f"dhat_le_Ma[{q},{t}]")
                b.add_row([dh[t], delta[t], av], [1.0, -1.0, -M], GE, -M, f"dhat_ge[{q},{t}]")
    else:
        sigma = b.add_vars("sigma", len(ahat_all))
        linked = b.add_vars("sigma_hat", len(ahat_all))
        delta_sum = np.ones(T)
        for q, (j, c) in enumerate(zip(owner, cost_all)):
            b.add_row(np.r_[beta, delta, sigma[q]], np.r_[1.0, -r[j] + c * delta_sum, 1.0], GE, 0.0,
                      f"dual_choice[{q}]")
        sd_idx += list(linked)
        sd_val += [-1.0] * len(linked)
        a_all = np.concatenate(a) if B else []
        for q, av in enumerate(a_all):
            b.add_row([linked[q], sigma[q]], [1.0, -1.0], LE, 0.0, f"shat_le_sigma[{q}]")
            b.add_row([linked[q], av], [1.0, -M], LE, 0.0, f"shat_le_Ma[{q}]")
            b.add_row([linked[q], sigma[q], av], [1.0, -1.0, -M], GE, -M, f"shat_ge[{q}]")
    b.add_row(sd_idx, sd_val, EQ, 0.0, "strong_duality")

    binaries = tuple(int(v) for g in groups for v in g)
    return BlifpModel(MilpProblem(b.build(), binaries, groups), formulation, M, inv,
                      eta, d, beta, mu, gamma, delta, sigma, linked)


def build_blifp1(instance: ProblemInstance, profile: InvestorProfile, M: float) -> BlifpModel:
    return _build(instance, profile, M, "blifp1")


def build_blifp2(instance: ProblemInstance, profile: InvestorProfile, M: float) -> BlifpModel:
    return _build(instance, profile, M, "blifp2")


def model_size(model: BlifpModel) -> ModelSize:
    lp = model.problem.lp
    cont = np.setdiff1d(np.arange(lp.num_vars), model.problem.binaries)
    finite = int(np.isfinite(lp.lb[cont]).sum() + np.isfinite(lp.ub[cont]).sum())
    nb = len(model.problem.binaries)
    return ModelSize(nb, len(cont), lp.num_rows, lp.num_rows + finite)


def required_sigma(model: BlifpModel, instance: ProblemInstance, z: np.ndarray) -> np.ndarray:
    """Smallest ``sigma_jk`` the dual rows allow at the point ``z``."""
    costs, r = instance.costs, instance.panel.returns
    if not costs.size:
        return np.zeros(0)
    owner = np.concatenate([[j] * len(g) for j, g in zip(costs.chargeable, costs.grids)]).astype(int)
    cost_all = np.concatenate(costs.grids)
    delta = z[model.delta]
    return np.maximum(0.0, -z[model.beta] + r[owner] @ delta - cost_all * delta.sum())


def _at_bound(model: BlifpModel, instance: ProblemInstance, z: np.ndarray) -> bool:
    if model.formulation == "blifp1":
        bounded = z[model.delta]
    else:
        bounded = required_sigma(model, instance, z)
    return bool(bounded.size and bounded.max() >= (1.0 - NEAR_BOUND) * model.M)


def solve_blifp(instance: ProblemInstance, profile: InvestorProfile, formulation: str = "blifp2",
                limits: SolveLimits | None = None, *, M0: float | None = None,
                max_escalations: int = 6) -> BilevelSolution:
    """Optimistic bilevel optimum of the broker-leader problem."""
    if formulation not in FORMULATIONS:
        raise ValueError(f"unknown formulation {formulation!r}")
    limits = limits or DEFAULT_LIMITS
    start = time.perf_counter()
    costs = instance.costs
    feasible = False
    if not costs.polyhedron:
        # the cheapest costs give the follower its largest feasible set
        solve_follower(instance.panel, profile, costs, costs.min_costs(), limits.lp)
        feasible = True

    M = M0 if M0 is not None else initial_big_m(instance, profile)
    nodes, escalations = 0, 0
    while True:
        model = _build(instance, profile, M, formulation)
        sol = solve_milp(model.problem, limits.remaining(start))
        nodes += sol.nodes
        retry = escalations < max_escalations
        if sol.status == INFEASIBLE:
            if retry:
                M, escalations = 2.0 * M, escalations + 1
                continue
            if feasible:
                raise CertificateFailure(f"MILP still infeasible at M={M:g} after {escalations} escalations")
            raise InfeasibleError("no cost selection admits a feasible follower portfolio")
        if not sol.has_incumbent:
            return BilevelSolution(formulation, sol.status, nodes=nodes,
                                   time_s=time.perf_counter() - start, M_final=M)
        if sol.status == OPTIMAL and retry and _at_bound(model, instance, sol.x):
            M, escalations = 2.0 * M, escalations + 1
            continue
        break

    z = fix_binaries_and_resolve(model.problem, sol.x, limits.lp)
    choice = model.choice(z)
    p = np.array([g[k] for g, k in zip(costs.grids, choice)])
    x = model.portfolio(z, instance)
    result = evaluate(instance, profile, formulation, sol.status, x, p, choice, nodes=nodes,
                      M_final=M)
    follower = solve_follower(instance.panel, profile, costs, p, limits.lp)
    gap = abs(result.cvar - follower.cvar)
    lp = model.problem.lp
    sd_row = lp.row_names.index("strong_duality")
    result.diagnostics.update(
        mip_objective=float(sol.objective), best_bound=float(sol.best_bound),
        escalations=escalations, at_bound=_at_bound(model, instance, z),
        certificate_gap=gap, strong_duality_residual=float(abs((lp.A[sd_row] @ z)[0])))
    if gap > CERTIFICATE_TOL:
        raise CertificateFailure(
            f"portfolio is not follower-optimal: CVaR {result.cvar:.10g} vs {follower.cvar:.10g} (M={M:g})")
    result.time_s = time.perf_counter() - start
    return result


def brute_force_blifp(instance: ProblemInstance, profile: InvestorProfile, *, cap: int = 2000,
                      tolerances: SolverTolerances | None = None) -> BilevelSolution:
    """Enumerate every admissible cost vector and keep the best for the broker.

    For each ``p``: solve the follower for its optimal CVaR ``v``; then, over
    the follower's feasible set restricted to CVaR >= ``v``, maximize the
    broker's profit.  Ties between cost vectors go to the first in
    lexicographic order of the grid indices.
    """
    start = time.perf_counter()
    panel, costs = instance.panel, instance.costs
    if costs.product_size() > cap:
        raise EnumerationCapError(f"{costs.product_size()} cost vectors exceed the cap of {cap}")
    L = CvarLayout(panel.n, panel.T)
    B = list(costs.chargeable)
    best = None
    count = 0
    for choice in itertools.product(*(range(len(g)) for g in costs.grids)):
        p = np.array([g[k] for g, k in zip(costs.grids, choice)])
        if not costs.in_polyhedron(p):
            continue
        try:
            v = solve_follower(panel, profile, costs, p, tolerances).cvar
        except InfeasibleError:
            continue
        count += 1
        lp = build_cvar_lp(panel, profile, costs, p)
        cvar_row = {L.eta: 1.0, **{int(i): float(w) for i, w in zip(range(L.d.start, L.d.stop),
                                                                    -panel.probs / profile.alpha)}}
        c = np.zeros(lp.num_vars)
        c[B] = p
        stage2 = lp.with_objective(c).with_rows([(cvar_row, GE, v - 1e-12 * max(1.0, abs(v)))])
        sol = solve_lp(stage2, tolerances)
        if not sol.optimal:
            raise RuntimeError(f"tie-break LP ended with status {sol.status}")
        if best is None or sol.objective > best[0] + 1e-9:
            best = (sol.objective, choice, p, sol.x[L.x])
    if best is None:
        raise InfeasibleError("no admissible cost vector admits a feasible follower portfolio")
    _, choice, p, x = best
    return evaluate(instance, profile, "oracle", OPTIMAL, x, p, choice, iterations=count,
                    time_s=time.perf_counter() - start)
