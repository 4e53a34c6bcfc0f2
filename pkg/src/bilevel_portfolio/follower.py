"""The investor's CVaR problem for fixed transaction costs, and its dual.

Variable layout of :func:`build_cvar_lp` (``n`` securities, ``T`` scenarios)::

    x[0..n)  y[n..n+T)  eta[n+T]  d[n+T+1..n+2T+1)

Rows: ``T`` scenario-return equalities, the expected-return row, ``T``
shortfall rows ``d_t - eta + y_t >= 0`` and the budget row.  With the solver's
shadow-price convention the row duals are exactly the dual variables of the
paired minimization: ``delta`` (scenario rows), ``mu <= 0`` (expected return),
``gamma <= 0`` (shortfall rows) and ``beta >= 0`` (budget).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleError
from .lp import EQ, GE, LE, LpBuilder, LpProblem, SolverTolerances, solve_lp
from .market import CostStructure, InvestorProfile, ScenarioPanel, net_scenario_returns


@dataclass(frozen=True)
class CvarLayout:
    n: int
    T: int

    @property
    def x(self) -> slice:
        return slice(0, self.n)

    @property
    def y(self) -> slice:
        return slice(self.n, self.n + self.T)

    @property
    def eta(self) -> int:
        return self.n + self.T

    @property
    def d(self) -> slice:
        return slice(self.n + self.T + 1, self.n + 2 * self.T + 1)

    # row blocks
    @property
    def scenario_rows(self) -> slice:
        return slice(0, self.T)

    @property
    def return_row(self) -> int:
        return self.T

    @property
    def shortfall_rows(self) -> slice:
        return slice(self.T + 1, 2 * self.T + 1)

    @property
    def budget_row(self) -> int:
        return 2 * self.T + 1


@dataclass(frozen=True)
class DualSolution:
    beta: float
    mu: float
    gamma: np.ndarray
    delta: np.ndarray
    value: float

    def residuals(self, panel: ScenarioPanel, profile: InvestorProfile,
                  costs: CostStructure, p) -> float:
        """Largest violation of the dual constraints."""
        full = costs.full_costs(np.asarray(p, float), panel.n)
        net = panel.returns - full[:, None]
        viol = [
            max(0.0, -self.beta), max(0.0, self.mu),
            abs(-self.gamma.sum() - 1.0),
            float(np.max(np.maximum(self.gamma, 0.0), initial=0.0)),
            float(np.max(np.maximum(-panel.probs / profile.alpha - self.gamma, 0.0), initial=0.0)),
            float(np.max(np.abs(self.gamma + self.delta + panel.probs * self.mu), initial=0.0)),
            float(np.max(np.maximum(net @ self.delta - self.beta, 0.0), initial=0.0)),
        ]
        return max(viol)


@dataclass(frozen=True)
class FollowerSolution:
    x: np.ndarray
    eta: float
    d: np.ndarray
    y: np.ndarray
    cvar: float
    expected_return: float
    duals: DualSolution | None = None


def _check(profile: InvestorProfile):
    if not 0.0 < profile.alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {profile.alpha}")


def build_cvar_lp(panel: ScenarioPanel, profile: InvestorProfile, costs: CostStructure,
                  p) -> LpProblem:
    _check(profile)
    n, T = panel.n, panel.T
    full = costs.full_costs(np.asarray(p, float), n)
    b = LpBuilder("max")
    x = b.add_vars("x", n)
    y = b.add_vars("y", T, lb=-np.inf)
    eta = b.add_var("eta", lb=-np.inf, obj=1.0)
    d = b.add_vars("d", T, obj=-panel.probs / profile.alpha)
    net = panel.returns - full[:, None]
    for t in range(T):
        b.add_row(np.r_[y[t], x], np.r_[1.0, -net[:, t]], EQ, 0.0, f"scenario[{t}]")
    b.add_row(y, panel.probs, GE, profile.mu0, "expected_return")
    for t in range(T):
        b.add_row([d[t], eta, y[t]], [1.0, -1.0, 1.0], GE, 0.0, f"shortfall[{t}]")
    b.add_row(x, np.ones(n), LE, 1.0, "budget")
    return b.build()


def solve_follower(panel: ScenarioPanel, profile: InvestorProfile, costs: CostStructure, p,
                   tolerances: SolverTolerances | None = None) -> FollowerSolution:
    lp = build_cvar_lp(panel, profile, costs, p)
    sol = solve_lp(lp, tolerances)
    if sol.status == "Infeasible":
        raise InfeasibleError(f"no portfolio reaches expected return {profile.mu0}")
    if not sol.optimal:
        raise RuntimeError(f"follower LP ended with status {sol.status}")
    L = CvarLayout(panel.n, panel.T)
    x = np.maximum(sol.x[L.x], 0.0)
    y = net_scenario_returns(panel, x, p, costs)
    duals = DualSolution(
        beta=float(sol.duals[L.budget_row]),
        mu=float(sol.duals[L.return_row]),
        gamma=sol.duals[L.shortfall_rows].copy(),
        delta=sol.duals[L.scenario_rows].copy(),
        value=sol.objective,
    )
    return FollowerSolution(x, float(sol.x[L.eta]), sol.x[L.d].copy(), y, sol.objective,
                            float(panel.probs @ y), duals)


def cvar_by_inspection(y, probs, alpha: float, *, return_weights: bool = False):
    """CVaR of the outcome vector ``y``: the mean of its worst ``alpha`` mass.

    Scenarios are taken in ascending order of ``y`` (ties by index) and each
    receives weight ``min(probs[t] / alpha, remaining)`` until the weights sum
    to one.  The weights are ``-gamma`` for the optimal knapsack solution.
    """
    y = np.asarray(y, dtype=float)
    probs = np.asarray(probs, dtype=float)
    if y.shape != probs.shape or y.ndim != 1:
        raise ValueError("y and probs must be 1-D arrays of equal length")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    order = np.argsort(y, kind="stable")
    caps = probs[order] / alpha
    before = np.concatenate([[0.0], np.cumsum(caps)[:-1]])
    w_sorted = np.clip(1.0 - before, 0.0, caps)
    weights = np.empty_like(w_sorted)
    weights[order] = w_sorted
    value = float(weights @ y)
    return (value, weights) if return_weights else value


def build_primalp_lp(y, probs, alpha: float) -> LpProblem:
    """CVaR of a fixed outcome vector as the knapsack LP over ``gamma``."""
    y = np.asarray(y, float)
    probs = np.asarray(probs, float)
    b = LpBuilder("min")
    gamma = b.add_vars("gamma", len(y), lb=-probs / alpha, ub=0.0, obj=-y)
    b.add_row(gamma, -np.ones(len(y)), EQ, 1.0, "mass")
    return b.build()


def build_dual1(panel: ScenarioPanel, profile: InvestorProfile, costs: CostStructure,
                p) -> LpProblem:
    """Dual of :func:`build_cvar_lp`.  Layout: ``beta, mu, gamma[T], delta[T]``."""
    _check(profile)
    n, T = panel.n, panel.T
    full = costs.full_costs(np.asarray(p, float), n)
    b = LpBuilder("min")
    beta = b.add_var("beta", lb=0.0, obj=1.0)
    mu = b.add_var("mu", lb=-np.inf, ub=0.0, obj=profile.mu0)
    gamma = b.add_vars("gamma", T, lb=-panel.probs / profile.alpha, ub=0.0)
    delta = b.add_vars("delta", T, lb=-np.inf)
    net = panel.returns - full[:, None]
    for j in range(n):
        b.add_row(np.r_[beta, delta], np.r_[1.0, -net[j]], GE, 0.0, f"security[{j}]")
    b.add_row(gamma, -np.ones(T), EQ, 1.0, "gamma_mass")
    for t in range(T):
        b.add_row([gamma[t], delta[t], mu], [1.0, 1.0, panel.probs[t]], EQ, 0.0, f"link[{t}]")
    return b.build()


def solve_dual1(panel: ScenarioPanel, profile: InvestorProfile, costs: CostStructure, p,
                tolerances: SolverTolerances | None = None) -> DualSolution:
    lp = build_dual1(panel, profile, costs, p)
    sol = solve_lp(lp, tolerances)
    if sol.status == "Unbounded":
        raise InfeasibleError("dual unbounded: the follower problem is infeasible")
    if not sol.optimal:
        raise RuntimeError(f"dual LP ended with status {sol.status}")
    T = panel.T
    return DualSolution(float(sol.x[0]), float(sol.x[1]), sol.x[2:2 + T].copy(),
                        sol.x[2 + T:2 + 2 * T].copy(), sol.objective)


def verify_strong_duality(panel: ScenarioPanel, profile: InvestorProfile, costs: CostStructure,
                          p, tolerances: SolverTolerances | None = None) -> float:
    """``|primal CVaR optimum - dual optimum|``, each side solved on its own."""
    primal = solve_follower(panel, profile, costs, p, tolerances)
    dual = solve_dual1(panel, profile, costs, p, tolerances)
    return abs(primal.cvar - dual.value)


def gross_cvar(panel: ScenarioPanel, x, alpha: float) -> float:
    """CVaR of the portfolio before any transaction costs."""
    return cvar_by_inspection(panel.returns.T @ np.asarray(x, float), panel.probs, alpha)
