"""Result record shared by the bilevel solvers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .follower import cvar_by_inspection
from .market import InvestorProfile, ProblemInstance, net_scenario_returns

OPTIMAL = "Optimal"


@dataclass
class BilevelSolution:
    model: str
    status: str
    p: np.ndarray | None = None
    choice: tuple[int, ...] | None = None
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    profit: float = float("nan")
    cvar: float = float("nan")
    expected_return: float = float("nan")
    nodes: int = 0
    time_s: float = 0.0
    M_final: float | None = None
    iterations: int | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def has_solution(self) -> bool:
        return self.x is not None

    def to_record(self) -> dict:
        def arr(v):
            return None if v is None else [float(t) for t in v]

        def num(v):
            return None if v is None or not np.isfinite(v) else float(v)

        return {
            "model": self.model,
            "status": self.status,
            "p": arr(self.p),
            "x": arr(self.x),
            "profit": num(self.profit),
            "cvar": num(self.cvar),
            "expected_return": num(self.expected_return),
            "nodes": int(self.nodes),
            "time_s": float(self.time_s),
            "M_final": num(self.M_final),
            "iterations": self.iterations,
        }


def evaluate(instance: ProblemInstance, profile: InvestorProfile, model: str, status: str,
             x, p, choice=None, **extra) -> BilevelSolution:
    """Fill in the derived quantities for portfolio ``x`` under costs ``p``."""
    costs = instance.costs
    x = np.maximum(np.asarray(x, dtype=float), 0.0)
    p = np.asarray(p, dtype=float)
    y = net_scenario_returns(instance.panel, x, p, costs)
    profit = float(p @ x[list(costs.chargeable)]) if costs.size else 0.0
    cvar = cvar_by_inspection(y, instance.panel.probs, profile.alpha)
    return BilevelSolution(model, status, p, None if choice is None else tuple(choice), x, y,
                           profit, cvar, float(instance.panel.probs @ y), **extra)
