"""Branch-and-bound for LPs with binary variables.

Best-bound-first search with FIFO tie-breaking.  Branching works on one-hot
groups (``sos1``: members sum to one) when present: the group furthest from
one-hot in the relaxation is picked and its most fractional member is fixed
to 1 in one child and to 0 in the other.  Node LPs are warm-started from the
parent basis.
"""
from __future__ import annotations

import heapq
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .lp import LpProblem, SolverTolerances, solve_lp

OPTIMAL = "Optimal"
INFEASIBLE = "Infeasible"
NODE_LIMIT = "NodeLimit"
TIME_LIMIT = "TimeLimit"


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class MilpProblem:
    lp: LpProblem
    binaries: tuple[int, ...]
    sos1: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        n = self.lp.num_vars
        binset = set(self.binaries)
        for j in self.binaries:
            if not 0 <= j < n:
                raise ValueError(f"binary index {j} out of range")
            if self.lp.lb[j] < 0.0 or self.lp.ub[j] > 1.0:
                raise ValueError(f"binary {self.lp.var_name(j)} has bounds outside [0, 1]")
        for group in self.sos1:
            if not set(group) <= binset:
                raise ValueError("SOS1 group members must be binary variables")


@dataclass(frozen=True)
class SolveLimits:
    time_limit: float | None = None
    node_limit: int | None = None
    mip_gap: float = 1e-6
    int_tol: float = 1e-6
    backend: str = "bnb"  # or "highs"
    lp: SolverTolerances | None = None  # defaults to the LP backend matching ``backend``

    def __post_init__(self):
        if self.lp is None:
            lp_backend = "highs" if self.backend == "highs" else "simplex"
            object.__setattr__(self, "lp", SolverTolerances(backend=lp_backend))

    def remaining(self, start: float) -> "SolveLimits":
        """Copy whose time limit is what is left of this one since ``start``."""
        if self.time_limit is None:
            return self
        left = max(self.time_limit - (time.perf_counter() - start), 1e-3)
        return SolveLimits(left, self.node_limit, self.mip_gap, self.int_tol, self.backend, self.lp)


@dataclass
class MilpSolution:
    status: str
    x: np.ndarray | None
    objective: float
    best_bound: float
    nodes: int
    wall_time: float
    bound_trace: list[float] = field(default_factory=list, repr=False)

    @property
    def has_incumbent(self) -> bool:
        return self.x is not None


def _gap_closed(incumbent: float, bound: float, gap: float) -> bool:
    return bound - incumbent <= gap * max(1.0, abs(incumbent))


def solve_milp(problem: MilpProblem, limits: SolveLimits | None = None) -> MilpSolution:
    limits = limits or SolveLimits()
    if limits.backend == "highs":
        return _solve_highs(problem, limits)
    if limits.backend != "bnb":
        raise ValueError(f"unknown MILP backend {limits.backend!r}")
    return _BranchAndBound(problem, limits).run()


class _BranchAndBound:
    def __init__(self, problem: MilpProblem, limits: SolveLimits):
        self.problem = problem
        self.limits = limits
        self.sign = 1.0 if problem.lp.sense == "max" else -1.0
        self.binaries = np.array(problem.binaries, dtype=int)
        grouped = set(j for g in problem.sos1 for j in g)
        self.ungrouped = np.array([j for j in problem.binaries if j not in grouped], dtype=int)
        self.groups = [np.array(g, dtype=int) for g in problem.sos1]
        self.incumbent_x = None
        self.incumbent = -np.inf  # in maximization frame
        self.nodes = 0
        self.counter = 0
        self.trace: list[float] = []

    def _solve_node(self, lb, ub, warm):
        sol = solve_lp(self.problem.lp.with_bounds(lb, ub), self.limits.lp, warm_start=warm)
        self.nodes += 1
        return sol

    def _fractional(self, x) -> bool:
        if not len(self.binaries):
            return False
        v = x[self.binaries]
        return bool(np.any(np.minimum(v, 1.0 - v) > self.limits.int_tol))

    def _branch_var(self, x) -> int:
        tol = self.limits.int_tol
        best_group, best_amb = None, tol
        for g in self.groups:
            v = x[g]
            if np.any(np.minimum(v, 1.0 - v) > tol):
                amb = 1.0 - v.max()
                if amb > best_amb or best_group is None:
                    best_group, best_amb = g, amb
        if best_group is not None:
            v = x[best_group]
            frac = np.minimum(v, 1.0 - v)
            return int(best_group[np.argmax(frac)])
        v = x[self.ungrouped]
        frac = np.minimum(v, 1.0 - v)
        return int(self.ungrouped[np.argmax(frac)])

    def _group_of(self, j):
        for g in self.groups:
            if j in g:
                return g
        return None

    def _try_incumbent(self, x, obj):
        val = self.sign * obj
        if val > self.incumbent + 1e-12:
            x = x.copy()
            x[self.binaries] = np.round(x[self.binaries])
            self.incumbent, self.incumbent_x = val, x

    def _rounding_heuristic(self, x, warm):
        lb = self.problem.lp.lb.copy()
        ub = self.problem.lp.ub.copy()
        for g in self.groups:
            k = g[np.argmax(x[g])]
            lb[g], ub[g] = 0.0, 0.0
            lb[k] = ub[k] = 1.0
        r = np.round(x[self.ungrouped])
        lb[self.ungrouped] = ub[self.ungrouped] = r
        sol = self._solve_node(lb, ub, warm)
        if sol.optimal:
            self._try_incumbent(sol.x, sol.objective)

    def run(self) -> MilpSolution:
        start = time.perf_counter()
        lp = self.problem.lp
        root = self._solve_node(lp.lb.copy(), lp.ub.copy(), None)
        if root.status == "Unbounded":
            raise SolverError("LP relaxation is unbounded")
        if root.status == "IterationLimit":
            raise SolverError("LP relaxation hit the iteration limit")
        if not root.optimal:
            return MilpSolution(INFEASIBLE, None, float("nan"), float("nan"), self.nodes,
                                time.perf_counter() - start)
        heap = []
        self._push(heap, root, lp.lb.copy(), lp.ub.copy())
        if self._fractional(root.x):
            self._rounding_heuristic(root.x, root.warm_start)

        status = OPTIMAL
        while heap:
            bound = -heap[0][0]
            global_bound = max(bound, self.incumbent)
            self.trace.append(global_bound)
            if self.incumbent_x is not None and _gap_closed(self.incumbent, bound, self.limits.mip_gap):
                heap = []
                break
            if self.limits.time_limit is not None and time.perf_counter() - start > self.limits.time_limit:
                status = TIME_LIMIT
                break
            if self.limits.node_limit is not None and self.nodes >= self.limits.node_limit:
                status = NODE_LIMIT
                break
            _, _, sol, lb, ub = heapq.heappop(heap)
            j = self._branch_var(sol.x)
            group = self._group_of(j)
            # child 1: x_j = 1 (and the rest of its group to 0); child 2: x_j = 0
            lb1, ub1 = lb.copy(), ub.copy()
            if group is not None:
                ub1[group] = 0.0
            lb1[j] = ub1[j] = 1.0
            lb2, ub2 = lb.copy(), ub.copy()
            lb2[j] = ub2[j] = 0.0
            for clb, cub in ((lb1, ub1), (lb2, ub2)):
                if np.any(clb > cub):
                    continue
                child = self._solve_node(clb, cub, sol.warm_start)
                if child.status == "IterationLimit":
                    raise SolverError("node LP hit the iteration limit")
                if child.optimal:
                    self._push(heap, child, clb, cub)

        remaining = max((-h[0] for h in heap), default=-np.inf)
        best_bound = max(remaining, self.incumbent)
        elapsed = time.perf_counter() - start
        if self.incumbent_x is None:
            if status == OPTIMAL:
                return MilpSolution(INFEASIBLE, None, float("nan"), float("nan"), self.nodes, elapsed, self.trace)
            return MilpSolution(status, None, float("nan"), self.sign * best_bound, self.nodes, elapsed, self.trace)
        return MilpSolution(status, self.incumbent_x, self.sign * self.incumbent,
                            self.sign * best_bound, self.nodes, elapsed, self.trace)

    def _push(self, heap, sol, lb, ub):
        if not self._fractional(sol.x):
            self._try_incumbent(sol.x, sol.objective)
            return
        val = self.sign * sol.objective
        if self.incumbent_x is not None and val <= self.incumbent + self.limits.mip_gap * max(1.0, abs(self.incumbent)):
            return
        self.counter += 1
        heapq.heappush(heap, (-val, self.counter, sol, lb, ub))


def _solve_highs(problem: MilpProblem, limits: SolveLimits) -> MilpSolution:
    from scipy.optimize import Bounds, LinearConstraint, milp

    lp = problem.lp
    start = time.perf_counter()
    rel = np.array(lp.relations)
    lo = np.where(rel == "<=", -np.inf, lp.rhs)
    hi = np.where(rel == ">=", np.inf, lp.rhs)
    integrality = np.zeros(lp.num_vars)
    integrality[list(problem.binaries)] = 1
    sign = -1.0 if lp.sense == "max" else 1.0
    # HiGHS also stops on an absolute gap of 1e-6; scale the objective so that
    # this absolute gap corresponds to ``mip_gap`` in the original units
    scale = min(max(1e-6 / limits.mip_gap, 1.0), 1e6) if limits.mip_gap > 0 else 1e6
    options = {"mip_rel_gap": limits.mip_gap, "disp": False}
    if limits.time_limit is not None:
        options["time_limit"] = float(limits.time_limit)
    if limits.node_limit is not None:
        options["node_limit"] = int(limits.node_limit)
    constraints = [LinearConstraint(lp.A, lo, hi)] if lp.num_rows else []
    res = milp(scale * sign * lp.c, integrality=integrality, bounds=Bounds(lp.lb, lp.ub),
               constraints=constraints, options=options)
    elapsed = time.perf_counter() - start
    nodes = int(getattr(res, "mip_node_count", 0) or 0)
    bound = getattr(res, "mip_dual_bound", None)
    bound = float("nan") if bound is None else sign * float(bound) / scale
    x = None if res.x is None else np.asarray(res.x, float)
    if x is not None and len(problem.binaries):
        x[list(problem.binaries)] = np.round(x[list(problem.binaries)])
    obj = float("nan") if x is None else lp.objective(x)
    if res.status == 0:
        return MilpSolution(OPTIMAL, x, obj, bound if np.isfinite(bound) else obj, nodes, elapsed)
    if res.status == 2:
        return MilpSolution(INFEASIBLE, None, float("nan"), float("nan"), nodes, elapsed)
    if res.status == 1:
        hit_time = limits.time_limit is not None and elapsed >= 0.9 * limits.time_limit
        return MilpSolution(TIME_LIMIT if hit_time or limits.node_limit is None else NODE_LIMIT,
                            x, obj, bound, nodes, elapsed)
    if res.status == 3:
        raise SolverError("MILP is unbounded")
    raise SolverError(f"HiGHS failed: {res.message}")


def enumerate_binaries(problem: MilpProblem, tolerances: SolverTolerances | None = None):
    """Exhaustive oracle: fix every 0/1 assignment (respecting one-hot groups)
    and solve the remaining LP.  Returns ``(objective, x)`` or ``None``."""
    lp = problem.lp
    bins = list(problem.binaries)
    if len(bins) > 20:
        raise ValueError("too many binaries to enumerate")
    best = None
    sign = 1.0 if lp.sense == "max" else -1.0
    for mask in range(1 << len(bins)):
        lb, ub = lp.lb.copy(), lp.ub.copy()
        for i, j in enumerate(bins):
            v = float((mask >> i) & 1)
            if v < lp.lb[j] or v > lp.ub[j]:
                break
            lb[j] = ub[j] = v
        else:
            sol = solve_lp(lp.with_bounds(lb, ub), tolerances)
            if sol.optimal and (best is None or sign * sol.objective > sign * best[0] + 1e-12):
                best = (sol.objective, sol.x)
    return best


def fix_binaries_and_resolve(problem: MilpProblem, x: np.ndarray,
                             tolerances: SolverTolerances | None = None) -> np.ndarray:
    """Clean up an incumbent: round the binaries, fix them and re-solve the LP.

    Binaries accepted within ``int_tol`` can let big-M rows leak; the re-solve
    returns continuous values consistent with exact 0/1 values.
    """
    bins = list(problem.binaries)
    if not bins:
        return x
    lp = problem.lp
    lb, ub = lp.lb.copy(), lp.ub.copy()
    lb[bins] = ub[bins] = np.round(x[bins])
    sol = solve_lp(lp.with_bounds(lb, ub), tolerances)
    return sol.x if sol.optimal else x


def group_choice(x: np.ndarray, groups: Sequence[Sequence[int]]) -> list[int]:
    """Position of the selected member within each one-hot group."""
    return [int(np.argmax(x[list(g)])) for g in groups]
