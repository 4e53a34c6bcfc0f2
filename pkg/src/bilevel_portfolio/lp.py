"""Linear programming kernel.

Problems are stored as a sparse constraint matrix with per-row relations and
per-variable bounds.  ``solve_lp`` returns primal values, row duals and reduced
costs.  Dual values follow the shadow-price convention: ``duals[i]`` is the
rate of change of the optimal objective with respect to ``rhs[i]``.  For a
maximization this makes duals of ``<=`` rows nonnegative and duals of ``>=``
rows nonpositive.

Two backends are available: the in-house revised simplex (``"simplex"``,
default) and HiGHS through scipy (``"highs"``).
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from . import _simplex

LE, EQ, GE = "<=", "==", ">="
RELATIONS = (LE, EQ, GE)
INF = float("inf")

DUMP_ENV = "BILEVEL_PORTFOLIO_LP_DUMP"


class MalformedProblemError(ValueError):
    pass


@dataclass(frozen=True)
class SolverTolerances:
    feas_tol: float = 1e-8
    duality_tol: float = 1e-7
    max_iterations: int | None = None  # default 50 * (rows + cols)
    degeneracy_streak: int = 20
    backend: str = "simplex"


@dataclass(frozen=True)
class LpProblem:
    sense: str
    c: np.ndarray
    A: sp.csr_matrix
    relations: tuple[str, ...]
    rhs: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    var_names: tuple[str, ...] = ()
    row_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.sense not in ("max", "min"):
            raise MalformedProblemError(f"sense must be 'max' or 'min', got {self.sense!r}")
        n = len(self.c)
        m = len(self.rhs)
        if self.A.shape != (m, n):
            raise MalformedProblemError(f"constraint matrix has shape {self.A.shape}, expected {(m, n)}")
        if len(self.relations) != m:
            raise MalformedProblemError("one relation per row required")
        bad = [r for r in self.relations if r not in RELATIONS]
        if bad:
            raise MalformedProblemError(f"unknown relation {bad[0]!r}")
        if len(self.lb) != n or len(self.ub) != n:
            raise MalformedProblemError("bounds must have one entry per variable")
        if not (np.all(np.isfinite(self.c)) and np.all(np.isfinite(self.rhs))
                and np.all(np.isfinite(self.A.data))):
            raise MalformedProblemError("objective, coefficients and right-hand sides must be finite")
        if np.any(np.isnan(self.lb)) or np.any(np.isnan(self.ub)):
            raise MalformedProblemError("NaN bound")
        if np.any(self.lb == INF) or np.any(self.ub == -INF):
            raise MalformedProblemError("lower bound +inf or upper bound -inf")
        if np.any(self.lb > self.ub):
            j = int(np.flatnonzero(self.lb > self.ub)[0])
            raise MalformedProblemError(f"variable {self.var_name(j)} has lb > ub")

    @property
    def num_vars(self) -> int:
        return len(self.c)

    @property
    def num_rows(self) -> int:
        return len(self.rhs)

    def var_name(self, j: int) -> str:
        return self.var_names[j] if self.var_names else f"x{j}"

    def row_name(self, i: int) -> str:
        return self.row_names[i] if self.row_names else f"r{i}"

    def objective(self, x: np.ndarray) -> float:
        return float(self.c @ x)

    def with_bounds(self, lb: np.ndarray, ub: np.ndarray) -> "LpProblem":
        return LpProblem(self.sense, self.c, self.A, self.relations, self.rhs,
                         np.asarray(lb, float), np.asarray(ub, float),
                         self.var_names, self.row_names)

    def with_objective(self, c: np.ndarray, sense: str | None = None) -> "LpProblem":
        return LpProblem(sense or self.sense, np.asarray(c, float), self.A, self.relations,
                         self.rhs, self.lb, self.ub, self.var_names, self.row_names)

    def with_rows(self, rows: Iterable[tuple[Mapping[int, float], str, float]],
                  names: Sequence[str] | None = None) -> "LpProblem":
        rows = list(rows)
        if not rows:
            return self
        extra = sp.lil_matrix((len(rows), self.num_vars))
        rels, rhs = [], []
        for i, (coeffs, rel, b) in enumerate(rows):
            for j, v in coeffs.items():
                extra[i, j] = v
            rels.append(rel)
            rhs.append(b)
        A = sp.vstack([self.A, extra.tocsr()]).tocsr()
        row_names = self.row_names
        if row_names:
            row_names = row_names + tuple(names or (f"extra{i}" for i in range(len(rows))))
        return LpProblem(self.sense, self.c, A, self.relations + tuple(rels),
                         np.concatenate([self.rhs, rhs]), self.lb, self.ub,
                         self.var_names, row_names)

    @classmethod
    def from_rows(cls, sense: str, c: Sequence[float],
                  rows: Sequence[tuple[Sequence[float], str, float]],
                  lb: Sequence[float] | None = None, ub: Sequence[float] | None = None,
                  var_names: Sequence[str] = (), row_names: Sequence[str] = ()) -> "LpProblem":
        """Dense row-list constructor; bounds default to ``x >= 0``."""
        n = len(c)
        for i, (coeffs, _, _) in enumerate(rows):
            if len(coeffs) != n:
                raise MalformedProblemError(f"row {i} has {len(coeffs)} coefficients, expected {n}")
        A = sp.csr_matrix(np.array([r[0] for r in rows], dtype=float).reshape(len(rows), n))
        return cls(sense, np.asarray(c, float), A, tuple(r[1] for r in rows),
                   np.array([r[2] for r in rows], dtype=float),
                   np.zeros(n) if lb is None else np.asarray(lb, float),
                   np.full(n, INF) if ub is None else np.asarray(ub, float),
                   tuple(var_names), tuple(row_names))


class LpBuilder:
    """Incremental construction of an :class:`LpProblem` by named variables."""

    def __init__(self, sense: str = "max"):
        self.sense = sense
        self._c: list[float] = []
        self._lb: list[float] = []
        self._ub: list[float] = []
        self._names: list[str] = []
        self._rows_i: list[int] = []
        self._rows_j: list[int] = []
        self._rows_v: list[float] = []
        self._rel: list[str] = []
        self._rhs: list[float] = []
        self._row_names: list[str] = []

    @property
    def num_vars(self) -> int:
        return len(self._c)

    @property
    def num_rows(self) -> int:
        return len(self._rhs)

    def add_var(self, name: str, lb: float = 0.0, ub: float = INF, obj: float = 0.0) -> int:
        self._c.append(float(obj))
        self._lb.append(float(lb))
        self._ub.append(float(ub))
        self._names.append(name)
        return len(self._c) - 1

    def add_vars(self, prefix: str, count: int, lb=0.0, ub=INF, obj=0.0) -> np.ndarray:
        lbs = np.broadcast_to(np.asarray(lb, float), (count,))
        ubs = np.broadcast_to(np.asarray(ub, float), (count,))
        objs = np.broadcast_to(np.asarray(obj, float), (count,))
        return np.array([self.add_var(f"{prefix}[{i}]", lbs[i], ubs[i], objs[i])
                         for i in range(count)], dtype=int)

    def set_obj(self, j: int, value: float) -> None:
        self._c[j] = float(value)

    def add_row(self, idx: Sequence[int], vals: Sequence[float], relation: str, rhs: float,
                name: str = "") -> int:
        i = len(self._rhs)
        for j, v in zip(idx, vals):
            if v != 0.0:
                self._rows_i.append(i)
                self._rows_j.append(int(j))
                self._rows_v.append(float(v))
        self._rel.append(relation)
        self._rhs.append(float(rhs))
        self._row_names.append(name or f"r{i}")
        return i

    def build(self) -> LpProblem:
        m, n = len(self._rhs), len(self._c)
        A = sp.csr_matrix((self._rows_v, (self._rows_i, self._rows_j)), shape=(m, n))
        A.sum_duplicates()
        return LpProblem(self.sense, np.array(self._c), A, tuple(self._rel),
                         np.array(self._rhs, dtype=float), np.array(self._lb), np.array(self._ub),
                         tuple(self._names), tuple(self._row_names))


@dataclass
class LpSolution:
    status: str
    x: np.ndarray
    duals: np.ndarray
    objective: float
    iterations: int
    reduced_costs: np.ndarray | None = None
    warm_start: tuple | None = field(default=None, repr=False)

    @property
    def optimal(self) -> bool:
        return self.status == _simplex.OPTIMAL


@dataclass(frozen=True)
class ResidualReport:
    primal: float
    dual: float
    complementarity: float
    duality_gap: float

    def within(self, feas_tol: float = 1e-8, duality_tol: float = 1e-7) -> bool:
        return (self.primal <= feas_tol and self.dual <= feas_tol
                and self.complementarity <= feas_tol and self.duality_gap <= duality_tol)


def _logical_bounds(relations):
    lo = np.array([0.0 if r == LE else -INF if r == GE else 0.0 for r in relations])
    hi = np.array([INF if r == LE else 0.0 if r == GE else 0.0 for r in relations])
    return lo, hi


def _solve_simplex(problem: LpProblem, tol: SolverTolerances, warm_start) -> LpSolution:
    m, n = problem.num_rows, problem.num_vars
    A = np.hstack([problem.A.toarray(), np.eye(m)])
    slo, shi = _logical_bounds(problem.relations)
    lb = np.concatenate([problem.lb, slo])
    ub = np.concatenate([problem.ub, shi])
    sign = -1.0 if problem.sense == "max" else 1.0
    c = np.concatenate([sign * problem.c, np.zeros(m)])
    max_iter = tol.max_iterations or 50 * (m + n)

    basis, at_upper = np.arange(n, n + m), None
    if warm_start is not None and len(warm_start[0]) == m and len(warm_start[1]) == n + m:
        basis, at_upper = warm_start

    res = _simplex.revised_simplex(
        A, problem.rhs, c, lb, ub, basis=basis, at_upper=at_upper,
        feas_tol=min(tol.feas_tol, 1e-9), opt_tol=1e-9, max_iter=max_iter,
        degeneracy_streak=tol.degeneracy_streak)
    x = res.z[:n].copy()
    duals = sign * res.pi
    reduced = problem.c - problem.A.T @ duals
    obj = problem.objective(x) if res.status == _simplex.OPTIMAL else float("nan")
    return LpSolution(res.status, x, duals, obj, res.iterations, reduced,
                      (res.basis.copy(), res.at_upper.copy()))


def _solve_highs(problem: LpProblem, tol: SolverTolerances) -> LpSolution:
    from scipy.optimize import linprog

    rel = np.array(problem.relations)
    le, eq, ge = rel == LE, rel == EQ, rel == GE
    ub_rows = le | ge
    flip = np.where(ge[ub_rows], -1.0, 1.0)
    A_ub = sp.diags(flip) @ problem.A[ub_rows] if ub_rows.any() else None
    b_ub = flip * problem.rhs[ub_rows] if ub_rows.any() else None
    A_eq = problem.A[eq] if eq.any() else None
    b_eq = problem.rhs[eq] if eq.any() else None
    sign = -1.0 if problem.sense == "max" else 1.0
    bounds = np.column_stack([
        np.where(np.isfinite(problem.lb), problem.lb, -np.inf),
        np.where(np.isfinite(problem.ub), problem.ub, np.inf)])
    options = {"primal_feasibility_tolerance": min(tol.feas_tol, 1e-9),
               "dual_feasibility_tolerance": min(tol.feas_tol, 1e-9)}
    if tol.max_iterations:
        options["maxiter"] = tol.max_iterations
    res = linprog(sign * problem.c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                  bounds=bounds, method="highs-ds", options=options)
    if res.status == 2:
        # presolve occasionally reports unbounded models as infeasible
        res = linprog(sign * problem.c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                      bounds=bounds, method="highs-ds", options={**options, "presolve": False})
    if res.status == 4:
        # HiGHS gave up on numerical grounds ("model status unknown"); the
        # native simplex decides instead
        return _solve_simplex(problem, replace(tol, backend="simplex"), None)
    status = {0: _simplex.OPTIMAL, 1: _simplex.ITERATION_LIMIT, 2: _simplex.INFEASIBLE,
              3: _simplex.UNBOUNDED}[res.status]
    n, m = problem.num_vars, problem.num_rows
    if status != _simplex.OPTIMAL:
        return LpSolution(status, np.full(n, np.nan), np.full(m, np.nan), float("nan"),
                          int(getattr(res, "nit", 0) or 0))
    duals = np.zeros(m)
    if ub_rows.any():
        duals[ub_rows] = sign * flip * res.ineqlin.marginals
    if eq.any():
        duals[eq] = sign * res.eqlin.marginals
    x = np.asarray(res.x, float)
    return LpSolution(status, x, duals, problem.objective(x), int(res.nit),
                      problem.c - problem.A.T @ duals)


def solve_lp(problem: LpProblem, tolerances: SolverTolerances | None = None, *,
             warm_start=None) -> LpSolution:
    """Solve ``problem``; ``warm_start`` is the ``warm_start`` of an earlier
    simplex solution of a problem with identical rows (bounds may differ)."""
    tol = tolerances or SolverTolerances()
    dump = os.environ.get(DUMP_ENV)
    if dump:
        _dump(problem, Path(dump))
    if problem.num_rows == 0:
        return _solve_no_rows(problem)
    if tol.backend == "highs":
        return _solve_highs(problem, tol)
    if tol.backend != "simplex":
        raise ValueError(f"unknown LP backend {tol.backend!r}")
    return _solve_simplex(problem, tol, warm_start)


def _solve_no_rows(problem: LpProblem) -> LpSolution:
    sign = 1.0 if problem.sense == "max" else -1.0
    x = np.empty(problem.num_vars)
    for j, cj in enumerate(sign * problem.c):
        lo, hi = problem.lb[j], problem.ub[j]
        if cj > 0:
            x[j] = hi
        elif cj < 0:
            x[j] = lo
        else:
            x[j] = lo if np.isfinite(lo) else hi if np.isfinite(hi) else 0.0
    if not np.all(np.isfinite(x)):
        return LpSolution(_simplex.UNBOUNDED, x, np.zeros(0), float("nan"), 0)
    return LpSolution(_simplex.OPTIMAL, x, np.zeros(0), problem.objective(x), 0, problem.c.copy())


def row_activity(problem: LpProblem, x: np.ndarray) -> np.ndarray:
    return problem.A @ x


def evaluate_residuals(problem: LpProblem, solution: LpSolution) -> ResidualReport:
    x = np.asarray(solution.x, float)
    y = np.asarray(solution.duals, float)
    if x.shape != (problem.num_vars,) or y.shape != (problem.num_rows,):
        raise ValueError(
            f"solution dimensions ({x.shape[0]} vars, {y.shape[0]} duals) do not match "
            f"problem ({problem.num_vars} vars, {problem.num_rows} rows)")
    rel = np.array(problem.relations)
    act = problem.A @ x
    slack = act - problem.rhs
    viol = np.where(rel == LE, np.maximum(slack, 0.0),
                    np.where(rel == GE, np.maximum(-slack, 0.0), np.abs(slack)))
    bound_viol = np.maximum(np.maximum(problem.lb - x, x - problem.ub), 0.0)
    primal = float(max(viol.max(initial=0.0), bound_viol.max(initial=0.0)))

    # work in the maximization frame: duals of <= rows >= 0, of >= rows <= 0
    s = 1.0 if problem.sense == "max" else -1.0
    ys = s * y
    cs = s * problem.c
    dual_sign_viol = np.where(rel == LE, np.maximum(-ys, 0.0),
                              np.where(rel == GE, np.maximum(ys, 0.0), 0.0))
    r = cs - problem.A.T @ ys
    r_pos, r_neg = np.maximum(r, 0.0), np.maximum(-r, 0.0)
    ub_fin, lb_fin = np.isfinite(problem.ub), np.isfinite(problem.lb)
    red_viol = np.where(ub_fin, 0.0, r_pos) + np.where(lb_fin, 0.0, r_neg)
    dual = float(max(dual_sign_viol.max(initial=0.0), red_viol.max(initial=0.0)))

    dual_obj = float(ys @ problem.rhs
                     + np.sum(np.where(ub_fin, r_pos * np.where(ub_fin, problem.ub, 0.0), 0.0))
                     - np.sum(np.where(lb_fin, r_neg * np.where(lb_fin, problem.lb, 0.0), 0.0)))
    primal_obj = float(cs @ x)
    gap = abs(primal_obj - dual_obj)

    row_cs = np.abs(ys) * np.abs(slack)
    var_cs = (r_pos * np.where(ub_fin, np.abs(np.where(ub_fin, problem.ub, 0.0) - x), 0.0)
              + r_neg * np.where(lb_fin, np.abs(x - np.where(lb_fin, problem.lb, 0.0)), 0.0))
    comp = float(max(row_cs.max(initial=0.0), var_cs.max(initial=0.0)))
    return ResidualReport(primal, dual, comp, gap)


def _fmt(v: float) -> str:
    return repr(float(v)) if np.isfinite(v) else ("inf" if v > 0 else "-inf")


def write_lp_file(problem: LpProblem, path: str | os.PathLike) -> None:
    """Write ``problem`` in the fixed-format LP text grammar.

    Grammar (one item per line, tokens separated by single spaces)::

        MAXIMIZE | MINIMIZE
        OBJ <coef> <var> [<coef> <var> ...]
        ROWS <m>
        <row-name> <relation> <rhs> : <coef> <var> [<coef> <var> ...]
        BOUNDS <n>
        <var> <lower> <upper>
        END

    Relations are ``<=``, ``==`` or ``>=``; infinite bounds are written
    ``-inf``/``inf``; coefficients use Python float ``repr`` so the file
    round-trips exactly.
    """
    names = [problem.var_name(j) for j in range(problem.num_vars)]
    lines = ["MAXIMIZE" if problem.sense == "max" else "MINIMIZE"]
    obj = " ".join(f"{_fmt(v)} {names[j]}" for j, v in enumerate(problem.c) if v != 0.0)
    lines.append(f"OBJ {obj}".rstrip())
    lines.append(f"ROWS {problem.num_rows}")
    A = problem.A.tocsr()
    for i in range(problem.num_rows):
        lo, hi = A.indptr[i], A.indptr[i + 1]
        terms = " ".join(f"{_fmt(v)} {names[j]}" for j, v in zip(A.indices[lo:hi], A.data[lo:hi]))
        lines.append(f"{problem.row_name(i)} {problem.relations[i]} {_fmt(problem.rhs[i])} : {terms}".rstrip())
    lines.append(f"BOUNDS {problem.num_vars}")
    for j in range(problem.num_vars):
        lines.append(f"{names[j]} {_fmt(problem.lb[j])} {_fmt(problem.ub[j])}")
    lines.append("END")
    Path(path).write_text("\n".join(lines) + "\n")


def read_lp_file(path: str | os.PathLike) -> LpProblem:
    tokens = Path(path).read_text().splitlines()
    it = iter(tokens)
    sense = "max" if next(it).strip() == "MAXIMIZE" else "min"
    obj_terms = next(it).split()[1:]
    nrows = int(next(it).split()[1])
    rows = []
    for _ in range(nrows):
        head, _, body = next(it).partition(" : ")
        name, rel, rhs = head.split()
        parts = body.split()
        rows.append((name, rel, float(rhs), list(zip(parts[1::2], map(float, parts[0::2])))))
    nvars = int(next(it).split()[1])
    builder = LpBuilder(sense)
    index = {}
    for _ in range(nvars):
        name, lo, hi = next(it).split()
        index[name] = builder.add_var(name, float(lo), float(hi))
    for name, coef in zip(obj_terms[1::2], map(float, obj_terms[0::2])):
        builder.set_obj(index[name], coef)
    for name, rel, rhs, terms in rows:
        builder.add_row([index[v] for v, _ in terms], [c for _, c in terms], rel, rhs, name)
    return builder.build()


_dump_counter = 0


def _dump(problem: LpProblem, directory: Path) -> None:
    global _dump_counter
    directory.mkdir(parents=True, exist_ok=True)
    _dump_counter += 1
    write_lp_file(problem, directory / f"lp_{os.getpid()}_{_dump_counter:06d}.lp")
