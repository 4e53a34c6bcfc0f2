"""Solve matrix over instance classes and risk profiles, with CSV aggregation.

Every cell (class, replicate, alpha, mu0, method) is an isolated solve that
yields one JSON record.  Cells run in a process pool; all files are written by
the parent once every cell has finished.
"""
from __future__ import annotations

import collections
import csv
import itertools
import json
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .blifp import solve_blifp
from .errors import InfeasibleError
from .follower import gross_cvar
from .ilbfp import solve_ilbfp_cutting_plane, solve_ilbfp_lp
from .market import (INSTANCE_CLASSES, InvestorProfile, ProblemInstance, ScenarioPanel,
                     generate_instance)
from .milp import SolveLimits
from .mswp import solve_mswp_benders, solve_mswp_milp

WORKERS_ENV = "BILEVEL_PORTFOLIO_WORKERS"
ALL_METHODS = ("blifp1", "blifp2", "ilbfp-lp", "ilbfp-cp", "mswp-milp", "mswp-benders")
INFEASIBLE = "Infeasible"
ERROR = "Error"
OPTIMAL = "Optimal"
DOMINANCE_TOL = 1e-8

# preferred method first when a model was solved more than one way
MODEL_METHODS = {
    "blifp": ("blifp2", "blifp1"),
    "ilbfp": ("ilbfp-lp", "ilbfp-cp"),
    "mswp": ("mswp-milp", "mswp-benders"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    classes: tuple[str, ...] = tuple(INSTANCE_CLASSES)
    replicates: int = 5
    alphas: tuple[float, ...] = (0.05, 0.1, 0.5, 0.9)
    mu0s: tuple[float, ...] = (0.0, 0.05, 0.1)
    methods: tuple[str, ...] = ALL_METHODS
    time_limit: float = 3600.0
    seed: int = 0
    out_dir: str = "results"
    backend: str = "highs"
    mip_gap: float = 1e-9

    def __post_init__(self):
        for name in ("classes", "alphas", "mu0s", "methods"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
            if not getattr(self, name):
                raise ValueError(f"{name} must be nonempty")
        unknown = set(self.classes) - set(INSTANCE_CLASSES)
        if unknown:
            raise ValueError(f"unknown instance classes {sorted(unknown)}")
        unknown = set(self.methods) - set(ALL_METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}; expected a subset of {ALL_METHODS}")
        if any(not 0.0 < a <= 1.0 for a in self.alphas):
            raise ValueError("alphas must lie in (0, 1]")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if not self.time_limit > 0:
            raise ValueError("time_limit must be positive")


@dataclass(frozen=True)
class Cell:
    label: str
    replicate: int
    alpha: float
    mu0: float
    method: str

    @property
    def key(self) -> str:
        return f"{self.label}-r{self.replicate}-a{self.alpha:g}-m{self.mu0:g}-{self.method}"


def instance_seed(master: int, label: str, replicate: int) -> int:
    index = sorted(INSTANCE_CLASSES).index(label)
    return int(np.random.SeedSequence([master, index, replicate]).generate_state(1)[0])


def cells(config: ExperimentConfig) -> list[Cell]:
    return [Cell(*c) for c in itertools.product(config.classes, range(config.replicates),
                                                 config.alphas, config.mu0s, config.methods)]


def _solve(instance: ProblemInstance, profile: InvestorProfile, method: str, limits: SolveLimits) -> dict:
    if method in ("blifp1", "blifp2"):
        return solve_blifp(instance, profile, method, limits).to_record()
    if method == "ilbfp-lp":
        return solve_ilbfp_lp(instance, profile, limits.lp).to_record()
    if method == "ilbfp-cp":
        return solve_ilbfp_cutting_plane(instance, profile, limits=limits).to_record()
    if method == "mswp-milp":
        return solve_mswp_milp(instance, profile, None, limits).to_record()
    if method == "mswp-benders":
        return solve_mswp_benders(instance, profile, limits).to_record()
    raise ValueError(f"unknown method {method!r}")


def run_cell(cell: Cell, panel: ScenarioPanel, config: ExperimentConfig) -> dict:
    """Solve one cell; failures become status records."""
    seed = instance_seed(config.seed, cell.label, cell.replicate)
    record = {"class": cell.label, "replicate": cell.replicate, "alpha": cell.alpha,
              "mu0": cell.mu0, "method": cell.method, "instance_seed": seed}
    start = time.perf_counter()
    try:
        instance = generate_instance(cell.label, panel, seed)
        limits = SolveLimits(time_limit=config.time_limit, mip_gap=config.mip_gap, backend=config.backend)
        out = _solve(instance, InvestorProfile(cell.alpha, cell.mu0), cell.method, limits)
        out.pop("model", None)
        out.pop("method", None)  # welfare records name the algorithm; the cell key wins
        record.update(out)
        if out.get("x") is not None:
            record["gross_cvar"] = gross_cvar(panel, np.array(out["x"]), cell.alpha)
    except InfeasibleError as exc:
        record.update(status=INFEASIBLE, note=str(exc))
    except Exception as exc:  # a failing cell must not abort the matrix
        record.update(status=ERROR, note=f"{type(exc).__name__}: {exc}",
                      traceback=traceback.format_exc(limit=5))
    record["time_s"] = time.perf_counter() - start
    return record


def worker_count(workers: int | None = None) -> int:
    if workers is None:
        env = os.environ.get(WORKERS_ENV)
        workers = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(workers))


def run_matrix(config: ExperimentConfig, panel: ScenarioPanel, *, workers: int | None = None,
               write: bool = True, progress: Callable[[int, int, dict], None] | None = None) -> list[dict]:
    """Run every cell, then write records and aggregate CSVs to ``config.out_dir``."""
    todo = cells(config)
    workers = worker_count(workers)
    start = time.perf_counter()
    records: list[dict] = []
    if workers == 1 or len(todo) <= 1:
        for i, cell in enumerate(todo):
            records.append(run_cell(cell, panel, config))
            if progress:
                progress(i + 1, len(todo), records[-1])
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = pool.map(run_cell, todo, itertools.repeat(panel), itertools.repeat(config))
            for i, rec in enumerate(results):
                records.append(rec)
                if progress:
                    progress(i + 1, len(todo), rec)
    if write:
        write_results(records, config)
        statuses = collections.Counter(r["status"] for r in records)
        run = {"wall_s": time.perf_counter() - start, "workers": workers, "cpu_count": os.cpu_count(),
               "cells": len(records), "statuses": dict(sorted(statuses.items()))}
        (Path(config.out_dir) / "run.json").write_text(json.dumps(run, indent=1) + "\n")
    return records


# ---------------------------------------------------------------- output

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "" if not math.isfinite(v) else repr(v)
    return str(v)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def record_key(rec: dict) -> tuple:
    return (rec["class"], rec["replicate"], rec["alpha"], rec["mu0"], rec["method"])


def write_records(records: list[dict], directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for rec in records:
        name = Cell(*record_key(rec)).key + ".json"
        (directory / name).write_text(json.dumps(rec, indent=1, sort_keys=True) + "\n")


def load_records(directory: str | Path) -> list[dict]:
    directory = Path(directory)
    if (directory / "records").is_dir():
        directory = directory / "records"
    return sorted((json.loads(p.read_text()) for p in directory.glob("*.json")), key=record_key)


def write_results(records: list[dict], config: ExperimentConfig) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_records(records, out / "records")
    (out / "config.json").write_text(json.dumps(asdict(config), indent=1) + "\n")
    write_tables(records, out)
    compare_models(records, out)
    return out


def _solved(rec: dict | None) -> bool:
    return rec is not None and rec.get("status") == OPTIMAL


def _mean(values: list) -> float | None:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def _groups(records: list[dict]) -> dict[tuple, dict[str, list[dict]]]:
    """(class, alpha, mu0) -> method -> records sorted by replicate."""
    out: dict[tuple, dict[str, list[dict]]] = {}
    for rec in sorted(records, key=record_key):
        key = (rec["class"], rec["alpha"], rec["mu0"])
        out.setdefault(key, {}).setdefault(rec["method"], []).append(rec)
    return out


def _method_stats(recs: list[dict], prefix: str) -> dict:
    solved = [r for r in recs if _solved(r)]
    return {f"{prefix}_cpu": _mean([r.get("time_s") for r in recs]) if recs else None,
            f"{prefix}_solved": len(solved) if recs else None,
            f"{prefix}_runs": len(recs) if recs else None}


TABLE3 = ("class", "alpha", "mu0", "blifp1_cpu", "blifp1_solved", "blifp1_runs",
          "blifp2_cpu", "blifp2_solved", "blifp2_runs", "blifp2_faster_cpu")
TABLE4 = ("class", "alpha", "mu0", "ilbfp_lp_cpu", "ilbfp_lp_solved", "ilbfp_lp_runs",
          "ilbfp_cp_cpu", "ilbfp_cp_solved", "ilbfp_cp_runs", "ilbfp_cp_iterations")
TABLE5 = ("class", "alpha", "mu0", "mswp_milp_cpu", "mswp_milp_solved", "mswp_milp_runs",
          "mswp_benders_cpu", "mswp_benders_solved", "mswp_benders_runs", "mswp_benders_cuts")
FIGURE = ("method", "class", "alpha", "mu0", "solved", "runs", "cvar", "profit",
          "expected_return", "sum")


def write_tables(records: list[dict], out: Path) -> None:
    t3, t4, t5, fig = [], [], [], []
    for (label, alpha, mu0), by_method in sorted(_groups(records).items()):
        base = {"class": label, "alpha": alpha, "mu0": mu0}
        g = lambda m: by_method.get(m, [])  # noqa: E731
        row = {**base, **_method_stats(g("blifp1"), "blifp1"), **_method_stats(g("blifp2"), "blifp2")}
        if row["blifp1_cpu"] is not None and row["blifp2_cpu"] is not None:
            row["blifp2_faster_cpu"] = row["blifp2_cpu"] < row["blifp1_cpu"]
        t3.append(row)
        row = {**base, **_method_stats(g("ilbfp-lp"), "ilbfp_lp"), **_method_stats(g("ilbfp-cp"), "ilbfp_cp"),
               "ilbfp_cp_iterations": _mean([r.get("iterations") for r in g("ilbfp-cp") if _solved(r)])}
        t4.append(row)
        row = {**base, **_method_stats(g("mswp-milp"), "mswp_milp"),
               **_method_stats(g("mswp-benders"), "mswp_benders"),
               "mswp_benders_cuts": _mean([r.get("cuts") for r in g("mswp-benders") if _solved(r)])}
        t5.append(row)
        for method in ALL_METHODS:
            recs = g(method)
            if not recs:
                continue
            solved = [r for r in recs if _solved(r)]
            fig.append({**base, "method": method, "solved": len(solved), "runs": len(recs),
                        "cvar": _mean([r["cvar"] for r in solved]),
                        "profit": _mean([r["profit"] for r in solved]),
                        "expected_return": _mean([r["expected_return"] for r in solved]),
                        "sum": _mean([r["profit"] + r["cvar"] for r in solved])})
    fig.sort(key=lambda r: (ALL_METHODS.index(r["method"]), r["class"], r["alpha"], r["mu0"]))
    write_csv(out / "table3.csv", TABLE3, t3)
    write_csv(out / "table4.csv", TABLE4, t4)
    write_csv(out / "table5.csv", TABLE5, t5)
    write_csv(out / "figure_data.csv", FIGURE, fig)


# ---------------------------------------------------------------- comparison

COMPARISON_CELLS = ("class", "replicate", "alpha", "mu0", "blifp_method", "ilbfp_method", "mswp_method",
                    "blifp_cvar", "ilbfp_cvar", "blifp_profit", "ilbfp_profit",
                    "blifp_sum", "ilbfp_sum", "mswp_sum", "blifp_gross_cvar",
                    "blifp_expected_return", "ilbfp_expected_return", "mswp_expected_return",
                    "verdict", "note")
COMPARISON = ("class", "alpha", "mu0", "completed", "replicates",
              "blifp_cvar", "ilbfp_cvar", "blifp_profit", "ilbfp_profit",
              "blifp_sum", "ilbfp_sum", "mswp_sum",
              "blifp_expected_return", "ilbfp_expected_return", "mswp_expected_return",
              "verdict", "note")
HOLDS, VIOLATED, INCOMPLETE = "holds", "violated", "incomplete"


def _pick(by_method: dict[str, dict], model: str) -> dict | None:
    for method in MODEL_METHODS[model]:
        if _solved(by_method.get(method)):
            return by_method[method]
    return None


def _missing_note(by_method: dict[str, dict], model: str) -> str:
    seen = [f"{m}={by_method[m].get('status')}" for m in MODEL_METHODS[model] if m in by_method]
    return f"{model}: " + (", ".join(seen) if seen else "not run")


def compare_cells(records: list[dict]) -> list[dict]:
    """One row per (class, replicate, alpha, mu0) with the welfare-dominance verdict."""
    table: dict[tuple, dict[str, dict]] = {}
    for rec in records:
        table.setdefault(record_key(rec)[:4], {})[rec["method"]] = rec
    rows = []
    for key in sorted(table):
        by_method = table[key]
        row = dict(zip(("class", "replicate", "alpha", "mu0"), key))
        picked = {m: _pick(by_method, m) for m in MODEL_METHODS}
        notes = [_missing_note(by_method, m) for m, r in picked.items() if r is None]
        for model, rec in picked.items():
            if rec is None:
                continue
            row[f"{model}_method"] = rec["method"]
            row[f"{model}_sum"] = rec["profit"] + rec["cvar"]
            row[f"{model}_expected_return"] = rec["expected_return"]
            if model != "mswp":
                row[f"{model}_cvar"] = rec["cvar"]
                row[f"{model}_profit"] = rec["profit"]
        if picked["blifp"] is not None:
            row["blifp_gross_cvar"] = picked["blifp"].get("gross_cvar")
        if notes:
            row["verdict"] = INCOMPLETE
            row["note"] = "; ".join(notes)
        else:
            ok = row["mswp_sum"] >= max(row["blifp_sum"], row["ilbfp_sum"]) - DOMINANCE_TOL
            row["verdict"] = HOLDS if ok else VIOLATED
        rows.append(row)
    return rows


def _aggregate(cell_rows: list[dict]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for r in cell_rows:
        groups.setdefault((r["class"], r["alpha"], r["mu0"]), []).append(r)
    out = []
    for (label, alpha, mu0), rows in sorted(groups.items()):
        done = [r for r in rows if r["verdict"] != INCOMPLETE]
        row = {"class": label, "alpha": alpha, "mu0": mu0, "completed": len(done), "replicates": len(rows)}
        for col in COMPARISON[5:15]:
            row[col] = _mean([r.get(col) for r in done])
        if not done:
            row["verdict"] = INCOMPLETE
            row["note"] = rows[0].get("note", "")
        else:
            row["verdict"] = VIOLATED if any(r["verdict"] == VIOLATED for r in done) else HOLDS
            if len(done) < len(rows):
                row["note"] = f"{len(rows) - len(done)} replicate(s) incomplete"
        out.append(row)
    return out


def compare_models(records: list[dict], out_dir: str | Path | None = None) -> list[dict]:
    """Cross-model comparison; writes comparison.csv and comparison_cells.csv when ``out_dir`` is set."""
    cell_rows = compare_cells(records)
    rows = _aggregate(cell_rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "comparison_cells.csv", COMPARISON_CELLS, cell_rows)
        write_csv(out / "comparison.csv", COMPARISON, rows)
    return rows


OUTPUT_FILES = ("table3.csv", "table4.csv", "table5.csv", "figure_data.csv",
                "comparison.csv", "comparison_cells.csv")
TIMING_COLUMNS = frozenset(c for c in TABLE3 + TABLE4 + TABLE5 if c.endswith("_cpu"))
