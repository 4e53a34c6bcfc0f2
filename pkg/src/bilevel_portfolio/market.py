"""Scenario returns, broker cost structures and instance generation."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

PROB_COLUMN = "probability"

# class label -> (|B|, K)
INSTANCE_CLASSES = {
    "A": (30, 5), "B": (30, 15), "C": (30, 50),
    "D": (20, 5), "E": (20, 15), "F": (20, 50),
    "G": (10, 5), "H": (10, 15), "I": (10, 50),
}

# (probability, low, high) per cost regime: cheap, normal, expensive
COST_REGIMES = ((0.15, 0.001, 0.003), (0.70, 0.002, 0.008), (0.15, 0.006, 0.010))


class ParseError(ValueError):
    pass


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ScenarioPanel:
    """Gross returns ``returns[j, t]`` of security ``j`` in scenario ``t``."""

    names: tuple[str, ...]
    returns: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        r = _frozen(self.returns)
        if r.ndim != 2:
            raise ValueError("returns must be a 2-D array (securities x scenarios)")
        p = _frozen(self.probs)
        object.__setattr__(self, "returns", r)
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "names", tuple(self.names))
        n, T = r.shape
        if len(self.names) != n:
            raise ValueError(f"{len(self.names)} names for {n} securities")
        if p.shape != (T,):
            raise ValueError(f"{p.shape[0]} probabilities for {T} scenarios")
        if not np.all(np.isfinite(r)):
            raise ValueError("returns must be finite")
        if np.any(p < 0.0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("scenario probabilities must be nonnegative and sum to 1")

    @classmethod
    def uniform(cls, returns, names: Sequence[str] | None = None) -> "ScenarioPanel":
        r = np.asarray(returns, dtype=float)
        n, T = r.shape
        names = tuple(names) if names is not None else tuple(f"S{j + 1}" for j in range(n))
        return cls(names, r, np.full(T, 1.0 / T))

    @property
    def n(self) -> int:
        return self.returns.shape[0]

    @property
    def T(self) -> int:
        return self.returns.shape[1]

    def mean_returns(self) -> np.ndarray:
        return self.returns @ self.probs


@dataclass(frozen=True)
class PolyRow:
    """Linear row ``coeffs . p  <relation>  rhs`` over the chargeable costs."""

    coeffs: tuple[float, ...]
    relation: str
    rhs: float

    def __post_init__(self):
        if self.relation not in ("<=", "==", ">="):
            raise ValueError(f"bad relation {self.relation!r}")
        object.__setattr__(self, "coeffs", tuple(float(v) for v in self.coeffs))

    def satisfied(self, p: np.ndarray, tol: float = 1e-12) -> bool:
        lhs = float(np.dot(self.coeffs, p))
        if self.relation == "<=":
            return lhs <= self.rhs + tol
        if self.relation == ">=":
            return lhs >= self.rhs - tol
        return abs(lhs - self.rhs) <= tol


@dataclass(frozen=True)
class CostStructure:
    """Chargeable securities ``chargeable`` (0-based panel indices) with one
    admissible cost grid each, plus optional linear rows coupling the costs.

    Grids are deduplicated and sorted on construction.
    """

    chargeable: tuple[int, ...]
    grids: tuple[np.ndarray, ...]
    polyhedron: tuple[PolyRow, ...] = ()

    def __post_init__(self):
        chargeable = tuple(int(j) for j in self.chargeable)
        if len(set(chargeable)) != len(chargeable):
            raise ValueError("chargeable securities must be distinct")
        if len(self.grids) != len(chargeable):
            raise ValueError("one cost grid per chargeable security")
        grids = []
        for j, g in zip(chargeable, self.grids):
            g = np.unique(np.asarray(g, dtype=float))
            if g.size == 0:
                raise ValueError(f"empty cost grid for security {j}")
            if np.any(g < 0.0) or not np.all(np.isfinite(g)):
                raise ValueError(f"cost grid for security {j} must be finite and nonnegative")
            grids.append(_frozen(g))
        for row in self.polyhedron:
            if len(row.coeffs) != len(chargeable):
                raise ValueError("polyhedron rows must have one coefficient per chargeable security")
        object.__setattr__(self, "chargeable", chargeable)
        object.__setattr__(self, "grids", tuple(grids))
        object.__setattr__(self, "polyhedron", tuple(self.polyhedron))

    @property
    def size(self) -> int:
        return len(self.chargeable)

    @property
    def grid_sizes(self) -> list[int]:
        return [len(g) for g in self.grids]

    @property
    def num_choices(self) -> int:
        """Total number of admissible costs, ``d`` in the model-size formulas."""
        return sum(self.grid_sizes)

    def product_size(self) -> int:
        return math.prod(self.grid_sizes)

    def max_costs(self) -> np.ndarray:
        return np.array([g[-1] for g in self.grids])

    def min_costs(self) -> np.ndarray:
        return np.array([g[0] for g in self.grids])

    def in_polyhedron(self, p: np.ndarray, tol: float = 1e-12) -> bool:
        return all(row.satisfied(p, tol) for row in self.polyhedron)

    def with_polyhedron(self, rows: Sequence[PolyRow]) -> "CostStructure":
        return CostStructure(self.chargeable, self.grids, tuple(rows))

    def without_polyhedron(self) -> "CostStructure":
        return CostStructure(self.chargeable, self.grids, ())

    def full_costs(self, p: np.ndarray, n: int) -> np.ndarray:
        """Cost vector over all ``n`` securities (zero outside the chargeable set)."""
        full = np.zeros(n)
        if self.size:
            full[list(self.chargeable)] = p
        return full


@dataclass(frozen=True)
class InvestorProfile:
    alpha: float
    mu0: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")


@dataclass(frozen=True)
class ProblemInstance:
    panel: ScenarioPanel
    costs: CostStructure
    label: str = ""
    seed: int | None = None

    def __post_init__(self):
        for j in self.costs.chargeable:
            if not 0 <= j < self.panel.n:
                raise ValueError(f"chargeable index {j} outside panel of {self.panel.n} securities")

    @property
    def others(self) -> tuple[int, ...]:
        """Securities the broker cannot charge."""
        b = set(self.costs.chargeable)
        return tuple(j for j in range(self.panel.n) if j not in b)


# --- CSV ingestion -----------------------------------------------------------

def parse_returns_csv(text: str, source: str = "<string>") -> ScenarioPanel:
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError(f"{source}: empty file")
    header = [h.strip() for h in rows[0]]
    prob_col = header.index(PROB_COLUMN) if PROB_COLUMN in header else None
    names = [h for i, h in enumerate(header) if i != prob_col]
    if not names:
        raise ParseError(f"{source}: header has no security columns")
    if len(rows) == 1:
        raise ParseError(f"{source}: no scenario rows")
    values, probs = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ParseError(f"{source}: row {lineno} has {len(row)} cells, header has {len(header)}")
        parsed = []
        for col, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"{source}: row {lineno}, column {col + 1} ({header[col]!r}): "
                                 f"non-numeric value {cell.strip()!r}") from None
            if not math.isfinite(v):
                raise ParseError(f"{source}: row {lineno}, column {col + 1} ({header[col]!r}): "
                                 f"non-finite value {cell.strip()!r}")
            parsed.append(v)
        if prob_col is not None:
            probs.append(parsed.pop(prob_col))
        values.append(parsed)
    r = np.array(values).T
    if prob_col is None:
        return ScenarioPanel.uniform(r, names)
    p = np.array(probs)
    if abs(p.sum() - 1.0) > 1e-9:
        raise ParseError(f"{source}: probability column sums to {p.sum()}, expected 1")
    return ScenarioPanel(tuple(names), r, p / p.sum())


def load_returns_csv(path: str | Path) -> ScenarioPanel:
    """Read a returns file: header of security names, one scenario per row.

    An optional ``probability`` column carries scenario weights; without it
    scenarios are equiprobable.
    """
    path = Path(path)
    return parse_returns_csv(path.read_text(), str(path))


def write_returns_csv(panel: ScenarioPanel, path: str | Path, with_probs: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(panel.names) + ([PROB_COLUMN] if with_probs else []))
        for t in range(panel.T):
            row = [repr(float(v)) for v in panel.returns[:, t]]
            if with_probs:
                row.append(repr(float(panel.probs[t])))
            w.writerow(row)


# --- synthetic data ----------------------------------------------------------

def synthetic_panel(n: int = 30, T: int = 60, seed: int = 0, factors: int = 3) -> ScenarioPanel:
    """DJIA-like daily returns from a seeded factor-model multivariate normal.

    Means are drawn in [-0.001, 0.002] and volatilities in [0.005, 0.03].
    """
    rng = np.random.default_rng(seed)
    means = rng.uniform(-0.001, 0.002, size=n)
    vols = rng.uniform(0.005, 0.03, size=n)
    loadings = rng.normal(size=(n, factors))
    cov = loadings @ loadings.T + np.diag(rng.uniform(0.5, 1.5, size=n))
    d = np.sqrt(np.diag(cov))
    corr = cov / np.outer(d, d)
    cov = corr * np.outer(vols, vols)
    draws = rng.multivariate_normal(means, cov, size=T, method="cholesky")
    return ScenarioPanel.uniform(draws.T, [f"SEC{j + 1:02d}" for j in range(n)])


def generate_instance(label: str, panel: ScenarioPanel, seed: int) -> ProblemInstance:
    if label not in INSTANCE_CLASSES:
        raise ValueError(f"unknown instance class {label!r}; expected one of {sorted(INSTANCE_CLASSES)}")
    size, K = INSTANCE_CLASSES[label]
    if panel.n < size:
        raise ValueError(f"class {label} needs {size} securities, panel has {panel.n}")
    rng = np.random.default_rng(seed)
    chargeable = sorted(int(j) for j in rng.permutation(panel.n)[:size])
    grids = []
    for _ in chargeable:
        s = int(rng.integers(1, K + 1))
        _, lo, hi = COST_REGIMES[_draw_regime(rng)]
        grids.append(rng.uniform(lo, hi, size=s))
    costs = CostStructure(tuple(chargeable), tuple(grids))
    return ProblemInstance(panel, costs, label, seed)


def _draw_regime(rng: np.random.Generator) -> int:
    """Regime index: 0 cheap, 1 normal, 2 expensive."""
    return int(rng.choice(len(COST_REGIMES), p=[reg[0] for reg in COST_REGIMES]))


def cost_regime_sample(count: int, seed: int) -> np.ndarray:
    """``count`` regime draws from the generator used by ``generate_instance``."""
    rng = np.random.default_rng(seed)
    return np.array([_draw_regime(rng) for _ in range(count)])


# --- evaluation helpers ------------------------------------------------------

def _check_portfolio(panel: ScenarioPanel, x, p, costs: CostStructure | None):
    x = np.asarray(x, dtype=float)
    if x.shape != (panel.n,):
        raise ValueError(f"portfolio has {x.shape[0] if x.ndim else 0} weights, panel has {panel.n} securities")
    p = np.asarray(p, dtype=float)
    size = costs.size if costs is not None else p.shape[0]
    if p.shape != (size,):
        raise ValueError(f"cost vector has {p.shape[0] if p.ndim else 0} entries, expected {size}")
    return x, p


def net_scenario_returns(panel: ScenarioPanel, x, p, costs: CostStructure | None = None) -> np.ndarray:
    """``y_t = sum_j r_jt x_j - sum_{i in B} p_i x_i``.

    ``p`` is indexed like ``costs.chargeable``; when ``costs`` is omitted ``p``
    must cover every security.
    """
    x, p = _check_portfolio(panel, x, p, costs)
    if costs is None:
        if p.shape[0] != panel.n:
            raise ValueError("without a cost structure p must cover every security")
        charge = float(p @ x)
    else:
        charge = float(p @ x[list(costs.chargeable)]) if costs.size else 0.0
    return panel.returns.T @ x - charge


def expected_return(panel: ScenarioPanel, x, p, costs: CostStructure | None = None) -> float:
    return float(panel.probs @ net_scenario_returns(panel, x, p, costs))


# --- instance files ----------------------------------------------------------

def instance_to_dict(instance: ProblemInstance) -> dict:
    c = instance.costs
    return {
        "class": instance.label,
        "seed": instance.seed,
        "n_securities": instance.panel.n,
        "B": list(c.chargeable),
        "cost_grids": [[float(v) for v in g] for g in c.grids],
        "polyhedron": [{"coeffs": list(r.coeffs), "relation": r.relation, "rhs": r.rhs}
                       for r in c.polyhedron],
    }


def costs_from_dict(doc: dict) -> CostStructure:
    rows = tuple(PolyRow(tuple(r["coeffs"]), r["relation"], float(r["rhs"]))
                 for r in doc.get("polyhedron", []))
    return CostStructure(tuple(doc["B"]), tuple(np.array(g, float) for g in doc["cost_grids"]), rows)


def save_instance(instance: ProblemInstance, path: str | Path) -> None:
    Path(path).write_text(json.dumps(instance_to_dict(instance), indent=2) + "\n")


def load_instance(path: str | Path, panel: ScenarioPanel) -> ProblemInstance:
    doc = json.loads(Path(path).read_text())
    if doc.get("n_securities", panel.n) != panel.n:
        raise ValueError(f"instance was generated for {doc['n_securities']} securities, "
                         f"panel has {panel.n}")
    return ProblemInstance(panel, costs_from_dict(doc), doc.get("class", ""), doc.get("seed"))

