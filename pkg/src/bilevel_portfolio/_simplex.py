"""Bounded-variable revised simplex kernel.

Works on the internal equality form ``A z = b, lb <= z <= ub`` and always
minimizes.  The caller appends one logical column per row so that the slack
basis is available as a cold start.  The basis inverse is kept explicitly and
updated with rank-one eta transforms, refactorized every ``refactor_every``
pivots.

Phase 1 minimizes the sum of bound violations of the basic variables starting
from whatever basis is supplied, so warm starts from a parent node (only bounds
changed) need no special casing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OPTIMAL = "Optimal"
INFEASIBLE = "Infeasible"
UNBOUNDED = "Unbounded"
ITERATION_LIMIT = "IterationLimit"


@dataclass
class SimplexResult:
    status: str
    z: np.ndarray
    pi: np.ndarray
    basis: np.ndarray
    at_upper: np.ndarray
    iterations: int


def _nonbasic_values(lb, ub, at_upper, is_basic):
    z = np.where(np.isfinite(lb), lb, np.where(np.isfinite(ub), ub, 0.0))
    up = at_upper & np.isfinite(ub)
    z = np.where(up, ub, z)
    z[is_basic] = 0.0
    return z


def revised_simplex(
    A: np.ndarray,
    b: np.ndarray,
    c: np.ndarray,
    lb: np.ndarray,
    ub: np.ndarray,
    *,
    basis: np.ndarray,
    at_upper: np.ndarray | None = None,
    feas_tol: float = 1e-9,
    opt_tol: float = 1e-9,
    pivot_tol: float = 1e-9,
    max_iter: int = 10_000,
    degeneracy_streak: int = 20,
    refactor_every: int = 64,
) -> SimplexResult:
    m, N = A.shape
    basis = np.asarray(basis, dtype=int).copy()
    at_upper = np.zeros(N, bool) if at_upper is None else np.asarray(at_upper, bool).copy()
    # a variable with only a finite upper bound must sit there when nonbasic
    at_upper |= ~np.isfinite(lb) & np.isfinite(ub)
    at_upper &= np.isfinite(ub)

    is_basic = np.zeros(N, bool)
    is_basic[basis] = True
    z = _nonbasic_values(lb, ub, at_upper, is_basic)

    try:
        Binv = np.linalg.inv(A[:, basis])
        if not np.all(np.isfinite(Binv)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        # fall back to the slack basis (last m columns are the logicals)
        basis = np.arange(N - m, N)
        is_basic[:] = False
        is_basic[basis] = True
        at_upper[basis] = False
        z = _nonbasic_values(lb, ub, at_upper, is_basic)
        Binv = np.linalg.inv(A[:, basis])

    def refresh():
        nonbasic = ~is_basic
        rhs = b - A[:, nonbasic] @ z[nonbasic]
        z[basis] = Binv @ rhs

    refresh()
    iterations = 0
    since_refactor = 0
    streak = 0
    fresh = True

    while True:
        if since_refactor >= refactor_every:
            Binv = np.linalg.inv(A[:, basis])
            refresh()
            since_refactor = 0
            fresh = True

        zB = z[basis]
        lB = lb[basis]
        uB = ub[basis]
        below = zB < lB - feas_tol
        above = zB > uB + feas_tol
        phase1 = bool(below.any() or above.any())
        if phase1:
            cB = np.where(below, -1.0, np.where(above, 1.0, 0.0))
            pi = Binv.T @ cB
            d = -(A.T @ pi)
        else:
            pi = Binv.T @ c[basis]
            d = c - A.T @ pi
        d[basis] = 0.0

        can_inc = ~is_basic & (z < ub - feas_tol)
        can_dec = ~is_basic & (z > lb + feas_tol)
        score = np.where(can_inc & (d < -opt_tol), -d, 0.0)
        score = np.where(can_dec & (d > opt_tol), np.maximum(score, d), score)
        eligible = np.flatnonzero(score > 0.0)

        if eligible.size == 0:
            if not fresh:
                Binv = np.linalg.inv(A[:, basis])
                refresh()
                since_refactor = 0
                fresh = True
                continue
            status = INFEASIBLE if phase1 else OPTIMAL
            return SimplexResult(status, z, pi, basis, at_upper, iterations)

        if iterations >= max_iter:
            return SimplexResult(ITERATION_LIMIT, z, pi, basis, at_upper, iterations)

        bland = streak >= degeneracy_streak
        q = int(eligible[0]) if bland else int(eligible[np.argmax(score[eligible])])
        direction = 1.0 if d[q] < 0.0 else -1.0
        alpha = Binv @ A[:, q]
        g = -direction * alpha

        # ratio test: limits[i] is the step at which basic i hits its blocking bound
        feasible = ~(below | above)
        dec = g < -pivot_tol
        inc = g > pivot_tol
        limits = np.full(m, np.inf)
        to_upper = np.zeros(m, bool)
        with np.errstate(invalid="ignore", divide="ignore"):
            mask = dec & feasible & np.isfinite(lB)
            limits[mask] = (zB[mask] - lB[mask]) / -g[mask]
            mask = dec & above
            limits[mask] = (zB[mask] - uB[mask]) / -g[mask]
            to_upper[mask] = True
            mask = inc & feasible & np.isfinite(uB)
            limits[mask] = (uB[mask] - zB[mask]) / g[mask]
            to_upper[mask] = True
            mask = inc & below
            limits[mask] = (lB[mask] - zB[mask]) / g[mask]
        limits = np.maximum(limits, 0.0)

        span = ub[q] - lb[q]
        finite = np.isfinite(limits)
        r = -1
        if finite.any():
            if bland:
                theta = limits[finite].min()
                ties = np.flatnonzero(limits <= theta + 1e-12)
                r = int(ties[np.argmin(basis[ties])])
            else:
                # Harris pass: relax bounds by half of feas_tol (so the drift it
                # allows never re-triggers phase 1), then pick the largest pivot
                relaxed = limits + 0.5 * feas_tol / np.maximum(np.abs(g), pivot_tol)
                theta_max = relaxed[finite].min()
                ties = np.flatnonzero(limits <= theta_max)
                r = int(ties[np.argmax(np.abs(g[ties]))])
            theta = limits[r]
        else:
            theta = np.inf

        if span <= theta:
            if not np.isfinite(span):
                if phase1:
                    # cannot happen for a consistent phase-1 direction; treat as numerical noise
                    Binv = np.linalg.inv(A[:, basis])
                    refresh()
                    since_refactor = 0
                    fresh = True
                    streak = degeneracy_streak
                    iterations += 1
                    continue
                return SimplexResult(UNBOUNDED, z, pi, basis, at_upper, iterations)
            # bound flip, basis unchanged
            z[basis] += g * span
            at_upper[q] = direction > 0
            z[q] = ub[q] if at_upper[q] else lb[q]
            iterations += 1
            streak = 0
            fresh = False
            continue

        z[basis] += g * theta
        z[q] += direction * theta
        leaving = basis[r]
        at_upper[leaving] = bool(to_upper[r])
        z[leaving] = ub[leaving] if to_upper[r] else lb[leaving]
        basis[r] = q
        is_basic[leaving] = False
        is_basic[q] = True
        at_upper[q] = False

        pivot = alpha[r]
        row = Binv[r] / pivot
        Binv -= np.outer(alpha, row)
        Binv[r] = row

        streak = streak + 1 if theta <= 1e-12 else 0
        iterations += 1
        since_refactor += 1
        fresh = False
