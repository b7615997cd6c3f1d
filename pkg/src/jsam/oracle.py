"""Independent small-scale solvers used to validate the mechanism module.

Nothing here evaluates the closed-form budget split or the threshold-grid
search. The inner problem (min sum p^2/eps^2 subject to sum v*eps = B) is
solved by a Lagrangian scan with numeric per-coordinate root finds, the outer
budget problem by golden-section search, and the selection problem by plain
enumeration of a simplex grid.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .mechanism import MechanismOutcome, ServerConfig, jsam_solve, verify_structure


def lagrangian_budget_split(p, v, total_budget, lam_iters=64, eps_iters=48,
                            bracket=(1e-12, 1e12)):
    """min sum p^2/eps^2 s.t. sum v*eps = B, by bisection on the multiplier.

    For a trial multiplier lam, each coordinate's stationarity condition
    lam*v*eps^3 = 2 p^2 is solved by log-space bisection on the fixed bracket;
    the multiplier is then bisected until the spend matches B, and the result
    is rescaled so feasibility holds exactly. Returns (eps, objective) with
    leading batch dimensions preserved. Coordinates with p = 0 get eps = 0.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    v = np.broadcast_to(np.asarray(v, dtype=float), p.shape)
    total_budget = np.asarray(total_budget, dtype=float)
    if np.any(total_budget <= 0):
        raise ValueError("total budget must be > 0")
    if np.any(p < 0) or not np.all(p.sum(axis=1) > 0):
        raise ValueError("p must be nonnegative with positive mass")
    if np.any(v[p > 0] <= 0):
        raise ValueError("selected coordinate with non-positive virtual cost")

    mask = p > 0
    two_p2 = 2.0 * p * p

    def coordinate_roots(lam):
        # geometric-midpoint bisection, i.e. bisection on the log axis
        lo = np.full(p.shape, bracket[0])
        hi = np.full(p.shape, bracket[1])
        for _ in range(eps_iters):
            mid = np.sqrt(lo * hi)
            low = lam * v * mid * mid * mid < two_p2
            lo = np.where(low, mid, lo)
            hi = np.where(low, hi, mid)
        return np.where(mask, np.sqrt(lo * hi), 0.0)

    llo = np.full(p.shape[0], bracket[0])
    lhi = np.full(p.shape[0], bracket[1])
    for _ in range(lam_iters):
        lmid = np.sqrt(llo * lhi)
        spend = (v * coordinate_roots(lmid[:, None])).sum(axis=1)
        over = spend > total_budget  # multiplier too small, budgets too generous
        llo = np.where(over, lmid, llo)
        lhi = np.where(over, lhi, lmid)
    eps = coordinate_roots(np.sqrt(llo * lhi)[:, None])
    eps *= (total_budget / (v * eps).sum(axis=1))[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        objective = np.where(mask, p * p / (eps * eps), 0.0).sum(axis=1)
    return eps, objective


def _golden_minimize(fn, lo, hi, iters=60):
    """Vectorized golden-section minimum of a unimodal fn on [lo, hi].

    Evaluates both interior points each iteration; fn is cheap enough that
    the simpler bookkeeping wins.
    """
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a = np.asarray(lo, dtype=float).copy()
    b = np.asarray(hi, dtype=float).copy()
    for _ in range(iters):
        c = b - invphi * (b - a)
        d = a + invphi * (b - a)
        shrink_right = fn(c) < fn(d)
        b = np.where(shrink_right, d, b)
        a = np.where(shrink_right, a, c)
    mid = 0.5 * (a + b)
    return mid, fn(mid)


@dataclass
class BruteForceResult:
    probabilities: np.ndarray
    budgets: np.ndarray
    objective: float
    total_budget: float
    grid_step: float
    evaluations: int


def _composition_chunks(resolution, parts, chunk=200_000):
    """Simplex numerators (rows summing to `resolution`) in lex order."""
    positions = itertools.combinations(range(resolution + parts - 1), parts - 1)
    while True:
        block = list(itertools.islice(positions, chunk))
        if not block:
            return
        if parts == 1:
            yield np.full((1, 1), resolution)
            return
        dividers = np.array(block, dtype=np.int64)
        padded = np.concatenate([
            np.full((dividers.shape[0], 1), -1),
            dividers,
            np.full((dividers.shape[0], 1), resolution + parts - 1),
        ], axis=1)
        yield np.diff(padded, axis=1) - 1


def brute_force_solve(v, cfg: ServerConfig, grid_step: float = 0.01) -> BruteForceResult:
    """Global search over the probability simplex at resolution `grid_step`.

    The deviation term is the exact L1 distance to uniform for every grid
    point (arbitrary p carries no threshold structure to exploit). Ties keep
    the lexicographically smallest p, which is the enumeration order.
    """
    v = np.asarray(v, dtype=float)
    n = v.size
    if n > 5:
        raise ValueError("brute force is guarded to N <= 5")
    if grid_step < 1e-3:
        raise ValueError("grid_step must be >= 1e-3")
    resolution = round(1.0 / grid_step)
    if abs(resolution * grid_step - 1.0) > 1e-9:
        raise ValueError("grid_step must divide 1")
    total_points = math.comb(resolution + n - 1, n - 1)
    if total_points > 20_000_000:
        raise ValueError("grid too fine to enumerate")
    if np.any(v <= 0):
        raise ValueError("virtual costs must be positive")

    if cfg.eta == 0:
        p = np.zeros(n)
        p[-1] = 1.0
        return BruteForceResult(p, np.zeros(n), 0.0, 0.0, grid_step, total_points)

    share = 1.0 / n
    best_f = math.inf
    best = None
    for numerators in _composition_chunks(resolution, n):
        p = numerators / resolution
        dev = np.abs(p - share).sum(axis=1)
        eps1, d1 = lagrangian_budget_split(p, v, 1.0, lam_iters=28, eps_iters=22,
                                           bracket=(1e-9, 1e9))
        a = cfg.q_coefficient * d1
        dev2 = dev * dev

        def objective(b):
            return cfg.eta * np.sqrt(dev2 + a / (b * b)) + cfg.eta * dev + b

        f_at_one = objective(np.ones(p.shape[0]))
        b_star, f_star = _golden_minimize(objective, np.full(p.shape[0], 1e-9),
                                          f_at_one + 1.0)
        k = int(np.argmin(f_star))
        if f_star[k] < best_f:
            best_f = float(f_star[k])
            best = (p[k].copy(), b_star[k] * eps1[k], float(b_star[k]))
    return BruteForceResult(best[0], best[1], best_f, best[2], grid_step,
                            total_points)


@dataclass
class CrossCheckReport:
    passed: bool
    objective_gap: float
    tolerance: float
    jsam_objective: float
    brute_objective: float
    structure_ok: bool
    structure_clause: str | None
    jsam: MechanismOutcome
    brute: BruteForceResult


def slack(grid_step, grid_delta, eta, v_max) -> float:
    """Empirical Lipschitz-style allowance for the two search grids."""
    return 4.0 * (grid_step + grid_delta) * (eta + v_max)


def cross_check(clients, cfg: ServerConfig, grid_step: float = 0.01) -> CrossCheckReport:
    """Compare the grid solver against brute force on one small instance."""
    if len(clients) > 4:
        raise ValueError("cross_check is guarded to N <= 4")
    outcome = jsam_solve(clients, cfg)
    v = np.array([cl.virtual for cl in clients], dtype=float)
    brute = brute_force_solve(v, cfg, grid_step)
    gap = abs(outcome.objective_value - brute.objective)
    tol = max(0.01 * brute.objective, slack(grid_step, cfg.grid_delta, cfg.eta,
                                            float(v.max())))
    order = np.argsort(v, kind="stable") + 1
    report = verify_structure(brute.probabilities, order, tol=grid_step + 1e-9)
    return CrossCheckReport(
        passed=bool(gap <= tol and report.passed),
        objective_gap=float(gap),
        tolerance=float(tol),
        jsam_objective=outcome.objective_value,
        brute_objective=brute.objective,
        structure_ok=report.passed,
        structure_clause=report.clause,
        jsam=outcome,
        brute=brute,
    )
