"""Payment rule and incentive audits for the selection mechanism.

The allocation rule here is a client's interim privacy budget: its expected
budget as a function of its own reported sensitivity, averaged over rivals'
reports. Payments follow the envelope form

    pi_k(c) = integral_c^{c_max} e_k(z) dz + c * e_k(c),

which, for a weakly decreasing allocation, makes truthful reporting a best
response in expectation and guarantees nonnegative expected utility. The
upper integration limit is the distribution's support top: budgets are only
defined for on-support reports.

Interim curves are estimated by Monte Carlo with common random numbers (one
set of rival profiles reused across the whole report grid), which keeps the
estimated curve monotone up to O(1/sqrt(S)) noise and therefore auditable at
moderate sample counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .costs import CostDistribution
from .mechanism import ServerConfig, solve_profiles

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass
class InterimAllocation:
    """Monte-Carlo estimate of one client's report -> expected budget curve."""

    client: int          # 1-based index
    grid: np.ndarray     # (G,) ascending reports
    budgets: np.ndarray  # (G,) estimated expected budgets
    samples: int
    seed: int

    def at(self, report):
        """Piecewise-linear interpolation of the curve."""
        return np.interp(report, self.grid, self.budgets)

    def quadrature_error(self, lower=None) -> float:
        """Composite-trapezoid error estimate from second differences."""
        sel = slice(None) if lower is None else self.grid >= lower
        e = self.budgets[sel] if lower is not None else self.budgets
        if e.size < 3:
            return 0.0
        h = (self.grid[-1] - self.grid[0]) / (self.grid.size - 1)
        return float(h * np.abs(np.diff(e, 2)).sum() / 12.0)


def interim_allocation(k, dist: CostDistribution, n_clients, cfg: ServerConfig,
                       grid_size: int = 200, samples: int = 2000,
                       seed: int = 0) -> InterimAllocation:
    """Estimate client k's interim budget curve on a support-covering grid.

    The same `samples` rival profiles are reused at every grid point. The
    lowest grid node is nudged off the support boundary when the virtual cost
    vanishes there (e.g. uniform starting at 0), since a zero virtual cost
    makes the budget split degenerate.
    """
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if not 1 <= k <= n_clients:
        raise ValueError("client index out of range")
    grid = np.linspace(dist.lower, dist.upper, grid_size)
    if float(dist.virtual(grid[0])) <= 0:
        grid[0] = dist.lower + 1e-9 * (dist.upper - dist.lower)
    rng = np.random.default_rng(seed)
    rivals = dist.sample(rng, size=(samples, n_clients - 1))
    rivals = rivals.reshape(samples, n_clients - 1)

    col = k - 1
    tiled = np.broadcast_to(rivals, (grid_size, samples, n_clients - 1))
    tiled = tiled.reshape(grid_size * samples, n_clients - 1)
    own = np.repeat(grid, samples)[:, None]
    profiles = np.concatenate([tiled[:, :col], own, tiled[:, col:]], axis=1)
    virtuals = dist.virtual(profiles)
    sol = solve_profiles(virtuals, cfg)
    curve = sol.privacy_budgets[:, col].reshape(grid_size, samples).mean(axis=1)
    return InterimAllocation(client=k, grid=grid, budgets=curve,
                             samples=samples, seed=seed)


@dataclass(frozen=True)
class PaymentQuote:
    amount: float
    quadrature_error: float


def payment(c, interim: InterimAllocation) -> PaymentQuote:
    """Envelope payment for a report c, integrating the interim curve's tail.

    Exact for the piecewise-linear interpolant of the estimated curve; the
    quoted quadrature error bounds the gap to the underlying smooth curve.
    """
    grid, e = interim.grid, interim.budgets
    if not grid[0] <= c <= grid[-1]:
        raise ValueError("report outside the interim grid range")
    e_at_c = float(np.interp(c, grid, e))
    j = int(np.searchsorted(grid, c, side="right")) - 1
    if j >= grid.size - 1:
        tail = 0.0
    else:
        tail = 0.5 * (e_at_c + e[j + 1]) * (grid[j + 1] - c)
        if j + 2 <= grid.size - 1:
            tail += float(_trapezoid(e[j + 1:], grid[j + 1:]))
    return PaymentQuote(amount=tail + c * e_at_c,
                        quadrature_error=interim.quadrature_error(lower=c))


def verify_ir(c, payment_amount, budget, tol: float = 1e-6) -> bool:
    """Participation is worthwhile: payment covers the privacy cost c*eps."""
    return bool(payment_amount - c * budget >= -tol)


@dataclass(frozen=True)
class ICReport:
    passed: bool
    worst_gain: float      # best misreport utility minus truthful utility
    tolerance: float
    truthful_utility: float


def verify_ic(c_true, misreports, interim: InterimAllocation,
              tol: float | None = None) -> ICReport:
    """Check that no sampled misreport beats truth-telling in utility.

    tol defaults to the Monte-Carlo slack 3/sqrt(S) plus the curve's
    quadrature error estimate.
    """
    if tol is None:
        tol = 3.0 / math.sqrt(interim.samples) + interim.quadrature_error()
    truth = payment(c_true, interim).amount - c_true * float(interim.at(c_true))
    worst = -math.inf
    for r in np.atleast_1d(np.asarray(misreports, dtype=float)):
        u = payment(float(r), interim).amount - c_true * float(interim.at(r))
        worst = max(worst, u - truth)
    return ICReport(passed=bool(worst <= tol), worst_gain=float(worst),
                    tolerance=float(tol), truthful_utility=float(truth))


@dataclass(frozen=True)
class MonotoneReport:
    passed: bool
    max_increase: float
    tolerance: float
    at_index: int | None


def verify_monotone_allocation(interim: InterimAllocation,
                               tol: float | None = None) -> MonotoneReport:
    """Interim budgets must weakly decrease in the report, up to MC noise."""
    if tol is None:
        tol = 3.0 / math.sqrt(interim.samples)
    rises = np.diff(interim.budgets)
    worst = float(rises.max(initial=0.0))
    idx = int(np.argmax(rises)) if rises.size else None
    return MonotoneReport(passed=bool(worst <= tol), max_increase=worst,
                          tolerance=float(tol), at_index=idx)


def expost_payments(costs, support_upper, eps_of_report, grid_size: int = 200):
    """Envelope payments with rivals' reports held fixed at their realization.

    eps_of_report(k, z_array) -> client k's budgets when reporting each z,
    rivals fixed. Averaging this payment over rival draws recovers the interim
    rule, so totals are comparable across mechanisms. Returns (payments,
    quadrature error estimates).
    """
    costs = np.asarray(costs, dtype=float)
    pis = np.zeros(costs.size)
    errs = np.zeros(costs.size)
    for k in range(costs.size):
        z = np.linspace(costs[k], support_upper, grid_size)
        e = np.asarray(eps_of_report(k, z), dtype=float)
        pis[k] = float(_trapezoid(e, z)) + costs[k] * float(e[0])
        if e.size >= 3:
            h = (support_upper - costs[k]) / (grid_size - 1)
            errs[k] = h * np.abs(np.diff(e, 2)).sum() / 12.0
    return pis, errs
