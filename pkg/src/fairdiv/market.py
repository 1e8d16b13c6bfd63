"""Budgeted Eisenberg-Gale market solver and its optimality certificate.

The solver maximizes the budget-weighted log utilities over fractional
allocations with unit supply per item.  Optimality is certified through the
three equilibrium conditions: (1) positively priced items clear, (2) no
item's bang-per-buck exceeds the owner's realized ratio, and (3) allocated
items attain that ratio exactly.  The certificate, not objective stall, is
the stopping rule.

Method: proportional-response bid dynamics (bids update in proportion to the
value shares of the current bundle; prices are bid sums).  On instances with
bang-per-buck ties the raw dynamics approach the equilibrium only at a 1/t
rate, so once the residuals are small the solver extracts the tied-item
structure, re-prices each connected block exactly, routes budgets to items
with a max-flow, and accepts the polished point only if the certificate
passes.  The same structure extraction drives the exact-rational mode.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from fairdiv import _backend
from fairdiv.core import (
    InstanceError,
    MarketSolution,
    OfflineInstance,
    fractional_value,
    to_float,
)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITERS = 200_000
_POLISH_TRIGGER = 1e-2
_TAU_LADDER = (1e-5, 1e-4, 1e-3, 1e-6, 1e-2, 1e-7, 1e-8)


@dataclass(frozen=True)
class KktReport:
    """Residuals of the three equilibrium conditions at a stated tolerance."""

    max_residual_market_clearing: float
    max_residual_mbb_bound: float
    max_residual_mbb_tight: float
    tol: float
    passed: bool

    @property
    def max_residual(self) -> float:
        return max(
            self.max_residual_market_clearing,
            self.max_residual_mbb_bound,
            self.max_residual_mbb_tight,
        )


class SolverError(RuntimeError):
    """Solver did not certify within the iteration budget.

    Carries the best iterate and its report for diagnosis.
    """

    def __init__(self, message, solution=None, report=None):
        super().__init__(message)
        self.solution = solution
        self.report = report


class StructureError(RuntimeError):
    """The guessed tied-item structure is not consistent with an equilibrium."""


def _residuals(values, shares, prices, budgets, share_tol):
    """Raw residual triple; works for float and Fraction grids alike."""
    n, m = values.shape
    clearing = max(abs(1 - sum(shares[i, j] for i in range(n))) for j in range(m))
    bound = 0 * clearing
    tight = 0 * clearing
    for i in range(n):
        u_i = sum(values[i, k] * shares[i, k] for k in range(m))
        r_i = u_i / budgets[i]
        if r_i <= 0:
            return clearing, float("inf"), float("inf")
        for j in range(m):
            ratio = values[i, j] / prices[j]
            excess = (ratio - r_i) / r_i
            if excess > bound:
                bound = excess
            if shares[i, j] > share_tol:
                gap = abs(ratio - r_i) / r_i
                if gap > tight:
                    tight = gap
    return clearing, bound, tight


def check_kkt(solution: MarketSolution, instance: OfflineInstance, tol: float) -> KktReport:
    """Certify a candidate equilibrium.

    Residuals: (1) max item under/over-allocation, (2) max positive part of
    (bang-per-buck − realized ratio)/ratio over all agent-item pairs, and
    (3) the same gap in absolute value restricted to pairs with share above
    ``tol``.  Passes iff all three are at most ``tol``.
    """
    if instance.values.shape != solution.shares.shape:
        raise InstanceError("solution and instance dimensions disagree")
    if any(p <= 0 for p in solution.prices):
        raise InstanceError("prices must be strictly positive")
    if any(e <= 0 for e in solution.budgets):
        raise InstanceError("budgets must be strictly positive")
    clearing, bound, tight = _residuals(
        instance.values, solution.shares, solution.prices, solution.budgets, tol
    )
    passed = bool(clearing <= tol and bound <= tol and tight <= tol)
    return KktReport(float(clearing), float(bound), float(tight), tol, passed)


def mbb_ratios(solution: MarketSolution, instance: OfflineInstance,
               tol: float = 1e-6) -> np.ndarray:
    """Realized bang-per-buck ratios, value of own bundle over budget.

    When the solution certifies at ``tol``, the realized ratio is checked
    against the best available ratio max_j v_ij/p_j and a mismatch raises.
    """
    if any(e <= 0 for e in solution.budgets):
        raise InstanceError("budgets must be strictly positive")
    n, m = instance.values.shape
    out = np.empty(n, dtype=solution.shares.dtype)
    for i in range(n):
        out[i] = fractional_value(i, solution.shares[i], instance) / solution.budgets[i]
    if check_kkt(solution, instance, tol).passed:
        for i in range(n):
            best = max(instance.values[i, j] / solution.prices[j] for j in range(m))
            if abs(best - out[i]) > tol * max(abs(best), 1e-30):
                raise InstanceError(
                    f"agent {i}: realized ratio {out[i]} != best ratio {best}"
                )
    return out


# ---------------------------------------------------------------------------
# Structure extraction and re-solve (polish + exact mode)
# ---------------------------------------------------------------------------


def _mbb_edges(values_float, prices_float, tau):
    ratios = values_float / prices_float[None, :]
    r = ratios.max(axis=1)
    return [np.nonzero(ratios[i] >= r[i] * (1 - tau))[0].tolist() for i in range(len(r))]


def _structure_prices(values, budgets, edges, zero, feas_tol):
    """Re-price items from the tied-item structure.

    Within a connected block of the agent-item graph, tied ratios pin all
    price ratios; the block's scale follows from money conservation.
    Inconsistent blocks raise StructureError.
    """
    n, m = values.shape
    comp_agent = [-1] * n
    comp_item = [-1] * m
    rho = [None] * m
    n_comp = 0
    for start in range(n):
        if comp_agent[start] >= 0:
            continue
        if not edges[start]:
            raise StructureError(f"agent {start} has no tied items")
        comp = n_comp
        n_comp += 1
        root = edges[start][0]
        rho[root] = budgets[0] / budgets[0]  # exact or float one
        stack_items = [root]
        comp_item[root] = comp
        while stack_items:
            j = stack_items.pop()
            for i in range(n):
                if j not in edges[i]:
                    continue
                if comp_agent[i] == -1:
                    comp_agent[i] = comp
                elif comp_agent[i] != comp:
                    raise StructureError("agent straddles two blocks")
                for k in edges[i]:
                    cand = rho[j] * values[i, k] / values[i, j]
                    if comp_item[k] == -1:
                        comp_item[k] = comp
                        rho[k] = cand
                        stack_items.append(k)
                    elif abs(rho[k] - cand) > feas_tol * abs(rho[k]):
                        raise StructureError("inconsistent price ratios in block")
    if any(c == -1 for c in comp_item):
        raise StructureError("an item is tied to no agent")
    if any(c == -1 for c in comp_agent):
        raise StructureError("an agent is tied to no block")
    prices = [None] * m
    for comp in range(n_comp):
        total_e = sum(budgets[i] for i in range(n) if comp_agent[i] == comp)
        total_rho = sum(rho[j] for j in range(m) if comp_item[j] == comp)
        scale = total_e / total_rho
        for j in range(m):
            if comp_item[j] == comp:
                prices[j] = rho[j] * scale
    return prices


def _transport(budgets, prices, edges, zero, feas_tol):
    """Route budgets to item revenues along tied edges (max-flow).

    Node layout: source, agents, items, sink.  Edmonds-Karp with
    deterministic neighbor order; returns the agent-to-item money matrix or
    raises StructureError when the structure cannot clear the market.
    """
    n = len(budgets)
    m = len(prices)
    total = sum(budgets)
    inf = total + total
    size = n + m + 2
    src, snk = 0, size - 1
    cap = [[zero] * size for _ in range(size)]
    for i in range(n):
        cap[src][1 + i] = budgets[i]
        for j in edges[i]:
            cap[1 + i][1 + n + j] = inf
    for j in range(m):
        cap[1 + n + j][snk] = prices[j]
    flow = zero
    while True:
        prev = [-1] * size
        prev[src] = src
        queue = [src]
        while queue:
            node = queue.pop(0)
            if node == snk:
                break
            for nxt in range(size):
                if prev[nxt] == -1 and cap[node][nxt] > feas_tol:
                    prev[nxt] = node
                    queue.append(nxt)
        if prev[snk] == -1:
            break
        bottleneck = None
        node = snk
        while node != src:
            p = prev[node]
            if bottleneck is None or cap[p][node] < bottleneck:
                bottleneck = cap[p][node]
            node = p
        node = snk
        while node != src:
            p = prev[node]
            cap[p][node] = cap[p][node] - bottleneck
            cap[node][p] = cap[node][p] + bottleneck
            node = p
        flow = flow + bottleneck
    if abs(total - flow) > feas_tol * max(1, abs(total)) + feas_tol:
        raise StructureError(f"structure clears only {flow} of {total}")
    money = [[cap[1 + n + j][1 + i] for j in range(m)] for i in range(n)]
    return money


def _polish(instance: OfflineInstance, prices_float, tol: float) -> MarketSolution | None:
    """Try the tau ladder; return the first candidate that certifies."""
    values_float = to_float(instance.values)
    exact = instance.exact
    values = instance.values
    budgets = instance.budgets
    zero = Fraction(0) if exact else 0.0
    feas_tol = Fraction(0) if exact else 1e-12
    for tau in _TAU_LADDER:
        edges = _mbb_edges(values_float, np.asarray(prices_float, dtype=np.float64), tau)
        try:
            prices = _structure_prices(values, budgets, edges, zero, feas_tol)
            money = _transport(budgets, prices, edges, zero, feas_tol)
        except StructureError:
            continue
        shares = [[money[i][j] / prices[j] for j in range(instance.m)] for i in range(instance.n)]
        try:
            candidate = MarketSolution.from_parts(instance, shares, prices)
        except InstanceError:
            continue
        if check_kkt(candidate, instance, tol).passed:
            return candidate
    return None


# ---------------------------------------------------------------------------
# Solver entry points
# ---------------------------------------------------------------------------


def solve_eg(instance: OfflineInstance, tol: float = DEFAULT_TOL,
             max_iters: int = DEFAULT_MAX_ITERS, *, polish: bool = True) -> MarketSolution:
    """Solve the budgeted market program to a certified solution.

    Float instances run proportional response until the certificate passes
    at ``tol`` (with the structure polish as accelerator); exact-rational
    instances return an exactly certified solution with zero residuals.
    Non-convergence raises SolverError carrying the best iterate.
    """
    if not 0 < tol <= 1e-3:
        raise InstanceError("tol must lie in (0, 1e-3]")
    if instance.exact:
        return solve_eg_exact(instance, max_iters=max_iters)
    V = np.ascontiguousarray(instance.values, dtype=np.float64)
    e = np.ascontiguousarray(instance.budgets, dtype=np.float64)
    bids = np.ascontiguousarray(e[:, None] * V / V.sum(axis=1)[:, None])
    best = None
    best_res = np.inf
    chunk = 50
    done = 0
    while done < max_iters:
        step = min(chunk, max_iters - done)
        _backend.pr_run(V, e, bids, step)
        done += step
        chunk = min(chunk * 2, 2000)
        prices = bids.sum(axis=0)
        shares = bids / prices
        clearing, bound, tight = _residuals(V, shares, prices, e, tol)
        res = max(clearing, bound, tight)
        if res < best_res:
            best_res = res
            best = (shares.copy(), prices.copy())
        if polish and res <= _POLISH_TRIGGER:
            # Prefer the polished point even when the raw iterate already
            # certifies: the flow-based re-solve puts exact zeros off the
            # tied-item support, which the allocation surgery relies on.
            candidate = _polish(instance, prices, tol)
            if candidate is not None:
                return candidate
        if res <= tol:
            return MarketSolution.from_parts(instance, shares, prices)
    solution = MarketSolution.from_parts(instance, best[0], best[1], validate=False)
    report = check_kkt(solution, instance, tol)
    raise SolverError(
        f"no certificate after {max_iters} iterations (residual {best_res:.3e})",
        solution=solution,
        report=report,
    )


def solve_eg_exact(instance: OfflineInstance, max_iters: int = DEFAULT_MAX_ITERS) -> MarketSolution:
    """Exact-rational solve: float pre-solve, then exact re-price and re-route.

    The returned solution satisfies the certificate with zero residuals
    (checked exactly).  Raises SolverError when no ladder rung verifies.
    """
    if not instance.exact:
        raise InstanceError("solve_eg_exact requires an exact-rational instance")
    float_inst = instance.to_float()
    try:
        hint = solve_eg(float_inst, tol=1e-8, max_iters=max_iters)
    except SolverError as err:
        if err.solution is None:
            raise
        hint = err.solution
    candidate = _polish(instance, to_float(hint.prices), tol=0)
    if candidate is None:
        raise SolverError("exact re-solve failed on every structure guess")
    return candidate
