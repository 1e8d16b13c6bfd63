"""Fairness and efficiency verdicts for integral and fractional allocations.

Envy is pairwise and one-sided: agent i's envy toward j is the positive part
of v_i(A_j) - v_i(A_i).  EF1 asks that the envy not exceed the single best
item in the envied bundle (an empty bundle therefore permits no envy at
all).  Pareto verdicts come in two modes: exhaustive search over all
assignments (with domination pruning, capped), and a certificate that rides
on the guided policies' support-respect property: if every item went to an
agent holding a positive fractional share of its type in an efficient
fractional allocation, the integral outcome is efficient, full stop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fairdiv.cisef import CliquePartition, build_indifference_graph
from fairdiv.core import (
    InstanceError,
    IntegralAllocation,
    MarketSolution,
    OfflineInstance,
    OnlineRun,
    to_float,
)

BRUTE_CAP = 1_000_000
_GE_SLACK = 1e-12
_STRICT_MARGIN = 1e-9


@dataclass(frozen=True)
class EnvyReport:
    """Pairwise envy matrix plus the envy-freeness and EF1 verdicts."""

    matrix: np.ndarray
    max_envy: float
    ef: bool
    ef1: bool
    ef1_pairs: np.ndarray


def envy_report(allocation: IntegralAllocation, values: np.ndarray | None = None,
                tol: float = 0.0) -> EnvyReport:
    """Evaluate envy and EF1 for an integral allocation.

    ``values`` defaults to the allocation's recorded round values (an
    n-by-T grid).  A pair is EF1 when its envy is at most the best single
    item in the envied bundle; envy toward an empty bundle must be zero.
    """
    values = allocation.round_values if values is None else np.asarray(values)
    n = allocation.n
    bundle_vals = np.zeros((n, n))
    best_item = np.zeros((n, n))
    for j, bundle in enumerate(allocation.bundles):
        if bundle:
            cols = values[:, list(bundle)]
            bundle_vals[:, j] = cols.sum(axis=1)
            best_item[:, j] = cols.max(axis=1)
    own = np.diag(bundle_vals)
    matrix = np.maximum(bundle_vals - own[:, None], 0.0)
    np.fill_diagonal(matrix, 0.0)
    ef1_pairs = matrix <= best_item + tol
    np.fill_diagonal(ef1_pairs, True)
    max_envy = float(matrix.max()) if n else 0.0
    return EnvyReport(
        matrix=matrix,
        max_envy=max_envy,
        ef=bool(max_envy <= tol),
        ef1=bool(ef1_pairs.all()),
        ef1_pairs=ef1_pairs,
    )


@dataclass(frozen=True)
class PoVerdict:
    status: str  # "efficient" | "dominated" | "unknown"
    dominating: tuple[int, ...] | None = None


def _search_assignment(values: np.ndarray, floors: np.ndarray, total_needed: float,
                       cap: int) -> tuple[int, ...] | None:
    """Depth-first search for an assignment with every agent's utility at
    least its floor and total utility at least ``total_needed``.

    Prunes a branch as soon as some agent can no longer reach its floor or
    the total cannot be reached (suffix sums bound what is still winnable).
    """
    n, T = values.shape
    if n ** T > cap:
        raise InstanceError(
            f"{n}**{T} assignments exceed the cap {cap}; use certificate mode"
        )
    suffix = np.zeros((n, T + 1))
    suffix[:, :T] = np.cumsum(values[:, ::-1], axis=1)[:, ::-1]
    best_total_suffix = np.concatenate([
        np.cumsum(values.max(axis=0)[::-1])[::-1], [0.0]
    ])
    current = np.zeros(n)
    choice = [0] * T

    def rec(t: int) -> bool:
        if t == T:
            return bool(np.all(current >= floors) and current.sum() >= total_needed)
        if np.any(current + suffix[:, t] < floors):
            return False
        if current.sum() + best_total_suffix[t] < total_needed:
            return False
        for agent in range(n):
            current[agent] += values[agent, t]
            choice[t] = agent
            if rec(t + 1):
                return True
            current[agent] -= values[agent, t]
        return False

    return tuple(choice) if rec(0) else None


def is_pareto_efficient_integral(allocation: IntegralAllocation,
                                 values: np.ndarray | None = None,
                                 mode: str = "brute", *,
                                 xstar: np.ndarray | None = None,
                                 arrivals: np.ndarray | None = None,
                                 share_floor: float = 1e-12,
                                 cap: int = BRUTE_CAP) -> PoVerdict:
    """Pareto verdict for an integral allocation.

    ``brute`` enumerates assignments (depth-first, domination-pruned) and
    reports a dominating one if any exists.  ``certificate`` checks the
    support-respect condition against an efficient fractional allocation
    ``xstar`` over types (with ``arrivals`` giving each round's type):
    every item must have gone to an agent with positive share of its type.
    Rounds worth zero to everyone are exempt.  The certificate answers
    "efficient" or "unknown", never "dominated".
    """
    values = allocation.round_values if values is None else np.asarray(values)
    n, T = values.shape
    if mode == "certificate":
        if xstar is None or arrivals is None:
            raise InstanceError("certificate mode needs xstar and arrivals")
        for agent, bundle in enumerate(allocation.bundles):
            for t in bundle:
                if values[:, t].max() <= 0:
                    continue
                if xstar[agent, arrivals[t]] <= share_floor:
                    return PoVerdict("unknown")
        return PoVerdict("efficient")
    if mode != "brute":
        raise InstanceError(f"unknown mode {mode!r}")
    u = np.array([
        sum(values[i, t] for t in bundle) for i, bundle in enumerate(allocation.bundles)
    ])
    dominating = _search_assignment(
        values, u - _GE_SLACK, u.sum() + _STRICT_MARGIN, cap
    )
    if dominating is None:
        return PoVerdict("efficient")
    return PoVerdict("dominated", dominating)


def alpha_pareto_improvable(utilities, values: np.ndarray, alpha: float,
                            mode: str = "brute", cap: int = BRUTE_CAP) -> bool:
    """True iff some assignment makes every agent strictly better off than
    1/alpha times its current utility."""
    if mode != "brute":
        raise InstanceError(f"unknown mode {mode!r}")
    values = np.asarray(values)
    u = np.asarray(utilities, dtype=np.float64)
    floors = u / alpha + _STRICT_MARGIN
    return _search_assignment(values, floors, 0.0, cap) is not None


@dataclass(frozen=True)
class CisefAudit:
    """Outcome of the four-condition audit plus envy-freeness."""

    passed: bool
    envy_free: bool
    cliques_ok: bool
    rows_identical: bool
    scaled_values_ok: bool
    violations: tuple[str, ...]


def is_cisef(solution: MarketSolution, instance: OfflineInstance,
             partition: CliquePartition, eps: float = 1e-6) -> CisefAudit:
    """Audit a solution against the clique-identical strong-envy-freeness
    conditions: the partition's parts are cliques of the indifference graph
    with no edges between parts, rows inside a part are identical, and the
    members of a part value every allocated item identically once scaled by
    their bang-per-buck ratios."""
    violations = []
    x = solution.shares
    n, m = instance.n, instance.m
    values = instance.values

    def val(i, row):
        return sum(values[i, k] * row[k] for k in range(m))

    envy_free = True
    for i in range(n):
        u_i = val(i, x[i])
        for j in range(n):
            if i != j and val(i, x[j]) - u_i > eps * max(u_i, 1e-12):
                envy_free = False
                violations.append(f"agent {i} envies agent {j}")

    graph = build_indifference_graph(solution, instance, eps_ind=eps)
    clique_of = {}
    for idx, clique in enumerate(partition.cliques):
        for v in clique:
            clique_of[v] = idx
    cliques_ok = True
    for clique in partition.cliques:
        for a in clique:
            for b in clique:
                if a != b and (a, b) not in graph.edges:
                    cliques_ok = False
                    violations.append(f"missing intra-clique edge ({a},{b})")
    for (a, b) in sorted(graph.edges):
        if clique_of[a] != clique_of[b]:
            cliques_ok = False
            violations.append(f"inter-clique edge ({a},{b})")

    rows_identical = True
    for clique in partition.cliques:
        lead = clique[0]
        for other in clique[1:]:
            if any(abs(x[lead, k] - x[other, k]) > 1e-9 for k in range(m)):
                rows_identical = False
                violations.append(f"rows differ inside clique {clique}")
                break

    scaled_values_ok = True
    r = solution.mbb
    for clique in partition.cliques:
        for a in clique:
            for b in clique:
                if a >= b:
                    continue
                for k in range(m):
                    if x[a, k] <= 1e-12 and x[b, k] <= 1e-12:
                        continue
                    lhs = values[a, k] * r[b]
                    rhs = values[b, k] * r[a]
                    if abs(lhs - rhs) > eps * max(abs(lhs), abs(rhs), 1e-12):
                        scaled_values_ok = False
                        violations.append(
                            f"clique {clique}: item {k} not ratio-scaled between {a},{b}"
                        )
    passed = envy_free and cliques_ok and rows_identical and scaled_values_ok
    return CisefAudit(passed, envy_free, cliques_ok, rows_identical,
                      scaled_values_ok, tuple(violations))


def envy_report_rows(report: EnvyReport) -> list[dict]:
    """Flatten an envy report to one row per ordered pair (CSV/JSON ready)."""
    n = report.matrix.shape[0]
    return [
        {"i": i, "j": j, "envy": float(report.matrix[i, j]),
         "ef1": bool(report.ef1_pairs[i, j])}
        for i in range(n) for j in range(n) if i != j
    ]


@dataclass(frozen=True)
class CheckpointSummary:
    t: int
    mean_max_envy: float
    median_max_envy: float
    q90_max_envy: float
    worst_max_envy: float
    p_envy_free: float
    ratio_sqrt_t_log_t: float
    mean_over_t: float

    def to_row(self) -> dict:
        return dict(self.__dict__)


def envy_trace_summary(runs: list[OnlineRun], tol: float = 0.0) -> list[CheckpointSummary]:
    """Aggregate per-checkpoint envy statistics across runs of one setup.

    Reports the mean/median/90th-quantile/worst maximum envy, the fraction
    of runs envy-free at the checkpoint, and the mean scaled by
    sqrt(t log t) and by t.  Runs must share their checkpoint grid.
    """
    if not runs:
        raise InstanceError("no runs to summarize")
    cps = runs[0].checkpoints
    if any(r.checkpoints != cps for r in runs):
        raise InstanceError("runs disagree on checkpoints")
    if any(r.envy_trace is None for r in runs):
        raise InstanceError("runs carry no envy traces")
    out = []
    for k, t in enumerate(cps):
        maxima = np.array([float(r.envy_trace[k].max()) for r in runs])
        scale = math.sqrt(t * math.log(t)) if t > 1 else 1.0
        out.append(CheckpointSummary(
            t=t,
            mean_max_envy=float(maxima.mean()),
            median_max_envy=float(np.quantile(maxima, 0.5)),
            q90_max_envy=float(np.quantile(maxima, 0.9)),
            worst_max_envy=float(maxima.max()),
            p_envy_free=float((maxima <= tol).mean()),
            ratio_sqrt_t_log_t=float(maxima.mean() / scale),
            mean_over_t=float(maxima.mean() / t),
        ))
    return out
