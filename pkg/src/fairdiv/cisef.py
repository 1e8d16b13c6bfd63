"""Indifference-graph surgery: from an equal-budget equilibrium to a
clique-identical strongly envy-free (CISEF) allocation.

Starting from the equal-budget market solution, the surgery removes
indifference edges one at a time while keeping the triple (allocation,
prices, budgets) a certified equilibrium and never violating envy-freeness
or adding edges.  Three moves are alternated:

* cycle elimination — shift value around a non-clique cycle so one edge
  breaks, with total items and all self-values preserved;
* merge and re-balance — group mutually indifferent agents into cliques and
  give every member the clique's average row;
* budget shift — view cliques as vertices of a DAG, route a small budget
  flow from a source clique to the reachable sink cliques, moving items
  opposite to the edges; budgets then separate and every edge from a
  richer agent to a poorer one dies.

All transfers follow the optimal-transfer rule (increased shares are only on
items attaining the recipient's bang-per-buck ratio), which is what keeps
the certificate valid with shifted budgets.

The extension move for independent-agent product instances swaps distinct
high/low-signature items between a clique and outside holders, breaking the
clique into singletons (strong envy-freeness).

Float arithmetic note: edges are classified with a relative tolerance and
hysteresis — once a pair is classified non-indifferent it is never re-added.
Operations whose exact-arithmetic effect provably removes an edge ban that
edge outright; the trace flags the (rare) case where the float value still
sat inside the indifference band.  In exact-rational mode every tolerance is
zero and the same code runs bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from fairdiv.core import (
    FractionalAllocation,
    InstanceError,
    MarketSolution,
    OfflineInstance,
    as_grid,
    as_vector,
)
from fairdiv.market import check_kkt, solve_eg


class SurgeryError(RuntimeError):
    """An operation's postcondition failed; carries diagnostic context."""


class TransferError(ValueError):
    """A proposed transfer violates the optimal-transfer invariants."""


@dataclass(frozen=True)
class Tolerances:
    """Tolerance pack for the surgery; ``exact()`` zeroes everything."""

    ind_rel: float = 1e-7      # relative indifference band
    ind_floor: float = 1e-12   # magnitude floor for the band
    mbb_rel: float = 1e-7      # item-level bang-per-buck slack
    share_floor: float = 1e-9  # "positively held" threshold
    kkt: float = 1e-7          # working certificate tolerance
    column_tol: float = 1e-12  # transfer column-sum slack

    @classmethod
    def exact(cls) -> "Tolerances":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class IndifferenceGraph:
    """Directed graph over agents; edge (i, j) means i values j's bundle
    exactly as much as her own (within the band, minus banned pairs)."""

    n: int
    edges: frozenset
    banned: frozenset = frozenset()
    diagnostics: tuple = ()

    def successors(self, i):
        return sorted(j for (a, j) in self.edges if a == i)

    def restricted(self, agents) -> frozenset:
        s = set(agents)
        return frozenset((i, j) for (i, j) in self.edges if i in s and j in s)

    def components(self) -> list[tuple[int, ...]]:
        """Weakly connected components, sorted by least member."""
        parent = list(range(self.n))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for i, j in self.edges:
            parent[find(i)] = find(j)
        groups: dict[int, list[int]] = {}
        for v in range(self.n):
            groups.setdefault(find(v), []).append(v)
        return sorted((tuple(sorted(g)) for g in groups.values()), key=lambda g: g[0])


@dataclass(frozen=True)
class Transfer:
    """A feasibility-preserving reallocation; ``budget_deltas`` is the money
    value each agent gains (positive) or gives up (negative)."""

    deltas: np.ndarray
    budget_deltas: np.ndarray

    @classmethod
    def from_deltas(cls, deltas, prices, exact: bool = False) -> "Transfer":
        grid = as_grid(deltas, exact)
        n, m = grid.shape
        bd = [sum(prices[k] * grid[i, k] for k in range(m)) for i in range(n)]
        return cls(grid, as_vector(bd, exact))


@dataclass(frozen=True)
class CliquePartition:
    """Disjoint agent sets covering all agents; within a clique all rows of
    the accompanying allocation are identical."""

    cliques: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        seen = sorted(a for c in self.cliques for a in c)
        if seen != list(range(len(seen))):
            raise InstanceError("cliques must partition the agents")

    @property
    def n(self) -> int:
        return sum(len(c) for c in self.cliques)

    def clique_of(self, agent: int) -> int:
        for idx, c in enumerate(self.cliques):
            if agent in c:
                return idx
        raise KeyError(agent)


# ---------------------------------------------------------------------------
# Working state
# ---------------------------------------------------------------------------


class _State:
    """Mutable working copy of (x, p, e) plus edge bookkeeping and trace."""

    def __init__(self, solution: MarketSolution, instance: OfflineInstance,
                 tols: Tolerances, banned=frozenset(), trace=None):
        self.inst = instance
        self.exact = instance.exact
        self.n = instance.n
        self.m = instance.m
        self.V = [[instance.values[i, j] for j in range(self.m)] for i in range(self.n)]
        self.x = [[solution.shares[i, j] for j in range(self.m)] for i in range(self.n)]
        self.p = [solution.prices[j] for j in range(self.m)]
        self.e = [solution.budgets[i] for i in range(self.n)]
        self.tols = tols
        self.banned: set = set(banned)
        self.trace = trace if trace is not None else []
        self.eliminations = 0
        self.edges: set = set()
        self.rebuild()

    # -- values ------------------------------------------------------------

    def value(self, i: int, row) -> object:
        return sum(self.V[i][k] * row[k] for k in range(self.m))

    def u(self, i: int):
        return self.value(i, self.x[i])

    def r(self, i: int):
        return self.u(i) / self.e[i]

    def ratio(self, i: int, k: int):
        return self.V[i][k] / self.p[k]

    def band(self, i: int):
        u = self.u(i)
        return self.tols.ind_rel * max(u, self.tols.ind_floor)

    def indifferent(self, i: int, j: int) -> bool:
        return abs(self.u(i) - self.value(i, self.x[j])) <= self.band(i)

    def holdings(self, j: int) -> list[int]:
        return [k for k in range(self.m) if self.x[j][k] > self.tols.share_floor]

    def is_mbb(self, i: int, k: int) -> bool:
        r = self.r(i)
        if self.tols.mbb_rel:  # keep exact ratios exact: no float scaling
            r = r * (1 - self.tols.mbb_rel)
        return self.ratio(i, k) >= r

    def max_ratio(self):
        return max(self.ratio(i, k) for i in range(self.n) for k in range(self.m))

    # -- graph -------------------------------------------------------------

    def rebuild(self) -> set:
        """Recompute edges; hysteresis: non-indifferent pairs stay banned."""
        removed = set()
        edges = set()
        for i in range(self.n):
            for j in range(self.n):
                if i == j or (i, j) in self.banned:
                    continue
                if self.indifferent(i, j):
                    edges.add((i, j))
                else:
                    self.banned.add((i, j))
                    if (i, j) in self.edges:
                        removed.add((i, j))
        self.eliminations += len(removed)
        self.edges = edges
        return removed

    def ban(self, i: int, j: int, op: str):
        """Drop an edge whose exact-arithmetic elimination is guaranteed."""
        forced = (i, j) in self.edges and self.indifferent(i, j)
        self.banned.add((i, j))
        if (i, j) in self.edges:
            self.edges.discard((i, j))
            self.eliminations += 1
        if forced:
            self.trace.append({"op": op, "event": "hysteresis_forced", "edge": [i, j]})

    def graph(self) -> IndifferenceGraph:
        return IndifferenceGraph(self.n, frozenset(self.edges), frozenset(self.banned))

    def check_envy_free(self, op: str):
        for i in range(self.n):
            u = self.u(i)
            bound = self.band(i)
            for j in range(self.n):
                if i == j:
                    continue
                if self.value(i, self.x[j]) - u > bound:
                    raise SurgeryError(
                        f"{op} broke envy-freeness: agent {i} envies {j}"
                    )

    def check_kkt(self, op: str):
        report = check_kkt(self.solution(validate=False), self.inst,
                           self.tols.kkt if not self.exact else 0)
        if not report.passed:
            raise SurgeryError(f"{op} broke the certificate: {report}")

    def solution(self, validate: bool = True) -> MarketSolution:
        return MarketSolution.from_parts(self.inst, self.x, self.p, self.e,
                                         validate=validate)

    # -- transfers ---------------------------------------------------------

    def take(self, taker: int, giver: int, amount, avail, deltas,
             items=None) -> None:
        """Move ``amount`` worth of the giver's items to the taker.

        Items are consumed in ascending index from ``avail`` (the giver's
        remaining original shares); only items attaining the taker's ratio
        are eligible.  Raises when the giver cannot cover the amount.
        """
        remaining = amount
        pool = items if items is not None else range(self.m)
        for k in pool:
            if remaining <= 0:
                break
            if avail[giver][k] <= self.tols.share_floor:
                continue
            if not self.is_mbb(taker, k):
                continue
            qty = remaining / self.p[k]
            if qty > avail[giver][k]:
                qty = avail[giver][k]
            avail[giver][k] = avail[giver][k] - qty
            deltas[giver][k] = deltas[giver][k] - qty
            deltas[taker][k] = deltas[taker][k] + qty
            remaining = remaining - qty * self.p[k]
        if remaining > (0 if self.exact else amount * 1e-9):
            raise SurgeryError(
                f"agent {giver} cannot cover {amount} for agent {taker}"
            )

    def apply_deltas(self, deltas) -> None:
        for i in range(self.n):
            for k in range(self.m):
                v = self.x[i][k] + deltas[i][k]
                if v < 0:
                    if v < -1e-12:
                        raise SurgeryError(f"share x[{i}][{k}] driven to {v}")
                    v = 0 * v
                if v > 1:
                    if v > 1 + 1e-12:
                        raise SurgeryError(f"share x[{i}][{k}] driven to {v}")
                    v = v / v
                self.x[i][k] = v

    def zero_deltas(self):
        zero = Fraction(0) if self.exact else 0.0
        return [[zero] * self.m for _ in range(self.n)]


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def build_indifference_graph(solution: MarketSolution, instance: OfflineInstance,
                             eps_ind: float = 1e-7, *, floor: float = 1e-12,
                             banned=frozenset()) -> IndifferenceGraph:
    """Classify every ordered agent pair by bundle-value indifference.

    With equal budgets each edge is cross-checked at the item level: every
    item the target holds must attain the source's bang-per-buck ratio.
    Discrepancies are reported in ``diagnostics`` rather than raised, since
    they indicate tolerance mismatches, not wrong answers.
    """
    tols = Tolerances(ind_rel=eps_ind, ind_floor=floor) if not instance.exact \
        else Tolerances.exact()
    st = _State(solution, instance, tols, banned=banned)
    diagnostics = []
    e0 = st.e[0]
    equal_budgets = all(abs(e - e0) <= 1e-12 * abs(e0) for e in st.e)
    if equal_budgets:
        for (i, j) in sorted(st.edges):
            bad = [k for k in st.holdings(j) if not st.is_mbb(i, k)]
            if bad:
                diagnostics.append(
                    f"edge ({i},{j}) holds but items {bad} miss agent {i}'s ratio"
                )
    return IndifferenceGraph(st.n, frozenset(st.edges), frozenset(st.banned) - frozenset(st.edges),
                             tuple(diagnostics))


def apply_transfer(solution: MarketSolution, instance: OfflineInstance,
                   transfer: Transfer, *, tols: Tolerances | None = None) -> MarketSolution:
    """Apply an optimal transfer, shifting budgets by the moved money.

    Validates, before touching anything: per-item conservation, feasibility
    of the shifted shares, and the bang-per-buck condition on every
    increased share.  The result is re-certified at the working tolerance.
    """
    tols = tols or (Tolerances.exact() if instance.exact else Tolerances())
    st = _State(solution, instance, tols)
    d = transfer.deltas
    scale = max((abs(d[i, k]) for i in range(st.n) for k in range(st.m)), default=0)
    for k in range(st.m):
        col = sum(d[i, k] for i in range(st.n))
        if abs(col) > tols.column_tol * max(1, scale):
            raise TransferError(f"item {k} not conserved: column sum {col}")
    for i in range(st.n):
        for k in range(st.m):
            v = st.x[i][k] + d[i, k]
            if v < -1e-12 or v > 1 + 1e-12:
                raise TransferError(f"infeasible share x[{i}][{k}] = {v}")
            if d[i, k] > 0 and not st.is_mbb(i, k):
                raise TransferError(
                    f"agent {i} gains item {k} below its bang-per-buck ratio"
                )
    st.apply_deltas([[d[i, k] for k in range(st.m)] for i in range(st.n)])
    for i in range(st.n):
        st.e[i] = st.e[i] + transfer.budget_deltas[i]
    st.check_kkt("apply_transfer")
    return st.solution()


def choose_step_size(solution: MarketSolution, graph: IndifferenceGraph,
                     mode: str, cycle_or_component, instance: OfflineInstance,
                     *, tols: Tolerances | None = None,
                     feasibility_cap=None):
    """Half of the safe transfer budget for a move, capped by feasibility.

    The bound keeps every strict preference strict: no agent's view of any
    touched bundle may move by more than the smallest strict gap.  Cycle
    elimination perturbs only cycle bundles (denominator c, the global
    maximum bang-per-buck); budget shifts also move the owners' own values
    (denominator 2c).  Pairs inside the indifference band are not gaps.
    With no strict gaps at all, the feasibility cap alone is returned.
    """
    tols = tols or (Tolerances.exact() if instance.exact else Tolerances())
    st = _State(solution, instance, tols, banned=graph.banned)
    bound = _c4_bound(st, mode, cycle_or_component)
    caps = [] if feasibility_cap is None else [feasibility_cap]
    if mode == "budget_shift":
        caps.append(min(st.e[i] for i in cycle_or_component))
    if bound is not None:
        caps.append(bound)
    if not caps:
        raise SurgeryError("no step bound and no feasibility cap")
    return min(caps)


def _c4_bound(st: _State, mode: str, scope):
    """Half the smallest strict-gap bound, or None when every pair is tied."""
    c = st.max_ratio()
    if c <= 0:
        raise SurgeryError("no positive bang-per-buck ratio")
    denom = c if mode == "operation1" else 2 * c
    gaps = []
    scope_set = set(scope)
    for i in range(st.n):
        u = st.u(i)
        band = st.band(i)
        for j in range(st.n):
            if i == j:
                continue
            if mode == "operation1" and j not in scope_set:
                continue
            if mode != "operation1" and i not in scope_set and j not in scope_set:
                continue
            gap = u - st.value(i, st.x[j])
            if gap > band:
                gaps.append(gap)
    if not gaps:
        return None
    half = Fraction(1, 2) if st.exact else 0.5
    return half * min(gaps) / denom


# ---------------------------------------------------------------------------
# Operation 1: cycle elimination
# ---------------------------------------------------------------------------


def _cycles_by_length(edges: set, nodes):
    """Yield simple directed cycles in strictly increasing length.

    Cycles are emitted as vertex tuples with the least vertex first;
    enumeration is lexicographic, so the scan order is deterministic.
    Two-cycles are skipped: both edges present makes them cliques already.
    """
    nodes = sorted(nodes)
    adj = {v: sorted(j for (i, j) in edges if i == v and j in nodes) for v in nodes}
    for length in range(3, len(nodes) + 1):
        for start in nodes:
            stack = [(start, (start,))]
            while stack:
                v, path = stack.pop()
                if len(path) == length:
                    if start in adj[v]:
                        yield path
                    continue
                for w in reversed(adj[v]):
                    if w > start and w not in path:
                        stack.append((w, path + (w,)))


def _is_clique(edges: set, vertices) -> bool:
    return all((a, b) in edges for a in vertices for b in vertices if a != b)


def _op1_step(st: _State, component) -> bool:
    """Eliminate one edge of the smallest non-clique cycle, if any."""
    edges = {e for e in st.edges if e[0] in set(component) and e[1] in set(component)}
    for cycle in _cycles_by_length(edges, component):
        if _is_clique(edges, cycle):
            continue
        k = len(cycle)
        pos = next(
            (t for t in range(k) if (cycle[t - 1], cycle[(t + 1) % k]) not in edges),
            None,
        )
        if pos is None:
            raise SurgeryError(f"non-clique cycle {cycle} has every chord")
        mid = cycle[pos]              # takes only the special item
        prev = cycle[pos - 1]         # loses its edge toward mid
        succ = cycle[(pos + 1) % k]
        # The special item: held by mid's successor, strictly below prev's
        # ratio.  Take the one with the most slack, for float robustness.
        r_prev = st.r(prev)
        if st.tols.mbb_rel:
            r_prev = r_prev * (1 - st.tols.mbb_rel)
        candidates = [(st.ratio(prev, kk), kk) for kk in st.holdings(succ)]
        ratio_l, item_l = min(candidates)
        if not ratio_l < r_prev:
            raise SurgeryError(
                f"no item of agent {succ} sits below agent {prev}'s ratio"
            )
        cap = st.x[succ][item_l] * st.p[item_l]
        b = choose_step_size(st.solution(validate=False), st.graph(), "operation1",
                             cycle, st.inst, tols=st.tols, feasibility_cap=cap)
        deltas = st.zero_deltas()
        avail = [list(row) for row in st.x]
        for t in range(k):
            taker, giver = cycle[t], cycle[(t + 1) % k]
            if taker == mid:
                st.take(taker, giver, b, avail, deltas, items=[item_l])
            else:
                st.take(taker, giver, b, avail, deltas)
        st.apply_deltas(deltas)
        st.ban(prev, mid, "operation1")
        st.rebuild()
        st.check_envy_free("operation1")
        st.check_kkt("operation1")
        st.trace.append({
            "op": "operation1", "cycle": list(cycle), "edge_removed": [prev, mid],
            "item": int(item_l), "b": float(b),
        })
        return True
    return False


def operation1_eliminate_cycles(solution: MarketSolution, graph: IndifferenceGraph,
                                instance: OfflineInstance, *,
                                component=None, tols: Tolerances | None = None,
                                trace=None):
    """Break every cycle whose vertex set is not a clique.

    Processes cycles in increasing length; each pass removes at least one
    edge, keeps every agent's own value unchanged, preserves envy-freeness
    and creates no edges.  Returns the updated (solution, graph).
    """
    tols = tols or (Tolerances.exact() if instance.exact else Tolerances())
    st = _State(solution, instance, tols, banned=graph.banned, trace=trace)
    component = tuple(range(instance.n)) if component is None else component
    while _op1_step(st, component):
        pass
    return st.solution(), st.graph()


# ---------------------------------------------------------------------------
# Operation 2: merge cliques and re-balance
# ---------------------------------------------------------------------------


def _merge_cliques(edges: set, component) -> list[tuple[int, ...]]:
    """Greedy deterministic clique merge: lowest clique absorbs the lowest
    compatible clique until no union is a clique."""
    cliques = [[v] for v in sorted(component)]
    merged = True
    while merged:
        merged = False
        for a in range(len(cliques)):
            for b in range(a + 1, len(cliques)):
                union = cliques[a] + cliques[b]
                if _is_clique(edges, union):
                    cliques[a] = sorted(union)
                    del cliques[b]
                    merged = True
                    break
            if merged:
                break
    return [tuple(c) for c in cliques]


def _rebalance(st: _State, clique) -> bool:
    """Give every clique member the average row; True if rows changed."""
    members = list(clique)
    size = len(members)
    if size == 1:
        return False
    rows = [st.x[i] for i in members]
    if all(rows[0][k] == rows[q][k] for q in range(1, size) for k in range(st.m)):
        return False
    inv = Fraction(1, size) if st.exact else 1.0 / size
    target = [sum(r[k] for r in rows) * inv for k in range(st.m)]
    for k in range(st.m):
        if target[k] <= st.tols.share_floor:
            continue
        for i in members:
            if target[k] > st.x[i][k] and not st.is_mbb(i, k):
                raise SurgeryError(
                    f"re-balance gives agent {i} item {k} below its ratio"
                )
    for i in members:
        st.x[i] = list(target)
    return True


def _op2(st: _State, component):
    """Merge cliques, re-balance, and report whether edges were removed.

    Stops at the first re-balance that removes an edge (an outside agent
    losing indifference into the merged clique); the caller then restarts
    cycle elimination.
    """
    edges = {e for e in st.edges if e[0] in set(component) and e[1] in set(component)}
    cliques = _merge_cliques(edges, component)
    for clique in cliques:
        if _rebalance(st, clique):
            removed = st.rebuild()
            st.check_envy_free("operation2")
            st.check_kkt("operation2")
            st.trace.append({
                "op": "operation2", "clique": list(clique),
                "edges_removed": sorted(list(e) for e in removed),
            })
            if removed:
                return cliques, True
    return cliques, False


def operation2_merge_rebalance(solution: MarketSolution, graph: IndifferenceGraph,
                               instance: OfflineInstance, *, component=None,
                               tols: Tolerances | None = None, trace=None):
    """Partition a clique-cycle component into cliques with identical rows."""
    tols = tols or (Tolerances.exact() if instance.exact else Tolerances())
    st = _State(solution, instance, tols, banned=graph.banned, trace=trace)
    component = tuple(range(instance.n)) if component is None else tuple(sorted(component))
    cliques, _ = _op2(st, component)
    outside = [(v,) for v in range(instance.n) if v not in set(component)]
    partition = CliquePartition(tuple(sorted(list(cliques) + outside)))
    return st.solution(), st.graph(), partition


def _lemma5(st: _State, component) -> list[tuple[int, ...]]:
    """Alternate cycle elimination and merge/re-balance to a fixed point."""
    guard = st.n * st.n + 2
    for _ in range(guard):
        while _op1_step(st, component):
            pass
        cliques, removed = _op2(st, component)
        if not removed:
            return cliques
    raise SurgeryError("cycle-elimination loop failed to stabilize")


# ---------------------------------------------------------------------------
# Budget shifts (clique DAG flow)
# ---------------------------------------------------------------------------


def _condensation(edges: set, cliques):
    idx_of = {}
    for ci, c in enumerate(cliques):
        for v in c:
            idx_of[v] = ci
    cond = set()
    for (i, j) in edges:
        if i in idx_of and j in idx_of and idx_of[i] != idx_of[j]:
            cond.add((idx_of[i], idx_of[j]))
    return idx_of, cond


def _is_dag(n_vertices: int, edges: set) -> bool:
    indeg = [0] * n_vertices
    for (_, b) in edges:
        indeg[b] += 1
    queue = [v for v in range(n_vertices) if indeg[v] == 0]
    seen = 0
    while queue:
        v = queue.pop()
        seen += 1
        for (a, b) in edges:
            if a == v:
                indeg[b] -= 1
                if indeg[b] == 0:
                    queue.append(b)
    return seen == n_vertices


def _shift_flows(st: _State, cliques, cond_edges, edges, source_idx, sink_idxs):
    """Unit-budget flow guiding a budget shift.

    Each sink vertex absorbs 1/V of the unit budget (V = total sink
    vertices); per sink clique, the flow is routed along the lexicographic
    shortest condensation path using the least member edge between
    consecutive cliques, then every clique is balanced through its least
    member so that members of the source and of each sink move uniformly.
    """
    one = Fraction(1) if st.exact else 1.0
    v_sink = sum(len(cliques[t]) for t in sink_idxs)
    per_sink_vertex = one / v_sink
    flows: dict[tuple[int, int], object] = {}
    s_in = {v: one / len(cliques[source_idx]) for v in cliques[source_idx]}
    t_out: dict[int, object] = {}

    # Lexicographic BFS paths in the condensation.
    def path_to(goal):
        prev = {source_idx: None}
        queue = [source_idx]
        while queue:
            c = queue.pop(0)
            if c == goal:
                break
            for (a, b) in sorted(cond_edges):
                if a == c and b not in prev:
                    prev[b] = c
                    queue.append(b)
        if goal not in prev:
            raise SurgeryError("sink not reachable from source clique")
        out = [goal]
        while prev[out[-1]] is not None:
            out.append(prev[out[-1]])
        return list(reversed(out))

    for t_idx in sorted(sink_idxs):
        f = per_sink_vertex * len(cliques[t_idx])
        cpath = path_to(t_idx)
        for a_idx, b_idx in zip(cpath, cpath[1:]):
            u, v = min(
                (i, j) for (i, j) in edges
                if i in cliques[a_idx] and j in cliques[b_idx]
            )
            flows[(u, v)] = flows.get((u, v), 0 * one) + f
        for v in cliques[t_idx]:
            t_out[v] = t_out.get(v, 0 * one) + per_sink_vertex
    # Per-clique balancing through the least member.
    for c in cliques:
        hub = c[0]
        for v in c[1:]:
            inflow = s_in.get(v, 0 * one) + sum(
                f for (a, b), f in flows.items() if b == v
            )
            outflow = t_out.get(v, 0 * one) + sum(
                f for (a, b), f in flows.items() if a == v
            )
            d = inflow - outflow
            if d > 0:
                flows[(v, hub)] = flows.get((v, hub), 0 * one) + d
            elif d < 0:
                flows[(hub, v)] = flows.get((hub, v), 0 * one) - d
    return flows, per_sink_vertex


def _budget_shift(st: _State, component, cliques, b_override=None):
    edges = {e for e in st.edges if e[0] in set(component) and e[1] in set(component)}
    if not edges - {(i, j) for c in cliques for i in c for j in c}:
        raise SurgeryError("budget shift needs a non-clique edge")
    e0 = st.e[component[0]]
    if any(abs(st.e[v] - e0) > (0 if st.exact else 1e-12 * abs(e0)) for v in component):
        raise SurgeryError("budget shift requires identical budgets")
    idx_of, cond = _condensation(edges, cliques)
    if not _is_dag(len(cliques), cond):
        raise SurgeryError("component is not clique acyclic")
    has_in = {b for (_, b) in cond}
    sources = [ci for ci in range(len(cliques)) if ci not in has_in
               and any(a == ci for (a, _) in cond)]
    if not sources:
        raise SurgeryError("no source clique with outgoing edges")
    source_idx = min(sources, key=lambda ci: cliques[ci][0])
    reach = set()
    stack = [source_idx]
    while stack:
        c = stack.pop()
        for (a, b) in cond:
            if a == c and b not in reach:
                reach.add(b)
                stack.append(b)
    has_out = {a for (a, _) in cond}
    sink_idxs = sorted(ci for ci in reach if ci not in has_out)
    if not sink_idxs:
        raise SurgeryError("no sink clique reachable from the source")
    flows, per_sink_vertex = _shift_flows(st, cliques, cond, edges, source_idx, sink_idxs)

    if b_override is not None:
        b = b_override
    else:
        b = choose_step_size(st.solution(validate=False), st.graph(), "budget_shift",
                             component, st.inst, tols=st.tols)
        # Feasibility: no giver may owe more than its original holdings allow.
        for (i, j), f in flows.items():
            capacity = sum(
                min(st.x[j][k], 1 - st.x[i][k]) * st.p[k] for k in st.holdings(j)
            )
            if f * b > capacity:
                b = capacity / f
    deltas = st.zero_deltas()
    avail = [list(row) for row in st.x]
    for (i, j) in sorted(flows):
        st.take(i, j, flows[(i, j)] * b, avail, deltas)
    st.apply_deltas(deltas)
    e_source = e0 + b / len(cliques[source_idx])
    e_sink = e0 - b * per_sink_vertex
    for v in cliques[source_idx]:
        st.e[v] = e_source
    for t_idx in sink_idxs:
        for v in cliques[t_idx]:
            st.e[v] = e_sink
    before = len(st.edges)
    for (i, j) in sorted(edges):
        if st.e[i] > st.e[j]:
            st.ban(i, j, "budget_shift")
    st.rebuild()
    st.check_envy_free("budget_shift")
    st.check_kkt("budget_shift")
    if len(st.edges) >= before:
        raise SurgeryError("budget shift removed no edge")
    st.trace.append({
        "op": "budget_shift", "component": list(component),
        "source_clique": list(cliques[source_idx]),
        "sink_cliques": [list(cliques[t]) for t in sink_idxs],
        "b": float(b),
        "budget_deltas": {str(v): float(st.e[v] - e0) for v in component},
    })


def budget_shift(solution: MarketSolution, graph: IndifferenceGraph,
                 instance: OfflineInstance, component, *,
                 tols: Tolerances | None = None, b=None, trace=None):
    """Split one equal-budget component by shifting budgets along the clique DAG.

    Items move opposite to the edges (takers receive ratio-attaining items),
    the source clique's budgets rise and each reachable sink clique's fall
    uniformly; strictly fewer edges remain and the component separates into
    parts with internally identical budgets.
    """
    tols = tols or (Tolerances.exact() if instance.exact else Tolerances())
    st = _State(solution, instance, tols, banned=graph.banned, trace=trace)
    component = tuple(sorted(component))
    edges = {e for e in st.edges if e[0] in set(component) and e[1] in set(component)}
    cliques = _merge_cliques(edges, component)
    _budget_shift(st, component, cliques, b_override=b)
    return st.solution(), st.graph()


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


def compute_cisef(instance: OfflineInstance, tol: float = 1e-8,
                  eps_ind: float = 1e-7, *, solution: MarketSolution | None = None,
                  trace=None, max_iters: int = 200_000):
    """Equilibrium plus surgery: a Pareto-efficient CISEF allocation.

    Solves the equal-budget market program, then alternates cycle
    elimination / merge-re-balance with budget shifts per component until
    the edge count stabilizes, and finishes with a re-balance.  Returns the
    final solution (with its shifted budgets) and the clique partition.
    """
    if not instance.equal_budgets():
        raise InstanceError("the surgery starts from equal budgets")
    if solution is None:
        solution = solve_eg(instance, tol=tol, max_iters=max_iters)
    tols = Tolerances.exact() if instance.exact else Tolerances(
        ind_rel=eps_ind, kkt=max(tol * 10, 1e-9))
    st = _State(solution, instance, tols, trace=trace)
    max_eliminations = st.n * st.n - st.n
    guard = max_eliminations + 2
    for _ in range(guard):
        edges_before = len(st.edges)
        for comp in st.graph().components():
            _lemma5(st, comp)
        for comp in st.graph().components():
            edges = st.graph().restricted(comp)
            cliques = _merge_cliques(edges, comp)
            intra = {(i, j) for c in cliques for i in c for j in c if i != j}
            if edges - intra:
                _budget_shift(st, comp, cliques)
        if len(st.edges) == edges_before:
            break
    if st.eliminations > max_eliminations:
        raise SurgeryError(
            f"{st.eliminations} eliminations exceed the {max_eliminations} bound"
        )
    final_cliques = []
    for comp in st.graph().components():
        edges = st.graph().restricted(comp)
        if not _is_clique(edges, comp):
            raise SurgeryError(f"final component {comp} is not a clique")
        _rebalance(st, comp)
        final_cliques.append(tuple(comp))
    st.rebuild()
    st.check_envy_free("final")
    st.check_kkt("final")
    return st.solution(), CliquePartition(tuple(sorted(final_cliques)))


# ---------------------------------------------------------------------------
# Strong envy-freeness for independent-agent product instances
# ---------------------------------------------------------------------------


def strongify_independent(expansion, instance: OfflineInstance,
                          solution: MarketSolution, partition: CliquePartition,
                          *, tols: Tolerances | None = None, trace=None):
    """Dissolve every multi-agent clique of a CISEF solution into singletons.

    ``expansion`` must be the independent-agent product expansion that
    produced ``instance`` (see adversary.IndependentExpansion), with every
    agent's support containing at least two values.  For each clique, a type
    carrying every member's high value is swapped in small equal-price
    amounts against each member's personal high/low-signature type, held
    outside the clique; afterwards each member owns an item no other member
    rates at their own ratio, so all intra-clique edges break.  Swap
    partners inside a multi-agent clique have the change spread across that
    clique to keep its rows identical.

    The result is strongly envy-free (empty indifference graph) and still a
    certified equilibrium with unchanged budgets.
    """
    tols = tols or (Tolerances.exact() if instance.exact else Tolerances())
    supports = expansion.supports
    for clique in partition.cliques:
        if len(clique) > 1:
            for i in clique:
                if len(supports[i]) < 2:
                    raise InstanceError(
                        f"agent {i} has a single-value support; cannot break its clique"
                    )
    st = _State(solution, instance, tols, trace=trace)
    full_to_reduced = {full: r for r, full in enumerate(instance.kept)}

    def find_clique():
        for comp in st.graph().components():
            if len(comp) > 1:
                edges = st.graph().restricted(comp)
                if not _is_clique(edges, comp):
                    raise SurgeryError(f"input is not CISEF: component {comp}")
                return comp
        return None

    for _ in range(st.n + 1):
        clique = find_clique()
        if clique is None:
            break
        k = len(clique)
        highs = {i: supports[i][-1] for i in clique}
        lows = {i: supports[i][0] for i in clique}
        row = st.x[clique[0]]
        gamma = None
        for red in range(st.m):
            if row[red] <= st.tols.share_floor:
                continue
            tup = expansion.tuple_of(instance.kept[red])
            if all(tup[i] == highs[i] for i in clique):
                gamma = red
                gamma_tuple = tup
                break
        if gamma is None:
            raise SurgeryError(
                f"clique {clique} holds no all-high type; not an equilibrium "
                "of an independent expansion"
            )
        comps = st.graph().components()
        clique_of = {}
        for comp in comps:
            for v in comp:
                clique_of[v] = comp
        swaps = []
        for i in clique:
            t = list(gamma_tuple)
            for q in clique:
                t[q] = lows[q]
            t[i] = highs[i]
            full = expansion.index_of(tuple(t))
            red2 = full_to_reduced.get(full)
            if red2 is None:
                raise SurgeryError(f"signature type {t} was dropped; no holder exists")
            holder = next(
                (a for a in range(st.n)
                 if a not in set(clique) and st.x[a][red2] > st.tols.share_floor),
                None,
            )
            if holder is None:
                raise SurgeryError(f"no holder outside {clique} for type {t}")
            swaps.append((i, red2, holder, clique_of[holder]))
        b = _c4_bound(st, "budget_shift", range(st.n))
        if b is None:
            raise SurgeryError("every pair is indifferent; no safe swap size")
        delta = b / k
        for i, red2, holder, kprime in swaps:
            delta = min(delta, st.x[i][gamma] * st.p[gamma] / 2)
            share = min(st.x[m][red2] for m in kprime)
            delta = min(delta, len(kprime) * share * st.p[red2] / 2)
        deltas = st.zero_deltas()
        for i, red2, holder, kprime in swaps:
            inv = (Fraction(1, len(kprime)) if st.exact else 1.0 / len(kprime))
            deltas[i][gamma] = deltas[i][gamma] - delta / st.p[gamma]
            deltas[i][red2] = deltas[i][red2] + delta / st.p[red2]
            for m in kprime:
                deltas[m][gamma] = deltas[m][gamma] + inv * (delta / st.p[gamma])
                deltas[m][red2] = deltas[m][red2] - inv * (delta / st.p[red2])
        st.apply_deltas(deltas)
        for a in clique:
            for bgt in clique:
                if a != bgt:
                    st.ban(a, bgt, "strongify")
        st.rebuild()
        st.check_envy_free("strongify")
        st.check_kkt("strongify")
        st.trace.append({
            "op": "strongify", "clique": list(clique), "anchor_type": int(instance.kept[gamma]),
            "swaps": [[int(i), int(instance.kept[r2]), int(h)] for i, r2, h, _ in swaps],
            "delta": float(delta),
        })
    if find_clique() is not None:
        raise SurgeryError("multi-agent cliques remain after n passes")
    st.check_kkt("strongify")
    singles = CliquePartition(tuple((v,) for v in range(st.n)))
    return st.solution(), singles
