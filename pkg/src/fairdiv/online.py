"""Online allocation policies and the seeded run harness.

Policies:

* ``utilitarian`` — each item to a highest-value agent, ties uniform at
  random; a point-mass distribution (all values equal) degrades to round
  robin;
* ``por`` — sample the receiving agent from the arriving type's column of a
  precomputed efficient fractional allocation;
* ``pocr`` — sample a clique by its combined column share, then give the
  item to the clique member with the least bundle value so far (under the
  lowest-indexed member's valuation, ties to the lowest index);
* ``uniform`` and ``round_robin`` baselines.

Randomness comes from the counter-based Philox generator; trial ``k`` of a
batch uses the ``k``-th jumped substream of the base seed, so runs are
reproducible and unaffected by other trials.  Arrival draws and the
policy's per-round uniforms are pre-drawn in blocks and fed to the
assignment kernels (compiled or pure, bit-identical either way).

Items of a type nobody values (dropped from the offline instance) are
assigned uniformly at random; they carry zero value for everyone, so no
fairness or efficiency measure can see the difference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fairdiv import _backend
from fairdiv.cisef import CliquePartition, compute_cisef
from fairdiv.core import (
    InstanceError,
    IntegralAllocation,
    MarketSolution,
    OfflineInstance,
    OnlineRun,
    TypeDistribution,
    scale_values,
    to_float,
)
from fairdiv.market import solve_eg

POLICIES = ("utilitarian", "por", "pocr", "uniform", "round_robin")
STEPWISE_POLICIES = ("utilitarian", "uniform", "round_robin")
POINT_MASS_TOL = 1e-12
COLUMN_TOL = 1e-9
SHARE_FLOOR = 1e-12


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox substream ``stream`` of ``seed``; stream 0 is the base stream."""
    bg = np.random.Philox(key=seed)
    if stream:
        bg = bg.jumped(stream)
    return np.random.Generator(bg)


def _walk(cdf: np.ndarray, u: np.ndarray, limit: int) -> np.ndarray:
    """Inverse-CDF lookup matching the kernels' linear walk."""
    return np.minimum((u[:, None] >= cdf[None, :]).sum(axis=1), limit - 1).astype(np.int64)


@dataclass(frozen=True)
class Precomputation:
    """Offline artifacts a guided policy needs: the fractional allocation
    over the full type space, and for pocr the clique partition."""

    policy: str
    dist: TypeDistribution
    instance: OfflineInstance
    solution: MarketSolution
    xstar_full: np.ndarray
    partition: CliquePartition | None = None

    @property
    def dropped(self) -> np.ndarray:
        flags = np.ones(self.instance.original_m, dtype=np.uint8)
        for j in self.instance.kept:
            flags[j] = 0
        return flags


def precompute_policy(dist: TypeDistribution, policy: str, tol: float = 1e-8,
                      solution: MarketSolution | None = None,
                      partition: CliquePartition | None = None) -> Precomputation | None:
    """Solve the offline problem a guided policy rounds against.

    ``por`` uses the equal-budget market solution (the product-of-utilities
    maximizer); ``pocr`` additionally runs the clique surgery.  Other
    policies need nothing and return None.
    """
    if policy not in POLICIES:
        raise InstanceError(f"unknown policy {policy!r}")
    if policy not in ("por", "pocr"):
        return None
    instance = scale_values(dist)
    if policy == "por":
        if solution is None:
            solution = solve_eg(instance, tol=tol)
        partition = None
    else:
        if solution is None or partition is None:
            solution, partition = compute_cisef(instance, tol=tol)
    shares = to_float(solution.shares)
    shares = np.where(shares < SHARE_FLOOR, 0.0, shares)
    colsum = shares.sum(axis=0)
    if np.any(np.abs(colsum - 1.0) > COLUMN_TOL):
        raise InstanceError(f"precomputed columns sum to {colsum}, not 1")
    shares = shares / colsum
    xstar_full = instance.expand_to_original(shares)
    return Precomputation(policy, dist, instance, solution, xstar_full, partition)


# ---------------------------------------------------------------------------
# Stepwise interface
# ---------------------------------------------------------------------------


@dataclass
class AllocatorState:
    """Mutable per-run state for the stepwise policy interface.

    ``running[i, j]`` accumulates v_i(A_j) over the rounds recorded so far;
    the pocr policy reads it through the clique leader's row.
    """

    policy: str
    n: int
    rng: np.random.Generator
    precomputed: Precomputation | None = None
    running: np.ndarray | None = None
    rounds: int = 0
    point_mass: bool = False

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise InstanceError(f"unknown policy {self.policy!r}")
        if self.policy in ("por", "pocr") and self.precomputed is None:
            raise InstanceError(f"{self.policy} requires a precomputation")
        if self.running is None:
            self.running = np.zeros((self.n, self.n))

    def record(self, values: np.ndarray, agent: int) -> None:
        self.running[:, agent] += values
        self.rounds += 1


def utilitarian_step(state: AllocatorState, values) -> int:
    """Highest value wins, uniform among exact ties; round robin for point
    masses (decided at state construction)."""
    if state.point_mass:
        return state.rounds % state.n
    values = np.asarray(values, dtype=np.float64)
    vmax = values.max()
    ties = np.nonzero(values == vmax)[0]
    u = state.rng.random()
    return int(ties[min(int(u * len(ties)), len(ties) - 1)])


def uniform_step(state: AllocatorState) -> int:
    u = state.rng.random()
    return min(int(u * state.n), state.n - 1)


def round_robin_step(state: AllocatorState) -> int:
    return state.rounds % state.n


def por_step(state: AllocatorState, type_index: int) -> int:
    """Sample from the type's share column; zero-share agents are never hit."""
    pre = state.precomputed
    u = state.rng.random()
    if pre.dropped[type_index]:
        return min(int(u * state.n), state.n - 1)
    col = pre.xstar_full[:, type_index]
    if abs(col.sum() - 1.0) > COLUMN_TOL:
        raise InstanceError(f"type {type_index} column sums to {col.sum()}")
    cdf = np.cumsum(col)
    idx = 0
    while idx < state.n - 1 and u >= cdf[idx]:
        idx += 1
    return idx


def pocr_step(state: AllocatorState, type_index: int) -> int:
    """Sample a clique by combined share, then serve its least-value member."""
    pre = state.precomputed
    u = state.rng.random()
    if pre.dropped[type_index]:
        return min(int(u * state.n), state.n - 1)
    cliques = pre.partition.cliques
    weights = np.array([
        sum(pre.xstar_full[i, type_index] for i in c) for c in cliques
    ])
    if abs(weights.sum() - 1.0) > COLUMN_TOL:
        raise InstanceError(f"type {type_index} clique shares sum to {weights.sum()}")
    cdf = np.cumsum(weights)
    c = 0
    while c < len(cliques) - 1 and u >= cdf[c]:
        c += 1
    members = cliques[c]
    leader = members[0]
    best = members[0]
    for q in members[1:]:
        if state.running[leader, q] < state.running[leader, best]:
            best = q
    return int(best)


# ---------------------------------------------------------------------------
# Batch harness
# ---------------------------------------------------------------------------


def default_checkpoints(T: int) -> tuple[int, ...]:
    """Powers of two up to the horizon, plus the horizon itself."""
    cps = []
    t = 1
    while t < T:
        cps.append(t)
        t *= 2
    if T > 0:
        cps.append(T)
    return tuple(cps)


def _is_point_mass(dist: TypeDistribution) -> bool:
    values = to_float(dist.values)
    return bool(values.size and np.ptp(values) <= POINT_MASS_TOL)


def _traces(round_values: np.ndarray, assignments: np.ndarray, checkpoints):
    n, T = round_values.shape
    idx = np.asarray(checkpoints, dtype=np.int64) - 1
    value_trace = np.zeros((len(checkpoints), n, n))
    for j in range(n):
        masked = round_values * (assignments == j)[None, :]
        cums = masked.cumsum(axis=1)
        value_trace[:, :, j] = cums[:, idx].T
    own = value_trace[:, np.arange(n), np.arange(n)]
    envy_trace = np.maximum(value_trace - own[:, :, None], 0.0)
    for k in range(len(checkpoints)):
        np.fill_diagonal(envy_trace[k], 0.0)
    return value_trace, envy_trace


def run_online(dist: TypeDistribution, policy: str, T: int, seed: int, *,
               stream: int = 0, checkpoints=None, precomputed: Precomputation | None = None,
               tol: float = 1e-8) -> tuple[IntegralAllocation, OnlineRun]:
    """Draw T arrivals, drive the policy, and record the run.

    Deterministic given (dist, policy, T, seed, stream).  ``checkpoints``
    defaults to powers of two plus T; pass explicit rounds for finer envy
    traces.  por/pocr precompute their offline guide unless one is passed.
    """
    if policy not in POLICIES:
        raise InstanceError(f"unknown policy {policy!r}")
    if policy in ("por", "pocr"):
        if precomputed is None:
            precomputed = precompute_policy(dist, policy, tol=tol)
        elif precomputed.policy != policy:
            raise InstanceError(
                f"precomputation is for {precomputed.policy!r}, not {policy!r}"
            )
    values = to_float(dist.values)
    probs = to_float(dist.probs)
    n, m = values.shape
    rng = make_rng(seed, stream)
    u_arrival = rng.random(T)
    arrivals = _walk(np.cumsum(probs), u_arrival, m)
    round_values = values[:, arrivals]
    if policy == "utilitarian":
        if _is_point_mass(dist):
            assignments = _backend.assign_round_robin(T, n)
        else:
            u = rng.random(T)
            assignments = _backend.assign_utilitarian(
                np.ascontiguousarray(round_values.T), u
            )
    elif policy == "uniform":
        assignments = _backend.assign_uniform(rng.random(T), n)
    elif policy == "round_robin":
        assignments = _backend.assign_round_robin(T, n)
    elif policy == "por":
        cdf = np.ascontiguousarray(np.cumsum(precomputed.xstar_full, axis=0).T)
        assignments = _backend.assign_por(cdf, precomputed.dropped, arrivals,
                                          rng.random(T), n)
    else:  # pocr
        cliques = precomputed.partition.cliques
        s = len(cliques)
        weights = np.stack([precomputed.xstar_full[list(c)].sum(axis=0) for c in cliques])
        clique_cdf = np.ascontiguousarray(np.cumsum(weights, axis=0).T)
        members = np.concatenate([np.asarray(c, dtype=np.int64) for c in cliques])
        offsets = np.zeros(s + 1, dtype=np.int64)
        np.cumsum([len(c) for c in cliques], out=offsets[1:])
        leader_values = np.ascontiguousarray(np.stack([values[c[0]] for c in cliques]))
        assignments = _backend.assign_pocr(
            clique_cdf, members, offsets, leader_values, precomputed.dropped,
            arrivals, rng.random(T), n,
        )
    checkpoints = tuple(checkpoints) if checkpoints is not None else default_checkpoints(T)
    if any(not 1 <= c <= T for c in checkpoints):
        raise InstanceError("checkpoints must lie in [1, T]")
    value_trace, envy_trace = (None, None)
    if checkpoints:
        value_trace, envy_trace = _traces(round_values, assignments, checkpoints)
    bundles = tuple(
        tuple(int(t) for t in np.nonzero(assignments == i)[0]) for i in range(n)
    )
    allocation = IntegralAllocation(bundles, round_values)
    run = OnlineRun(T=T, arrivals=arrivals, assignments=np.asarray(assignments),
                    seed=seed, stream=stream, checkpoints=checkpoints,
                    envy_trace=envy_trace, value_trace=value_trace)
    return allocation, run


def run_online_sequence(values_by_round: np.ndarray, policy: str, seed: int, *,
                        stream: int = 0, checkpoints=None) -> tuple[IntegralAllocation, OnlineRun]:
    """Run a stepwise policy against a fixed T-by-n value sequence."""
    if policy not in STEPWISE_POLICIES:
        raise InstanceError(f"policy {policy!r} needs a type distribution")
    values_by_round = np.asarray(values_by_round, dtype=np.float64)
    T, n = values_by_round.shape
    rng = make_rng(seed, stream)
    if policy == "utilitarian":
        if values_by_round.size and np.ptp(values_by_round) <= POINT_MASS_TOL:
            assignments = _backend.assign_round_robin(T, n)
        else:
            assignments = _backend.assign_utilitarian(
                np.ascontiguousarray(values_by_round), rng.random(T)
            )
    elif policy == "uniform":
        assignments = _backend.assign_uniform(rng.random(T), n)
    else:
        assignments = _backend.assign_round_robin(T, n)
    round_values = values_by_round.T.copy()
    checkpoints = tuple(checkpoints) if checkpoints is not None else default_checkpoints(T)
    value_trace, envy_trace = (None, None)
    if checkpoints:
        value_trace, envy_trace = _traces(round_values, assignments, checkpoints)
    bundles = tuple(
        tuple(int(t) for t in np.nonzero(assignments == i)[0]) for i in range(n)
    )
    allocation = IntegralAllocation(bundles, round_values)
    run = OnlineRun(T=T, arrivals=np.arange(T, dtype=np.int64),
                    assignments=np.asarray(assignments), seed=seed, stream=stream,
                    checkpoints=checkpoints, envy_trace=envy_trace, value_trace=value_trace)
    return allocation, run


def run_adaptive(machine, policy: str, seed: int, *, stream: int = 0,
                 checkpoints=None) -> tuple[IntegralAllocation, OnlineRun]:
    """Drive a stepwise policy against an interactive value stream.

    The machine must expose ``emit() -> values`` and ``observe(agent)``;
    values for round t are revealed only after round t-1 is allocated.
    """
    if policy not in STEPWISE_POLICIES:
        raise InstanceError(f"policy {policy!r} cannot face an adaptive stream")
    T, n = machine.T, machine.n
    state = AllocatorState(policy=policy, n=n, rng=make_rng(seed, stream))
    values_by_round = np.zeros((T, n))
    assignments = np.zeros(T, dtype=np.int64)
    for t in range(T):
        values = machine.emit()
        if policy == "utilitarian":
            agent = utilitarian_step(state, values)
        elif policy == "uniform":
            agent = uniform_step(state)
        else:
            agent = round_robin_step(state)
        values_by_round[t] = values
        assignments[t] = agent
        state.record(values, agent)
        machine.observe(agent)
    round_values = values_by_round.T.copy()
    checkpoints = tuple(checkpoints) if checkpoints is not None else default_checkpoints(T)
    value_trace, envy_trace = (None, None)
    if checkpoints:
        value_trace, envy_trace = _traces(round_values, assignments, checkpoints)
    bundles = tuple(
        tuple(int(t) for t in np.nonzero(assignments == i)[0]) for i in range(n)
    )
    allocation = IntegralAllocation(bundles, round_values)
    run = OnlineRun(T=T, arrivals=np.arange(T, dtype=np.int64), assignments=assignments,
                    seed=seed, stream=stream, checkpoints=checkpoints,
                    envy_trace=envy_trace, value_trace=value_trace)
    return allocation, run
