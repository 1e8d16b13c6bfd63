"""Shared domain types for the online fair division engine.

The engine distinguishes two worlds:

* the *online* world, where indivisible items arrive one per round and each
  item has one of finitely many types drawn i.i.d. from a distribution; and
* the *offline* world, where each item type becomes a divisible good whose
  value has been scaled by its draw probability, and a market equilibrium is
  computed over those goods.

``TypeDistribution`` describes the online side, ``OfflineInstance`` the
offline side, and ``scale_values`` maps one to the other.  Market solutions,
fractional and integral allocations, and recorded online runs round out the
vocabulary used by the solver, the graph surgery, the allocators and the
metrics.

All types are immutable after construction and safe to share across threads;
the operations in this module are pure functions.

Exact arithmetic: every grid-valued field may hold either ``float64`` entries
or ``fractions.Fraction`` entries (stored in an object-dtype array).  The
latter is used by the exact-rational mode of the market solver and the
allocation surgery.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

PROB_SUM_TOL = 1e-12
COLUMN_SUM_TOL = 1e-9
ENTRY_TOL = 1e-12
SPEND_REL_TOL = 1e-6


class InstanceError(ValueError):
    """Raised when an instance or allocation violates a structural invariant."""


def _is_exact_scalar(v) -> bool:
    return isinstance(v, (Fraction, int)) and not isinstance(v, bool)


def as_grid(values, exact: bool | None = None) -> np.ndarray:
    """Convert nested sequences to a 2-d array, float64 or Fraction-valued.

    ``exact=None`` infers the mode: if every entry is an int or Fraction the
    grid is kept exact, otherwise it is coerced to float64.
    """
    rows = [list(r) for r in values]
    if exact is None:
        exact = all(_is_exact_scalar(v) for r in rows for v in r)
    if exact:
        arr = np.empty((len(rows), len(rows[0]) if rows else 0), dtype=object)
        for i, r in enumerate(rows):
            for j, v in enumerate(r):
                arr[i, j] = Fraction(v)
        return arr
    return np.asarray(rows, dtype=np.float64)


def as_vector(values, exact: bool | None = None) -> np.ndarray:
    grid = as_grid([list(values)], exact=exact)
    return grid[0]


def is_exact(arr: np.ndarray) -> bool:
    return arr.dtype == object


def to_float(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64)


def parse_number(v):
    """Parse a JSON number or a "p/q" string into a float or Fraction."""
    if isinstance(v, str):
        return Fraction(v)
    return v


@dataclass(frozen=True)
class TypeDistribution:
    """A finite-support distribution over item types.

    ``probs[j]`` is the probability that an arriving item has type ``j`` and
    ``values[i, j]`` is agent ``i``'s value for an item of that type.  Types
    with zero probability are rejected rather than silently dropped so that
    every supported type has a strictly positive draw probability.

    Values must be nonnegative; [0, 1] is the normalized convention under
    which the online envy guarantees are stated, but larger values are
    accepted (the market program and the surgery are scale-free).
    """

    probs: np.ndarray
    values: np.ndarray
    types: tuple[int, ...] = ()

    def __post_init__(self):
        probs = self.probs
        values = self.values
        if values.ndim != 2:
            raise InstanceError("values must be an n-by-m grid")
        if len(probs) != values.shape[1]:
            raise InstanceError("probs and values disagree on the number of types")
        if not self.types:
            object.__setattr__(self, "types", tuple(range(len(probs))))
        if len(self.types) != len(probs):
            raise InstanceError("types and probs disagree in length")
        if abs(sum(probs) - 1) > PROB_SUM_TOL:
            raise InstanceError(f"probabilities sum to {sum(probs)}, not 1")
        if any(p <= 0 for p in probs):
            raise InstanceError("every type probability must be strictly positive")
        for i in range(values.shape[0]):
            for j in range(values.shape[1]):
                if values[i, j] < 0:
                    raise InstanceError(f"value v[{i},{j}]={values[i, j]} is negative")

    @classmethod
    def make(cls, probs, values, types=(), exact: bool | None = None):
        if exact is None:
            exact = all(_is_exact_scalar(p) for p in probs) and all(
                _is_exact_scalar(v) for row in values for v in row
            )
        return cls(probs=as_vector(probs, exact), values=as_grid(values, exact), types=tuple(types))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @property
    def exact(self) -> bool:
        return is_exact(self.values)

    def to_float(self) -> "TypeDistribution":
        if not self.exact:
            return self
        return TypeDistribution(to_float(self.probs), to_float(self.values), self.types)


@dataclass(frozen=True)
class OfflineInstance:
    """A divisible-goods market instance: value grid plus agent budgets.

    Items valued zero by every agent are dropped at construction; ``kept``
    records the surviving items' original type indices so fractional
    allocations can be mapped back to the full type space.  Agents valuing
    every item at zero are rejected (their log-utility is undefined in the
    market program).
    """

    values: np.ndarray
    budgets: np.ndarray
    kept: tuple[int, ...] = ()
    original_m: int = 0

    def __post_init__(self):
        values = self.values
        if values.ndim != 2:
            raise InstanceError("values must be an n-by-m grid")
        n, m = values.shape
        if len(self.budgets) != n:
            raise InstanceError("one budget per agent required")
        if any(e <= 0 for e in self.budgets):
            raise InstanceError("budgets must be strictly positive")
        for j in range(m):
            if all(values[i, j] <= 0 for i in range(n)):
                raise InstanceError(
                    f"item {j} has no positive valuer; drop it via OfflineInstance.make"
                )
        for i in range(n):
            if all(values[i, j] <= 0 for j in range(m)):
                raise InstanceError(f"agent {i} values every item at zero")
        if not self.kept:
            object.__setattr__(self, "kept", tuple(range(m)))
        if not self.original_m:
            object.__setattr__(self, "original_m", max(self.kept, default=-1) + 1)

    @classmethod
    def make(cls, values, budgets=None, exact: bool | None = None) -> "OfflineInstance":
        """Build an instance, dropping items that no agent values.

        Raises if every value is zero (nothing allocatable).
        """
        grid = as_grid(values, exact)
        n, m = grid.shape
        if budgets is None:
            budgets = [Fraction(1)] * n if is_exact(grid) else [1.0] * n
        bud = as_vector(budgets, is_exact(grid))
        kept = [j for j in range(m) if any(grid[i, j] > 0 for i in range(n))]
        if not kept:
            raise InstanceError("every agent values every item at zero")
        return cls(values=grid[:, kept], budgets=bud, kept=tuple(kept), original_m=m)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @property
    def exact(self) -> bool:
        return is_exact(self.values)

    def equal_budgets(self, rel_tol: float = 1e-12) -> bool:
        e0 = self.budgets[0]
        return all(abs(e - e0) <= rel_tol * abs(e0) for e in self.budgets)

    def expand_to_original(self, shares: np.ndarray) -> np.ndarray:
        """Map a reduced n-by-m share grid back to the full type space.

        Dropped (universally zero-valued) type columns come back as zeros.
        """
        n = shares.shape[0]
        if shares.dtype == object:
            full = np.empty((n, self.original_m), dtype=object)
            full[:, :] = Fraction(0)
        else:
            full = np.zeros((n, self.original_m))
        for r, j in enumerate(self.kept):
            full[:, j] = shares[:, r]
        return full

    def restrict_to_kept(self, full: np.ndarray) -> np.ndarray:
        return full[:, list(self.kept)]

    def to_float(self) -> "OfflineInstance":
        if not self.exact:
            return self
        return OfflineInstance(
            to_float(self.values), to_float(self.budgets), self.kept, self.original_m
        )


@dataclass(frozen=True)
class FractionalAllocation:
    """An n-by-m grid of item shares in [0, 1] with column sums at most 1."""

    shares: np.ndarray

    def __post_init__(self):
        shares = self.shares
        n, m = shares.shape
        clamped = shares.copy()
        for i in range(n):
            for j in range(m):
                v = shares[i, j]
                if v < -ENTRY_TOL or v > 1 + ENTRY_TOL:
                    raise InstanceError(f"share x[{i},{j}]={v} outside [0, 1]")
                if v < 0:
                    clamped[i, j] = 0 * v
                elif v > 1:
                    clamped[i, j] = v / v
        for j in range(m):
            s = sum(clamped[i, j] for i in range(n))
            if s > 1 + COLUMN_SUM_TOL:
                raise InstanceError(f"item {j} over-allocated: column sum {s}")
        object.__setattr__(self, "shares", clamped)

    @classmethod
    def make(cls, shares, exact: bool | None = None):
        return cls(as_grid(shares, exact))

    @property
    def n(self) -> int:
        return self.shares.shape[0]

    @property
    def m(self) -> int:
        return self.shares.shape[1]

    def row(self, i: int) -> np.ndarray:
        return self.shares[i]


@dataclass(frozen=True)
class MarketSolution:
    """A market equilibrium candidate: allocation, prices, budgets, ratios.

    ``mbb[i]`` is agent i's realized bang-per-buck ratio, value of own bundle
    divided by budget.  Construction checks the budget-exhaustion invariant
    (each agent's spend matches their budget); pass ``validate=False`` to
    build deliberately broken solutions for certificate testing.
    """

    allocation: FractionalAllocation
    prices: np.ndarray
    budgets: np.ndarray
    mbb: np.ndarray

    def __post_init__(self):
        if any(p <= 0 for p in self.prices):
            raise InstanceError("prices must be strictly positive")
        if any(e <= 0 for e in self.budgets):
            raise InstanceError("budgets must be strictly positive")

    @classmethod
    def from_parts(cls, instance: OfflineInstance, shares, prices, budgets=None,
                   validate: bool = True) -> "MarketSolution":
        exact = instance.exact
        alloc = FractionalAllocation(as_grid(shares, exact))
        prices = as_vector(prices, exact)
        budgets = instance.budgets if budgets is None else as_vector(budgets, exact)
        if any(e <= 0 for e in budgets):
            raise InstanceError("budgets must be strictly positive")
        mbb = np.empty(instance.n, dtype=object if exact else np.float64)
        for i in range(instance.n):
            mbb[i] = fractional_value(i, alloc.shares[i], instance) / budgets[i]
        sol = cls(alloc, prices, budgets, mbb)
        if validate:
            for i in range(instance.n):
                spend = sum(prices[j] * alloc.shares[i, j] for j in range(instance.m))
                if abs(spend - budgets[i]) > SPEND_REL_TOL * budgets[i]:
                    raise InstanceError(
                        f"agent {i} spends {spend}, budget {budgets[i]}"
                    )
        return sol

    @property
    def shares(self) -> np.ndarray:
        return self.allocation.shares

    @property
    def n(self) -> int:
        return self.allocation.n

    @property
    def m(self) -> int:
        return self.allocation.m

    @property
    def exact(self) -> bool:
        return is_exact(self.allocation.shares)

    def to_float(self, instance: OfflineInstance) -> "MarketSolution":
        if not self.exact:
            return self
        return MarketSolution.from_parts(
            instance.to_float(), to_float(self.shares), to_float(self.prices),
            to_float(self.budgets),
        )


@dataclass(frozen=True)
class IntegralAllocation:
    """A partition of arrived items (round indices) into agent bundles.

    ``round_values[i, t]`` is agent i's realized value for the round-``t``
    item, kept for every agent so envy can be evaluated both ways.
    """

    bundles: tuple[tuple[int, ...], ...]
    round_values: np.ndarray

    def __post_init__(self):
        T = self.round_values.shape[1]
        seen = sorted(t for b in self.bundles for t in b)
        if seen != list(range(T)):
            raise InstanceError("bundles must partition the arrived items")

    @property
    def n(self) -> int:
        return len(self.bundles)

    @property
    def T(self) -> int:
        return self.round_values.shape[1]


@dataclass(frozen=True)
class OnlineRun:
    """Record of one online run: arrivals, assignments and sampled traces.

    Re-running with the same distribution, policy, horizon, seed and stream
    index reproduces the run bit-exactly.  ``envy_trace[k]`` is the full
    pairwise-envy matrix after round ``checkpoints[k]``; ``value_trace[k]``
    holds the running bundle values v_i(A_j) at the same rounds.
    """

    T: int
    arrivals: np.ndarray
    assignments: np.ndarray
    seed: int
    stream: int = 0
    checkpoints: tuple[int, ...] = ()
    envy_trace: np.ndarray | None = None
    value_trace: np.ndarray | None = None

    def __post_init__(self):
        if len(self.arrivals) != self.T or len(self.assignments) != self.T:
            raise InstanceError("arrivals and assignments must have length T")


def scale_values(dist: TypeDistribution, budgets=None) -> OfflineInstance:
    """Scale each type's values by its draw probability and drop dead types.

    The result is the offline divisible-goods instance whose equilibrium
    guides the online allocators; the dropped-type map is retained on the
    instance.  Rejects distributions where every agent values every type at
    zero.
    """
    scaled = dist.values * np.reshape(dist.probs, (1, dist.m))
    if budgets is None:
        budgets = [Fraction(1)] * dist.n if dist.exact else [1.0] * dist.n
    return OfflineInstance.make(scaled, budgets, exact=dist.exact)


def bundle_value(agent: int, bundle: Sequence[int], round_values: np.ndarray):
    """Additive value of a bundle of rounds: sum of v[agent, t] over the bundle."""
    return sum(round_values[agent, t] for t in bundle)


def fractional_value(agent: int, allocation_row, instance: OfflineInstance):
    """Linear value of a fractional bundle: sum_k v[agent, k] * x[k]."""
    values = instance.values
    return sum(values[agent, k] * allocation_row[k] for k in range(instance.m))


# ---------------------------------------------------------------------------
# Instance file format
# ---------------------------------------------------------------------------
#
# A distribution is stored as a JSON document
#
#   {"n": 3,
#    "types": [{"prob": 0.5, "values": [1, 0.5, 1]},
#              {"prob": 0.5, "values": [1, 1, 0.5]}],
#    "budgets": [1, 1, 1]}        # optional; defaults to all ones
#
# with one entry per type whose "values" list gives every agent's value for
# that type.  Numbers may be JSON floats or "p/q" strings; a document whose
# numbers are all integers or "p/q" strings loads in exact-rational mode.


def distribution_to_json(dist: TypeDistribution, budgets=None) -> dict:
    def enc(v):
        return str(v) if isinstance(v, Fraction) else float(v)

    doc = {
        "n": dist.n,
        "types": [
            {"prob": enc(dist.probs[j]), "values": [enc(dist.values[i, j]) for i in range(dist.n)]}
            for j in range(dist.m)
        ],
    }
    if budgets is not None:
        doc["budgets"] = [enc(e) for e in budgets]
    return doc


def distribution_from_json(doc: dict) -> tuple[TypeDistribution, np.ndarray | None]:
    try:
        types = doc["types"]
        n = int(doc["n"])
        probs = [parse_number(t["prob"]) for t in types]
        values_by_type = [[parse_number(v) for v in t["values"]] for t in types]
    except (KeyError, TypeError) as exc:
        raise InstanceError(f"malformed instance document: {exc}") from exc
    for t, row in enumerate(values_by_type):
        if len(row) != n:
            raise InstanceError(f"type {t} has {len(row)} values, expected n={n}")
    values = [[values_by_type[j][i] for j in range(len(types))] for i in range(n)]
    exact = all(_is_exact_scalar(p) for p in probs) and all(
        _is_exact_scalar(v) for row in values for v in row
    )
    dist = TypeDistribution.make(probs, values, exact=exact or None)
    budgets = None
    if "budgets" in doc:
        budgets = as_vector([parse_number(e) for e in doc["budgets"]], exact or None)
    return dist, budgets


def load_distribution(path) -> tuple[TypeDistribution, np.ndarray | None]:
    with open(path) as fh:
        return distribution_from_json(json.load(fh))


def solution_to_json(solution: MarketSolution, instance: OfflineInstance) -> dict:
    def enc(v):
        return str(v) if isinstance(v, Fraction) else float(v)

    return {
        "x": [[enc(v) for v in row] for row in solution.shares],
        "p": [enc(p) for p in solution.prices],
        "e": [enc(e) for e in solution.budgets],
        "kept": list(instance.kept),
        "original_m": instance.original_m,
    }


def solution_from_json(doc: dict, instance: OfflineInstance) -> MarketSolution:
    x = [[parse_number(v) for v in row] for row in doc["x"]]
    p = [parse_number(v) for v in doc["p"]]
    e = [parse_number(v) for v in doc["e"]]
    return MarketSolution.from_parts(instance, x, p, e)
