"""Value generators for the five adversary models, weakest to strongest.

1. identical agents, i.i.d. items — one marginal distribution for everyone;
2. independent agents, i.i.d. items — one marginal per agent, expanded into
   a product-type distribution;
3. correlated agents, i.i.d. items — an explicit joint type distribution;
4. non-adaptive — a fixed value sequence chosen knowing the algorithm's
   code (the segmented 1-vs-epsilon trade-off instance, plus its prefix
   variants);
5. adaptive — an interactive state machine that reacts to each allocation.

The first three produce ``TypeDistribution`` objects consumed by the
distribution-based allocators and are constructed independently of the
horizon; the last two take the horizon explicitly and feed only the
stepwise allocators.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from itertools import product

import numpy as np

from fairdiv.core import InstanceError, TypeDistribution, _is_exact_scalar

MAX_PRODUCT_TYPES = 100_000


@dataclass(frozen=True)
class AdversaryConfig:
    """Declarative adversary description, as it appears in experiment configs."""

    kind: str
    params: dict = field(default_factory=dict)

    KINDS = ("identical_iid", "independent_iid", "correlated_iid",
             "nonadaptive_lb", "adaptive_sm")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise InstanceError(f"unknown adversary kind {self.kind!r}")


@dataclass(frozen=True)
class IndependentExpansion:
    """Product-type distribution for independent agents.

    ``supports[i]`` lists agent i's possible values in ascending order; a
    type is the value tuple ``(a_1, ..., a_n)`` and agent i values it at
    ``a_i``.  Types are numbered in mixed radix with the last agent's digit
    fastest: ``index = ((d_1 * |S_2| + d_2) * |S_3| + d_3) ...`` where
    ``d_i`` is the position of ``a_i`` within ``supports[i]``.
    """

    dist: TypeDistribution
    supports: tuple[tuple, ...]

    @property
    def n(self) -> int:
        return len(self.supports)

    def index_of(self, value_tuple) -> int:
        idx = 0
        for a, support in zip(value_tuple, self.supports):
            idx = idx * len(support) + support.index(a)
        return idx

    def tuple_of(self, index: int) -> tuple:
        digits = []
        for support in reversed(self.supports):
            digits.append(support[index % len(support)])
            index //= len(support)
        return tuple(reversed(digits))


def correlated_iid(probs, values, types=()) -> TypeDistribution:
    """The general input form: an explicit joint type distribution."""
    return TypeDistribution.make(probs, values, types)


def independent_expansion(marginals) -> IndependentExpansion:
    """Expand per-agent value marginals into the product-type distribution.

    ``marginals`` is a list of (values, probs) pairs.  The type grid has one
    type per element of the support product; its probability is the product
    of the coordinate probabilities and agent i's value is coordinate i.
    """
    supports = []
    prob_of = []
    for values, probs in marginals:
        if len(values) != len(probs) or not values:
            raise InstanceError("marginal support and probabilities disagree")
        if len(set(values)) != len(values):
            raise InstanceError("marginal support values must be distinct")
        order = sorted(range(len(values)), key=lambda q: values[q])
        supports.append(tuple(values[q] for q in order))
        prob_of.append(tuple(probs[q] for q in order))
    m = 1
    for s in supports:
        m *= len(s)
        if m > MAX_PRODUCT_TYPES:
            raise InstanceError(
                f"product support exceeds {MAX_PRODUCT_TYPES} types; "
                "use smaller marginal supports"
            )
    exact = all(
        _is_exact_scalar(v) and _is_exact_scalar(p)
        for vs, ps in zip(supports, prob_of) for v, p in zip(vs, ps)
    )
    n = len(supports)
    probs = []
    values = [[] for _ in range(n)]
    one = Fraction(1) if exact else 1.0
    for combo in product(*(range(len(s)) for s in supports)):
        pr = one
        for i, d in enumerate(combo):
            pr = pr * prob_of[i][d]
        probs.append(pr)
        for i, d in enumerate(combo):
            values[i].append(supports[i][d])
    dist = TypeDistribution.make(probs, values, exact=exact or None)
    return IndependentExpansion(dist, tuple(supports))


def identical_iid(values, probs, n: int) -> IndependentExpansion:
    """All agents draw from one marginal: the n-fold product expansion."""
    if not values:
        raise InstanceError("empty marginal support")
    return independent_expansion([(list(values), list(probs))] * n)


def lower_bound_instance(n: int, T: int, eps: float) -> np.ndarray:
    """The segmented trade-off sequence, as a T-by-n value grid.

    Rounds are split into n equal segments; in segment i every item is
    worth 1 to agent i and ``eps`` to everyone else.  Assigning segment i
    to agent i is simultaneously welfare-optimal and perfectly fair, but an
    algorithm constrained to low envy at every prefix cannot follow it.
    """
    if T % n != 0:
        raise InstanceError(f"T={T} must be divisible by n={n}")
    if not 0 < eps < 1:
        raise InstanceError("eps must lie in (0, 1)")
    seg = T // n
    values = np.full((T, n), eps, dtype=np.float64)
    for i in range(n):
        values[i * seg:(i + 1) * seg, i] = 1.0
    return values


def lower_bound_prefix(values: np.ndarray, n: int, i: int) -> np.ndarray:
    """Prefix variant: the first i segments follow the instance, the rest
    are worthless (the non-adaptive adversary's family of stopped runs)."""
    T = values.shape[0]
    seg = T // n
    if not 1 <= i <= n:
        raise InstanceError("prefix index must lie in 1..n")
    out = values.copy()
    out[i * seg:, :] = 0.0
    return out


class AdaptiveStateMachine:
    """Interactive two-agent value stream driven by past allocations.

    States are ..., L2, L1, 0, R1, R2, ...; state 0 emits (1, 1), state L_i
    emits (1, nu_i) and state R_i emits (nu_i, 1), with
    ``nu_i = (i+1)**r - i**r`` decreasing in i and below 1 for r < 1.
    After each round the state moves one step: allocating to agent 0 moves
    right, any other allocation moves left (the directions are symmetric;
    this convention is fixed for reproducibility).  Agents beyond the first
    two value nothing.
    """

    def __init__(self, r: float, T: int, n: int = 2):
        if not 0 < r < 1:
            raise InstanceError("exponent r must lie in (0, 1)")
        if n < 2:
            raise InstanceError("the state machine needs at least 2 agents")
        self.r = r
        self.T = T
        self.n = n
        self.state = 0
        self.round = 0

    def nu(self, i: int) -> float:
        return (i + 1) ** self.r - i ** self.r

    def emit(self) -> np.ndarray:
        if self.round >= self.T:
            raise InstanceError("horizon exhausted")
        values = np.zeros(self.n)
        if self.state == 0:
            values[0] = values[1] = 1.0
        elif self.state < 0:  # L_i
            values[0] = 1.0
            values[1] = self.nu(-self.state)
        else:  # R_i
            values[0] = self.nu(self.state)
            values[1] = 1.0
        return values

    def observe(self, agent: int) -> None:
        """Consume the round's allocation; required before the next emit."""
        if agent is None:
            raise InstanceError("the adaptive adversary needs allocation feedback")
        self.state += 1 if agent == 0 else -1
        self.round += 1
