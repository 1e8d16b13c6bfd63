"""Shared fixtures: the small hand-checkable instances used across suites."""

from fractions import Fraction as F

import numpy as np
import pytest

from fairdiv import (
    MarketSolution,
    OfflineInstance,
    TypeDistribution,
    independent_expansion,
    scale_values,
)


@pytest.fixture
def trio_mirror() -> OfflineInstance:
    """Three agents, two goods: one agent indifferent between the goods,
    the other two mirror-value them.  The equal-budget equilibrium is
    unique, with x = [[1/3,1/3],[0,2/3],[2/3,0]] and both prices 3/2."""
    return OfflineInstance.make([[1.0, 1.0], [0.5, 1.0], [1.0, 0.5]])


@pytest.fixture
def trio_mirror_exact() -> OfflineInstance:
    return OfflineInstance.make([[F(1), F(1)], [F(1, 2), F(1)], [F(1), F(1, 2)]])


@pytest.fixture
def trio_mirror_dist() -> TypeDistribution:
    """The mirror trio as a two-type uniform distribution."""
    return TypeDistribution.make([0.5, 0.5], [[1.0, 1.0], [0.5, 1.0], [1.0, 0.5]])


@pytest.fixture
def graded_trio() -> OfflineInstance:
    """Three agents, three goods; agents 2 and 3 value goods 2,3 alike and
    good 1 at graded discounts.  Every efficient envy-free split gives good
    1 wholly to agent 1 and leaves agents 2,3 mutually indifferent."""
    return OfflineInstance.make([[1.0, 1.0, 1.0], [0.5, 1.0, 1.0], [0.25, 1.0, 1.0]])


@pytest.fixture
def skewed_expansion():
    """Independent three-agent product expansion: two 0/1 agents with heavy
    mass on 1, one agent on {1, 2} with heavy mass on 1.  Eight types."""
    return independent_expansion([
        ([F(0), F(1)], [F(1, 10), F(9, 10)]),
        ([F(0), F(1)], [F(1, 10), F(9, 10)]),
        ([F(1), F(2)], [F(16, 17), F(1, 17)]),
    ])


@pytest.fixture
def skewed_instance(skewed_expansion) -> OfflineInstance:
    return scale_values(skewed_expansion.dist)


@pytest.fixture
def skewed_reference_solution(skewed_instance) -> MarketSolution:
    """Hand-constructed equal-budget equilibrium of the skewed expansion:
    agents 1,2 split type 7 (the all-high type) with 75/162 each, agent 3
    owns everything else plus the 12/162 remainder."""
    m = skewed_instance.m
    assert m == 8
    x = [[F(0)] * m for _ in range(3)]
    x[0][6] = F(75, 162)
    x[1][6] = F(75, 162)
    for j in range(m):
        x[2][j] = F(1) if j != 6 else F(12, 162)
    p = [F(16, 600), F(2, 600), F(144, 600), F(18, 600),
         F(144, 600), F(18, 600), F(1296, 600), F(162, 600)]
    return MarketSolution.from_parts(skewed_instance, x, p, [F(1)] * 3)


@pytest.fixture
def quantile_mismatch_values() -> np.ndarray:
    """Three rounds, two agents: the greedy-by-quantile outcome (agent 2
    takes round 1, agent 1 the rest) is not efficient."""
    eps = 0.01
    return np.array([
        [0.9, 0.5 + eps],
        [0.1, 0.5 - eps],
        [0.1, 0.5 - eps],
    ])


def random_instance(rng, n_max: int = 5, m_max: int = 10) -> OfflineInstance:
    n = int(rng.integers(1, n_max + 1))
    m = int(rng.integers(1, m_max + 1))
    return OfflineInstance.make(rng.random((n, m)))


def random_distribution(rng, n: int = 3, m_max: int = 4) -> TypeDistribution:
    m = int(rng.integers(2, m_max + 1))
    values = rng.random((n, m))
    probs = rng.random(m)
    probs = probs / probs.sum()
    probs[-1] = 1.0 - probs[:-1].sum()
    return TypeDistribution.make([float(p) for p in probs], values.tolist(),
                                 exact=False)
