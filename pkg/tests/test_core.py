import json
from fractions import Fraction as F

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairdiv import (
    FractionalAllocation,
    InstanceError,
    IntegralAllocation,
    OfflineInstance,
    TypeDistribution,
    bundle_value,
    fractional_value,
    scale_values,
)
from fairdiv.core import (
    distribution_from_json,
    distribution_to_json,
    solution_from_json,
    solution_to_json,
)


class TestTypeDistribution:
    def test_probs_must_sum_to_one(self):
        with pytest.raises(InstanceError, match="sum"):
            TypeDistribution.make([0.5, 0.49], [[1.0, 1.0]])

    def test_zero_probability_rejected(self):
        with pytest.raises(InstanceError, match="positive"):
            TypeDistribution.make([0.0, 1.0], [[1.0, 1.0]])

    def test_negative_value_rejected(self):
        with pytest.raises(InstanceError, match="negative"):
            TypeDistribution.make([1.0], [[-0.1]])

    def test_exact_mode_inferred(self):
        dist = TypeDistribution.make([F(1, 2), F(1, 2)], [[F(1), F(0)]])
        assert dist.exact
        assert not dist.to_float().exact


class TestScaleValues:
    def test_scales_by_probability(self, skewed_expansion):
        inst = scale_values(skewed_expansion.dist)
        # the all-high type: agent 3 values it 1, drawn w.p. 1296/1700
        assert inst.values[2, 6] == F(1296, 1700)

    def test_single_point_mass(self):
        dist = TypeDistribution.make([1.0], [[1.0]])
        inst = scale_values(dist)
        assert inst.values[0, 0] == 1.0

    def test_hand_multiplication(self):
        dist = TypeDistribution.make([0.25, 0.75], [[0.8, 0.4]])
        inst = scale_values(dist)
        assert np.allclose(np.asarray(inst.values, float), [[0.2, 0.3]])

    def test_dead_types_dropped_with_map(self):
        dist = TypeDistribution.make([0.25, 0.25, 0.5],
                                     [[0.0, 0.5, 0.2], [0.0, 0.0, 0.4]])
        inst = scale_values(dist)
        assert inst.kept == (1, 2)
        assert inst.original_m == 3

    def test_all_zero_rejected(self):
        dist = TypeDistribution.make([1.0], [[0.0], [0.0]])
        with pytest.raises(InstanceError):
            scale_values(dist)

    def test_monotone_in_values_and_probs(self):
        rng = np.random.Generator(np.random.Philox(key=3))
        for _ in range(25):
            probs = rng.random(4)
            probs /= probs.sum()
            probs[-1] = 1.0 - probs[:-1].sum()
            values = rng.random((2, 4)) + 0.01
            base = scale_values(TypeDistribution.make(list(probs), values.tolist(),
                                                      exact=False))
            bumped = values.copy()
            bumped[0, 2] += 0.1
            up = scale_values(TypeDistribution.make(list(probs), bumped.tolist(),
                                                    exact=False))
            assert up.values[0, 2] >= base.values[0, 2]

    def test_expand_round_trip_preserves_shares(self):
        dist = TypeDistribution.make([0.25, 0.25, 0.5],
                                     [[0.0, 0.5, 0.2], [0.0, 0.0, 0.4]])
        inst = scale_values(dist)
        reduced = np.array([[0.5, 0.25], [0.5, 0.75]])
        full = inst.expand_to_original(reduced)
        assert full.shape == (2, 3)
        assert np.all(full[:, 0] == 0)
        assert np.array_equal(inst.restrict_to_kept(full), reduced)


class TestOfflineInstance:
    def test_budgets_positive(self):
        with pytest.raises(InstanceError, match="budget"):
            OfflineInstance.make([[1.0]], [0.0])

    def test_agent_valuing_nothing_rejected(self):
        with pytest.raises(InstanceError, match="agent 1"):
            OfflineInstance.make([[1.0, 0.5], [0.0, 0.0]])


class TestFractionalAllocation:
    def test_overallocated_column_rejected(self):
        with pytest.raises(InstanceError, match="over-allocated"):
            FractionalAllocation.make([[0.7], [0.7]])

    def test_out_of_range_entry_rejected(self):
        with pytest.raises(InstanceError, match="outside"):
            FractionalAllocation.make([[1.5]])

    def test_rounding_noise_clamped(self):
        alloc = FractionalAllocation.make([[1.0 + 5e-13], [-5e-13]])
        assert alloc.shares[0, 0] == 1.0
        assert alloc.shares[1, 0] == 0.0


class TestValues:
    def test_empty_bundle_is_zero(self):
        values = np.array([[0.9, 0.1, 0.1], [0.51, 0.49, 0.49]])
        assert bundle_value(0, [], values) == 0

    def test_two_small_items(self, quantile_mismatch_values):
        values = quantile_mismatch_values.T
        assert bundle_value(0, [1, 2], values) == pytest.approx(0.2)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_matches_naive_resummation(self, seed):
        rng = np.random.Generator(np.random.Philox(key=seed))
        values = rng.random((3, 8))
        bundle = [int(t) for t in rng.choice(8, size=4, replace=False)]
        for agent in range(3):
            naive = 0.0
            for t in bundle:
                naive += values[agent, t]
            assert bundle_value(agent, bundle, values) == pytest.approx(naive, abs=1e-12)

    def test_fractional_zero_row(self, trio_mirror):
        assert fractional_value(0, [0.0, 0.0], trio_mirror) == 0

    def test_fractional_equal_split(self, trio_mirror):
        assert fractional_value(0, [1 / 3, 1 / 3], trio_mirror) == pytest.approx(2 / 3)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_fractional_matches_dot(self, seed):
        rng = np.random.Generator(np.random.Philox(key=seed))
        inst = OfflineInstance.make(rng.random((3, 5)))
        row = rng.random(5)
        for agent in range(3):
            want = float(np.dot(np.asarray(inst.values[agent], float), row))
            assert abs(fractional_value(agent, row, inst) - want) <= 1e-12

    @given(st.integers(0, 2**32 - 1), st.floats(0, 2), st.floats(0, 2))
    @settings(max_examples=30, deadline=None)
    def test_fractional_linearity(self, seed, a, b):
        rng = np.random.Generator(np.random.Philox(key=seed))
        inst = OfflineInstance.make(rng.random((2, 4)))
        r1, r2 = rng.random(4), rng.random(4)
        combo = [a * x + b * y for x, y in zip(r1, r2)]
        lhs = fractional_value(0, combo, inst)
        rhs = a * fractional_value(0, r1, inst) + b * fractional_value(0, r2, inst)
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(rhs))


class TestIntegralAllocation:
    def test_bundles_must_partition(self):
        with pytest.raises(InstanceError, match="partition"):
            IntegralAllocation(((0,), (0,)), np.zeros((2, 1)))

    def test_empty_allocation(self):
        alloc = IntegralAllocation(((), ()), np.zeros((2, 0)))
        assert alloc.T == 0


class TestSerialization:
    def test_distribution_round_trip(self, trio_mirror_dist):
        doc = distribution_to_json(trio_mirror_dist)
        back, budgets = distribution_from_json(doc)
        assert budgets is None
        assert np.allclose(np.asarray(back.values, float),
                           np.asarray(trio_mirror_dist.values, float))

    def test_exact_numbers_survive(self, skewed_expansion):
        doc = distribution_to_json(skewed_expansion.dist)
        back, _ = distribution_from_json(doc)
        assert back.exact
        assert back.probs[6] == F(1296, 1700)

    def test_malformed_document(self):
        with pytest.raises(InstanceError):
            distribution_from_json({"types": [{"prob": 1.0}]})

    def test_solution_round_trip(self, skewed_instance, skewed_reference_solution):
        doc = solution_to_json(skewed_reference_solution, skewed_instance)
        text = json.dumps(doc)
        back = solution_from_json(json.loads(text), skewed_instance)
        assert back.shares[0, 6] == F(75, 162)
        assert back.prices[6] == F(1296, 600)
