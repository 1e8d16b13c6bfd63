import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairdiv import (
    CliquePartition,
    InstanceError,
    IntegralAllocation,
    MarketSolution,
    TypeDistribution,
    alpha_pareto_improvable,
    compute_cisef,
    envy_report,
    envy_trace_summary,
    is_cisef,
    is_pareto_efficient_integral,
    lower_bound_instance,
    precompute_policy,
    run_online,
    run_online_sequence,
    solve_eg,
)
from tests.conftest import random_distribution


def naive_envy(values: np.ndarray, bundles) -> np.ndarray:
    n = len(bundles)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            mine = sum(values[i, t] for t in bundles[i])
            theirs = sum(values[i, t] for t in bundles[j])
            out[i, j] = max(theirs - mine, 0.0)
    return out


class TestEnvyReport:
    def test_identical_bundles_no_envy(self):
        values = np.tile(np.array([[0.5, 0.5]]), (2, 1))
        alloc = IntegralAllocation(((0,), (1,)), values)
        rep = envy_report(alloc)
        assert rep.max_envy == 0.0 and rep.ef and rep.ef1

    def test_single_item_envy_is_ef1(self):
        values = np.array([[1.0], [1.0]])
        alloc = IntegralAllocation(((), (0,)), values)
        rep = envy_report(alloc)
        assert rep.matrix[0, 1] == 1.0
        assert not rep.ef
        assert rep.ef1

    def test_two_item_envy_not_ef1(self):
        values = np.array([[1.0, 1.0], [1.0, 1.0]])
        alloc = IntegralAllocation(((), (0, 1)), values)
        rep = envy_report(alloc)
        assert rep.matrix[0, 1] == 2.0
        assert not rep.ef1

    def test_envy_toward_empty_bundle_blocks_ef1(self):
        # the empty bundle admits no single-item removal, so any envy
        # toward it violates the one-item rule; here there is none
        values = np.array([[0.2], [0.9]])
        alloc = IntegralAllocation(((0,), ()), values)
        rep = envy_report(alloc)
        assert rep.ef1
        assert rep.matrix[1, 0] == 0.9  # envy toward a nonempty bundle

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_matches_double_loop_oracle(self, seed):
        rng = np.random.Generator(np.random.Philox(key=seed))
        n, T = 3, 8
        values = rng.random((n, T))
        assignment = rng.integers(0, n, T)
        bundles = tuple(tuple(np.nonzero(assignment == i)[0]) for i in range(n))
        alloc = IntegralAllocation(bundles, values)
        rep = envy_report(alloc)
        assert np.allclose(rep.matrix, naive_envy(values, bundles))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_ef_implies_ef1(self, seed):
        rng = np.random.Generator(np.random.Philox(key=seed))
        n, T = 3, 6
        values = rng.random((n, T))
        assignment = rng.integers(0, n, T)
        bundles = tuple(tuple(np.nonzero(assignment == i)[0]) for i in range(n))
        rep = envy_report(IntegralAllocation(bundles, values))
        if rep.ef:
            assert rep.ef1


class TestParetoBrute:
    def test_quantile_mismatch_dominated(self, quantile_mismatch_values):
        values = quantile_mismatch_values.T
        alloc = IntegralAllocation(((1, 2), (0,)), values)
        verdict = is_pareto_efficient_integral(alloc, mode="brute")
        assert verdict.status == "dominated"
        u_old = [values[0, 1] + values[0, 2], values[1, 0]]
        dom = verdict.dominating
        u_new = [
            sum(values[0, t] for t in range(3) if dom[t] == 0),
            sum(values[1, t] for t in range(3) if dom[t] == 1),
        ]
        assert u_new[0] >= u_old[0] and u_new[1] >= u_old[1]
        assert sum(u_new) > sum(u_old)

    def test_single_agent_everything_efficient(self):
        values = np.array([[0.3, 0.9, 0.5]])
        alloc = IntegralAllocation(((0, 1, 2),), values)
        assert is_pareto_efficient_integral(alloc, mode="brute").status == "efficient"

    def test_cap_enforced(self):
        values = np.random.default_rng(0).random((4, 11))
        alloc = IntegralAllocation(
            (tuple(range(11)), (), (), ()), values
        )
        with pytest.raises(InstanceError, match="cap"):
            is_pareto_efficient_integral(alloc, mode="brute", cap=1000)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_brute_matches_exhaustive_enumeration(self, seed):
        # oracle-vs-oracle: the pruned depth-first search against a flat
        # vectorized enumeration of every assignment
        rng = np.random.Generator(np.random.Philox(key=seed))
        n, T = 3, 5
        values = rng.random((n, T))
        assignment = rng.integers(0, n, T)
        bundles = tuple(tuple(np.nonzero(assignment == i)[0]) for i in range(n))
        alloc = IntegralAllocation(bundles, values)
        verdict = is_pareto_efficient_integral(alloc, mode="brute")

        u = np.array([sum(values[i, t] for t in b) for i, b in enumerate(bundles)])
        grids = np.stack(np.meshgrid(*([np.arange(n)] * T), indexing="ij"),
                         axis=-1).reshape(-1, T)
        profiles = np.zeros((len(grids), n))
        for i in range(n):
            profiles[:, i] = ((grids == i) * values[i][None, :]).sum(axis=1)
        dominated = bool(np.any(
            np.all(profiles >= u[None, :] - 1e-12, axis=1)
            & (profiles.sum(axis=1) >= u.sum() + 1e-9)
        ))
        assert (verdict.status == "dominated") == dominated

    def test_certificate_and_brute_agree(self, trio_mirror_dist):
        pre = precompute_policy(trio_mirror_dist, "pocr")
        for s in range(15):
            alloc, run = run_online(trio_mirror_dist, "pocr", 7, seed=900 + s,
                                    precomputed=pre, checkpoints=[7])
            cert = is_pareto_efficient_integral(
                alloc, mode="certificate", xstar=pre.xstar_full, arrivals=run.arrivals
            )
            brute = is_pareto_efficient_integral(alloc, mode="brute")
            assert cert.status == "efficient"
            assert brute.status == "efficient"

    def test_certificate_unknown_when_off_support(self, trio_mirror_dist):
        pre = precompute_policy(trio_mirror_dist, "pocr")
        values = np.asarray(trio_mirror_dist.values, float)[:, [0]]
        alloc = IntegralAllocation(((), (0,), ()), values)
        verdict = is_pareto_efficient_integral(
            alloc, mode="certificate", xstar=pre.xstar_full,
            arrivals=np.array([0]),
        )
        assert verdict.status == "unknown"


class TestAlphaPareto:
    def test_welfare_optimum_not_improvable(self):
        values = lower_bound_instance(2, 4, 0.1).T
        u = [2.0, 2.0]  # segment-optimal profile
        assert not alpha_pareto_improvable(u, values, alpha=1.0)

    def test_uniformish_split_improvable(self):
        values = lower_bound_instance(2, 4, 0.1).T
        assert alpha_pareto_improvable([1.1, 1.1], values, alpha=1.0)

    def test_zero_profile_improvable(self):
        values = np.array([[0.5, 0.5], [0.5, 0.5]])
        assert alpha_pareto_improvable([0.0, 0.0], values, alpha=1.0)

    def test_nesting_in_alpha(self):
        # the improvement bar is u/alpha, so clearing a smaller alpha's
        # higher bar clears every larger alpha's bar as well
        rng = np.random.Generator(np.random.Philox(key=19))
        for _ in range(20):
            values = rng.random((2, 5))
            u = values.sum(axis=1) * rng.random(2)
            for lo, hi in ((0.4, 0.7), (0.7, 1.0)):
                if alpha_pareto_improvable(u, values, alpha=lo):
                    assert alpha_pareto_improvable(u, values, alpha=hi)


class TestIsCisef:
    def test_surgery_output_passes(self, graded_trio):
        sol, part = compute_cisef(graded_trio)
        audit = is_cisef(sol, graded_trio, part)
        assert audit.passed

    def test_equal_budget_equilibrium_with_singletons_fails(self, trio_mirror):
        sol = solve_eg(trio_mirror)
        part = CliquePartition(((0,), (1,), (2,)))
        audit = is_cisef(sol, trio_mirror, part)
        assert not audit.passed
        assert not audit.cliques_ok
        assert any("inter-clique" in v for v in audit.violations)

    def test_single_agent_trivially_passes(self):
        from fairdiv import OfflineInstance
        inst = OfflineInstance.make([[0.4, 0.6]])
        sol = MarketSolution.from_parts(inst, [[1.0, 1.0]], [0.4, 0.6])
        audit = is_cisef(sol, inst, CliquePartition(((0,),)))
        assert audit.passed

    def test_scaled_valuation_condition_detects_mismatch(self):
        from fairdiv import OfflineInstance
        # two agents forced into one clique with rows identical but values
        # NOT proportional on an allocated item
        inst = OfflineInstance.make([[0.6, 0.4], [0.4, 0.6]])
        sol = MarketSolution.from_parts(inst, [[0.5, 0.5], [0.5, 0.5]], [1.0, 1.0])
        audit = is_cisef(sol, inst, CliquePartition(((0, 1),)))
        assert not audit.scaled_values_ok


class TestEnvyTraceSummary:
    def test_zero_value_items_zero_envy(self):
        dist = TypeDistribution.make([0.5, 0.5], [[0.0, 0.0], [0.0, 0.0], [0.0, 1e-9]])
        runs = [run_online(dist, "uniform", 64, seed=s)[1] for s in range(5)]
        rows = envy_trace_summary(runs, tol=1e-6)
        assert all(r.mean_max_envy <= 1e-6 for r in rows)

    def test_uniform_envy_scales_like_sqrt(self):
        exp_values = [[0.0, 0.0, 1.0, 1.0], [0.0, 1.0, 0.0, 1.0]]
        dist = TypeDistribution.make([0.25] * 4, exp_values)
        ratios = {}
        for T in (512, 4096):
            runs = [run_online(dist, "uniform", T, seed=100 + s, checkpoints=[T])[1]
                    for s in range(60)]
            row = envy_trace_summary(runs)[0]
            ratios[T] = row.ratio_sqrt_t_log_t
            assert 0.05 <= row.ratio_sqrt_t_log_t <= 5.0
        runs512 = envy_trace_summary(
            [run_online(dist, "uniform", 512, seed=100 + s, checkpoints=[512])[1]
             for s in range(60)]
        )
        assert runs512[0].mean_over_t > 0

    def test_empty_input_rejected(self):
        with pytest.raises(InstanceError):
            envy_trace_summary([])

    def test_rows_serialize(self, trio_mirror_dist):
        import csv
        import io
        import json

        alloc, run = run_online(trio_mirror_dist, "uniform", 32, seed=6)
        from fairdiv.metrics import envy_report_rows
        rows = envy_report_rows(envy_report(alloc))
        assert len(rows) == 6
        json.dumps(rows)
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
        assert buf.getvalue().count("\n") == 7
        summary = envy_trace_summary([run])
        json.dumps([s.to_row() for s in summary])

    def test_mismatched_checkpoints_rejected(self, trio_mirror_dist):
        r1 = run_online(trio_mirror_dist, "uniform", 16, seed=1, checkpoints=[8])[1]
        r2 = run_online(trio_mirror_dist, "uniform", 16, seed=2, checkpoints=[16])[1]
        with pytest.raises(InstanceError):
            envy_trace_summary([r1, r2])

    def test_guided_rounding_envy_vanishes(self):
        # efficient rounding without the clique refinement still has
        # envy growing no faster than sqrt(T log T)
        rng = np.random.Generator(np.random.Philox(key=404))
        dist = random_distribution(rng, n=3, m_max=4)
        pre = precompute_policy(dist, "por")
        rows = {}
        for T in (1000, 8000):
            runs = [run_online(dist, "por", T, seed=300 + s, checkpoints=[T],
                               precomputed=pre)[1] for s in range(60)]
            rows[T] = envy_trace_summary(runs)[0]
            assert rows[T].ratio_sqrt_t_log_t <= 5.0
        assert rows[1000].mean_over_t > rows[8000].mean_over_t

    def test_strongly_ef_guide_reaches_envy_freeness(self, trio_mirror_dist):
        pre = precompute_policy(trio_mirror_dist, "pocr")
        T = 4096
        runs = [run_online(trio_mirror_dist, "pocr", T, seed=700 + s,
                           checkpoints=[T], precomputed=pre)[1] for s in range(40)]
        row = envy_trace_summary(runs)[0]
        assert row.p_envy_free >= 0.9
