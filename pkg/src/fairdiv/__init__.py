"""fairdiv: online fair division of indivisible items.

Computes budgeted Fisher-market equilibria, refines them into
clique-identical strongly envy-free fractional allocations, rounds them
online against a hierarchy of adversaries, and measures the envy and
efficiency of the outcomes.
"""

from fairdiv._backend import backend_name
from fairdiv.adversary import (
    AdaptiveStateMachine,
    AdversaryConfig,
    IndependentExpansion,
    correlated_iid,
    identical_iid,
    independent_expansion,
    lower_bound_instance,
    lower_bound_prefix,
)
from fairdiv.cisef import (
    CliquePartition,
    IndifferenceGraph,
    SurgeryError,
    Tolerances,
    Transfer,
    TransferError,
    apply_transfer,
    budget_shift,
    build_indifference_graph,
    choose_step_size,
    compute_cisef,
    operation1_eliminate_cycles,
    operation2_merge_rebalance,
    strongify_independent,
)
from fairdiv.core import (
    FractionalAllocation,
    InstanceError,
    IntegralAllocation,
    MarketSolution,
    OfflineInstance,
    OnlineRun,
    TypeDistribution,
    bundle_value,
    fractional_value,
    load_distribution,
    scale_values,
)
from fairdiv.market import (
    KktReport,
    SolverError,
    check_kkt,
    mbb_ratios,
    solve_eg,
    solve_eg_exact,
)
from fairdiv.metrics import (
    CisefAudit,
    EnvyReport,
    PoVerdict,
    alpha_pareto_improvable,
    envy_report,
    envy_trace_summary,
    is_cisef,
    is_pareto_efficient_integral,
)
from fairdiv.online import (
    AllocatorState,
    Precomputation,
    pocr_step,
    por_step,
    precompute_policy,
    round_robin_step,
    run_adaptive,
    run_online,
    run_online_sequence,
    uniform_step,
    utilitarian_step,
)

__version__ = "0.1.0"
