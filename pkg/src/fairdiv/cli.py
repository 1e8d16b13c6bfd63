"""Experiment runner.

Subcommands:

* ``precompute`` — solve the offline problem for a guided allocator and
  write ``solution.json`` (allocation, prices, budgets, cliques);
* ``run`` — execute seeded trial batches of one allocator against one
  adversary, writing ``summary.csv`` and ``trace.jsonl``;
* ``audit`` — re-certify a serialized solution (equilibrium conditions and,
  when cliques are present, the clique-identical strong-envy-freeness
  audit);
* ``report`` — aggregate one or more summary CSVs into per-checkpoint
  statistics.

Summary CSV columns: ``trial`` (0-based), ``checkpoint_t``, ``max_envy``
(maximum pairwise envy at the checkpoint), ``ef``/``ef1`` (booleans at the
checkpoint), ``u_<i>`` (agent i's bundle value), ``po_verdict`` (only on
the final checkpoint row: certificate or capped exhaustive search, blank
when neither applies).  Trace JSONL carries one line per trial checkpoint,
plus one line per round under ``--trace``.

Exit codes: 0 success, 1 unreadable config, 2 incompatible
allocator/adversary pairing, 3 solver non-convergence.  The environment
variable ``FAIRDIV_SEED`` overrides the config seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fairdiv import adversary as adv
from fairdiv import core, metrics, online
from fairdiv.cisef import CliquePartition, compute_cisef, strongify_independent
from fairdiv.core import InstanceError
from fairdiv.market import SolverError, check_kkt, solve_eg

EXIT_OK = 0
EXIT_BAD_CONFIG = 1
EXIT_INCOMPATIBLE = 2
EXIT_NO_CONVERGENCE = 3

_DIST_KINDS = ("identical_iid", "independent_iid", "correlated_iid")
_COMPAT = {
    "utilitarian": _DIST_KINDS + ("nonadaptive_lb", "adaptive_sm"),
    "uniform": _DIST_KINDS + ("nonadaptive_lb", "adaptive_sm"),
    "round_robin": _DIST_KINDS + ("nonadaptive_lb", "adaptive_sm"),
    "por": _DIST_KINDS,
    "pocr": _DIST_KINDS,
}


@dataclass(frozen=True)
class ExperimentConfig:
    adversary: adv.AdversaryConfig
    allocator: str
    T: int
    trials: int
    seed: int
    checkpoints: tuple[int, ...] = ()
    outputs: dict = field(default_factory=dict)
    strong_ef: bool = False

    def __post_init__(self):
        if self.trials < 1:
            raise InstanceError("trials must be at least 1")
        if self.T < 0:
            raise InstanceError("T must be nonnegative")
        if self.allocator not in online.POLICIES:
            raise InstanceError(f"unknown allocator {self.allocator!r}")
        if any(not 1 <= c <= self.T for c in self.checkpoints):
            raise InstanceError("checkpoints must lie in [1, T]")


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        doc = json.load(fh)
    adv_doc = dict(doc["adversary"])
    kind = adv_doc.pop("kind")
    return ExperimentConfig(
        adversary=adv.AdversaryConfig(kind=kind, params=adv_doc),
        allocator=doc["allocator"],
        T=int(doc["T"]),
        trials=int(doc.get("trials", 1)),
        seed=int(doc.get("seed", 0)),
        checkpoints=tuple(doc.get("checkpoints", ())),
        outputs=dict(doc.get("outputs", {})),
        strong_ef=bool(doc.get("strong_ef", False)),
    )


def build_distribution(config: ExperimentConfig):
    """Instantiate the adversary; returns (dist, expansion) for the
    distribution kinds, where expansion is None unless product-structured."""
    kind = config.adversary.kind
    p = config.adversary.params
    if kind == "identical_iid":
        exp = adv.identical_iid(
            [core.parse_number(v) for v in p["support"]],
            [core.parse_number(q) for q in p["probs"]],
            int(p["n"]),
        )
        return exp.dist, exp
    if kind == "independent_iid":
        marginals = [
            ([core.parse_number(v) for v in m["support"]],
             [core.parse_number(q) for q in m["probs"]])
            for m in p["marginals"]
        ]
        exp = adv.independent_expansion(marginals)
        return exp.dist, exp
    if kind == "correlated_iid":
        dist, _ = core.distribution_from_json({"n": p["n"], "types": p["types"]})
        return dist, None
    raise InstanceError(f"adversary {kind!r} is not distribution-based")


def _check_compat(config: ExperimentConfig):
    if config.adversary.kind not in _COMPAT[config.allocator]:
        raise CompatError(
            f"allocator {config.allocator!r} cannot face adversary "
            f"{config.adversary.kind!r}"
        )


class CompatError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# precompute
# ---------------------------------------------------------------------------


def precompute(config: ExperimentConfig, out_dir: Path, *, rational: bool = False,
               trace: bool = False, tol: float = 1e-8) -> Path:
    """Solve the offline problem for the configured guided allocator.

    Writes ``solution.json`` (and ``surgery_trace.jsonl`` under ``--trace``)
    and returns the solution path.  With ``--rational`` the instance must
    have rational inputs; the solve and the surgery then run exactly.
    """
    _check_compat(config)
    if config.allocator not in ("por", "pocr"):
        raise InstanceError("precompute applies to the guided allocators only")
    dist, expansion = build_distribution(config)
    if rational and not dist.exact:
        raise InstanceError("--rational requires rational probabilities and values")
    if not rational:
        dist = dist.to_float()
    instance = core.scale_values(dist)
    trace_log: list = []
    partition = None
    if config.allocator == "por":
        solution = solve_eg(instance, tol=tol)
    else:
        solution, partition = compute_cisef(instance, tol=tol, trace=trace_log)
        if config.strong_ef:
            if expansion is None:
                raise InstanceError(
                    "strong_ef needs an independent-agent (product) adversary"
                )
            solution, partition = strongify_independent(
                expansion, instance, solution, partition, trace=trace_log
            )
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = core.solution_to_json(solution, instance)
    doc["policy"] = config.allocator
    if partition is not None:
        doc["cliques"] = [list(c) for c in partition.cliques]
    path = out_dir / config.outputs.get("solution", "solution.json")
    path.write_text(json.dumps(doc, indent=1))
    if trace:
        tpath = out_dir / "surgery_trace.jsonl"
        with open(tpath, "w") as fh:
            for entry in trace_log:
                fh.write(json.dumps(entry) + "\n")
    return path


def load_precomputed(path, dist: core.TypeDistribution, policy: str) -> online.Precomputation:
    with open(path) as fh:
        doc = json.load(fh)
    instance = core.scale_values(dist.to_float())
    solution = core.solution_from_json(doc, instance)
    partition = None
    if doc.get("cliques") is not None:
        partition = CliquePartition(tuple(tuple(c) for c in doc["cliques"]))
    return online.precompute_policy(
        dist.to_float(), policy, solution=solution, partition=partition
    )


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def _prefix_flags(allocation: core.IntegralAllocation, run: core.OnlineRun, t: int):
    bundles = tuple(
        tuple(int(s) for s in np.nonzero(run.assignments[:t] == i)[0])
        for i in range(allocation.n)
    )
    sub = core.IntegralAllocation(bundles, allocation.round_values[:, :t])
    rep = metrics.envy_report(sub)
    return rep.ef, rep.ef1


_WORKER_CTX: dict = {}


def _run_one_trial(args):
    (trial, config, dist_doc, values_seq, pre) = args
    checkpoints = config.checkpoints or None
    if values_seq is not None:
        allocation, run = online.run_online_sequence(
            values_seq, config.allocator, config.seed, stream=trial,
            checkpoints=checkpoints,
        )
    elif config.adversary.kind == "adaptive_sm":
        machine = adv.AdaptiveStateMachine(
            r=float(config.adversary.params["r"]), T=config.T,
            n=int(config.adversary.params.get("n", 2)),
        )
        allocation, run = online.run_adaptive(
            machine, config.allocator, config.seed, stream=trial,
            checkpoints=checkpoints,
        )
    else:
        dist, _ = core.distribution_from_json(dist_doc)
        allocation, run = online.run_online(
            dist.to_float(), config.allocator, config.T, config.seed, stream=trial,
            checkpoints=checkpoints, precomputed=pre,
        )
    rows = []
    if run.T == 0:
        return trial, [{
            "trial": trial, "checkpoint_t": 0, "max_envy": 0.0,
            "ef": True, "ef1": True,
            "utilities": [0.0] * allocation.n, "po_verdict": "efficient",
        }]
    for k, t in enumerate(run.checkpoints):
        ef, ef1 = _prefix_flags(allocation, run, t)
        utilities = [run.value_trace[k][i, i] for i in range(allocation.n)]
        verdict = ""
        if t == run.T:
            verdict = _final_verdict(config, allocation, run, pre)
        rows.append({
            "trial": trial, "checkpoint_t": t,
            "max_envy": float(run.envy_trace[k].max()),
            "ef": ef, "ef1": ef1,
            "utilities": [float(u) for u in utilities],
            "po_verdict": verdict,
        })
    return trial, rows


def _final_verdict(config, allocation, run, pre) -> str:
    n = allocation.n
    if pre is not None:
        v = metrics.is_pareto_efficient_integral(
            allocation, mode="certificate",
            xstar=pre.xstar_full, arrivals=run.arrivals,
        )
        return v.status
    if run.T > 0 and n ** run.T <= 100_000:
        return metrics.is_pareto_efficient_integral(allocation, mode="brute").status
    return ""


def run_experiment(config: ExperimentConfig, out_dir: Path, *, jobs: int = 1,
                   trace: bool = False, precomputed_path=None,
                   rational: bool = False, tol: float = 1e-8) -> Path:
    """Execute the configured trial batch and write summary + trace files.

    Trial k draws from substream k of the base seed, so the batch is
    deterministic and each trial is independent of the others' presence.
    Returns the summary CSV path.
    """
    _check_compat(config)
    out_dir.mkdir(parents=True, exist_ok=True)
    dist_doc = None
    values_seq = None
    pre = None
    if config.adversary.kind in _DIST_KINDS:
        dist, expansion = build_distribution(config)
        dist_doc = core.distribution_to_json(dist)
        if config.allocator in ("por", "pocr"):
            if precomputed_path is not None:
                pre = load_precomputed(precomputed_path, dist, config.allocator)
            elif rational or config.strong_ef:
                instance = core.scale_values(dist if rational else dist.to_float())
                if config.allocator == "por":
                    solution = solve_eg(instance, tol=tol)
                    partition = None
                else:
                    solution, partition = compute_cisef(instance, tol=tol)
                    if config.strong_ef:
                        solution, partition = strongify_independent(
                            expansion, instance, solution, partition
                        )
                solution = solution.to_float(instance)
                pre = online.precompute_policy(
                    dist.to_float(), config.allocator,
                    solution=solution, partition=partition,
                )
            else:
                pre = online.precompute_policy(dist.to_float(), config.allocator, tol=tol)
    elif config.adversary.kind == "nonadaptive_lb":
        p = config.adversary.params
        values_seq = adv.lower_bound_instance(
            int(p["n"]), config.T, float(p["epsilon"])
        )
        if "prefix" in p:
            values_seq = adv.lower_bound_prefix(values_seq, int(p["n"]), int(p["prefix"]))
    args = [(trial, config, dist_doc, values_seq, pre) for trial in range(config.trials)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one_trial, args))
    else:
        results = [_run_one_trial(a) for a in args]
    results.sort(key=lambda pair: pair[0])

    n_agents = len(results[0][1][0]["utilities"]) if results and results[0][1] else 0
    summary_path = out_dir / config.outputs.get("summary", "summary.csv")
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["trial", "checkpoint_t", "max_envy", "ef", "ef1"]
            + [f"u_{i}" for i in range(n_agents)] + ["po_verdict"]
        )
        for trial, rows in results:
            for row in rows:
                writer.writerow(
                    [row["trial"], row["checkpoint_t"], repr(row["max_envy"]),
                     row["ef"], row["ef1"]]
                    + [repr(u) for u in row["utilities"]] + [row["po_verdict"]]
                )
    trace_path = out_dir / config.outputs.get("trace", "trace.jsonl")
    with open(trace_path, "w") as fh:
        for trial, rows in results:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
    if trace:
        _write_round_traces(config, out_dir, dist_doc, values_seq, pre)
    return summary_path


def _write_round_traces(config, out_dir, dist_doc, values_seq, pre):
    path = out_dir / "rounds.jsonl"
    with open(path, "w") as fh:
        for trial in range(config.trials):
            if values_seq is not None:
                _, run = online.run_online_sequence(
                    values_seq, config.allocator, config.seed, stream=trial,
                    checkpoints=config.checkpoints or None,
                )
            elif config.adversary.kind == "adaptive_sm":
                machine = adv.AdaptiveStateMachine(
                    r=float(config.adversary.params["r"]), T=config.T,
                    n=int(config.adversary.params.get("n", 2)),
                )
                _, run = online.run_adaptive(
                    machine, config.allocator, config.seed, stream=trial,
                    checkpoints=config.checkpoints or None,
                )
            else:
                dist, _ = core.distribution_from_json(dist_doc)
                _, run = online.run_online(
                    dist.to_float(), config.allocator, config.T, config.seed,
                    stream=trial, checkpoints=config.checkpoints or None,
                    precomputed=pre,
                )
            for t in range(run.T):
                fh.write(json.dumps({
                    "trial": trial, "t": t + 1,
                    "type": int(run.arrivals[t]), "agent": int(run.assignments[t]),
                }) + "\n")


# ---------------------------------------------------------------------------
# audit / report
# ---------------------------------------------------------------------------


def audit(config: ExperimentConfig, solution_path, *, tol: float = 1e-6,
          rational: bool = False) -> dict:
    dist, _ = build_distribution(config)
    if not rational:
        dist = dist.to_float()
    instance = core.scale_values(dist)
    with open(solution_path) as fh:
        doc = json.load(fh)
    solution = core.solution_from_json(doc, instance)
    report = check_kkt(solution, instance, tol)
    out = {
        "kkt_passed": report.passed,
        "kkt_residuals": [report.max_residual_market_clearing,
                          report.max_residual_mbb_bound,
                          report.max_residual_mbb_tight],
    }
    if doc.get("cliques") is not None:
        partition = CliquePartition(tuple(tuple(c) for c in doc["cliques"]))
        audit_res = metrics.is_cisef(solution, instance, partition, eps=tol)
        out["cisef_passed"] = audit_res.passed
        out["cisef_violations"] = list(audit_res.violations)
    return out


def aggregate_report(summary_paths) -> list[dict]:
    """Collapse summary CSVs into per-checkpoint statistics."""
    by_t: dict[int, list[dict]] = {}
    for path in summary_paths:
        with open(path) as fh:
            for row in csv.DictReader(fh):
                by_t.setdefault(int(row["checkpoint_t"]), []).append(row)
    out = []
    for t in sorted(by_t):
        rows = by_t[t]
        envies = np.array([float(r["max_envy"]) for r in rows])
        out.append({
            "checkpoint_t": t,
            "runs": len(rows),
            "mean_max_envy": float(envies.mean()),
            "worst_max_envy": float(envies.max()),
            "p_ef": float(np.mean([r["ef"] == "True" for r in rows])),
            "p_ef1": float(np.mean([r["ef1"] == "True" for r in rows])),
            "mean_envy_over_t": float(envies.mean() / t),
        })
    return out


# ---------------------------------------------------------------------------
# argparse front end
# ---------------------------------------------------------------------------


def _add_common(sub):
    sub.add_argument("--config", required=True, help="experiment config JSON")
    sub.add_argument("--seed", type=int, default=None, help="override config seed")
    sub.add_argument("--out-dir", default=".", help="output directory")
    sub.add_argument("--rational", action="store_true", help="exact-rational mode")
    sub.add_argument("--trace", action="store_true", help="emit detailed traces")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fairdiv", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)
    p_pre = subs.add_parser("precompute", help="solve the offline problem")
    _add_common(p_pre)
    p_run = subs.add_parser("run", help="run the experiment batch")
    _add_common(p_run)
    p_run.add_argument("--jobs", type=int, default=1, help="trial worker pool size")
    p_run.add_argument("--precomputed", default=None, help="solution.json to reuse")
    p_aud = subs.add_parser("audit", help="re-certify a serialized solution")
    _add_common(p_aud)
    p_aud.add_argument("--solution", required=True)
    p_aud.add_argument("--tol", type=float, default=1e-6)
    p_rep = subs.add_parser("report", help="aggregate summary CSVs")
    p_rep.add_argument("summaries", nargs="+")
    p_rep.add_argument("--out", default="report.csv")
    args = parser.parse_args(argv)

    if args.command == "report":
        rows = aggregate_report(args.summaries)
        with open(args.out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()) if rows else
                                    ["checkpoint_t"])
            writer.writeheader()
            writer.writerows(rows)
        print(f"wrote {args.out} ({len(rows)} checkpoints)")
        return EXIT_OK

    try:
        config = load_config(args.config)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    seed = args.seed
    if os.environ.get("FAIRDIV_SEED"):
        seed = int(os.environ["FAIRDIV_SEED"])
    if seed is not None:
        config = ExperimentConfig(
            adversary=config.adversary, allocator=config.allocator, T=config.T,
            trials=config.trials, seed=seed, checkpoints=config.checkpoints,
            outputs=config.outputs, strong_ef=config.strong_ef,
        )
    out_dir = Path(args.out_dir)

    try:
        if args.command == "precompute":
            path = precompute(config, out_dir, rational=args.rational, trace=args.trace)
            print(f"wrote {path}")
        elif args.command == "run":
            path = run_experiment(
                config, out_dir, jobs=args.jobs, trace=args.trace,
                precomputed_path=args.precomputed, rational=args.rational,
            )
            print(f"wrote {path}")
        elif args.command == "audit":
            result = audit(config, args.solution, tol=args.tol, rational=args.rational)
            print(json.dumps(result, indent=1))
            if not result["kkt_passed"] or not result.get("cisef_passed", True):
                return EXIT_BAD_CONFIG
    except CompatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except SolverError as exc:
        print(f"error: solver did not converge: {exc}", file=sys.stderr)
        if exc.report is not None:
            print(f"best residuals: {exc.report}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    except InstanceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
