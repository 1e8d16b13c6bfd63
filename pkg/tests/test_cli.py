import csv
import json

import numpy as np
import pytest

from fairdiv import cli
from fairdiv.market import SolverError


def write_config(tmp_path, doc, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture
def mirror_config_doc():
    return {
        "adversary": {
            "kind": "correlated_iid",
            "n": 3,
            "types": [
                {"prob": 0.5, "values": [1.0, 0.5, 1.0]},
                {"prob": 0.5, "values": [1.0, 1.0, 0.5]},
            ],
        },
        "allocator": "pocr",
        "T": 64,
        "trials": 3,
        "seed": 11,
        "checkpoints": [32, 64],
    }


class TestConfig:
    def test_round_trip(self, tmp_path, mirror_config_doc):
        path = write_config(tmp_path, mirror_config_doc)
        config = cli.load_config(path)
        assert config.allocator == "pocr"
        assert config.checkpoints == (32, 64)

    def test_bad_checkpoint_rejected(self, tmp_path, mirror_config_doc):
        mirror_config_doc["checkpoints"] = [100]
        path = write_config(tmp_path, mirror_config_doc)
        with pytest.raises(Exception):
            cli.load_config(path)


class TestRunCommand:
    def test_run_writes_summary_and_trace(self, tmp_path, mirror_config_doc):
        config_path = write_config(tmp_path, mirror_config_doc)
        rc = cli.main(["run", "--config", str(config_path),
                       "--out-dir", str(tmp_path)])
        assert rc == 0
        with open(tmp_path / "summary.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3 * 2
        assert set(rows[0].keys()) == {
            "trial", "checkpoint_t", "max_envy", "ef", "ef1",
            "u_0", "u_1", "u_2", "po_verdict",
        }
        final_rows = [r for r in rows if r["checkpoint_t"] == "64"]
        assert all(r["po_verdict"] == "efficient" for r in final_rows)
        assert (tmp_path / "trace.jsonl").exists()

    def test_empty_horizon_zero_envy_row(self, tmp_path, mirror_config_doc):
        mirror_config_doc.update(T=0, trials=1, checkpoints=[])
        mirror_config_doc["allocator"] = "uniform"
        config_path = write_config(tmp_path, mirror_config_doc)
        rc = cli.main(["run", "--config", str(config_path),
                       "--out-dir", str(tmp_path)])
        assert rc == 0
        with open(tmp_path / "summary.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1
        assert float(rows[0]["max_envy"]) == 0.0
        assert rows[0]["ef"] == "True"

    def test_adaptive_adversary_with_stepwise_allocator(self, tmp_path):
        doc = {
            "adversary": {"kind": "adaptive_sm", "r": 0.5, "n": 2},
            "allocator": "utilitarian", "T": 32, "trials": 2, "seed": 4,
            "checkpoints": [32],
        }
        config_path = write_config(tmp_path, doc)
        rc = cli.main(["run", "--config", str(config_path),
                       "--out-dir", str(tmp_path)])
        assert rc == 0
        with open(tmp_path / "summary.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2
        assert all(float(r["u_0"]) + float(r["u_1"]) > 0 for r in rows)

    def test_byte_identical_reruns(self, tmp_path, mirror_config_doc):
        config_path = write_config(tmp_path, mirror_config_doc)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert cli.main(["run", "--config", str(config_path),
                         "--out-dir", str(out1)]) == 0
        assert cli.main(["run", "--config", str(config_path),
                         "--out-dir", str(out2)]) == 0
        assert (out1 / "summary.csv").read_bytes() == (out2 / "summary.csv").read_bytes()

    def test_seed_flag_override(self, tmp_path, mirror_config_doc):
        config_path = write_config(tmp_path, mirror_config_doc)
        out1, out2, out3 = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        cli.main(["run", "--config", str(config_path), "--out-dir", str(out1)])
        cli.main(["run", "--config", str(config_path), "--out-dir", str(out2),
                  "--seed", "123"])
        cli.main(["run", "--config", str(config_path), "--out-dir", str(out3),
                  "--seed", "123"])
        assert (out1 / "summary.csv").read_bytes() != (out2 / "summary.csv").read_bytes()
        assert (out2 / "summary.csv").read_bytes() == (out3 / "summary.csv").read_bytes()

    def test_seed_env_override_changes_output(self, tmp_path, mirror_config_doc,
                                              monkeypatch):
        config_path = write_config(tmp_path, mirror_config_doc)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        cli.main(["run", "--config", str(config_path), "--out-dir", str(out1)])
        monkeypatch.setenv("FAIRDIV_SEED", "999")
        cli.main(["run", "--config", str(config_path), "--out-dir", str(out2)])
        assert (out1 / "summary.csv").read_bytes() != (out2 / "summary.csv").read_bytes()

    def test_substream_independence(self, tmp_path, mirror_config_doc):
        config_path = write_config(tmp_path, mirror_config_doc)
        out1 = tmp_path / "a"
        cli.main(["run", "--config", str(config_path), "--out-dir", str(out1)])
        mirror_config_doc["trials"] = 5
        config_path2 = write_config(tmp_path, mirror_config_doc, "config5.json")
        out2 = tmp_path / "b"
        cli.main(["run", "--config", str(config_path2), "--out-dir", str(out2)])
        rows1 = (out1 / "summary.csv").read_text().splitlines()
        rows2 = (out2 / "summary.csv").read_text().splitlines()
        assert rows2[:len(rows1)] == rows1

    def test_parallel_jobs_match_serial(self, tmp_path, mirror_config_doc):
        config_path = write_config(tmp_path, mirror_config_doc)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        cli.main(["run", "--config", str(config_path), "--out-dir", str(out1)])
        cli.main(["run", "--config", str(config_path), "--out-dir", str(out2),
                  "--jobs", "2"])
        assert (out1 / "summary.csv").read_bytes() == (out2 / "summary.csv").read_bytes()

    def test_round_trace_flag(self, tmp_path, mirror_config_doc):
        mirror_config_doc.update(trials=1, T=16, checkpoints=[16])
        config_path = write_config(tmp_path, mirror_config_doc)
        rc = cli.main(["run", "--config", str(config_path),
                       "--out-dir", str(tmp_path), "--trace"])
        assert rc == 0
        lines = (tmp_path / "rounds.jsonl").read_text().splitlines()
        assert len(lines) == 16
        first = json.loads(lines[0])
        assert set(first) == {"trial", "t", "type", "agent"}


class TestExitCodes:
    def test_unreadable_config(self, tmp_path):
        bad = tmp_path / "nope.json"
        bad.write_text("{not json")
        assert cli.main(["run", "--config", str(bad)]) == cli.EXIT_BAD_CONFIG

    def test_incompatible_pairing(self, tmp_path):
        doc = {
            "adversary": {"kind": "adaptive_sm", "r": 0.5},
            "allocator": "pocr", "T": 8, "trials": 1, "seed": 1,
        }
        path = write_config(tmp_path, doc)
        assert cli.main(["run", "--config", str(path),
                         "--out-dir", str(tmp_path)]) == cli.EXIT_INCOMPATIBLE

    def test_solver_failure_exit_code(self, tmp_path, mirror_config_doc,
                                      monkeypatch):
        config_path = write_config(tmp_path, mirror_config_doc)

        def boom(*args, **kwargs):
            raise SolverError("forced")

        monkeypatch.setattr(cli, "compute_cisef", boom)
        rc = cli.main(["precompute", "--config", str(config_path),
                       "--out-dir", str(tmp_path)])
        assert rc == cli.EXIT_NO_CONVERGENCE


class TestPrecomputeAuditReport:
    def test_precompute_then_run_then_audit(self, tmp_path, mirror_config_doc):
        config_path = write_config(tmp_path, mirror_config_doc)
        rc = cli.main(["precompute", "--config", str(config_path),
                       "--out-dir", str(tmp_path), "--trace"])
        assert rc == 0
        doc = json.loads((tmp_path / "solution.json").read_text())
        assert doc["policy"] == "pocr"
        assert "cliques" in doc
        # budgets end up unequal: the tied agent's budget is strictly largest
        e = [float(x) for x in doc["e"]]
        assert e[0] > max(e[1], e[2])
        rc = cli.main(["run", "--config", str(config_path),
                       "--out-dir", str(tmp_path),
                       "--precomputed", str(tmp_path / "solution.json")])
        assert rc == 0
        rc = cli.main(["audit", "--config", str(config_path),
                       "--solution", str(tmp_path / "solution.json")])
        assert rc == 0

    def test_precompute_rational_exact(self, tmp_path):
        doc = {
            "adversary": {
                "kind": "correlated_iid",
                "n": 3,
                "types": [
                    {"prob": "1/2", "values": ["1", "1/2", "1"]},
                    {"prob": "1/2", "values": ["1", "1", "1/2"]},
                ],
            },
            "allocator": "pocr", "T": 8, "trials": 1, "seed": 3,
        }
        config_path = write_config(tmp_path, doc)
        rc = cli.main(["precompute", "--config", str(config_path),
                       "--out-dir", str(tmp_path), "--rational"])
        assert rc == 0
        out = json.loads((tmp_path / "solution.json").read_text())
        assert out["e"][0] == "17/16"

    def test_strong_ef_precompute(self, tmp_path):
        doc = {
            "adversary": {
                "kind": "independent_iid",
                "marginals": [
                    {"support": ["0", "1"], "probs": ["1/10", "9/10"]},
                    {"support": ["0", "1"], "probs": ["1/10", "9/10"]},
                    {"support": ["1", "2"], "probs": ["16/17", "1/17"]},
                ],
            },
            "allocator": "pocr", "T": 8, "trials": 1, "seed": 3,
            "strong_ef": True,
        }
        config_path = write_config(tmp_path, doc)
        rc = cli.main(["precompute", "--config", str(config_path),
                       "--out-dir", str(tmp_path), "--rational"])
        assert rc == 0
        out = json.loads((tmp_path / "solution.json").read_text())
        assert all(len(c) == 1 for c in out["cliques"])
        rc = cli.main(["audit", "--config", str(config_path),
                       "--solution", str(tmp_path / "solution.json")])
        assert rc == 0

    def test_report_aggregates(self, tmp_path, mirror_config_doc):
        config_path = write_config(tmp_path, mirror_config_doc)
        cli.main(["run", "--config", str(config_path), "--out-dir", str(tmp_path)])
        rc = cli.main(["report", str(tmp_path / "summary.csv"),
                       "--out", str(tmp_path / "report.csv")])
        assert rc == 0
        with open(tmp_path / "report.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [int(r["checkpoint_t"]) for r in rows] == [32, 64]
        assert all(0.0 <= float(r["p_ef1"]) <= 1.0 for r in rows)

    def test_report_merges_multiple_summaries(self, tmp_path, mirror_config_doc):
        config_path = write_config(tmp_path, mirror_config_doc)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        cli.main(["run", "--config", str(config_path), "--out-dir", str(out1)])
        cli.main(["run", "--config", str(config_path), "--out-dir", str(out2),
                  "--seed", "99"])
        rows = cli.aggregate_report([out1 / "summary.csv", out2 / "summary.csv"])
        assert all(r["runs"] == 6 for r in rows)
