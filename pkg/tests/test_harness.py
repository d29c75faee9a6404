import json
import os
from pathlib import Path

import pytest
from click.testing import CliRunner

from hybridflow import harness
from hybridflow.cli import main, parse_seeds

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def demo_config():
    return harness.load_config(CONFIG_DIR / "demo.json")


def transfer_config():
    return harness.load_config(CONFIG_DIR / "transfer_two_phase.json")


class TestRunExperiment:
    def test_all_stages_disabled_echoes_config(self):
        config = {"version": 1, "seed": 3, "stages": {}}
        report = harness.run_experiment(config)
        assert report.data["config"] == config
        assert report.data["stages"] == {}
        assert report.data["seed"] == 3

    def test_reproducible_byte_identical(self, tmp_path):
        config = demo_config()
        harness.run_experiment(config, out_dir=tmp_path / "a")
        harness.run_experiment(harness.load_config(CONFIG_DIR / "demo.json"),
                               out_dir=tmp_path / "b")
        a = (tmp_path / "a" / "report.json").read_bytes()
        b = (tmp_path / "b" / "report.json").read_bytes()
        assert a == b

    def test_fixed_vs_bmp_ratio_recomputable(self, tmp_path):
        config = harness.load_config(CONFIG_DIR / "two_route_congested.json")
        config["duration_s"] = 420  # keep the unit test quick
        report = harness.run_experiment(config, seed=3, out_dir=tmp_path)
        stage = report.data["stages"]["assign"]
        dwells = {m: v["mean_dwell_s"] for m, v in stage["methods"].items()}
        assert stage["dwell_ratio"] == pytest.approx(dwells["bmp"] / dwells["fixed"])

    def test_crash_isolation_preserves_completed_outputs(self, tmp_path):
        config = demo_config()
        # poison the impute stage only; fingerprint + traffic precede it
        config["stages"]["impute"]["targets"] = [{"edge": "ghost", "offset_m": 1.0}]
        with pytest.raises(harness.StageError) as err:
            harness.run_experiment(config, out_dir=tmp_path)
        assert err.value.stage == "impute"
        assert (tmp_path / "traffic_metrics.json").exists()
        assert (tmp_path / "confusion_l1.json").exists()
        assert not (tmp_path / "report.json").exists()

    def test_unknown_trace_kind(self):
        config = transfer_config()
        config["stages"]["transfer"]["trace"] = {"kind": "teleport"}
        with pytest.raises(harness.StageError) as err:
            harness.run_experiment(config)
        assert err.value.stage == "transfer"


class TestComparePolicies:
    def test_identical_policy_twice_identical_rows(self):
        config = transfer_config()
        config["stages"]["transfer"]["trace"]["duration_s"] = 200
        rows = harness.compare_policies(config, ["ml_cat", "ml_cat"], [1, 2])
        a, b = rows
        assert a["goodput_mbps_mean"] == b["goodput_mbps_mean"]
        assert a["energy_j_mean"] == b["energy_j_mean"]

    def test_single_seed_zero_stddev(self):
        config = transfer_config()
        config["stages"]["transfer"]["trace"]["duration_s"] = 200
        rows = harness.compare_policies(config, ["periodic", "ml_cat"], [5])
        for row in rows:
            assert row["goodput_mbps_std"] == 0.0

    def test_two_phase_ml_cat_beats_periodic(self):
        config = transfer_config()
        rows = harness.compare_policies(config, ["periodic", "ml_cat"], [1, 2, 3])
        by = {r["policy"]: r for r in rows}
        assert by["ml_cat"]["goodput_mbps_mean"] > by["periodic"]["goodput_mbps_mean"]

    def test_needs_two_policies(self):
        with pytest.raises(harness.ConfigError):
            harness.compare_policies(transfer_config(), ["periodic"], [1])


class TestCli:
    def test_parse_seeds(self):
        assert parse_seeds("1..4") == [1, 2, 3, 4]
        assert parse_seeds("2,9,5") == [2, 9, 5]

    def test_run_and_exit_codes(self, tmp_path):
        runner = CliRunner()
        out = tmp_path / "run_out"
        res = runner.invoke(main, ["run", "--config", str(CONFIG_DIR / "demo.json"),
                                   "--out", str(out)])
        assert res.exit_code == 0, res.output
        report = json.loads((out / "report.json").read_text())
        assert report["toolkit_version"]
        for rel in report["artifacts"].values():
            assert (out / rel).exists()

    def test_run_failure_nonzero_exit(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"version": 1, "stages": {"traffic": {}}}))
        runner = CliRunner()
        res = runner.invoke(main, ["run", "--config", str(bad),
                                   "--out", str(tmp_path / "o")])
        assert res.exit_code != 0

    def test_compare_command(self, tmp_path):
        runner = CliRunner()
        cfg = transfer_config()
        cfg["stages"]["transfer"]["trace"]["duration_s"] = 200
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        res = runner.invoke(main, ["compare", "--config", str(path),
                                   "--policies", "periodic,ml_cat", "--seeds", "1..2",
                                   "--out", str(tmp_path / "cmp.json")])
        assert res.exit_code == 0, res.output
        rows = json.loads((tmp_path / "cmp.json").read_text())
        assert {r["policy"] for r in rows} == {"periodic", "ml_cat"}

    def test_gen_corpus_command(self, tmp_path):
        runner = CliRunner()
        res = runner.invoke(main, ["gen-corpus", "--out", str(tmp_path / "corpus"),
                                   "--count", "6", "--seed", "3"])
        assert res.exit_code == 0, res.output
        manifest = json.loads((tmp_path / "corpus" / "manifest.json").read_text())
        assert len(manifest) == 6
        assert all((tmp_path / "corpus" / m["file"]).exists() for m in manifest)

    def test_impute_command(self, tmp_path):
        net_spec = demo_config()["network"]
        net_path = tmp_path / "net.json"
        net_path.write_text(json.dumps(net_spec))
        obs_path = tmp_path / "obs.csv"
        obs_path.write_text("edge,offset_m,day,flow\n"
                            "s1,100,0,9000\ns2,50,0,8000\nl2,200,0,4000\n")
        out = tmp_path / "pred.csv"
        runner = CliRunner()
        res = runner.invoke(main, ["impute", "--network", str(net_path),
                                   "--observations", str(obs_path),
                                   "--targets", "l1:300,s1:400",
                                   "--out", str(out), "--knn", "2"])
        assert res.exit_code == 0, res.output
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 3  # header + 2 predictions

    def test_assign_command(self, tmp_path):
        runner = CliRunner()
        cfg = harness.load_config(CONFIG_DIR / "two_route_congested.json")
        cfg["duration_s"] = 300
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        res = runner.invoke(main, ["assign", "--config", str(path), "--method", "bmp",
                                   "--out", str(tmp_path / "assign.json")])
        assert res.exit_code == 0, res.output
        data = json.loads((tmp_path / "assign.json").read_text())
        assert data["split"] is not None
