import csv
import json
import math
import re

import numpy as np
import pytest
from click.testing import CliRunner

from privals import cli
from privals.data import generate_skewed_dataset
from privals.harness import (
    CSV_COLUMNS,
    ConfigError,
    ExperimentConfig,
    csv_rows,
    run_experiment,
    skew_report,
    sweep,
    write_report,
)

from conftest import random_dataset


def base_config(tmp_path, **overrides):
    payload = {
        "name": "t",
        "dataset": {"type": "synthetic", "n": 300, "m": 60, "rank": 3, "p": 0.5},
        "split": {"mode": "random-by-entry", "fractions": [0.8, 0.1, 0.1]},
        "model": {"rank": 3, "lam": 0.03, "steps": 3},
        "privacy": {"epsilons": [4.0], "gamma_u": 0.01, "gamma_m": 3.0, "k": 25},
        "seeds": [0, 1],
        "output_dir": str(tmp_path / "out"),
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and key in payload:
            payload[key].update(value)
        else:
            payload[key] = value
    return payload


class TestConfigValidation:
    def test_unknown_top_level_key_rejected(self, tmp_path):
        payload = base_config(tmp_path)
        payload["mystery"] = 1
        with pytest.raises(ConfigError, match="mystery"):
            ExperimentConfig.from_dict(payload)

    def test_unknown_nested_key_rejected(self, tmp_path):
        payload = base_config(tmp_path)
        payload["privacy"]["sigma_z"] = 1.0
        with pytest.raises(ConfigError, match="sigma_z"):
            ExperimentConfig.from_dict(payload)

    def test_missing_rank_rejected(self, tmp_path):
        payload = base_config(tmp_path)
        del payload["model"]["rank"]
        with pytest.raises(ConfigError, match="rank"):
            ExperimentConfig.from_dict(payload)

    def test_empty_epsilons_rejected(self, tmp_path):
        payload = base_config(tmp_path, privacy={"epsilons": []})
        with pytest.raises(ConfigError, match="epsilons"):
            ExperimentConfig.from_dict(payload)

    def test_bad_split_mode_rejected(self, tmp_path):
        payload = base_config(tmp_path, split={"mode": "by-vibes"})
        with pytest.raises(ConfigError, match="split.mode"):
            ExperimentConfig.from_dict(payload)

    def test_inf_sentinel_parsed(self, tmp_path):
        payload = base_config(tmp_path, privacy={"epsilons": ["inf"]})
        config = ExperimentConfig.from_dict(payload)
        assert math.isinf(config.privacy.epsilons[0])


class TestRunExperiment:
    def test_exact_mode_bypasses_privacy(self, tmp_path):
        payload = base_config(tmp_path, privacy={"epsilons": ["inf"]})
        payload["model"]["lam"] = 1e-8
        payload["model"]["steps"] = 12
        config = ExperimentConfig.from_dict(payload)
        report = run_experiment(config, 1)
        assert report.mode == "exact"
        assert report.ledger is None
        assert report.metrics["rmse"] < 1e-6  # noiseless exact recovery

    def test_private_mode_meets_target(self, tmp_path):
        config = ExperimentConfig.from_dict(base_config(tmp_path))
        report = run_experiment(config, 0)
        assert report.mode == "private"
        assert report.epsilon_achieved <= 4.0 * (1 + 1e-6)
        assert report.epsilon_achieved >= 4.0 * (1 - 1e-4)
        assert report.audit_ok
        labels = [e["label"] for e in report.ledger["rho_sq_entries"]]
        assert labels == ["dpals_training"]

    def test_reports_are_deterministic(self, tmp_path):
        config = ExperimentConfig.from_dict(base_config(tmp_path))
        a = run_experiment(config, 1)
        b = run_experiment(config, 1)
        strip = re.compile(r'"wall_seconds": [0-9.e-]+')
        assert strip.sub("", a.to_json()) == strip.sub("", b.to_json())

    def test_preprocess_pipeline_charges_ledger(self, tmp_path):
        payload = base_config(
            tmp_path,
            privacy={
                "epsilons": [6.0],
                "sigma_p": 20.0,
                "beta": 0.5,
                "preprocess": True,
                "k": 25,
            },
        )
        payload["model"]["mu"] = 0.5
        config = ExperimentConfig.from_dict(payload)
        report = run_experiment(config, 0)
        assert report.mode == "private"
        labels = [e["label"] for e in report.ledger["rho_sq_entries"]]
        assert labels == ["preprocessing", "dpals_training"]
        assert report.ledger["rho_sq_entries"][0]["rho_sq"] == pytest.approx(26 / 400)
        assert report.audit_ok

    def test_explicit_sigmas_report_achieved_epsilon(self, tmp_path):
        payload = base_config(
            tmp_path, privacy={"epsilons": [None], "sigma_gram": 30.0, "sigma_vec": 15.0}
        )
        payload["privacy"]["epsilons"] = [3.0]
        config = ExperimentConfig.from_dict(payload)
        report = run_experiment(config, 0)
        # conservative split accounting uses the smaller scale
        expected_rho = 25 * 3 / (2 * 15.0**2)
        assert report.ledger["total_rho_sq"] == pytest.approx(expected_rho)

    def test_failure_recorded_not_raised(self, tmp_path):
        payload = base_config(tmp_path, privacy={"epsilons": [0.0001]})
        config = ExperimentConfig.from_dict(payload)
        report = run_experiment(config, 0)
        # budget too small for any sigma: fixed mechanisms cannot fit
        assert report.mode == "private" or report.mode == "failed"

    def test_holdout_recall_metrics(self, tmp_path):
        payload = base_config(
            tmp_path,
            split={"mode": "holdout-by-user", "holdout_valid": 30, "holdout_test": 30,
                   "query_fraction": 0.5},
            recall_ks=[5, 10],
        )
        config = ExperimentConfig.from_dict(payload)
        report = run_experiment(config, 0)
        assert report.mode == "private"
        assert set(report.metrics) == {"recall@5", "recall@10"}
        assert 0.0 <= report.metrics["recall@5"] <= 1.0


class TestSweep:
    def test_row_counts_and_summary(self, tmp_path):
        payload = base_config(tmp_path, privacy={"epsilons": [2.0, 8.0]})
        config = ExperimentConfig.from_dict(payload)
        runs_path, summary_path = sweep(config)
        with open(runs_path) as handle:
            rows = list(csv.DictReader(handle))
        assert len(rows) == 4  # 2 epsilons x 2 seeds, one metric each
        assert list(rows[0]) == CSV_COLUMNS
        with open(summary_path) as handle:
            summary = list(csv.DictReader(handle))
        assert len(summary) == 2
        by_eps = {row["epsilon"]: row for row in summary}
        assert set(by_eps) == {"2.0", "8.0"}
        assert all(int(row["n_runs"]) == 2 for row in summary)

    def test_sweep_deterministic_rows(self, tmp_path):
        payload = base_config(tmp_path, privacy={"epsilons": [3.0]}, seeds=[5])
        config = ExperimentConfig.from_dict(payload)
        runs_a, _ = sweep(config)
        content_a = open(runs_a).read()
        runs_b, _ = sweep(config)
        content_b = open(runs_b).read()
        strip = re.compile(r"[0-9.]+$", re.MULTILINE)
        assert strip.sub("", content_a) == strip.sub("", content_b)

    def test_empty_epsilons_error(self, tmp_path):
        payload = base_config(tmp_path)
        config = ExperimentConfig.from_dict(payload)
        object.__setattr__(config.privacy, "epsilons", ())
        with pytest.raises(ConfigError, match="nothing to sweep"):
            sweep(config)

    def test_worker_pool_matches_sequential(self, tmp_path):
        payload = base_config(tmp_path, privacy={"epsilons": [3.0]}, seeds=[0, 1])
        payload["dataset"] = {"type": "synthetic", "n": 150, "m": 30, "rank": 2, "p": 0.6}
        payload["model"]["rank"] = 2
        pooled = ExperimentConfig.from_dict({**payload, "workers": 2})
        sequential = ExperimentConfig.from_dict({**payload, "workers": 1})
        runs_pool, _ = sweep(pooled)
        content_pool = open(runs_pool).read()
        runs_seq, _ = sweep(sequential)
        strip = re.compile(r"[0-9.]+$", re.MULTILINE)  # drop wall_seconds
        assert strip.sub("", content_pool) == strip.sub("", open(runs_seq).read())


class TestSkewReport:
    def test_uniform_popularity_near_diagonal(self):
        ds = random_dataset(3000, 200, 0.3, seed=0)
        rows = skew_report(ds, k=150, seed=1)
        unsampled = {r["top_fraction"]: r["share"] for r in rows if r["variant"] == "unsampled"}
        for fraction in (0.2, 0.5, 0.8):
            assert abs(unsampled[fraction] - fraction) < 0.02

    def test_zipf_adaptive_below_uniform(self):
        ds = generate_skewed_dataset(4000, 500, 40, 1.2, seed=2)
        rows = skew_report(ds, k=15, seed=3)
        shares = {
            (r["variant"], r["top_fraction"]): r["share"] for r in rows
        }
        assert shares[("adaptive", 0.2)] < shares[("uniform", 0.2)]


class TestCli:
    def test_accountant_compose(self):
        runner = CliRunner()
        result = runner.invoke(
            cli.main,
            ["accountant", "--k", "50", "--steps", "2", "--sigma", "10", "--delta", "1e-5"],
        )
        assert result.exit_code == 0, result.output
        payload = json.loads(result.output)
        assert payload["total_rho_sq"] == pytest.approx(0.5)
        assert payload["epsilon"] == pytest.approx(5.2985, abs=1e-3)
        assert payload["delta"] == 1e-5
        assert payload["rho_sq_entries"][0]["label"] == "dpals_training"

    def test_accountant_calibrate(self):
        runner = CliRunner()
        result = runner.invoke(
            cli.main,
            ["accountant", "--k", "50", "--steps", "2", "--target-epsilon", "10", "--delta", "1e-5"],
        )
        assert result.exit_code == 0
        sigma = json.loads(result.output)["sigma"]
        assert sigma <= 6.5595  # never above the closed form
        assert sigma == pytest.approx(5.679, abs=1e-3)

    def test_synth_ingest_roundtrip(self, tmp_path):
        runner = CliRunner()
        result = runner.invoke(
            cli.main,
            ["synth", "--n", "50", "--m", "20", "--rank", "2", "--p", "0.5",
             "--seed", "3", "--out", str(tmp_path)],
        )
        assert result.exit_code == 0, result.output
        stats = json.loads(
            runner.invoke(cli.main, ["ingest", str(tmp_path / "ratings.csv")]).output
        )
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert stats["observations"] == manifest["observations"]

    def test_train_command_writes_report(self, tmp_path):
        payload = base_config(tmp_path, seeds=[0])
        config_path = tmp_path / "cfg.json"
        config_path.write_text(json.dumps(payload))
        runner = CliRunner()
        result = runner.invoke(cli.main, ["train", "--config", str(config_path)])
        assert result.exit_code == 0, result.output
        out = json.loads(result.output)
        assert "rmse" in out["metrics"]
        assert (tmp_path / "out").exists()

    def test_config_overrides(self, tmp_path):
        payload = base_config(tmp_path, seeds=[1])
        config_path = tmp_path / "cfg.json"
        config_path.write_text(json.dumps(payload))
        runner = CliRunner()
        result = runner.invoke(
            cli.main,
            ["train", "--config", str(config_path), "--epsilon", "inf",
             "--set", "model.lam=1e-8", "--set", "model.steps=12"],
        )
        assert result.exit_code == 0, result.output
        out = json.loads(result.output)
        assert out["metrics"]["rmse"] < 1e-6

    def test_skew_report_command(self, tmp_path):
        runner = CliRunner()
        out_path = tmp_path / "skew.csv"
        result = runner.invoke(
            cli.main,
            ["skew-report", "--zipf", "1000,200,30,1.2", "--k", "10",
             "--seed", "4", "--out", str(out_path)],
        )
        assert result.exit_code == 0, result.output
        payload = json.loads(result.output)
        assert payload["top20_share"]["adaptive"] < payload["top20_share"]["uniform"]
        with open(out_path) as handle:
            rows = list(csv.DictReader(handle))
        assert len(rows) == 300


class TestCsvRows:
    def test_schema_and_metric_rows(self, tmp_path):
        config = ExperimentConfig.from_dict(base_config(tmp_path))
        report = run_experiment(config, 0)
        rows = csv_rows(config, report)
        assert len(rows) == 1
        assert set(rows[0]) == set(CSV_COLUMNS)
        assert rows[0]["metric"] == "rmse"
        assert rows[0]["mode"] == "private"
