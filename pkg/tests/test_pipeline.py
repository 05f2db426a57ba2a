import csv
import io
import json

import numpy as np
import pytest

from medpatch import pipeline as pl
from medpatch.cli import main
from medpatch.config import ExperimentConfig
from medpatch.errors import ConfigError, PrerequisiteError

SMALL = {
    "task": "mortality",
    "data": {"synth": {"n_samples": 300, "dim": 6, "token_range": [2, 5], "signal": [0.8, 0.6, 0.7],
                       "missing": [0, 0.4, 0.2]}},
    "encoder_dim": 6, "d_proj": 4,
    "lr_search": {"lo": 5e-3, "hi": 1e-2, "sweeps": 1},
    "training": {"max_epochs": 6, "patience": 3, "confidence_epochs": 4},
    "metrics": {"replicates": 50},
}


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "small.json"
    p.write_text(json.dumps(SMALL))
    return p


@pytest.fixture(scope="module")
def finished(tmp_path_factory, config_file):
    out = tmp_path_factory.mktemp("run")
    assert main(["all", "--config", str(config_file), "--out", str(out)]) == 0
    return out


class TestConfig:
    def test_defaults_validate(self):
        cfg = ExperimentConfig()
        assert cfg.modalities == ("EHR", "CXR", "RR", "DN") and cfg["theta"] == 0.75

    def test_mortality_modalities(self):
        assert ExperimentConfig({"task": "mortality"}).modalities == ("EHR", "CXR", "RR")

    @pytest.mark.parametrize("raw, pattern", [
        ({"bogus": 1}, "bogus"),
        ({"training": {"epochs": 3}}, "training.epochs"),
        ({"task": "mortality", "modalities": ["EHR", "DN"]}, "DN"),
        ({"theta": 0.5}, "theta"),
        ({"lr_search": {"lo": 1e-3, "hi": 1e-5}}, "lr_search"),
        ({"schema_version": 2}, "schema_version"),
        ({"data": {"synth": {"signal": 2.0}}}, "signal"),
    ])
    def test_invalid(self, raw, pattern):
        with pytest.raises(ConfigError, match=pattern):
            ExperimentConfig(raw)

    def test_json_round_trip(self):
        cfg = ExperimentConfig(SMALL)
        assert ExperimentConfig.from_json(cfg.to_json()).raw == cfg.raw


class TestHelpers:
    def test_learning_rates_log_uniform(self):
        lrs = pl.sample_learning_rates((1e-5, 1e-3), 200, seed=0)
        assert all(1e-5 <= v <= 1e-3 for v in lrs)
        assert lrs == pl.sample_learning_rates((1e-5, 1e-3), 200, seed=0)
        assert 0.3 < np.mean(np.log10(lrs) < -4) < 0.7

    def test_sweep_keeps_best_and_skips_nan(self):
        scores = iter([0.6, float("nan"), 0.8, 0.8])
        res = pl.lr_sweep(lambda lr, k: (k, next(scores), None), sweeps=4)
        assert res.model == 2 and len(res.trials) == 4

    def test_stage_seed_distinct(self):
        seeds = {pl.stage_seed(0, s) for s in pl.STAGES}
        assert len(seeds) == len(pl.STAGES)
        assert pl.stage_seed(3, "pretrain", 1) == pl.stage_seed(3, "pretrain", 1)


class TestCli:
    def test_missing_prerequisite_exit_code(self, tmp_path, config_file, capsys):
        assert main(["evaluate", "--config", str(config_file), "--out", str(tmp_path)]) == 2
        assert "gen-data" in capsys.readouterr().err

    def test_validation_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"theta": 2.0}')
        assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 1
        assert "theta" in capsys.readouterr().err

    def test_no_output_dir(self, capsys):
        assert main(["gen-data"]) == 1

    def test_manifest(self, finished):
        manifest = json.loads((finished / "manifest.json").read_text())
        assert set(manifest["stages"]) == set(pl.PIPELINE) and len(manifest["stages"]) == 7
        for stage, entry in manifest["stages"].items():
            for name, digest in entry["outputs"].items():
                assert pl.sha256_file(finished / name) == digest
        assert "out_dir" not in manifest["config"]

    def test_metrics_csv_columns(self, finished):
        rows = list(csv.DictReader(io.StringIO((finished / "metrics.csv").read_text())))
        assert list(rows[0]) == list(pl.METRIC_COLUMNS)
        names = {r["metric"] for r in rows}
        assert {"late.auroc", "late.auprc", "combined.auroc", "baseline.late.auroc", "uni.EHR.auroc"} <= names
        for r in rows:
            assert int(r["n_replicates"]) <= 50

    def test_weights_csv(self, finished):
        text = pl.report_weights(finished)
        assert text == (finished / "weights.csv").read_text()
        rows = list(csv.reader(io.StringIO(text)))
        assert rows[0] == ["row", "EHR", "CXR", "RR", "Missingness", "Low", "High",
                           "beta_late", "beta_high", "beta_low"]
        alpha = [float(v) for v in rows[1][1:7]]
        beta = [float(v) for v in rows[2][7:]]
        assert len(alpha) == 6 and abs(sum(alpha) - 1) < 1e-12 and abs(sum(beta) - 1) < 1e-12

    def test_tampered_artifact_is_detected(self, finished, tmp_path, config_file):
        import shutil
        copy = tmp_path / "copy"
        shutil.copytree(finished, copy)
        (copy / "temperatures.json").write_text('{"EHR": {"0": 3.0}}')
        assert main(["train-fusion", "--config", str(config_file), "--out", str(copy)]) == 2

    def test_rerun_invalidates_downstream(self, finished, tmp_path, config_file):
        import shutil
        copy = tmp_path / "copy"
        shutil.copytree(finished, copy)
        assert main(["calibrate", "--config", str(config_file), "--out", str(copy)]) == 0
        stages = json.loads((copy / "manifest.json").read_text())["stages"]
        assert "train-fusion" not in stages and "evaluate" not in stages and "pretrain" in stages

    def test_locked_directory(self, tmp_path, config_file):
        (tmp_path / ".medpatch.lock").write_text("1")
        assert main(["gen-data", "--config", str(config_file), "--out", str(tmp_path)]) == 1

    def test_report_weights_without_fusion(self, tmp_path):
        with pytest.raises(PrerequisiteError):
            pl.report_weights(tmp_path)

    def test_ablate_stage(self, finished, tmp_path, config_file):
        import shutil
        copy = tmp_path / "copy"
        shutil.copytree(finished, copy)
        assert main(["ablate", "--config", str(config_file), "--out", str(copy), "--ablation", "1"]) == 0
        rows = list(csv.reader(io.StringIO((copy / "ablation.csv").read_text())))
        assert rows[0] == ["setting", "auroc", "auprc", "lr"] and rows[1][0] == "1"

    def test_ingested_file(self, tmp_path):
        from medpatch.data import GeneratorConfig, generate_dataset, save_embeddings
        ds = generate_dataset(GeneratorConfig(modalities=("EHR", "CXR", "RR"), n_samples=200, dim=4,
                                              token_range=(1, 3), missing=[0, 0.3, 0.2], seed=2))
        path = tmp_path / "emb.jsonl"
        save_embeddings(ds, path)
        cfg = dict(SMALL, data={"path": str(path)}, encoder_dim=4)
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(cfg))
        out = tmp_path / "out"
        assert main(["all", "--config", str(cfg_path), "--out", str(out)]) == 0
        assert (out / "metrics.csv").exists()
