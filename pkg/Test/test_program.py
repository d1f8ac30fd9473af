import json
import os

import pytest

import program
from Scripts.folder_handler import PARTIAL_MARKER

TINY_CONFIG = {
    "master_seed": 11,
    "dataset": {"source": "synthetic", "train_samples": 60,
                "test_samples": 30, "reference_samples": 15,
                "synthetic": {"num_classes": 3, "input_dim": 16,
                              "samples_per_class": 40, "pattern_size": 3,
                              "separation": 1.5, "seed": 1}},
    "model": {"kind": "mlp1", "hidden_dim": 4},
    "federated": {"num_clients": 4, "rounds": 4, "epochs": 1,
                  "learning_rate": 0.1, "batch_size": 8,
                  "malicious_fraction": 0.25,
                  "malicious_fraction_sweep": [0.0, 0.5]},
    "storage": {"round_ratio_sweep": [1.0], "client_ratio_sweep": [0.5]},
    "attack": {"kind": "backdoor",
               "trigger": {"patch_rows": 2, "patch_cols": 2}},
    "recovery": {"methods": ["crab", "retrain", "federaser"],
                 "beta_sweep": [0.3, 0.9]},
}
VOLATILE_KEYS = {"runtimes", "mean_round_wall_time", "output_dir"}


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_CONFIG), encoding="utf-8")
    return str(path)


def _report(out):
    with open(os.path.join(out, "report.json"), encoding="utf-8") as f:
        return json.load(f)


def _stable(value):
    if isinstance(value, dict):
        return {k: _stable(v) for k, v in value.items()
                if k not in VOLATILE_KEYS}
    if isinstance(value, list):
        return [_stable(v) for v in value]
    return value


def test_full_run(tmp_path, config_path):
    out = str(tmp_path / "out")

    assert program.main(["run", "--config", config_path, "--out", out]) == 0

    for artifact in ("history/manifest.json", "history/blobs.bin",
                     "interval_history/manifest.json", "training.npz",
                     "traces/crab.npz", "traces/retrain.json",
                     "traces/federaser.json", "rollback.json",
                     "rounds_retrain.csv", "report.json"):
        assert os.path.isfile(os.path.join(out, artifact)), artifact
    assert not os.path.exists(os.path.join(out, PARTIAL_MARKER))
    report = _report(out)
    assert set(report["methods"]) == {"crab", "retrain", "federaser"}
    assert len(report["malicious_ids"]) == 1
    assert report["methods"]["retrain"]["rounds_executed"] == 4
    assert report["methods"]["federaser"]["rounds_executed"] == 4
    crab = report["methods"]["crab"]
    assert crab["rounds_executed"] <= report["storage"]["stored_rounds"] <= 3
    assert len(crab["bound_checks"]) == crab["rounds_executed"] + 1
    for metrics in report["methods"].values():
        assert 0.0 <= metrics["test_accuracy"] <= 1.0
        assert 0.0 <= metrics["asr"] <= 1.0


def test_full_run_reports_ablations(tmp_path, config_path):
    out = str(tmp_path / "out")

    assert program.main(["run", "--config", config_path, "--out", out]) == 0

    ablation = _report(out)["ablation"]
    every_round, = ablation["round_ratio"]
    assert every_round["round_ratio"] == 1.0
    assert every_round["stored_rounds"] == 4
    assert every_round["stored_entries"] == 12
    assert every_round["rounds_executed"] <= 4
    half_clients, = ablation["client_ratio"]
    assert half_clients["client_ratio"] == 0.5
    assert half_clients["stored_entries"] == 2 * half_clients["stored_rounds"]
    assert half_clients["stored_rounds"] <= 3
    clean, attacked = ablation["malicious_fraction"]
    assert clean["malicious_clients"] == 0
    assert "rollback_index" not in clean
    assert attacked["malicious_clients"] == 2
    assert 0.0 <= attacked["poisoned_asr"] <= 1.0
    assert 0.0 <= attacked["test_accuracy"] <= 1.0


def test_runs_are_reproducible(tmp_path, config_path):
    first, second = str(tmp_path / "a"), str(tmp_path / "b")

    assert program.main(["run", "--config", config_path, "--out", first]) == 0
    assert program.main(["run", "--config", config_path, "--out",
                         second]) == 0

    assert _stable(_report(first)) == _stable(_report(second))


def test_stages_run_one_by_one(tmp_path, config_path):
    out = str(tmp_path / "staged")
    args = ["--config", config_path, "--out", out, "--method", "crab"]

    for stage in ("train", "recover", "evaluate"):
        assert program.main([stage] + args) == 0

    report = _report(out)
    assert list(report["methods"]) == ["crab"]
    assert report["methods"]["crab"]["test_accuracy"] >= 0.0


def test_recover_without_training(tmp_path, config_path):
    out = str(tmp_path / "empty")

    assert program.main(["recover", "--config", config_path, "--out",
                         out]) == 2
    assert os.path.isfile(os.path.join(out, PARTIAL_MARKER))


def test_invalid_config(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"federated": {"num_clients": 0}}),
                    encoding="utf-8")

    assert program.main(["run", "--config", str(path), "--out",
                         str(tmp_path / "out")]) == 1


def test_inspect_history(tmp_path, config_path, capsys):
    out = str(tmp_path / "out")
    assert program.main(["train", "--config", config_path, "--out",
                         out]) == 0
    capsys.readouterr()

    assert program.main(["inspect", out]) == 0

    manifest = json.loads(capsys.readouterr().out)
    assert manifest["kind"] == "selective"


def test_inspect_missing_snapshot(tmp_path):
    assert program.main(["inspect", str(tmp_path / "absent")]) == 2
