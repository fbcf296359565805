import hashlib
import json

import pytest

from phenoyield.cli import main

from conftest import SMALL_MODEL


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    gen = root / "gen.json"
    gen.write_text(json.dumps({"H": 8, "W": 8, "n_counties": 4}))
    cfg = root / "run.json"
    cfg.write_text(json.dumps({
        "data": str(root / "data"), "out": str(root / "runs"), "seed": 0, "model": SMALL_MODEL,
        "pretrain": {"epochs": 2, "warmup_epochs": 1}, "finetune": {"epochs": 3, "warmup_epochs": 1},
    }))
    assert main(["gen-data", "--config", str(cfg), "--gen-config", str(gen)]) == 0
    return root, cfg


def _err(capsys) -> dict:
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_gen_data_writes_manifest_and_run_record(workspace):
    root, _ = workspace
    data = root / "data"
    assert (data / "manifest.json").exists()
    record = json.loads((data / "run.json").read_text())
    assert record["command"] == "gen-data"
    manifest_hash = record["artifacts"]["manifest.json"]
    assert manifest_hash == hashlib.sha256((data / "manifest.json").read_bytes()).hexdigest()


def test_finetune_without_checkpoint_is_configuration_error(tmp_path, workspace, capsys):
    _, cfg = workspace
    code = main(["finetune", "--config", str(cfg), "--out", str(tmp_path / "elsewhere")])
    assert code == 3
    assert _err(capsys)["error"] == "ConfigurationError"


def test_full_command_chain(workspace, capsys):
    root, cfg = workspace
    for cmd in ("pretrain", "finetune", "eval", "realtime", "robustness"):
        assert main([cmd, "--config", str(cfg)]) == 0, cmd
        out = root / "runs" / cmd
        record = json.loads((out / "run.json").read_text())
        assert record["command"] == cmd
        for name, digest in record["artifacts"].items():
            assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
    report = json.loads((root / "runs" / "eval" / "report.json").read_text())
    assert set(report) >= {"report_version", "test", "oracle", "sensitivity"}
    assert set(report["test"]) == {"corn", "cotton", "soybean", "winter_wheat"}


def test_commands_are_idempotent(workspace):
    root, cfg = workspace
    assert main(["pretrain", "--config", str(cfg)]) == 0
    first = (root / "runs" / "pretrain" / "run.json").read_bytes()
    assert main(["pretrain", "--config", str(cfg)]) == 0
    assert (root / "runs" / "pretrain" / "run.json").read_bytes() == first


def test_from_scratch_and_single_crop(tmp_path, workspace):
    _, cfg = workspace
    out = tmp_path / "scratch"
    assert main(["finetune", "--config", str(cfg), "--out", str(out), "--from-scratch",
                 "--single-crop", "cotton"]) == 0
    assert (out / "finetune" / "finetune.pyck").exists()
    assert main(["eval", "--config", str(cfg), "--out", str(out), "--single-crop", "cotton"]) == 0
    report = json.loads((out / "eval" / "report.json").read_text())
    assert set(report["test"]) == {"cotton"}


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--bogus"])
    assert exc.value.code == 2


def test_schema_violation_names_field(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"pretrain": {"lr": "fast"}}))
    assert main(["pretrain", "--config", str(bad)]) == 3
    err = _err(capsys)
    assert err["error"] == "ConfigError"
    assert "pretrain.lr" in err["message"]


def test_unknown_config_key_rejected(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"learning_rate": 1.0}))
    assert main(["pretrain", "--config", str(bad)]) == 3
    assert "learning_rate" in _err(capsys)["message"]


def test_missing_dataset_exit_code(tmp_path, capsys):
    assert main(["pretrain", "--data", str(tmp_path / "none"), "--out", str(tmp_path)]) == 4
    assert _err(capsys)["error"] == "FileNotFoundError"


def test_bad_thread_env(workspace, monkeypatch, capsys):
    _, cfg = workspace
    monkeypatch.setenv("PHENO_THREADS", "zero")
    assert main(["eval", "--config", str(cfg)]) == 3


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--seed", "1", "--instances", "1", "--out", str(tmp_path)]) == 0
    blob = json.loads((tmp_path / "gradcheck" / "gradcheck.json").read_text())
    assert blob and all(v["passed"] for v in blob.values())
    assert all(v["max_error"] < 1e-3 for v in blob.values())
    assert "softmax" in capsys.readouterr().out


def test_schema_command(tmp_path):
    assert main(["schema", "--out", str(tmp_path)]) == 0
    schema = json.loads((tmp_path / "config_schema.json").read_text())
    assert "pretrain" in schema["properties"]
