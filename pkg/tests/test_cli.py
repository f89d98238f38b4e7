import json

import pytest

from graftkd.cli import build_parser, main

from helpers import tiny_config


def test_subcommands_and_flags():
    parser = build_parser()
    for cmd in ("train-teacher", "run", "stage1", "stage2", "finalize", "eval"):
        args = parser.parse_args([cmd, "--config", "c.ini", "--seed-data", "1", "--seed-init", "2", "--seed-train", "3", "--k", "5", "--out", "o", "--resume"])
        assert (args.seed_data, args.seed_init, args.seed_train, args.k, args.out, args.resume) == (1, 2, 3, 5, "o", True)
    assert parser.parse_args(["partial-graft", "--config", "c.ini", "--block", "3"]).block == 3
    assert parser.parse_args(["plot", "runs"]).path == "runs"
    assert parser.parse_args(["verify"]).command == "verify"


def test_help_mentions_device_variable(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    assert "GRAFTKD_DEVICE" in capsys.readouterr().out


def test_verify_subset(capsys):
    assert main(["verify", "--only", "6", "7"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 2 and all(line.startswith("[PASS]") for line in out)


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[data]\nlocator = x\n[teacher]\narch = toy-cnn-4block\nepochs = many\n[student]\narch = toy-cnn-4block\n")
    assert main(["run", "--config", str(bad)]) == 2
    assert f"{bad}:5:" in capsys.readouterr().err


def test_end_to_end_commands(tmp_path, tiny_teacher, capsys, monkeypatch):
    monkeypatch.setenv("GRAFTKD_DEVICE", "cpu")
    tiny_config(tmp_path, teacher_dir=tiny_teacher[0])
    cfg = str(tmp_path / "tiny.ini")
    out = str(tmp_path / "cli_run")
    common = ["--config", cfg, "--out", out, "--k", "1", "--seed-train", "4"]
    assert main(["stage1", *common]) == 0
    assert main(["stage2", *common]) == 0
    assert main(["finalize", *common]) == 0
    capsys.readouterr()
    assert main(["eval", *common]) == 0
    res = json.loads(capsys.readouterr().out)
    manifest = json.loads((tmp_path / "cli_run" / "manifest.json").read_text())
    assert res["top1"] == manifest["metrics"]["student_top1"]
    assert manifest["config"]["experiment"]["k"] == 1 and manifest["config"]["experiment"]["seed_train"] == 4
    assert main(["partial-graft", *common, "--block", "3"]) == 0
    text = capsys.readouterr().out
    assert "block3" in text and "%↓" in text
    assert (tmp_path / "cli_run" / "partial_graft_block3.json").exists()
    assert main(["plot", out]) == 0
    assert (tmp_path / "cli_run" / "accuracy_vs_k.png").exists()
    assert main(["run", *common]) == 2  # existing run without --resume
    assert main(["run", *common, "--resume"]) == 0


def test_train_teacher_command(tmp_path, capsys):
    tiny_config(tmp_path, teacher={"epochs": 1})
    assert main(["train-teacher", "--config", str(tmp_path / "tiny.ini")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert 0.0 <= res["top1"] <= 1.0 and (tmp_path / "teacher" / "checkpoint.json").exists()
