import csv
import json

import pytest
import torch

from graftkd.checkpoint import is_complete, load_network, load_scions
from graftkd.distill_train import LOSS_CONVENTION, TRAIN_ACC_CONVENTION
from graftkd.graft import identity_scion
from graftkd.netzoo import FLOP_CONVENTION, build_network, count_params
from graftkd.pipeline import (
    MetricsLog,
    RunExistsError,
    RunManifest,
    StopRun,
    load_run_data,
    partial_graft_report,
    run_pipeline,
    train_teacher,
)

from helpers import tiny_config


def _cfg(tmp_path, tiny_teacher, name="run", **sections):
    path, _ = tiny_teacher
    cfg = tiny_config(tmp_path, teacher_dir=path, **sections)
    return cfg.with_overrides(out_dir=str(tmp_path / name))


def _rows(run_dir):
    """Metrics rows without the wall-clock column."""
    with open(run_dir / "metrics.csv") as fh:
        return [r[:-1] for r in csv.reader(fh)]


def _same_student(a, b):
    sa, sb = load_network(a / "student").state_dict(), load_network(b / "student").state_dict()
    return all(torch.equal(sa[k], sb[k]) for k in sa)


def test_run_directory_contract(tmp_path, tiny_teacher):
    cfg = _cfg(tmp_path, tiny_teacher)
    m = run_pipeline(cfg)
    run = tmp_path / "run"
    assert m.status == "finished"
    assert all(is_complete(run / "stage1" / f"block{l}") for l in range(1, 5))
    assert sorted(p.name for p in (run / "stage2").iterdir()) == ["depth2", "depth3", "depth4"]
    assert all(len(load_scions(run / "stage2" / f"depth{l}", load_network(cfg.teacher_checkpoint))) == 4 for l in (2, 3, 4))
    assert is_complete(run / "student")
    assert count_params(load_network(run / "student")) == count_params(build_network(cfg.student.arch))
    assert [p.relative_to(run) for p in run.rglob("manifest.json")] == [run.joinpath("manifest.json").relative_to(run)]
    rows = _rows(run)
    assert rows[0] == ["unit", "epoch", "loss", "train_acc", "test_acc"]
    units = [r[0] for r in rows[1:]]
    assert units == [u for u in ("block1", "block2", "block3", "block4", "depth2", "depth3", "depth4") for _ in range(2)]
    saved = json.loads((run / "manifest.json").read_text())
    assert saved["checkpoints"]["stage2"] == {f"depth{l}": f"stage2/depth{l}" for l in (2, 3, 4)}
    assert saved["checkpoints"]["student"] == "student"
    assert 0.0 <= saved["metrics"]["student_top1"] <= 1.0
    assert saved["config"]["experiment"]["k"] == 2


def test_manifest_records_conventions(tmp_path, tiny_teacher):
    m = run_pipeline(_cfg(tmp_path, tiny_teacher))
    conv = m.data["conventions"]
    assert conv["loss_mean_order"] == LOSS_CONVENTION
    assert conv["flop_convention"] == FLOP_CONVENTION
    assert conv["train_acc"] == TRAIN_ACC_CONVENTION
    assert conv["normalization_constants"] == {"mean": [0.5] * 3, "std": [0.25] * 3}
    for key in (
        "loss_n", "argmax_tie_break", "teacher_mode", "student_norm_mode", "block_boundaries", "adaption_modules",
        "fold_target", "equivalence_tolerance", "crop_padding", "kshot_sampling", "partial_batches",
        "batch_size_rule", "lr_scaling", "optimizer", "epoch_budgets", "stage1_order", "stage1_objective",
        "non_finite_loss",
    ):
        assert key in conv, key
    assert {"graftkd", "torch", "python"} <= set(m.data["code_version"])


def test_manifest_written_before_training(tmp_path, tiny_teacher):
    seen = {}

    def probe(unit):
        if unit == "block1":
            seen.update(json.loads((tmp_path / "run" / "manifest.json").read_text()))

    run_pipeline(_cfg(tmp_path, tiny_teacher), on_unit_done=probe)
    assert seen["status"] == "running" and seen["checkpoints"]["stage1"] == {"block1": "stage1/block1"}


def test_deterministic(tmp_path, tiny_teacher):
    a = run_pipeline(_cfg(tmp_path, tiny_teacher, "a"))
    b = run_pipeline(_cfg(tmp_path, tiny_teacher, "b"))
    assert a.metrics == b.metrics
    assert _rows(tmp_path / "a") == _rows(tmp_path / "b")
    assert _same_student(tmp_path / "a", tmp_path / "b")


def test_seeds_matter(tmp_path, tiny_teacher):
    a = run_pipeline(_cfg(tmp_path, tiny_teacher, "a"))
    b = run_pipeline(_cfg(tmp_path, tiny_teacher, "b").with_overrides(seed_train=1))
    assert _rows(tmp_path / "a") != _rows(tmp_path / "b")


@pytest.mark.parametrize("stop_at, every", [("block2", 1), ("depth3", 1), ("block3", 2), ("depth3", 2)])
def test_resume_matches_uninterrupted(tmp_path, tiny_teacher, stop_at, every):
    ref = run_pipeline(_cfg(tmp_path, tiny_teacher, "ref", experiment={"checkpoint_every": every}))

    def stop(unit):
        if unit == stop_at:
            raise StopRun(unit)

    cfg = _cfg(tmp_path, tiny_teacher, "cut", experiment={"checkpoint_every": every})
    with pytest.raises(StopRun):
        run_pipeline(cfg, on_unit_done=stop)
    partial = RunManifest.load(tmp_path / "cut")
    assert partial.status == "interrupted" and partial.data["failure"]["unit"] == stop_at
    resumed = run_pipeline(cfg, resume=True)
    assert resumed.metrics == ref.metrics
    assert _same_student(tmp_path / "ref", tmp_path / "cut")
    ref_rows, cut_rows = _rows(tmp_path / "ref"), _rows(tmp_path / "cut")
    if every == 1:
        assert ref_rows == cut_rows
    else:  # units without a checkpoint are retrained, so their rows may come later
        assert sorted(ref_rows) == sorted(cut_rows)


def test_resume_skips_completed_units(tmp_path, tiny_teacher):
    cfg = _cfg(tmp_path, tiny_teacher)
    run_pipeline(cfg)
    mtime = (tmp_path / "run" / "stage1" / "block1" / "scion1.pt").stat().st_mtime_ns
    trained = []
    run_pipeline(cfg, resume=True, on_unit_done=trained.append)
    assert trained == []
    assert (tmp_path / "run" / "stage1" / "block1" / "scion1.pt").stat().st_mtime_ns == mtime


def test_existing_run_needs_resume(tmp_path, tiny_teacher):
    cfg = _cfg(tmp_path, tiny_teacher)
    run_pipeline(cfg, stages=("stage1",))
    with pytest.raises(RunExistsError):
        run_pipeline(cfg)


def test_resume_rejects_changed_config(tmp_path, tiny_teacher):
    cfg = _cfg(tmp_path, tiny_teacher)
    run_pipeline(cfg, stages=("stage1",))
    with pytest.raises(ValueError, match="config differs"):
        run_pipeline(cfg.with_overrides(seed_train=9), resume=True)


def test_stage_by_stage_equals_full_run(tmp_path, tiny_teacher):
    full = run_pipeline(_cfg(tmp_path, tiny_teacher, "full"))
    cfg = _cfg(tmp_path, tiny_teacher, "steps")
    run_pipeline(cfg, stages=("stage1",))
    run_pipeline(cfg, resume=True, stages=("stage2",))
    m = run_pipeline(cfg, resume=True, stages=("finalize",))
    assert m.metrics["student_top1"] == full.metrics["student_top1"]
    assert _same_student(tmp_path / "full", tmp_path / "steps")


def test_stage2_without_stage1_fails_and_records(tmp_path, tiny_teacher):
    cfg = _cfg(tmp_path, tiny_teacher)
    with pytest.raises(FileNotFoundError, match="stage1"):
        run_pipeline(cfg, stages=("stage2",))
    m = RunManifest.load(tmp_path / "run")
    assert m.status == "failed" and m.data["failure"]["stage"] == "stage1"


def test_missing_teacher_without_training(tmp_path):
    cfg = tiny_config(tmp_path, teacher={"train": "false"})
    with pytest.raises(FileNotFoundError, match="teacher"):
        run_pipeline(cfg)
    assert RunManifest.load(tmp_path / "run").status == "failed"


def test_identity_pipeline_reproduces_teacher(tmp_path, tiny_teacher):
    path, acc = tiny_teacher
    cfg = _cfg(tmp_path, tiny_teacher, student={"width": 8, "init": "identity", "norm_mode": "running"}, baseline={"enabled": "true"})
    m = run_pipeline(cfg)
    assert m.metrics["student_top1"] == acc["top1"] == m.metrics["teacher_top1"]
    assert m.metrics["baseline_top1"] == acc["top1"]
    assert all(float(r[2]) == 0.0 for r in _rows(tmp_path / "run")[1:])
    teacher, student = load_network(path).state_dict(), load_network(tmp_path / "run" / "student").state_dict()
    assert all(torch.equal(teacher[k], student[k]) for k in teacher)


def test_baseline_uses_equal_epoch_budget(tmp_path, tiny_teacher):
    m = run_pipeline(_cfg(tmp_path, tiny_teacher, baseline={"enabled": "true", "eval_every": 3}))
    rows = [r for r in _rows(tmp_path / "run")[1:] if r[0] == "whole"]
    assert len(rows) == m.metrics["baseline_epochs"] == 4 * 2 + 3 * 2
    assert [r[1] for r in rows if r[4]] == ["3", "6", "9", "12", "14"]
    assert is_complete(tmp_path / "run" / "baseline")


def test_parallel_stage1_matches_sequential(tmp_path, tiny_teacher):
    seq = run_pipeline(_cfg(tmp_path, tiny_teacher, "seq"), stages=("stage1",))
    par = run_pipeline(_cfg(tmp_path, tiny_teacher, "par", stage1={"workers": 2}), stages=("stage1",))
    assert seq.metrics["block_test_top1"] == par.metrics["block_test_top1"]
    teacher = load_network(tiny_teacher[0])
    for l in range(1, 5):
        (a,) = load_scions(tmp_path / "seq" / "stage1" / f"block{l}", teacher)
        (b,) = load_scions(tmp_path / "par" / "stage1" / f"block{l}", teacher)
        assert all(torch.equal(a.state_dict()[k], b.state_dict()[k]) for k in a.state_dict())


def test_metrics_log_is_append_only(tmp_path):
    from graftkd.distill_train import TrainRecord

    log = MetricsLog(tmp_path / "m.csv")
    log.append(TrainRecord("block1", 1, 0.5, 0.25, None, 0.1))
    first = (tmp_path / "m.csv").read_text()
    log.append(TrainRecord("block1", 2, 0.25, 0.5, 0.75, 0.1))
    assert (tmp_path / "m.csv").read_text().startswith(first)
    assert [r.test_acc for r in log.read()] == [None, 0.75]


def test_teacher_training_deterministic(tmp_path):
    a = tiny_config(tmp_path, teacher={"epochs": 1, "checkpoint": str(tmp_path / "ta")})
    b = a.with_overrides()
    b.teacher.checkpoint = str(tmp_path / "tb")
    _, acc_a = train_teacher(a)
    _, acc_b = train_teacher(b)
    assert acc_a == acc_b
    sa, sb = load_network(tmp_path / "ta").state_dict(), load_network(tmp_path / "tb").state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)


# --- partial grafting report -----------------------------------------------


def test_partial_graft_identity_scion(tiny_teacher, tmp_path):
    path, acc = tiny_teacher
    teacher = load_network(path).eval()
    data = load_run_data(tiny_config(tmp_path, teacher_dir=path))
    rep = partial_graft_report(teacher, identity_scion(teacher, 3), 3, data.test_set)
    assert rep.accuracy == rep.teacher_accuracy == acc["top1"]
    assert rep.reduction_pct == 0.0
    assert rep.params_cell().endswith(", 0.0%↓")


def test_partial_graft_report_schema(tiny_teacher, tmp_path):
    from graftkd.graft import wrap_student

    teacher = load_network(tiny_teacher[0]).eval()
    scion = wrap_student(build_network("toy-cnn-4block", width=4), teacher, seed=0)[2]
    data = load_run_data(tiny_config(tmp_path, teacher_dir=tiny_teacher[0]))
    rep = partial_graft_report(teacher, scion, 3, data.test_set)
    header = rep.table().splitlines()[0]
    for column in ("Block", "Params", "Reduction", "Acc@1"):
        assert column in header
    assert rep.to_dict()["params"] == rep.params_cell()
    with pytest.raises(ValueError):
        partial_graft_report(teacher, None, 3, data.test_set)
    with pytest.raises(ValueError):
        partial_graft_report(teacher, scion, 2, data.test_set)


def test_partial_graft_resnet34_block3_format():
    from graftkd.graft import wrap_scion

    teacher = build_network("resnet34").eval()
    student = build_network("resnet18")
    scion = wrap_scion(student.blocks[2], 3, 4, teacher.signatures, seed=0)
    x = torch.randn(2, 3, 224, 224)
    rep = partial_graft_report(teacher, scion, 3, (x, torch.tensor([0, 1])))
    assert rep.params_cell() == "6.82→2.10, 69.2%↓"
