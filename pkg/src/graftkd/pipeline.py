"""Run orchestration: teacher pre-training, the two grafting stages, merge, evaluation.

Run directory layout::

    <out>/manifest.json          run manifest (written first, finalized last)
    <out>/metrics.csv            one row per epoch of every unit
    <out>/stage1/block<l>/       one wrapped scion per stage-1 unit
    <out>/stage2/depth<l>/       the full scion set after depth l
    <out>/student/               merged standalone student
    <out>/baseline/              whole-student distillation baseline (optional)
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import json
import logging
import multiprocessing
import os
import platform
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import torch

from . import __version__
from .checkpoint import (
    is_complete,
    load_network,
    load_scions,
    save_network,
    save_scions,
    write_json_atomic,
)
from .config import ExperimentConfig
from .distill_train import (
    ADAM_BETAS,
    LOSS_CONVENTION,
    TRAIN_ACC_CONVENTION,
    TrainRecord,
    evaluate,
    train_stage1,
    train_stage2,
    train_teacher_ce,
    train_whole,
)
from .fewshot_data import FewShotDataset, LabeledSource, batch_size_for, load_source, sample_kshot
from .graft import WrappedScion, finalize_student, graft_block, identity_scion, wrap_student
from .netzoo import FLOP_CONVENTION, ArchSpec, BlockwiseNetwork, build_network, count_params

log = logging.getLogger(__name__)

__all__ = [
    "DEVICE_ENV",
    "MetricsLog",
    "PartialGraftReport",
    "RunExistsError",
    "RunManifest",
    "StopRun",
    "device_from_env",
    "evaluate_checkpoint",
    "load_run_data",
    "partial_graft_report",
    "run_pipeline",
    "train_teacher",
]

DEVICE_ENV = "GRAFTKD_DEVICE"
MANIFEST_NAME = "manifest.json"
METRICS_NAME = "metrics.csv"
RUN_FORMAT = "graftkd-run/1"
ALL_STAGES = ("stage1", "stage2", "finalize", "baseline")


class RunExistsError(FileExistsError):
    pass


class StopRun(RuntimeError):
    """Raised by a unit callback to interrupt a run (used to exercise resume)."""


def device_from_env() -> torch.device:
    return torch.device(os.environ.get(DEVICE_ENV, "cpu"))


# ---------------------------------------------------------------------------
# metrics


class MetricsLog:
    """Append-only CSV of :class:`TrainRecord` rows; every row is flushed as it is written."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def append(self, rec: TrainRecord) -> None:
        new = not self.path.exists() or self.path.stat().st_size == 0
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(TrainRecord.FIELDS)
            w.writerow(rec.row())
            fh.flush()
            os.fsync(fh.fileno())

    def read(self) -> list[TrainRecord]:
        if not self.path.exists():
            return []
        with open(self.path, newline="") as fh:
            rows = list(csv.reader(fh))
        return [TrainRecord.from_row(r) for r in rows[1:] if len(r) == len(TrainRecord.FIELDS)]

    def keep_units(self, units: Iterable[str]) -> None:
        """Drop rows of units that will be retrained (run once, when resuming)."""
        keep = set(units)
        recs = [r for r in self.read() if r.unit in keep]
        tmp = self.path.with_name(self.path.name + ".tmp")
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TrainRecord.FIELDS)
            w.writerows(r.row() for r in recs)
        os.replace(tmp, self.path)


# ---------------------------------------------------------------------------
# manifest


def _code_version() -> dict:
    info = {"graftkd": __version__, "torch": torch.__version__, "python": platform.python_version()}
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5
        )
        if out.returncode == 0:
            info["git"] = out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return info


def conventions(cfg: ExperimentConfig, mean, std) -> dict:
    """Every convention the results depend on, recorded verbatim in the manifest."""
    return {
        "loss_mean_order": LOSS_CONVENTION,
        "loss_n": "N = number of classes (logit dimension)",
        "flop_convention": FLOP_CONVENTION,
        "normalization_constants": {"mean": list(mean), "std": list(std)},
        "train_acc": TRAIN_ACC_CONVENTION,
        "argmax_tie_break": "lowest class index (stable descending sort)",
        "teacher_mode": "inference mode (stored normalization statistics); parameters frozen",
        "student_norm_mode": cfg.student.norm_mode,
        "block_boundaries": "downsampling transitions; classifier head folded into the last block",
        "adaption_modules": "bias-free 1x1 linear channel maps, no normalization or activation",
        "fold_target": "entry layers of the next block (first conv and projection shortcut)",
        "equivalence_tolerance": {"float32": 1e-4, "float64": 1e-10},
        "crop_padding": cfg.data.crop_padding,
        "augmentation": "zero-padded random crop then horizontal flip (p=0.5), per-sample RNG keyed by (seed, epoch, index)",
        "kshot_sampling": "uniform without replacement within each class",
        "partial_batches": "kept",
        "batch_size_rule": "floor(64*K/10), at least 1",
        "lr_scaling": "linear in batch size from reference 64; constant within a unit",
        "optimizer": {"name": "Adam", "betas": list(ADAM_BETAS), "weight_decay": 0.0},
        "epoch_budgets": {
            "stage1_per_block": cfg.stage1.epochs_per_unit,
            "stage2_per_depth": cfg.stage2.epochs_per_unit,
        },
        "stage1_order": "sequential" if cfg.stage1_workers == 1 else f"parallel ({cfg.stage1_workers} processes)",
        "stage1_objective": cfg.stage1.objective,
        "non_finite_loss": "abort the unit, report the batch index",
    }


class RunManifest:
    """JSON record of one run; rewritten atomically on every update."""

    def __init__(self, run_dir: str | Path, data: dict):
        self.run_dir = Path(run_dir)
        self.data = data

    @property
    def path(self) -> Path:
        return self.run_dir / MANIFEST_NAME

    @classmethod
    def load(cls, run_dir: str | Path) -> "RunManifest":
        with open(Path(run_dir) / MANIFEST_NAME) as fh:
            return cls(run_dir, json.load(fh))

    @classmethod
    def create(cls, run_dir: Path, cfg: ExperimentConfig, mean, std) -> "RunManifest":
        m = cls(
            run_dir,
            {
                "format": RUN_FORMAT,
                "status": "running",
                "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
                "config": cfg.to_dict(),
                "code_version": _code_version(),
                "conventions": conventions(cfg, mean, std),
                "checkpoints": {"teacher": None, "stage1": {}, "stage2": {}, "student": None, "baseline": None},
                "metrics": {},
                "failure": None,
            },
        )
        m.save()
        return m

    def save(self) -> None:
        write_json_atomic(self.path, self.data)

    def checkpoint(self, stage: str, unit: str | None, path: Path) -> None:
        rel = os.path.relpath(path, self.run_dir)
        if unit is None:
            self.data["checkpoints"][stage] = rel
        else:
            self.data["checkpoints"][stage][unit] = rel
        self.save()

    def metric(self, key: str, value) -> None:
        self.data["metrics"][key] = value
        self.save()

    @property
    def status(self) -> str:
        return self.data["status"]

    @property
    def metrics(self) -> dict:
        return self.data["metrics"]


# ---------------------------------------------------------------------------
# data and teacher


@functools.lru_cache(maxsize=4)
def _source(locator: str, split: str) -> LabeledSource:
    return load_source(locator, split)


@dataclass
class RunData:
    train: LabeledSource
    test: LabeledSource
    test_set: tuple[torch.Tensor, torch.Tensor]

    @property
    def mean(self):
        return self.train.mean

    @property
    def std(self):
        return self.train.std


def load_run_data(cfg: ExperimentConfig) -> RunData:
    train, test = _source(cfg.data.locator, "train"), _source(cfg.data.locator, "test")
    if cfg.data.mean is not None:
        train = dataclasses.replace(train, mean=cfg.data.mean, std=cfg.data.std)
        test = dataclasses.replace(test, mean=cfg.data.mean, std=cfg.data.std)
    else:
        test = dataclasses.replace(test, mean=train.mean, std=train.std)
    if cfg.data.test_limit:
        test = LabeledSource(
            test.images[: cfg.data.test_limit], test.labels[: cfg.data.test_limit], test.num_classes,
            test.source_id, test.mean, test.std,
        )
    if train.num_classes != cfg.teacher.arch.num_classes:
        raise ValueError(f"dataset has {train.num_classes} classes, teacher arch has {cfg.teacher.arch.num_classes}")
    return RunData(train, test, test.tensors())


def train_teacher(cfg: ExperimentConfig, data: RunData | None = None, device: torch.device | None = None) -> tuple[Path, dict]:
    """Cross-entropy training of the teacher; returns the checkpoint path and its test accuracy."""
    data = data or load_run_data(cfg)
    device = device or device_from_env()
    src = data.train
    if cfg.teacher.train_subset:
        src = src.subset(cfg.teacher.train_subset, cfg.seed_data)
    net = build_network(cfg.teacher.arch, seed=cfg.seed_init).to(device)
    path = cfg.teacher_checkpoint
    path.mkdir(parents=True, exist_ok=True)
    metrics = MetricsLog(path / METRICS_NAME)
    if metrics.path.exists():
        metrics.path.unlink()
    t0 = time.perf_counter()
    train_teacher_ce(
        net, src.images, src.labels, cfg.teacher.epochs, cfg.teacher.lr, cfg.teacher.batch_size, cfg.seed_train,
        data.mean, data.std, on_epoch=metrics.append,
    )
    acc = evaluate(net, data.test_set)
    save_network(
        net.cpu(),
        path,
        test_accuracy=acc,
        train_images=len(src),
        source_id=src.source_id,
        epochs=cfg.teacher.epochs,
        lr=cfg.teacher.lr,
        seeds={"data": cfg.seed_data, "init": cfg.seed_init, "train": cfg.seed_train},
        seconds=round(time.perf_counter() - t0, 1),
    )
    log.info("teacher: top1 %.4f -> %s", acc["top1"], path)
    return path, acc


def _load_teacher(cfg: ExperimentConfig, data: RunData, device: torch.device) -> tuple[BlockwiseNetwork, Path]:
    path = cfg.teacher_checkpoint
    if not is_complete(path):
        if not cfg.teacher.train:
            raise FileNotFoundError(f"teacher checkpoint {path} missing and teacher training disabled")
        train_teacher(cfg, data, device)
    teacher = load_network(path)
    if teacher.spec != cfg.teacher.arch:
        raise ValueError(f"teacher checkpoint {path} is {teacher.spec}, config asks for {cfg.teacher.arch}")
    return teacher.to(device).eval(), path


# ---------------------------------------------------------------------------
# pipeline


def _initial_scions(cfg: ExperimentConfig, teacher: BlockwiseNetwork) -> tuple[list[WrappedScion], ArchSpec]:
    if cfg.student.init == "identity":
        return [identity_scion(teacher, l) for l in range(1, teacher.num_blocks + 1)], teacher.spec
    student = build_network(cfg.student.arch, seed=cfg.seed_init)
    return wrap_student(student, teacher, seed=cfg.seed_init), cfg.student.arch


def _due(i: int, n: int, every: int) -> bool:
    return i % every == 0 or i == n


def _stage1_worker(cfg: ExperimentConfig, l: int, teacher_path: str, run_dir: str, data: FewShotDataset, test_set):
    torch.set_num_threads(1)
    device = device_from_env()
    teacher = load_network(teacher_path).to(device).eval()
    scions, spec = _initial_scions(cfg, teacher)
    for s in scions:
        s.to(device)
    _, recs = train_stage1(teacher, scions, data, cfg.stage1, test_set, units=[l])
    save_scions([scions[l - 1]], Path(run_dir) / "stage1" / f"block{l}", spec, "block_graft", unit=f"block{l}")
    return recs


def run_pipeline(
    cfg: ExperimentConfig,
    resume: bool = False,
    stages: Sequence[str] | None = None,
    on_unit_done: Callable[[str], None] | None = None,
) -> RunManifest:
    """Execute the requested stages (default: all; ``baseline`` only when enabled).

    With ``resume`` (implied for runs that continue an existing directory),
    completed unit checkpoints are loaded instead of retrained and metrics
    rows of unfinished units are dropped. ``on_unit_done(unit)`` runs after
    each unit is checkpointed; raising :class:`StopRun` there interrupts
    the run.
    """
    stages = tuple(stages) if stages is not None else tuple(s for s in ALL_STAGES if s != "baseline" or cfg.baseline.enabled)
    unknown = set(stages) - set(ALL_STAGES)
    if unknown:
        raise ValueError(f"unknown stages {sorted(unknown)}")
    device = device_from_env()
    run_dir = Path(cfg.out_dir)
    if (run_dir / MANIFEST_NAME).exists() and not resume:
        raise RunExistsError(f"{run_dir} already holds a run; resume it or choose another output directory")
    run_dir.mkdir(parents=True, exist_ok=True)

    data = load_run_data(cfg)
    if resume and (run_dir / MANIFEST_NAME).exists():
        manifest = RunManifest.load(run_dir)
        before = {k: v for k, v in manifest.data["config"].items() if k != "source_path"}
        now = {k: v for k, v in json.loads(json.dumps(cfg.to_dict())).items() if k != "source_path"}
        if before != now:
            changed = sorted(k for k in now if before.get(k) != now[k])
            raise ValueError(f"config differs from the run being resumed in sections {changed}")
        manifest.data["status"] = "running"
        manifest.data["failure"] = None
        manifest.save()
    else:
        manifest = RunManifest.create(run_dir, cfg, data.mean, data.std)
    metrics = MetricsLog(run_dir / METRICS_NAME)
    current = {"stage": "setup", "unit": None}

    try:
        teacher, teacher_path = _load_teacher(cfg, data, device)
        manifest.checkpoint("teacher", None, teacher_path.resolve())
        if "teacher_top1" not in manifest.metrics:
            manifest.metric("teacher_top1", evaluate(teacher, data.test_set)["top1"])
        fewshot = sample_kshot(data.train, cfg.K, cfg.seed_data)
        manifest.data["fewshot"] = {"K": cfg.K, "size": len(fewshot), "batch_size": batch_size_for(cfg.K)}
        manifest.save()
        L = teacher.num_blocks
        scions, student_spec = _initial_scions(cfg, teacher)
        for s in scions:
            s.to(device)

        s1_dir, s2_dir = run_dir / "stage1", run_dir / "stage2"
        done1 = [l for l in range(1, L + 1) if is_complete(s1_dir / f"block{l}")]
        done2 = [l for l in range(2, L + 1) if is_complete(s2_dir / f"depth{l}")]
        resume_depth = max(done2, default=1)
        # a saved depth supersedes stage 1, so none of its rows will be rewritten
        blocks_kept = range(1, L + 1) if resume_depth > 1 else done1
        kept = {f"block{l}" for l in blocks_kept} | {f"depth{l}" for l in range(2, resume_depth + 1)}
        if is_complete(run_dir / "baseline"):
            kept.add("whole")
        if metrics.path.exists():
            metrics.keep_units(kept)

        # ---- stage 1 (needed unless stage 2 resumes from a saved depth)
        if resume_depth == 1 and ("stage1" in stages or "stage2" in stages):
            current["stage"] = "stage1"
            for l in done1:
                scions[l - 1] = load_scions(s1_dir / f"block{l}", teacher)[0].to(device)
                manifest.checkpoint("stage1", f"block{l}", s1_dir / f"block{l}")
            todo = [l for l in range(1, L + 1) if l not in done1]
            if todo and "stage1" not in stages:
                raise FileNotFoundError(f"stage-1 checkpoints missing for blocks {todo}; run stage1 first")
            _run_stage1(cfg, teacher, teacher_path, scions, student_spec, fewshot, data, todo, run_dir, manifest, metrics, current, on_unit_done)
            _record_unit_accs(manifest, metrics, "block")

        # ---- stage 2
        if "stage2" in stages:
            current["stage"] = "stage2"
            if resume_depth > 1:
                scions = [s.to(device) for s in load_scions(s2_dir / f"depth{resume_depth}", teacher)]
            depths = list(range(resume_depth + 1, L + 1))

            def unit_done2(l, scs, recs):
                if _due(l - 1, L - 1, cfg.checkpoint_every):
                    p = save_scions(scs, s2_dir / f"depth{l}", student_spec, "net_graft", unit=f"depth{l}")
                    manifest.checkpoint("stage2", f"depth{l}", p)
                if on_unit_done is not None:
                    on_unit_done(f"depth{l}")

            if depths:
                train_stage2(
                    teacher, scions, fewshot, cfg.stage2, data.test_set, depths=depths,
                    on_unit_done=lambda l, scs, recs: (current.update(unit=f"depth{l}"), unit_done2(l, scs, recs)),
                    on_epoch=metrics.append,
                )
            for l in done2:
                manifest.checkpoint("stage2", f"depth{l}", s2_dir / f"depth{l}")
            _record_unit_accs(manifest, metrics, "depth")

        # ---- merge
        if "finalize" in stages:
            current.update(stage="finalize", unit=None)
            if "stage2" not in stages:
                if not is_complete(s2_dir / f"depth{L}"):
                    raise FileNotFoundError(f"stage-2 checkpoint depth{L} missing; run stage2 first")
                scions = [s.to(device) for s in load_scions(s2_dir / f"depth{L}", teacher)]
            student = finalize_student([s.cpu() for s in scions], student_spec)
            p = save_network(student, run_dir / "student", params=count_params(student))
            manifest.checkpoint("student", None, p)
            acc = evaluate(student.to(device), data.test_set)
            manifest.metric("student_top1", acc["top1"])
            if "top5" in acc:
                manifest.metric("student_top5", acc["top5"])
            manifest.metric("student_params", count_params(student))

        # ---- whole-network baseline
        if "baseline" in stages:
            current.update(stage="baseline", unit="whole")
            if is_complete(run_dir / "baseline"):
                base = load_network(run_dir / "baseline").to(device)
            else:
                base = build_network(cfg.student.arch if cfg.student.init == "random" else student_spec, seed=cfg.seed_init).to(device)
                if cfg.student.init == "identity":
                    base.load_state_dict(teacher.state_dict())
                train_whole(
                    base, teacher, fewshot, cfg.baseline_epochs(L), cfg.baseline.lr, cfg.seed_train,
                    objective=cfg.baseline.objective, temperature=cfg.baseline.temperature,
                    batch_size=cfg.stage1.batch_size, test_set=data.test_set, eval_every=cfg.baseline.eval_every,
                    on_epoch=metrics.append, norm_mode=cfg.student.norm_mode, crop_padding=cfg.data.crop_padding,
                )
                manifest.checkpoint("baseline", None, save_network(base.cpu(), run_dir / "baseline"))
                base.to(device)
            manifest.metric("baseline_top1", evaluate(base, data.test_set)["top1"])
            manifest.metric("baseline_epochs", cfg.baseline_epochs(L))
            manifest.metric("baseline_objective", cfg.baseline.objective)
    except StopRun:
        manifest.data["status"] = "interrupted"
        manifest.data["failure"] = {**current, "error": "stopped"}
        manifest.save()
        raise
    except Exception as exc:
        manifest.data["status"] = "failed"
        manifest.data["failure"] = {**current, "error": f"{type(exc).__name__}: {exc}"}
        manifest.save()
        raise

    complete = is_complete(run_dir / "student") and (not cfg.baseline.enabled or is_complete(run_dir / "baseline"))
    manifest.data["status"] = "finished" if complete else "partial"
    manifest.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    manifest.save()
    return manifest


def _run_stage1(cfg, teacher, teacher_path, scions, student_spec, fewshot, data, todo, run_dir, manifest, metrics, current, on_unit_done):
    s1_dir = run_dir / "stage1"
    L = teacher.num_blocks

    def unit_done(l, scion, recs):
        if _due(l, L, cfg.checkpoint_every):
            p = save_scions([scion], s1_dir / f"block{l}", student_spec, "block_graft", unit=f"block{l}")
            manifest.checkpoint("stage1", f"block{l}", p)
        if on_unit_done is not None:
            on_unit_done(f"block{l}")

    if cfg.stage1_workers > 1 and len(todo) > 1:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=cfg.stage1_workers, mp_context=ctx) as pool:
            futures = {
                l: pool.submit(_stage1_worker, cfg, l, str(teacher_path), str(run_dir), fewshot, data.test_set)
                for l in todo
            }
            for l in todo:
                current["unit"] = f"block{l}"
                for rec in futures[l].result():
                    metrics.append(rec)
                scions[l - 1] = load_scions(s1_dir / f"block{l}", teacher)[0].to(device_from_env())
                manifest.checkpoint("stage1", f"block{l}", s1_dir / f"block{l}")
                if on_unit_done is not None:
                    on_unit_done(f"block{l}")
        return
    for l in todo:
        current["unit"] = f"block{l}"
        train_stage1(
            teacher, scions, fewshot, cfg.stage1, data.test_set, units=[l],
            on_unit_done=unit_done, on_epoch=metrics.append,
        )


def _record_unit_accs(manifest: RunManifest, metrics: MetricsLog, prefix: str) -> None:
    last: dict[str, float] = {}
    for rec in metrics.read():
        if rec.unit.startswith(prefix) and rec.test_acc is not None:
            last[rec.unit] = rec.test_acc
    if last:
        manifest.metric(f"{prefix}_test_top1", dict(sorted(last.items())))


def evaluate_checkpoint(path: str | Path, cfg: ExperimentConfig) -> dict[str, float]:
    data = load_run_data(cfg)
    net = load_network(path).to(device_from_env())
    return evaluate(net, data.test_set)


# ---------------------------------------------------------------------------
# partial grafting


@dataclass
class PartialGraftReport:
    """One row of a partial-grafting table: teacher block ``block`` replaced by a scion."""

    block: int
    params_before: int
    params_after: int
    adaption_params: int
    accuracy: float
    teacher_accuracy: float

    @property
    def reduction_pct(self) -> float:
        return 100.0 * (self.params_before - self.params_after) / self.params_before

    @property
    def unit(self) -> tuple[str, float]:
        return ("M", 1e6) if self.params_before >= 1e6 else ("K", 1e3)

    def params_cell(self) -> str:
        """``before→after, reduction%↓`` with counts in the report unit, e.g. ``6.82→2.10, 69.2%↓``."""
        _, scale = self.unit
        return f"{self.params_before / scale:.2f}→{self.params_after / scale:.2f}, {self.reduction_pct:.1f}%↓"

    def to_dict(self) -> dict:
        return {
            **dataclasses.asdict(self),
            "reduction_pct": self.reduction_pct,
            "params": self.params_cell(),
        }

    def table(self) -> str:
        name, _ = self.unit
        head = ("Block", f"Params ({name})", "Reduction", "Acc@1 (%)", "Teacher Acc@1 (%)")
        _, scale = self.unit
        row = (
            f"block{self.block}",
            f"{self.params_before / scale:.2f}→{self.params_after / scale:.2f}",
            f"{self.reduction_pct:.1f}%↓",
            f"{100 * self.accuracy:.2f}",
            f"{100 * self.teacher_accuracy:.2f}",
        )
        widths = [max(len(a), len(b)) for a, b in zip(head, row)]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        lines = [fmt.format(*head).rstrip(), fmt.format(*row).rstrip()]
        if self.adaption_params:
            lines.append(f"(adaption maps add {self.adaption_params} parameters to the hybrid)")
        return "\n".join(lines)


def partial_graft_report(
    teacher: BlockwiseNetwork, scion: WrappedScion | None, l: int, test_set
) -> PartialGraftReport:
    """Evaluate the hybrid with teacher block ``l`` replaced by ``scion``.

    Parameter counts compare the teacher block with the scion's student
    block; the bias-free adaption maps are reported separately.
    """
    if scion is None:
        raise ValueError(f"no trained scion for block {l}")
    if scion.index != l:
        raise ValueError(f"scion is for block {scion.index}, not {l}")
    adaption = sum(count_params(a) for a in (scion.pre, scion.post) if a is not None)
    return PartialGraftReport(
        block=l,
        params_before=count_params(teacher.blocks[l - 1]),
        params_after=count_params(scion.core),
        adaption_params=adaption,
        accuracy=evaluate(graft_block(teacher, scion), test_set)["top1"],
        teacher_accuracy=evaluate(teacher, test_set)["top1"],
    )
