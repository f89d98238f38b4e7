"""Experiment configuration: INI files with schema validation and line-precise errors.

Schema (section / key = type, default)::

    [experiment]
    out_dir = path, "runs/default"
    k = int, 10                    # shots per class
    seed_data = int, 0             # K-shot draw (and teacher train subset)
    seed_init = int, 0             # student and adaption initialisation (and teacher init)
    seed_train = int, 0            # batch order, augmentation (and teacher training)
    checkpoint_every = int, 1      # save every n-th unit of a stage; the last unit always

    [data]
    locator = str (required)       # see fewshot_data.load_source
    mean = floats, source default  # comma separated, one per channel
    std = floats, source default
    crop_padding = int, 4
    test_limit = int, 0            # evaluate on the first n test images; 0 = all

    [teacher]
    arch = str (required)          # registry name
    width = int, arch default
    checkpoint = path, <out_dir>/teacher
    train = bool, true             # train when the checkpoint is missing
    epochs = int, 20
    lr = float, 3e-3
    batch_size = int, 128
    train_subset = int, 0          # class-balanced subset size; 0 = all

    [student]
    arch = str (required)
    width = int, arch default
    init = random | identity       # identity: copy teacher blocks (same arch required)
    norm_mode = batch | running    # student norm layers during training

    [stage1]   /   [stage2]
    epochs_per_unit = int, 100 / 50
    lr = float, 2.5e-4 / 1e-4      # at batch size 64, scaled linearly
    lr.<l> = float                 # per-block (stage1) or per-depth (stage2) override
    batch_size = int, floor(64K/10)
    eval_every = int, 0            # 0 = evaluate after the last epoch only
    objective = graft | feature    # stage1 only
    workers = int, 1               # stage1 only: parallel processes for independent blocks

    [baseline]
    enabled = bool, false          # whole-student distillation on the same data
    objective = graft | kd
    epochs = int, L*E1 + (L-1)*E2  # equal total epoch budget by default
    lr = float, 1e-3
    temperature = float, 4.0
    eval_every = int, 0
"""

from __future__ import annotations

import configparser
import copy
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .distill_train import StageConfig
from .netzoo import ArchSpec, build_network

__all__ = [
    "BaselineConfig",
    "ConfigError",
    "DataConfig",
    "ExperimentConfig",
    "StudentConfig",
    "TeacherConfig",
    "load_config",
    "parse_config",
]


class ConfigError(ValueError):
    """Invalid configuration; the message starts with ``<file>:<line>:``."""


@dataclass
class DataConfig:
    locator: str
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None
    crop_padding: int = 4
    test_limit: int = 0


@dataclass
class TeacherConfig:
    arch: ArchSpec
    checkpoint: str | None = None
    train: bool = True
    epochs: int = 20
    lr: float = 3e-3
    batch_size: int = 128
    train_subset: int = 0


@dataclass
class StudentConfig:
    arch: ArchSpec
    init: str = "random"
    norm_mode: str = "batch"


@dataclass
class BaselineConfig:
    enabled: bool = False
    objective: str = "graft"
    epochs: int | None = None
    lr: float = 1e-3
    temperature: float = 4.0
    eval_every: int = 0


@dataclass
class ExperimentConfig:
    data: DataConfig
    teacher: TeacherConfig
    student: StudentConfig
    stage1: StageConfig = field(default_factory=lambda: StageConfig("block_graft", 100, 2.5e-4))
    stage2: StageConfig = field(default_factory=lambda: StageConfig("net_graft", 50, 1e-4))
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    out_dir: str = "runs/default"
    K: int = 10
    seed_data: int = 0
    seed_init: int = 0
    seed_train: int = 0
    checkpoint_every: int = 1
    stage1_workers: int = 1
    source_path: str | None = None

    def with_overrides(self, **kw) -> "ExperimentConfig":
        """Copy with top-level fields replaced (``None`` values are ignored); stage seeds follow ``seed_train``."""
        cfg = replace(copy.deepcopy(self), **{k: v for k, v in kw.items() if v is not None})
        cfg.stage1.seed = cfg.stage2.seed = cfg.seed_train
        if cfg.K < 1:
            raise ConfigError(f"K must be >= 1, got {cfg.K}")
        return cfg

    @property
    def teacher_checkpoint(self) -> Path:
        return Path(self.teacher.checkpoint) if self.teacher.checkpoint else Path(self.out_dir) / "teacher"

    def baseline_epochs(self, num_blocks: int) -> int:
        if self.baseline.epochs is not None:
            return self.baseline.epochs
        return num_blocks * self.stage1.epochs_per_unit + (num_blocks - 1) * self.stage2.epochs_per_unit

    def to_dict(self) -> dict:
        return {
            "experiment": {
                "out_dir": self.out_dir,
                "k": self.K,
                "seed_data": self.seed_data,
                "seed_init": self.seed_init,
                "seed_train": self.seed_train,
                "checkpoint_every": self.checkpoint_every,
            },
            "data": {**asdict(self.data), "mean": _list(self.data.mean), "std": _list(self.data.std)},
            "teacher": {**asdict(self.teacher), "arch": self.teacher.arch.to_dict()},
            "student": {**asdict(self.student), "arch": self.student.arch.to_dict()},
            "stage1": {**self.stage1.to_dict(), "workers": self.stage1_workers},
            "stage2": self.stage2.to_dict(),
            "baseline": asdict(self.baseline),
            "source_path": self.source_path,
        }


def _list(v):
    return None if v is None else list(v)


# ---------------------------------------------------------------------------
# parsing

_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")

_STAGE_KEYS = {"epochs_per_unit", "lr", "batch_size", "eval_every", "objective", "workers"}
_SCHEMA = {
    "experiment": {"out_dir", "k", "seed_data", "seed_init", "seed_train", "checkpoint_every"},
    "data": {"locator", "mean", "std", "crop_padding", "test_limit"},
    "teacher": {"arch", "width", "num_classes", "checkpoint", "train", "epochs", "lr", "batch_size", "train_subset"},
    "student": {"arch", "width", "num_classes", "init", "norm_mode"},
    "stage1": _STAGE_KEYS,
    "stage2": _STAGE_KEYS - {"objective", "workers"},
    "baseline": {"enabled", "objective", "epochs", "lr", "temperature", "eval_every"},
}


class _Reader:
    """Typed access to a parsed INI with source line numbers for every key."""

    def __init__(self, text: str, source: str):
        self.source = source
        self.lines: dict[tuple[str | None, str | None], int] = {}
        section = None
        for n, line in enumerate(text.splitlines(), start=1):
            if line[:1].isspace() and section is not None and not _SECTION_RE.match(line):
                continue  # continuation line
            if m := _SECTION_RE.match(line):
                section = m.group(1).strip().lower()
                self.lines.setdefault((section, None), n)
            elif (m := _KEY_RE.match(line)) and not line.lstrip().startswith(("#", ";")):
                self.lines.setdefault((section, m.group(1).strip().lower()), n)
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            line = getattr(exc, "lineno", None)
            if line is None and getattr(exc, "errors", None):
                line = exc.errors[0][0]
            msg = str(exc).splitlines()[0]
            raise ConfigError(f"{source}:{line or 1}: {msg}") from None
        self.parser = parser

    def error(self, section: str, key: str | None, msg: str) -> ConfigError:
        line = self.lines.get((section, key)) or self.lines.get((section, None)) or 1
        where = f"[{section}]" + (f" {key}" if key else "")
        return ConfigError(f"{self.source}:{line}: {where}: {msg}")

    def check_schema(self) -> None:
        for section in self.parser.sections():
            allowed = _SCHEMA.get(section)
            if allowed is None:
                raise self.error(section, None, f"unknown section (expected one of {', '.join(_SCHEMA)})")
            for key in self.parser[section]:
                base = key.split(".", 1)[0]
                if base not in allowed or (key != base and not (base == "lr" and section.startswith("stage"))):
                    raise self.error(section, key, "unknown key")

    def has(self, section: str, key: str) -> bool:
        return self.parser.has_option(section, key)

    def raw(self, section: str, key: str, default=None, required: bool = False):
        if self.has(section, key):
            return self.parser[section][key].strip()
        if required:
            raise self.error(section, None if not self.parser.has_section(section) else None, f"missing required key {key!r}")
        return default

    def _convert(self, section, key, default, fn, what):
        value = self.raw(section, key)
        if value is None:
            return default
        try:
            return fn(value)
        except (TypeError, ValueError):
            raise self.error(section, key, f"expected {what}, got {value!r}") from None

    def int(self, section, key, default=None, minimum=None):
        v = self._convert(section, key, default, int, "an integer")
        if v is not None and minimum is not None and v < minimum:
            raise self.error(section, key, f"must be >= {minimum}, got {v}")
        return v

    def float(self, section, key, default=None, positive=False):
        v = self._convert(section, key, default, float, "a number")
        if v is not None and positive and not v > 0:
            raise self.error(section, key, f"must be positive, got {v}")
        return v

    def bool(self, section, key, default=None):
        value = self.raw(section, key)
        if value is None:
            return default
        try:
            return self.parser.BOOLEAN_STATES[value.lower()]
        except KeyError:
            raise self.error(section, key, f"expected a boolean, got {value!r}") from None

    def floats(self, section, key):
        return self._convert(section, key, None, lambda s: tuple(float(t) for t in s.split(",")), "comma-separated numbers")

    def choice(self, section, key, default, options):
        value = self.raw(section, key, default)
        if value not in options:
            raise self.error(section, key, f"expected one of {', '.join(options)}, got {value!r}")
        return value

    def arch(self, section: str) -> ArchSpec:
        name = self.raw(section, "arch")
        if name is None:
            raise self.error(section, None, "missing required key 'arch'")
        spec = ArchSpec(name, num_classes=self.int(section, "num_classes", 10, minimum=2), width=self.int(section, "width", None, minimum=1))
        try:
            return build_network(spec).spec
        except KeyError as exc:
            raise self.error(section, "arch", str(exc.args[0])) from None
        except ValueError as exc:
            raise self.error(section, "arch", str(exc)) from None

    def stage(self, section: str, kind: str, epochs: int, lr: float) -> StageConfig:
        per_unit = {}
        for key in self.parser[section] if self.parser.has_section(section) else ():
            if key.startswith("lr."):
                try:
                    unit = int(key[3:])
                except ValueError:
                    raise self.error(section, key, "per-unit learning rates are written lr.<index>") from None
                per_unit[unit] = self.float(section, key, positive=True)
        return StageConfig(
            stage=kind,
            epochs_per_unit=self.int(section, "epochs_per_unit", epochs, minimum=1),
            base_lr=self.float(section, "lr", lr, positive=True),
            lr_per_unit=per_unit,
            batch_size=self.int(section, "batch_size", None, minimum=1),
            eval_every=self.int(section, "eval_every", 0, minimum=0),
            objective=self.choice(section, "objective", "graft", ("graft", "feature")) if section == "stage1" else "graft",
        )


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    r = _Reader(text, source)
    r.check_schema()
    for section in ("data", "teacher", "student"):
        if not r.parser.has_section(section):
            raise ConfigError(f"{source}:1: missing required section [{section}]")
    locator = r.raw("data", "locator")
    if not locator:
        raise r.error("data", None, "missing required key 'locator'")
    data = DataConfig(
        locator=locator,
        mean=r.floats("data", "mean"),
        std=r.floats("data", "std"),
        crop_padding=r.int("data", "crop_padding", 4, minimum=0),
        test_limit=r.int("data", "test_limit", 0, minimum=0),
    )
    if (data.mean is None) != (data.std is None):
        raise r.error("data", "mean" if data.mean is not None else "std", "mean and std must be given together")
    if data.mean is not None and len(data.mean) != len(data.std):
        raise r.error("data", "std", "mean and std need the same number of channels")
    if data.std is not None and any(s <= 0 for s in data.std):
        raise r.error("data", "std", "std entries must be positive")

    teacher = TeacherConfig(
        arch=r.arch("teacher"),
        checkpoint=r.raw("teacher", "checkpoint"),
        train=r.bool("teacher", "train", True),
        epochs=r.int("teacher", "epochs", 20, minimum=1),
        lr=r.float("teacher", "lr", 3e-3, positive=True),
        batch_size=r.int("teacher", "batch_size", 128, minimum=1),
        train_subset=r.int("teacher", "train_subset", 0, minimum=0),
    )
    student = StudentConfig(
        arch=r.arch("student"),
        init=r.choice("student", "init", "random", ("random", "identity")),
        norm_mode=r.choice("student", "norm_mode", "batch", ("batch", "running")),
    )
    t_net, s_net = build_network(teacher.arch), build_network(student.arch)
    if t_net.num_blocks != s_net.num_blocks:
        raise r.error("student", "arch", f"student has {s_net.num_blocks} blocks, teacher has {t_net.num_blocks}")
    if student.init == "identity" and student.arch != teacher.arch:
        raise r.error("student", "init", "identity init requires the student arch to equal the teacher arch")

    stage1 = r.stage("stage1", "block_graft", 100, 2.5e-4)
    stage2 = r.stage("stage2", "net_graft", 50, 1e-4)
    L = t_net.num_blocks
    for section, cfg, lo in (("stage1", stage1, 1), ("stage2", stage2, 2)):
        for unit in cfg.lr_per_unit:
            if not lo <= unit <= L:
                raise r.error(section, f"lr.{unit}", f"unit index must be in {lo}..{L}")
        cfg.norm_mode = student.norm_mode
        cfg.crop_padding = data.crop_padding

    baseline = BaselineConfig(
        enabled=r.bool("baseline", "enabled", False),
        objective=r.choice("baseline", "objective", "graft", ("graft", "kd")),
        epochs=r.int("baseline", "epochs", None, minimum=1),
        lr=r.float("baseline", "lr", 1e-3, positive=True),
        temperature=r.float("baseline", "temperature", 4.0, positive=True),
        eval_every=r.int("baseline", "eval_every", 0, minimum=0),
    )
    cfg = ExperimentConfig(
        data=data,
        teacher=teacher,
        student=student,
        stage1=stage1,
        stage2=stage2,
        baseline=baseline,
        out_dir=r.raw("experiment", "out_dir", "runs/default"),
        K=r.int("experiment", "k", 10, minimum=1),
        seed_data=r.int("experiment", "seed_data", 0),
        seed_init=r.int("experiment", "seed_init", 0),
        seed_train=r.int("experiment", "seed_train", 0),
        checkpoint_every=r.int("experiment", "checkpoint_every", 1, minimum=1),
        stage1_workers=r.int("stage1", "workers", 1, minimum=1),
        source_path=None if source == "<config>" else source,
    )
    return cfg.with_overrides()


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}:0: config file not found")
    return parse_config(path.read_text(), str(path))
