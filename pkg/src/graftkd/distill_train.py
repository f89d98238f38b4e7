"""Normalized-logit distillation, the two grafting stages, baselines and evaluation."""

from __future__ import annotations

import contextlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .fewshot_data import FewShotDataset, batch_size_for, make_loader
from .graft import WrappedScion, graft_block, graft_prefix, trainable_params
from .netzoo import BlockwiseNetwork

log = logging.getLogger(__name__)

__all__ = [
    "DegenerateLogitsError",
    "NonFiniteLossError",
    "StageConfig",
    "TrainRecord",
    "block_feature_loss",
    "evaluate",
    "frozen",
    "graft_loss",
    "kd_baseline_loss",
    "normalize_logits",
    "scale_lr",
    "train_stage1",
    "train_stage2",
    "train_whole",
]

EPS = 1e-12
ADAM_BETAS = (0.9, 0.999)

# Recorded in run manifests.
LOSS_CONVENTION = "per-sample (1/N)*||z_g/|z_g| - z_t/|z_t|||^2 with N = logit dimension, then mean over batch"
TRAIN_ACC_CONVENTION = "train accuracy = top-1 agreement with the teacher on the unlabeled few-shot set"


class DegenerateLogitsError(ValueError):
    """A logit row has (near) zero norm and cannot be normalized."""


class NonFiniteLossError(FloatingPointError):
    pass


def normalize_logits(z: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Scale each logit vector (last axis) to unit L2 norm."""
    norm = z.norm(dim=-1, keepdim=True)
    if bool((norm <= eps).any()):
        bad = torch.nonzero(norm.squeeze(-1) <= eps).flatten().tolist()
        raise DegenerateLogitsError(f"logit rows {bad[:10]} have norm <= {eps}")
    return z / norm


def graft_loss(z_grafted: torch.Tensor, z_teacher: torch.Tensor, num_classes: int | None = None) -> torch.Tensor:
    """Mean over the batch of ``(1/N) * ||z_g/|z_g| - z_t/|z_t|||^2``; lies in ``[0, 4/N]``."""
    if z_grafted.shape != z_teacher.shape:
        raise ValueError(f"logit shapes differ: {tuple(z_grafted.shape)} vs {tuple(z_teacher.shape)}")
    n = z_grafted.shape[-1] if num_classes is None else num_classes
    if n != z_grafted.shape[-1]:
        raise ValueError(f"num_classes={n} but logits have dimension {z_grafted.shape[-1]}")
    diff = normalize_logits(z_grafted) - normalize_logits(z_teacher)
    return (diff.pow(2).sum(-1) / n).mean()


def kd_baseline_loss(z_student: torch.Tensor, z_teacher: torch.Tensor, temperature: float = 4.0) -> torch.Tensor:
    """Hinton-style soft cross-entropy ``T^2 * H(softmax(z_t/T), softmax(z_s/T))``, batch-averaged."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    p_t = F.softmax(z_teacher / temperature, dim=-1)
    log_p_s = F.log_softmax(z_student / temperature, dim=-1)
    return -(p_t * log_p_s).sum(-1).mean() * temperature**2


def block_feature_loss(student_feat: torch.Tensor, teacher_feat: torch.Tensor) -> torch.Tensor:
    """Mean squared error between a scion's output and the teacher block output.

    Ablation objective: the scion imitates the block output instead of the
    final prediction.
    """
    return F.mse_loss(student_feat, teacher_feat)


def scale_lr(base_lr: float, batch_size: int) -> float:
    """Linear scaling from the reference batch size 64."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    return base_lr * batch_size / 64


@dataclass
class StageConfig:
    """One grafting stage. ``lr_per_unit`` overrides ``base_lr`` (both at batch size 64)."""

    stage: str = "block_graft"
    epochs_per_unit: int = 100
    base_lr: float = 2.5e-4
    lr_per_unit: dict[int, float] = field(default_factory=dict)
    seed: int = 0
    batch_size: int | None = None  # None -> batch_size_for(K)
    eval_every: int = 0  # 0 -> evaluate the test set only after the last epoch
    objective: str = "graft"  # "graft" or "feature" (block-output imitation, stage 1 only)
    norm_mode: str = "batch"  # "batch": student norm layers train normally; "running": kept in inference mode
    crop_padding: int = 4
    weight_decay: float = 0.0
    betas: tuple[float, float] = ADAM_BETAS

    def __post_init__(self) -> None:
        if self.stage not in ("block_graft", "net_graft"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.epochs_per_unit < 1:
            raise ValueError("epochs_per_unit must be positive")
        if self.weight_decay != 0.0 or tuple(self.betas) != ADAM_BETAS:
            raise ValueError("optimizer is fixed to Adam(betas=(0.9, 0.999), weight_decay=0)")
        if self.objective not in ("graft", "feature"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.norm_mode not in ("batch", "running"):
            raise ValueError(f"unknown norm_mode {self.norm_mode!r}")
        self.lr_per_unit = {int(k): float(v) for k, v in self.lr_per_unit.items()}

    def lr_for(self, unit: int) -> float:
        return self.lr_per_unit.get(unit, self.base_lr)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["lr_per_unit"] = {str(k): v for k, v in self.lr_per_unit.items()}
        return d


@dataclass
class TrainRecord:
    unit: str
    epoch: int
    loss: float
    train_acc: float
    test_acc: float | None
    seconds: float

    FIELDS = ("unit", "epoch", "loss", "train_acc", "test_acc", "seconds")

    def row(self) -> list[str]:
        return [
            self.unit,
            str(self.epoch),
            repr(self.loss),
            repr(self.train_acc),
            "" if self.test_acc is None else repr(self.test_acc),
            f"{self.seconds:.3f}",
        ]

    @classmethod
    def from_row(cls, row: Sequence[str]) -> "TrainRecord":
        unit, epoch, loss, tr, te, sec = row
        return cls(unit, int(epoch), float(loss), float(tr), None if te == "" else float(te), float(sec))


# ---------------------------------------------------------------------------
# evaluation


@torch.no_grad()
def predict(model: nn.Module, x: torch.Tensor, batch_size: int = 500) -> torch.Tensor:
    was_training = model.training
    model.eval()
    device = _device_of(model)
    try:
        return torch.cat([model(x[i : i + batch_size].to(device)).cpu() for i in range(0, len(x), batch_size)])
    finally:
        model.train(was_training)


def evaluate(model: nn.Module, test_set: tuple[torch.Tensor, torch.Tensor], batch_size: int = 500) -> dict[str, float]:
    """Top-1 (and top-5 when there are at least 10 classes) accuracy.

    Ties are broken toward the lowest class index.
    """
    x, y = test_set
    if len(x) == 0:
        raise ValueError("empty test set")
    logits = predict(model, x, batch_size)
    order = torch.sort(logits, dim=1, descending=True, stable=True).indices
    out = {"top1": (order[:, 0] == y).float().mean().item()}
    if logits.shape[1] >= 10:
        out["top5"] = (order[:, :5] == y[:, None]).any(1).float().mean().item()
    return out


# ---------------------------------------------------------------------------
# training


@contextlib.contextmanager
def frozen(module: nn.Module):
    """Temporarily disable gradients for ``module``'s parameters (saves weight-gradient work)."""
    flags = [(p, p.requires_grad) for p in module.parameters()]
    for p, _ in flags:
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in flags:
            p.requires_grad_(flag)


def _device_of(module: nn.Module) -> torch.device:
    p = next(module.parameters(), None)
    return p.device if p is not None else torch.device("cpu")


def _set_norm_mode(model: nn.Module, params: dict[str, nn.Parameter], mode: str) -> None:
    """In ``running`` mode, norm layers owning trainable parameters stay in inference mode."""
    if mode == "batch":
        return
    owned = {id(p) for p in params.values()}
    for m in model.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm) and any(id(p) in owned for p in m.parameters(recurse=False)):
            m.eval()


def _unit_seed(seed: int, stage: int, unit: int) -> int:
    return (seed * 1_000_003 + stage * 101 + unit) % (2**31)


def _fit(
    model: nn.Module,
    params: dict[str, nn.Parameter],
    teacher: BlockwiseNetwork,
    data: FewShotDataset,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
    unit: str,
    test_set=None,
    eval_every: int = 0,
    loss_fn: Callable | None = None,
    on_epoch: Callable[[TrainRecord], None] | None = None,
    norm_mode: str = "batch",
    crop_padding: int = 4,
) -> list[TrainRecord]:
    """Adam on ``params`` only, distilling teacher logits; returns one record per epoch."""
    torch.manual_seed(seed)
    loader = make_loader(data, batch_size, seed, padding=crop_padding)
    opt = torch.optim.Adam(params.values(), lr=scale_lr(lr, batch_size), betas=ADAM_BETAS, weight_decay=0.0)
    teacher.eval()
    device = _device_of(model)
    records = []
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        model.train()
        _set_norm_mode(model, params, norm_mode)
        total, count, agree = 0.0, 0, 0
        for b, x in enumerate(loader.epoch(epoch - 1)):
            x = x.to(device)
            with torch.no_grad():
                z_t = teacher(x)
            if loss_fn is None:
                z = model(x)
                loss = graft_loss(z, z_t)
            else:
                z, loss = loss_fn(x, z_t)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"unit {unit}: non-finite loss at epoch {epoch}, batch {b}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(x)
            count += len(x)
            agree += (z.detach().argmax(1) == z_t.argmax(1)).sum().item()
        test_acc = None
        if test_set is not None and (epoch == epochs or (eval_every and epoch % eval_every == 0)):
            test_acc = evaluate(model, test_set)["top1"]
        rec = TrainRecord(unit, epoch, total / count, agree / count, test_acc, time.perf_counter() - t0)
        log.debug("%s", rec)
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return records


def train_stage1(
    teacher: BlockwiseNetwork,
    scions: Sequence[WrappedScion],
    data: FewShotDataset,
    cfg: StageConfig,
    test_set=None,
    units: Iterable[int] | None = None,
    on_unit_done: Callable[[int, WrappedScion, list[TrainRecord]], None] | None = None,
    on_epoch: Callable[[TrainRecord], None] | None = None,
) -> tuple[list[WrappedScion], list[TrainRecord]]:
    """Block grafting: each scion is trained alone inside the frozen teacher.

    ``scions`` are the wrapped student blocks (see ``graft.wrap_student``);
    they are trained in place. ``units`` restricts training to a subset of
    block indices (used when resuming).
    """
    L = teacher.num_blocks
    if len(scions) != L:
        raise ValueError(f"need {L} scions, got {len(scions)}")
    bs = cfg.batch_size or batch_size_for(data.K)
    units = list(range(1, L + 1)) if units is None else list(units)
    records: list[TrainRecord] = []
    with frozen(teacher):
        for l in units:
            scion = scions[l - 1]
            model = graft_block(teacher, scion)
            params = trainable_params(model, 1, l)
            loss_fn = _feature_objective(teacher, scion) if cfg.objective == "feature" else None
            recs = _fit(
                model, params, teacher, data, cfg.epochs_per_unit, cfg.lr_for(l), bs,
                _unit_seed(cfg.seed, 1, l), f"block{l}", test_set, cfg.eval_every, loss_fn, on_epoch, cfg.norm_mode, cfg.crop_padding,
            )
            records += recs
            if on_unit_done is not None:
                on_unit_done(l, scion, recs)
    return list(scions), records


def _feature_objective(teacher: BlockwiseNetwork, scion: WrappedScion):
    l = scion.index

    def loss_fn(x, z_t):
        with torch.no_grad():
            h = x
            for block in teacher.blocks[: l - 1]:
                h = block(h)
            target = teacher.blocks[l - 1](h)
        out = scion(h)
        z = out
        for block in teacher.blocks[l:]:
            z = block(z)
        return z, block_feature_loss(out, target)

    return loss_fn


def train_stage2(
    teacher: BlockwiseNetwork,
    scions: Sequence[WrappedScion],
    data: FewShotDataset,
    cfg: StageConfig,
    test_set=None,
    depths: Iterable[int] | None = None,
    on_unit_done: Callable[[int, list[WrappedScion], list[TrainRecord]], None] | None = None,
    on_epoch: Callable[[TrainRecord], None] | None = None,
) -> tuple[list[WrappedScion], list[TrainRecord]]:
    """Progressive network grafting over depths ``2..L`` (depth 1 is the stage-1 model).

    At depth ``l`` the prefix ``H_1..H_l`` replaces teacher blocks ``1..l`` and
    all of those scions are trained jointly. Scions are updated in place.
    """
    L = teacher.num_blocks
    if len(scions) != L:
        raise ValueError(f"need {L} scions, got {len(scions)}")
    bs = cfg.batch_size or batch_size_for(data.K)
    depths = list(range(2, L + 1)) if depths is None else list(depths)
    if depths != sorted(depths) or any(d < 2 or d > L for d in depths):
        raise ValueError(f"depths must increase within 2..{L}, got {depths}")
    records: list[TrainRecord] = []
    with frozen(teacher):
        for l in depths:
            model = graft_prefix(teacher, scions[:l])
            params = trainable_params(model, 2, l)
            recs = _fit(
                model, params, teacher, data, cfg.epochs_per_unit, cfg.lr_for(l), bs,
                _unit_seed(cfg.seed, 2, l), f"depth{l}", test_set, cfg.eval_every, None, on_epoch, cfg.norm_mode, cfg.crop_padding,
            )
            records += recs
            if on_unit_done is not None:
                on_unit_done(l, list(scions), recs)
    return list(scions), records


def train_whole(
    student: BlockwiseNetwork,
    teacher: BlockwiseNetwork,
    data: FewShotDataset,
    epochs: int,
    lr: float,
    seed: int,
    objective: str = "graft",
    temperature: float = 4.0,
    batch_size: int | None = None,
    test_set=None,
    eval_every: int = 0,
    on_epoch: Callable[[TrainRecord], None] | None = None,
    norm_mode: str = "batch",
    crop_padding: int = 4,
) -> list[TrainRecord]:
    """Whole-network distillation baseline (normalized-logit or Hinton KD objective)."""
    bs = batch_size or batch_size_for(data.K)
    loss_fn = None
    if objective == "kd":

        def loss_fn(x, z_t):
            z = student(x)
            return z, kd_baseline_loss(z, z_t, temperature)

    elif objective != "graft":
        raise ValueError(f"unknown objective {objective!r}")
    params = dict(student.named_parameters())
    with frozen(teacher):
        return _fit(
            student, params, teacher, data, epochs, lr, bs, _unit_seed(seed, 0, 0), "whole",
            test_set, eval_every, loss_fn, on_epoch, norm_mode, crop_padding,
        )


def train_teacher_ce(
    network: BlockwiseNetwork,
    images,
    labels,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
    mean,
    std,
    test_set=None,
    on_epoch: Callable[[TrainRecord], None] | None = None,
) -> list[TrainRecord]:
    """Supervised cross-entropy training with crop/flip augmentation and a cosine LR schedule."""
    import numpy as np

    from .fewshot_data import augment, to_tensor

    torch.manual_seed(seed)
    device = _device_of(network)
    opt = torch.optim.Adam(network.parameters(), lr=lr)
    steps = epochs * math.ceil(len(labels) / batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps, pct_start=0.15)
    y_all = torch.from_numpy(np.asarray(labels))
    records = []
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        network.train()
        perm = np.random.default_rng([seed, epoch]).permutation(len(labels))
        total = correct = 0.0
        for i in range(0, len(perm), batch_size):
            idx = perm[i : i + batch_size]
            imgs = np.stack([augment(images[j], np.random.default_rng([seed, epoch, int(j)])) for j in idx])
            x, y = to_tensor(imgs, mean, std).to(device), y_all[idx].to(device)
            z = network(x)
            loss = F.cross_entropy(z, y)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
            correct += (z.argmax(1) == y).sum().item()
        test_acc = evaluate(network, test_set)["top1"] if test_set is not None and epoch == epochs else None
        rec = TrainRecord("teacher", epoch, total / len(perm), correct / len(perm), test_acc, time.perf_counter() - t0)
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return records


def snapshot(module: nn.Module) -> dict[str, torch.Tensor]:
    """Detached copy of all parameters and buffers, for bitwise comparisons."""
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def same_state(a: dict[str, torch.Tensor], b: dict[str, torch.Tensor]) -> bool:
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)
