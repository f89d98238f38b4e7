"""Fast property suites behind ``graftkd verify``.

Each check compares the library against an independent oracle (a second
evaluation path, a closed form or finite differences) and returns a
:class:`CheckResult`. None of them needs a dataset download.
"""

from __future__ import annotations

import copy
import dataclasses
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn

from .distill_train import StageConfig, batch_size_for, graft_loss, scale_lr, snapshot, train_stage1, train_stage2
from .fewshot_data import FewShotDataset, sample_kshot
from .graft import finalize_student, fold_into_conv, graft_block, graft_prefix, identity_scion, wrap_student
from .netzoo import ArchSpec, BasicResidual, Block, BoundarySignature, build_network, count_params
from .synthetic import shapes_source

__all__ = [
    "CHECKS",
    "CheckResult",
    "calibrate_",
    "check_finalize_equivalence",
    "check_fold_exactness",
    "check_freezing",
    "check_hyperparameters",
    "check_identity_transparency",
    "check_loss_properties",
    "check_sampler",
    "run_checks",
]

TOL32 = 1e-4


@dataclass
class CheckResult:
    criterion: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.criterion}. {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(fn: Callable[..., CheckResult]) -> Callable[..., CheckResult]:
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@torch.no_grad()
def calibrate_(model: nn.Module, x: torch.Tensor, steps: int = 3) -> nn.Module:
    """Set the running statistics of train-mode norm layers from ``x``; returns ``model`` in eval mode."""
    model.train()
    norms = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm) and m.training]
    saved = [m.momentum for m in norms]
    for m in norms:
        m.momentum = None
        m.reset_running_stats()
    for i in range(steps):
        model(x[i::steps])
    for m, mom in zip(norms, saved):
        m.momentum = mom
    return model.eval()


def _perturb_(module: nn.Module, gen: torch.Generator, scale: float = 0.2) -> nn.Module:
    """Multiplicative noise on every parameter, a stand-in for training."""
    with torch.no_grad():
        for p in module.parameters():
            p.mul_(1 + scale * torch.randn(p.shape, generator=gen))
    return module


def _channel_map(M: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    return torch.einsum("mi,bihw->bmhw", M, x)


def _random_block(kind: int, gen: torch.Generator) -> tuple[Block, int]:
    r = lambda lo, hi: int(torch.randint(lo, hi + 1, (1,), generator=gen))  # noqa: E731
    c_in, c_out, stride = r(2, 12), r(2, 12), r(1, 2)
    res = 8
    if kind % 3 == 0:
        k = (1, 3, 5)[r(0, 2)]
        layers = [nn.Conv2d(c_in, c_out, k, stride, k // 2, bias=bool(r(0, 1))), nn.BatchNorm2d(c_out), nn.ReLU()]
    elif kind % 3 == 1:
        layers = [nn.Conv2d(c_in, c_out, 3, 1, 1), nn.ReLU(), nn.Conv2d(c_out, c_out, 3, 1, 1)]
        if stride == 2:
            layers.append(nn.MaxPool2d(2))
    else:
        layers = [BasicResidual(c_in, c_out, stride, projection=True)]
    block = Block(layers, BoundarySignature(c_in, c_out, stride, (res, res)))
    with torch.no_grad():
        for p in block.parameters():
            p.copy_(torch.randn(p.shape, generator=gen) * (0.5 if p.dim() > 1 else 0.1))
        for m in block.modules():
            if isinstance(m, nn.BatchNorm2d):
                m.running_mean.copy_(0.1 * torch.randn(m.running_mean.shape, generator=gen))
                m.running_var.copy_(0.5 + torch.rand(m.running_var.shape, generator=gen))
    return block.eval(), c_in


@_timed
def check_fold_exactness(pairs: int = 20, inputs: int = 50, seed: int = 0) -> CheckResult:
    """fold_into_conv(block, M)(x) against block(M x) evaluated directly."""
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for i in range(pairs):
        block, c_in = _random_block(i, gen)
        M = torch.randn(c_in, c_in, generator=gen) / math.sqrt(c_in)
        x = torch.randn(inputs, c_in, 8, 8, generator=gen)
        with torch.no_grad():
            err = (fold_into_conv(block, M)(x) - block(_channel_map(M, x))).abs().max().item()
        worst = max(worst, err)
    return CheckResult(1, "fold exactness", worst <= TOL32, f"max abs error {worst:.2e} over {pairs} pairs x {inputs} inputs (tol {TOL32:g})")


def _scion_set(teacher, student_spec: ArchSpec, seed: int, calib: torch.Tensor):
    gen = torch.Generator().manual_seed(seed)
    student = build_network(student_spec, seed=seed)
    scions = wrap_student(student, teacher, seed=seed)
    for s in scions:
        _perturb_(s, gen)
    calibrate_(graft_prefix(teacher, scions), calib)
    return scions


def _toy_teacher(seed: int, width: int = 16) -> tuple[nn.Module, torch.Tensor]:
    gen = torch.Generator().manual_seed(seed)
    calib = torch.randn(240, 3, 32, 32, generator=gen)
    teacher = _perturb_(build_network("toy-cnn-4block", width=width, seed=seed), gen)
    return calibrate_(teacher, calib), calib


@_timed
def check_finalize_equivalence(sets: int = 5, inputs: int = 100, seed: int = 0) -> CheckResult:
    """Merged student against the depth-L grafted model; parameter count against the bare student."""
    teacher, calib = _toy_teacher(seed)
    students = [
        ArchSpec("toy-cnn-4block", width=8),
        ArchSpec("toy-resnet-4block", width=8),
        ArchSpec("toy-cnn-4block", width=4),
        ArchSpec("toy-resnet-4block", width=12),
        ArchSpec("toy-cnn-4block", width=24),
    ]
    worst, counts_ok = 0.0, True
    x = torch.randn(inputs, 3, 32, 32, generator=torch.Generator().manual_seed(seed + 1))
    for i in range(sets):
        spec = build_network(students[i % len(students)]).spec
        scions = _scion_set(teacher, spec, seed + 10 + i, calib)
        model = graft_prefix(teacher, scions).eval()
        final = finalize_student(scions, spec).eval()
        with torch.no_grad():
            worst = max(worst, (final(x) - model(x)).abs().max().item())
        counts_ok &= count_params(final) == count_params(build_network(spec))
    ok = worst <= TOL32 and counts_ok
    return CheckResult(2, "finalization equivalence", ok, f"max abs logit error {worst:.2e} over {sets} scion sets; parameter counts {'match' if counts_ok else 'DIFFER'}")


@_timed
def check_identity_transparency(seed: int = 0) -> CheckResult:
    """Identity grafts reproduce the teacher bit for bit."""
    teacher, _ = _toy_teacher(seed)
    L = teacher.num_blocks
    scions = [identity_scion(teacher, l) for l in range(1, L + 1)]
    x = torch.randn(64, 3, 32, 32, generator=torch.Generator().manual_seed(seed + 2))
    failures = []
    with torch.no_grad():
        ref = teacher(x)
        for l in range(1, L + 1):
            if not torch.equal(graft_block(teacher, scions[l - 1]).eval()(x), ref):
                failures.append(f"T{l}^B")
            if not torch.equal(graft_prefix(teacher, scions[:l]).eval()(x), ref):
                failures.append(f"T{l}^N")
        if not torch.equal(finalize_student(scions, teacher.spec).eval()(x), ref):
            failures.append("finalized")
    detail = "bitwise equal for all block grafts, prefixes and the merged student" if not failures else f"differs: {failures}"
    return CheckResult(3, "identity-graft transparency", not failures, detail)


@_timed
def check_loss_properties(seed: int = 0) -> CheckResult:
    """Scale invariance, bound cases and finite-difference gradients of the grafting loss."""
    gen = torch.Generator().manual_seed(seed)
    N = 10
    problems = []
    worst_scale = 0.0
    for _ in range(100):
        zg, zt = torch.randn(8, N, generator=gen, dtype=torch.float64), torch.randn(8, N, generator=gen, dtype=torch.float64)
        a, b = torch.exp(torch.empty(2, dtype=torch.float64).uniform_(-5, 5, generator=gen)).tolist()
        base = graft_loss(zg, zt).item()
        worst_scale = max(worst_scale, abs(graft_loss(a * zg, b * zt).item() - base) / base)
    if worst_scale > 1e-6:
        problems.append(f"scale invariance rel err {worst_scale:.1e}")

    z = torch.randn(4, N, generator=gen, dtype=torch.float64)
    eye = torch.eye(N, dtype=torch.float64)
    cases = {
        "equal": (graft_loss(z, z).item(), 0.0),
        "antipodal": (graft_loss(z, -z).item(), 4.0 / N),
        "orthonormal": (graft_loss(eye[:5], eye[5:]).item(), 2.0 / N),
    }
    for name, (got, want) in cases.items():
        if abs(got - want) > 1e-6:
            problems.append(f"{name}: {got} != {want}")
    for _ in range(50):
        v = graft_loss(torch.randn(6, N, generator=gen), torch.randn(6, N, generator=gen)).item()
        if not 0.0 <= v <= 4.0 / N + 1e-7:
            problems.append(f"out of bounds {v}")
            break

    worst_grad = 0.0
    h = 1e-6
    for _ in range(20):
        zg = torch.randn(3, N, generator=gen, dtype=torch.float64, requires_grad=True)
        zt = torch.randn(3, N, generator=gen, dtype=torch.float64)
        (grad,) = torch.autograd.grad(graft_loss(zg, zt), zg)
        fd = torch.zeros_like(grad)
        with torch.no_grad():
            base = zg.detach().clone()
            for idx in np.ndindex(*base.shape):
                plus, minus = base.clone(), base.clone()
                plus[idx] += h
                minus[idx] -= h
                fd[idx] = (graft_loss(plus, zt) - graft_loss(minus, zt)) / (2 * h)
        worst_grad = max(worst_grad, ((grad - fd).norm() / fd.norm()).item())
    if worst_grad > 1e-3:
        problems.append(f"gradient rel err {worst_grad:.1e}")
    detail = f"scale rel err {worst_scale:.1e}, bound cases exact to 1e-6, gradient rel err {worst_grad:.1e}"
    return CheckResult(4, "loss properties", not problems, detail if not problems else "; ".join(problems))


def _small_fewshot(seed: int, K: int = 2) -> FewShotDataset:
    return sample_kshot(shapes_source(n_train=200, n_test=100, seed=seed), K, seed)


@_timed
def check_freezing(seed: int = 0, epochs: int = 3) -> CheckResult:
    """Teacher untouched by training; scions beyond the current depth untouched at stage 2."""
    teacher, _ = _toy_teacher(seed)
    data = _small_fewshot(seed)
    scions = wrap_student(build_network("toy-cnn-4block", width=8, seed=seed), teacher, seed=seed)
    t0 = snapshot(teacher)
    cfg1 = StageConfig("block_graft", epochs, 1e-3, seed=seed)
    before1 = [snapshot(s) for s in scions]
    train_stage1(teacher, scions, data, cfg1, units=[2])
    after1 = [snapshot(s) for s in scions]
    problems = []
    if not all(torch.equal(t0[k], v) for k, v in snapshot(teacher).items()):
        problems.append("teacher changed in stage 1")
    if any(not _same(before1[i], after1[i]) for i in (0, 2, 3)):
        problems.append("stage 1 touched a scion other than the trained one")
    if _same(before1[1], after1[1]):
        problems.append("stage-1 scion did not train")
    cfg2 = StageConfig("net_graft", epochs, 1e-4, seed=seed)
    train_stage2(teacher, scions, data, cfg2, depths=[2])
    after2 = [snapshot(s) for s in scions]
    if not _same(t0, snapshot(teacher)):
        problems.append("teacher changed in stage 2")
    if any(not _same(after1[i], after2[i]) for i in (2, 3)):
        problems.append("stage 2 depth 2 touched scions 3..4")
    if any(_same(after1[i], after2[i]) for i in (0, 1)):
        problems.append("stage-2 prefix did not train")
    detail = "teacher and out-of-scope scions bit-identical after a stage-1 unit and stage-2 depth 2"
    return CheckResult(5, "freezing and masking", not problems, detail if not problems else "; ".join(problems))


def _same(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


@_timed
def check_hyperparameters() -> CheckResult:
    """Batch-size and learning-rate scaling rules against their stated values."""
    got = {
        "batch_size_for": [batch_size_for(k) for k in (1, 5, 10)],
        "scale_lr(2.5e-4, 64)": scale_lr(2.5e-4, 64),
        "scale_lr(1e-4, 32)": scale_lr(1e-4, 32),
    }
    want = {"batch_size_for": [6, 32, 64], "scale_lr(2.5e-4, 64)": 2.5e-4, "scale_lr(1e-4, 32)": 5e-5}
    bad = {k: v for k, v in got.items() if v != want[k]}
    return CheckResult(6, "hyperparameter rules", not bad, "exact" if not bad else f"mismatch {bad}")


@_timed
def check_sampler(seed: int = 0) -> CheckResult:
    """K per class, seed determinism, sampling without replacement, no labels exposed."""
    source = shapes_source(n_train=500, n_test=100, seed=seed)
    problems = []
    for K in (1, 5, 10):
        a, b = sample_kshot(source, K, seed), sample_kshot(source, K, seed)
        counts = np.bincount(source.labels[list(a.source_indices)], minlength=source.num_classes)
        if not (counts == K).all() or len(a) != K * source.num_classes:
            problems.append(f"K={K}: per-class counts {counts.tolist()}")
        if len(set(a.source_indices)) != len(a.source_indices):
            problems.append(f"K={K}: duplicate draws")
        if not (np.array_equal(a.samples, b.samples) and a.source_indices == b.source_indices):
            problems.append(f"K={K}: not deterministic")
        if sample_kshot(source, K, seed + 1).source_indices == a.source_indices:
            problems.append(f"K={K}: seed has no effect")
    fields = {f.name for f in dataclasses.fields(FewShotDataset)}
    exposed = [f for f in fields | set(dir(a)) if "label" in f.lower() or f in ("y", "targets")]
    if exposed:
        problems.append(f"label-like attributes {exposed}")
    if a.samples.dtype != np.uint8 or a.samples.ndim != 4:
        problems.append("samples are not raw images")
    detail = "exactly K per class, deterministic, without replacement, images only"
    return CheckResult(7, "sampler contract", not problems, detail if not problems else "; ".join(problems))


CHECKS: list[Callable[[], CheckResult]] = [
    check_fold_exactness,
    check_finalize_equivalence,
    check_identity_transparency,
    check_loss_properties,
    check_freezing,
    check_hyperparameters,
    check_sampler,
]


def run_checks(only: list[int] | None = None) -> list[CheckResult]:
    torch.manual_seed(0)
    out = []
    for i, fn in enumerate(CHECKS, start=1):
        if only and i not in only:
            continue
        try:
            out.append(fn())
        except Exception as exc:  # a crashing check is a failed check
            out.append(CheckResult(i, fn.__name__.removeprefix("check_").replace("_", " "), False, f"{type(exc).__name__}: {exc}"))
    return out
