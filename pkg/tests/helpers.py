import torch
from torch import nn


def randomize_(module: nn.Module, seed: int, scale: float = 0.3) -> nn.Module:
    """Perturb all parameters and normalization statistics, as training would."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen))
        for m in module.modules():
            if isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
                m.running_mean.copy_(0.2 * torch.randn(m.running_mean.shape, generator=gen))
                m.running_var.copy_(0.5 + torch.rand(m.running_var.shape, generator=gen))
    return module


@torch.no_grad()
def calibrate_(model: nn.Module, x: torch.Tensor, steps: int = 3) -> nn.Module:
    """Set norm statistics of the train-mode parts of ``model`` from batches of ``x``."""
    model.train()
    norms = [m for m in model.modules() if isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)) and m.training]
    saved = [m.momentum for m in norms]
    for m in norms:
        m.momentum = None
        m.reset_running_stats()
    for i in range(steps):
        model(x[i::steps])
    for m, mom in zip(norms, saved):
        m.momentum = mom
    return model.eval()


def tiny_config(root, teacher_dir=None, **sections):
    """Write and load a seconds-scale experiment config under ``root``.

    ``sections`` maps section names to ``{key: value}`` overrides.
    """
    from conftest import TINY_LOCATOR

    from graftkd.config import load_config

    base = {
        "experiment": {"out_dir": str(root / "run"), "k": 2},
        "data": {"locator": TINY_LOCATOR},
        "teacher": {
            "arch": "toy-cnn-4block",
            "width": 8,
            "checkpoint": str(teacher_dir or root / "teacher"),
            "epochs": 4,
            "lr": 3e-3,
            "batch_size": 50,
        },
        "student": {"arch": "toy-cnn-4block", "width": 4},
        "stage1": {"epochs_per_unit": 2, "lr": 1e-2},
        "stage2": {"epochs_per_unit": 2, "lr": 1e-3},
    }
    for name, values in sections.items():
        base.setdefault(name, {}).update(values)
    lines = []
    for name, values in base.items():
        lines.append(f"[{name}]")
        lines += [f"{k} = {v}" for k, v in values.items()]
        lines.append("")
    path = root / "tiny.ini"
    path.write_text("\n".join(lines))
    return load_config(path)
