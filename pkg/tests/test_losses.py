import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from graftkd.distill_train import (
    DegenerateLogitsError,
    StageConfig,
    evaluate,
    graft_loss,
    kd_baseline_loss,
    normalize_logits,
    scale_lr,
)
from graftkd.fewshot_data import batch_size_for


def test_normalize_examples():
    torch.testing.assert_close(normalize_logits(torch.tensor([3.0, 4.0])), torch.tensor([0.6, 0.8]))
    u = normalize_logits(torch.randn(7))
    torch.testing.assert_close(normalize_logits(u), u)
    z = torch.randn(5, 10)
    torch.testing.assert_close(normalize_logits(3.7 * z), normalize_logits(z))


def test_normalize_degenerate():
    with pytest.raises(DegenerateLogitsError):
        normalize_logits(torch.zeros(2, 4))


def test_graft_loss_construction_cases():
    N = 10
    z = torch.randn(8, N, dtype=torch.float64)
    assert graft_loss(z, z).item() == 0.0
    assert graft_loss(z, -z).item() == pytest.approx(4 / N, abs=1e-12)
    q, _ = torch.linalg.qr(torch.randn(N, N, dtype=torch.float64))
    a, b = q[:, :4].T, q[:, 4:8].T  # rows orthonormal across a and b
    assert graft_loss(a, b).item() == pytest.approx(2 / N, abs=1e-12)


def test_graft_loss_errors():
    with pytest.raises(ValueError):
        graft_loss(torch.randn(2, 5), torch.randn(2, 6))
    with pytest.raises(DegenerateLogitsError):
        graft_loss(torch.zeros(2, 5), torch.randn(2, 5))


finite = st.floats(-10, 10, allow_nan=False).filter(lambda v: abs(v) > 1e-3)


@settings(max_examples=50, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    alpha=st.floats(1e-3, 1e3),
    beta=st.floats(1e-3, 1e3),
    n=st.integers(2, 20),
)
def test_graft_loss_invariances(seed, alpha, beta, n):
    gen = torch.Generator().manual_seed(seed)
    a = torch.randn(6, n, generator=gen, dtype=torch.float64)
    b = torch.randn(6, n, generator=gen, dtype=torch.float64)
    base = graft_loss(a, b).item()
    assert graft_loss(alpha * a, beta * b).item() == pytest.approx(base, rel=1e-9, abs=1e-15)
    assert graft_loss(b, a).item() == pytest.approx(base, rel=1e-12)
    assert 0.0 <= base <= 4 / n + 1e-12
    assert graft_loss(a, 2.5 * a).item() == pytest.approx(0.0, abs=1e-15)


def test_graft_loss_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(0)
    for _ in range(20):
        zg = torch.randn(3, 10, generator=gen, dtype=torch.float64, requires_grad=True)
        zt = torch.randn(3, 10, generator=gen, dtype=torch.float64)
        (g,) = torch.autograd.grad(graft_loss(zg, zt), zg)
        h = 1e-6
        fd = torch.zeros_like(g)
        with torch.no_grad():
            for idx in range(zg.numel()):
                e = torch.zeros(zg.numel(), dtype=torch.float64)
                e[idx] = h
                e = e.view_as(zg)
                fd.view(-1)[idx] = (graft_loss(zg + e, zt) - graft_loss(zg - e, zt)) / (2 * h)
        assert ((g - fd).norm() / fd.norm()).item() <= 1e-3


def _softmax(z, T):
    m = max(v / T for v in z)
    e = [math.exp(v / T - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def test_kd_loss_closed_form():
    zs = [0.3, -1.2, 2.0, 0.7]
    zt = [1.1, 0.4, -0.5, 0.0]
    for T in (1.0, 4.0, 20.0):
        ps, pt = _softmax(zs, T), _softmax(zt, T)
        expected = -T * T * sum(p * math.log(q) for p, q in zip(pt, ps))
        got = kd_baseline_loss(torch.tensor([zs], dtype=torch.float64), torch.tensor([zt], dtype=torch.float64), T)
        assert got.item() == pytest.approx(expected, rel=1e-12)
    # softened distributions tend to uniform: loss / T^2 -> log N
    T = 1e4
    got = kd_baseline_loss(torch.tensor([zs], dtype=torch.float64), torch.tensor([zt], dtype=torch.float64), T)
    assert got.item() / T**2 == pytest.approx(math.log(4), rel=1e-6)


def test_kd_loss_minimized_at_teacher():
    gen = torch.Generator().manual_seed(1)
    zt = torch.randn(1, 10, generator=gen, dtype=torch.float64)
    at_eq = kd_baseline_loss(zt.clone(), zt, 3.0).item()
    pt = torch.softmax(zt / 3.0, -1)
    assert at_eq == pytest.approx(-9.0 * (pt * pt.log()).sum().item(), rel=1e-12)
    for _ in range(20):
        zs = zt + 0.5 * torch.randn(1, 10, generator=gen, dtype=torch.float64)
        assert kd_baseline_loss(zs, zt, 3.0).item() >= at_eq


def test_kd_loss_uniform_has_zero_gradient():
    zs = torch.full((2, 10), 0.7, requires_grad=True)
    kd_baseline_loss(zs, torch.zeros(2, 10), 4.0).backward()
    assert torch.allclose(zs.grad, torch.zeros_like(zs.grad), atol=1e-7)


def test_kd_loss_rejects_bad_temperature():
    with pytest.raises(ValueError):
        kd_baseline_loss(torch.randn(1, 3), torch.randn(1, 3), 0.0)


def test_hyperparameter_rules():
    assert [batch_size_for(k) for k in (1, 5, 10)] == [6, 32, 64]
    assert scale_lr(2.5e-4, 64) == 2.5e-4
    assert scale_lr(1e-4, 32) == 5e-5
    assert scale_lr(1e-3, 6) == pytest.approx(9.375e-5, rel=1e-15)


def test_stage_config_pins_optimizer():
    with pytest.raises(ValueError):
        StageConfig(weight_decay=1e-4)
    with pytest.raises(ValueError):
        StageConfig(betas=(0.5, 0.999))
    cfg = StageConfig(lr_per_unit={"2": "1e-3"})
    assert cfg.lr_for(2) == 1e-3 and cfg.lr_for(1) == cfg.base_lr


class Fixed(torch.nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.logits = logits

    def forward(self, x):
        return self.logits[x.long().view(-1)]


def test_evaluate_oracle_and_chance():
    y = torch.arange(10).repeat(20)
    x = torch.arange(200).float()
    onehot = torch.nn.functional.one_hot(y, 10).float()
    assert evaluate(Fixed(onehot), (x, y)) == {"top1": 1.0, "top5": 1.0}
    const = evaluate(Fixed(torch.ones(200, 10)), (x, y))
    assert const["top1"] == pytest.approx(0.1)  # ties -> class 0
    assert const["top5"] == pytest.approx(0.5)  # ties -> classes 0..4


def test_evaluate_top5_contains_top1():
    gen = torch.Generator().manual_seed(0)
    y = torch.randint(0, 10, (300,), generator=gen)
    res = evaluate(Fixed(torch.randn(300, 10, generator=gen)), (torch.arange(300).float(), y))
    assert res["top5"] >= res["top1"]


def test_evaluate_empty():
    with pytest.raises(ValueError):
        evaluate(Fixed(torch.ones(1, 3)), (torch.zeros(0), torch.zeros(0, dtype=torch.long)))
