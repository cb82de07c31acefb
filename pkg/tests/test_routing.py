import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from caflow.backbone import FlowResNet
from caflow.flow import prepare_start, single_step_infer
from caflow.numerics import ContractError
from caflow.routing import (
    adaptive_infer,
    oracle_label,
    oracle_labels,
    per_exit_losses,
    predicted_exit,
    router_loss,
    router_step,
    within_one_rate,
)
from conftest import MINI, perturb

losses_st = st.lists(st.floats(0, 1, allow_nan=False), min_size=4, max_size=4)


def _force_router(model, exit: int):
    with torch.no_grad():
        model.classifier.layers[-1].weight.zero_()
        bias = torch.zeros(4)
        bias[exit] = 10.0
        model.classifier.layers[-1].bias.copy_(bias)


def test_oracle_examples():
    assert oracle_label([0.100, 0.085, 0.080, 0.079], 0.02) == 1
    assert oracle_label([0.3] * 4) == 0
    assert oracle_label([0.4, 0.3, 0.2, 0.1], 0.0) == 3
    with pytest.raises(ContractError):
        oracle_label([0.1] * 4, -0.1)


@settings(max_examples=200, deadline=None)
@given(losses=losses_st, e1=st.floats(0, 0.5), e2=st.floats(0, 0.5))
def test_oracle_monotone_in_eps(losses, e1, e2):
    lo, hi = sorted((e1, e2))
    assert oracle_label(losses, lo) >= oracle_label(losses, hi)


@settings(max_examples=200, deadline=None)
@given(losses=losses_st)
def test_oracle_zero_eps_is_earliest_argmin(losses):
    assert oracle_label(losses, 0.0) == losses.index(min(losses))


@settings(max_examples=100, deadline=None)
@given(shift=st.floats(-50, 50), scale=st.floats(0.01, 100), seed=st.integers(0, 999))
def test_argmax_invariances(shift, scale, seed):
    logits = torch.randn(5, 4, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    assert torch.equal(predicted_exit(logits), predicted_exit(logits * scale + shift))


def test_argmax_ties_go_low():
    assert predicted_exit(torch.tensor([[1.0, 1.0, 0.0, 1.0]])).item() == 0


def test_per_exit_losses():
    from caflow.backbone import ExitBundle

    g = torch.Generator().manual_seed(0)
    x0, x1 = torch.rand(2, 12, 4, 4, generator=g), torch.rand(2, 12, 4, 4, generator=g)
    t = torch.tensor([0.0, 0.3])
    x_t = (1 - t.view(-1, 1, 1, 1)) * x0 + t.view(-1, 1, 1, 1) * x1
    exact = ExitBundle([x1 - x0] * 4, torch.zeros(2, 4), x0)
    assert per_exit_losses(exact, x_t, t, x1).abs().max() < 1e-6
    zero = ExitBundle([torch.zeros_like(x0)] * 4, torch.zeros(2, 4), x0)
    got = per_exit_losses(zero, x0, 0.0, x1)
    assert torch.allclose(got, (x0 - x1).abs().mean(dim=(1, 2, 3)).unsqueeze(1).expand(2, 4))
    vs = [torch.randn(2, 12, 4, 4, generator=g) for _ in range(4)]
    got = per_exit_losses(ExitBundle(vs, torch.zeros(2, 4), x0), x_t, t, x1)
    for e, v in enumerate(vs):
        for i in range(2):
            ref = sum(abs(float(x_t[i].flatten()[k] + (1 - t[i]) * v[i].flatten()[k] - x1[i].flatten()[k]))
                      for k in range(x1[i].numel())) / x1[i].numel()
            assert abs(got[i, e].item() - ref) < 1e-6
    with pytest.raises(ContractError):
        per_exit_losses(ExitBundle(vs[:2], torch.zeros(2, 4), x0), x_t, t, x1)
    assert oracle_labels(torch.tensor([[0.1, 0.09, 0.2, 0.3], [0.5, 0.4, 0.3, 0.2]])).tolist() == [0, 3]


def test_router_loss_values():
    labels = torch.tensor([2, 0])
    assert abs(router_loss(torch.zeros(2, 4), labels).item() - math.log(4)) < 1e-6
    confident = torch.nn.functional.one_hot(labels, 4).float() * 100
    assert router_loss(confident, labels).item() < 1e-6


def test_router_gradient_isolation(mini_model):
    x = torch.rand(3, 12, 8, 8, dtype=torch.float64)
    bundle = mini_model(x, x, torch.tensor([0.0, 0.05, 0.1], dtype=torch.float64))
    opt = torch.optim.AdamW(mini_model.classifier.parameters(), lr=1e-3)
    before = {n: p.detach().clone() for n, p in mini_model.named_parameters()}
    router_step(bundle.logits, torch.tensor([0, 1, 3]), opt)
    for name, p in mini_model.named_parameters():
        if name.startswith("classifier."):
            assert p.grad is not None and p.grad.abs().sum() > 0
        else:
            assert p.grad is None or torch.count_nonzero(p.grad) == 0, name
            assert torch.equal(p, before[name]), name


def test_forced_router_equals_full_depth():
    torch.manual_seed(0)
    model = perturb(FlowResNet(MINI).double(), scale=0.1)
    _force_router(model, 3)
    lr = torch.rand(3, 8, 8, dtype=torch.float64)
    out, decision = adaptive_infer(model, lr)
    assert decision.exit == 3
    assert torch.equal(out, single_step_infer(model, lr, exit=3))
    for e in range(4):
        forced, d = adaptive_infer(model, lr, exit=e)
        assert d.exit == e and torch.equal(forced, single_step_infer(model, lr, exit=e))


def test_exit0_skips_deep_blocks(fresh_model):
    _force_router(fresh_model, 0)
    calls = []
    hooks = [b.register_forward_hook(lambda m, i, o, k=k: calls.append(k)) for k, b in enumerate(fresh_model.blocks)]
    _, decision = adaptive_infer(fresh_model, torch.rand(3, 8, 8))
    for h in hooks:
        h.remove()
    assert decision.exit == 0
    assert calls == [0, 1, 2, 3]


def test_within_one_rate():
    assert within_one_rate([0, 1, 3, 3], [0, 3, 2, 0]) == 0.5
    with pytest.raises(ContractError):
        within_one_rate([], [])


def test_prepare_start_rejects_batches(fresh_model):
    with pytest.raises(ContractError):
        prepare_start(fresh_model, torch.rand(2, 3, 8, 8))
