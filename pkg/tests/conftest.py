import pytest
import torch

from caflow.backbone import BackboneConfig, FlowResNet

# two blocks (plain + hybrid), every exit present, small enough for finite differences
MINI = BackboneConfig(scale=2, features=16, n_blocks=2, hybrid_blocks=(1,), exit_after=(0, 0, 1, 1),
                      time_dim=16, window=4, heads=2, router_hidden=(8, 8))


def perturb(model: torch.nn.Module, scale: float = 0.05, seed: int = 0) -> torch.nn.Module:
    """Add noise to every parameter so zero-initialized paths carry gradient."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return model


@pytest.fixture
def fresh_model():
    torch.manual_seed(0)
    return FlowResNet().eval()


@pytest.fixture
def mini_model():
    torch.manual_seed(0)
    return perturb(FlowResNet(MINI).double(), scale=0.2)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
