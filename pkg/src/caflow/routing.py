"""Oracle exit labels, router loss, and routed inference."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from caflow.backbone import N_EXITS, ExitBundle
from caflow.flow import reconstruct_x1, single_step_infer
from caflow.numerics import ContractError

ORACLE_EPS = 0.02
ROUTER_T_MAX = 0.15


@dataclass
class RoutingDecision:
    exit: int
    logits: list[float]
    oracle: int | None = None
    losses: list[float] | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def per_exit_losses(bundle: ExitBundle, x_t: torch.Tensor, t, x1: torch.Tensor) -> torch.Tensor:
    """(N, 4) per-sample mean |x1_hat^(e) - x1| in rearranged space."""
    if len(bundle.velocities) != N_EXITS:
        raise ContractError(f"need all {N_EXITS} exits, got {len(bundle.velocities)}")
    cols = [(reconstruct_x1(x_t, t, v) - x1).abs().mean(dim=(1, 2, 3)) for v in bundle.velocities]
    return torch.stack(cols, dim=1)


def oracle_label(losses, eps: float = ORACLE_EPS) -> int:
    """Earliest exit whose loss is within ``eps`` of the best."""
    losses = [float(x) for x in losses]
    if eps < 0:
        raise ContractError("eps must be non-negative")
    bound = min(losses) + eps
    return next(e for e, loss in enumerate(losses) if loss <= bound)


def oracle_labels(losses: torch.Tensor, eps: float = ORACLE_EPS) -> torch.Tensor:
    return torch.tensor([oracle_label(row, eps) for row in losses.tolist()], dtype=torch.long)


def predicted_exit(logits: torch.Tensor) -> torch.Tensor:
    """Argmax per row; ties resolve to the lowest exit index."""
    return torch.argmax(logits, dim=-1)


def router_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels)


def router_step(logits: torch.Tensor, labels: torch.Tensor, optimizer: torch.optim.Optimizer) -> float:
    """One cross-entropy update of the classifier.

    ``logits`` must come from detached exit-0 features, so only classifier
    parameters (the ones ``optimizer`` holds) receive gradient.
    """
    loss = router_loss(logits, labels)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.item())


def within_one_rate(predicted, oracle) -> float:
    pairs = list(zip(predicted, oracle))
    if not pairs:
        raise ContractError("no routing decisions")
    return sum(abs(int(p) - int(o)) <= 1 for p, o in pairs) / len(pairs)


def adaptive_infer(model, lr: torch.Tensor, exit="auto") -> tuple[torch.Tensor, RoutingDecision]:
    """Routed single-step SR of one LR image; ``exit`` may force a depth."""
    out, bundle = single_step_infer(model, lr, exit=exit, return_bundle=True)
    chosen = bundle.chosen_exit if exit == "auto" else int(exit)
    return out, RoutingDecision(chosen, [float(x) for x in bundle.logits[0]])
