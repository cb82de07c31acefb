"""Dense-array primitives and the differentiability contract.

Every tensor is a ``torch.Tensor``; images and feature maps use NCHW layout.
The operations here are thin, shape-checked wrappers so that the rest of the
package composes a small, auditable vocabulary. Gradients come from torch's
reverse-mode autograd and are validated against central finite differences
with :func:`finite_difference_check`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

LAYERNORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


class ContractError(ValueError):
    """Raised when a caller violates an operation's precondition."""


def conv3x3(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1 ("same" output size)."""
    if x.dim() != 4:
        raise ShapeError(f"conv3x3 expects NCHW input, got shape {tuple(x.shape)}")
    if weight.shape[-2:] != (3, 3) or weight.dim() != 4:
        raise ShapeError(f"conv3x3 expects (Cout, Cin, 3, 3) weight, got {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, weight expects {weight.shape[1]}")
    return F.conv2d(x, weight, bias, padding=1)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight Din {weight.shape[1]}")
    return F.linear(x, weight, bias)


def layernorm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = LAYERNORM_EPS) -> torch.Tensor:
    """Normalize over the last dimension."""
    if eps <= 0:
        raise ContractError("layernorm eps must be positive")
    if x.shape[-1] != gamma.shape[0]:
        raise ShapeError(f"layernorm: last dim {x.shape[-1]} != gamma size {gamma.shape[0]}")
    return F.layer_norm(x, (x.shape[-1],), gamma, beta, eps)


def layernorm_channels(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = LAYERNORM_EPS) -> torch.Tensor:
    """LayerNorm over C of an NCHW map, independently at every spatial location."""
    return layernorm(x.permute(0, 2, 3, 1), gamma, beta, eps).permute(0, 3, 1, 2)


def relu(x: torch.Tensor) -> torch.Tensor:
    return F.relu(x)


def silu(x: torch.Tensor) -> torch.Tensor:
    return F.silu(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def softmax(x: torch.Tensor) -> torch.Tensor:
    return torch.softmax(x, dim=-1)


@dataclass
class ParamSet:
    """Named tensors, each tagged trainable or frozen.

    Shapes are fixed at creation; :meth:`assign` refuses a reshaping write.
    """

    tensors: dict[str, torch.Tensor] = field(default_factory=dict)
    trainable: dict[str, bool] = field(default_factory=dict)

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParamSet":
        ps = cls()
        for name, p in module.named_parameters():
            ps.tensors[name] = p
            ps.trainable[name] = p.requires_grad
        return ps

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def add(self, name: str, value: torch.Tensor, trainable: bool = True) -> None:
        if name in self.tensors:
            raise ContractError(f"duplicate parameter name {name!r}")
        self.tensors[name] = value
        self.trainable[name] = trainable

    def assign(self, name: str, value: torch.Tensor) -> None:
        current = self.tensors[name]
        if tuple(value.shape) != tuple(current.shape):
            raise ShapeError(f"{name}: cannot change shape {tuple(current.shape)} -> {tuple(value.shape)}")
        with torch.no_grad():
            current.copy_(value)

    def trainable_names(self) -> list[str]:
        return [n for n, flag in self.trainable.items() if flag]

    def count(self, trainable_only: bool = True) -> int:
        return sum(t.numel() for n, t in self.tensors.items() if self.trainable[n] or not trainable_only)


def grad(loss_fn: Callable[[], torch.Tensor], params: ParamSet | nn.Module) -> dict[str, torch.Tensor]:
    """Gradients of the scalar ``loss_fn()`` w.r.t. every trainable parameter.

    Parameters the loss does not depend on get explicit zero tensors.
    """
    if isinstance(params, nn.Module):
        params = ParamSet.from_module(params)
    names = params.trainable_names()
    loss = loss_fn()
    if loss.dim() != 0 and loss.numel() != 1:
        raise ContractError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    return {n: (torch.zeros_like(t) if g is None else g) for n, t, g in zip(names, tensors, grads)}


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_coords: int
    worst: tuple[str, int] | None

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error <= tol


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    params: ParamSet | nn.Module,
    n_coords: int = 50,
    h: float = 1e-4,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckResult:
    """Compare autograd against central differences on random coordinates.

    Relative error per coordinate is ``|g - fd| / max(|g|, |fd|, floor)``.
    Coordinates are drawn uniformly over all trainable scalars. Run in double
    precision; single precision cannot resolve ``h = 1e-4`` differences.
    """
    if isinstance(params, nn.Module):
        params = ParamSet.from_module(params)
    analytic = grad(loss_fn, params)
    names = params.trainable_names()
    sizes = np.array([params[n].numel() for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    picks = rng.choice(offsets[-1], size=min(n_coords, int(offsets[-1])), replace=False)

    worst_err, worst = 0.0, None
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, idx = names[k], int(flat - offsets[k])
            view = params[name].view(-1)
            orig = view[idx].item()
            view[idx] = orig + h
            plus = loss_fn().item()
            view[idx] = orig - h
            minus = loss_fn().item()
            view[idx] = orig
            fd = (plus - minus) / (2 * h)
            g = analytic[name].reshape(-1)[idx].item()
            err = abs(g - fd) / max(abs(g), abs(fd), floor)
            if err > worst_err:
                worst_err, worst = err, (name, idx)
    return GradCheckResult(worst_err, len(picks), worst)
