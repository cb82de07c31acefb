"""Straight-line flow matching between bicubic-upsampled LR and HR, in rearranged space."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from caflow.imaging import bicubic_resize, pixel_shuffle, pixel_unshuffle
from caflow.numerics import ContractError, ShapeError


@dataclass
class FlowPair:
    x0: torch.Tensor
    x1: torch.Tensor
    scale: int

    @property
    def v(self) -> torch.Tensor:
        return self.x1 - self.x0


@dataclass
class TimedState:
    t: torch.Tensor
    x_t: torch.Tensor


def _batched(img: torch.Tensor) -> torch.Tensor:
    return img.unsqueeze(0) if img.dim() == 3 else img


def rearranged_start(lr: torch.Tensor, s: int) -> torch.Tensor:
    """``unshuffle(bicubic_up(lr))`` for a (3, h, w) or (N, 3, h, w) LR input."""
    lr = _batched(lr)
    h, w = lr.shape[-2:]
    return pixel_unshuffle(bicubic_resize(lr, s * h, s * w), s)


def make_pair(lr: torch.Tensor, hr: torch.Tensor, s: int) -> FlowPair:
    if s < 2:
        raise ContractError("scale factor must be >= 2")
    lr, hr = _batched(lr), _batched(hr)
    if hr.shape[-2:] != (s * lr.shape[-2], s * lr.shape[-1]):
        raise ShapeError(f"HR {tuple(hr.shape[-2:])} is not {s}x LR {tuple(lr.shape[-2:])}")
    return FlowPair(rearranged_start(lr, s), pixel_unshuffle(hr, s), s)


def _as_time(t, n: int, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=like.dtype).reshape(-1)
    if t.numel() == 1:
        t = t.expand(n)
    if t.numel() != n:
        raise ShapeError(f"{t.numel()} timesteps for batch of {n}")
    if torch.any((t < 0) | (t > 1)):
        raise ContractError("t must lie in [0, 1]")
    return t


def interpolate(pair: FlowPair, t) -> tuple[TimedState, torch.Tensor]:
    """``x_t = (1 - t) x0 + t x1`` and the target velocity ``x1 - x0``."""
    tt = _as_time(t, pair.x0.shape[0], pair.x0)
    tb = tt.view(-1, 1, 1, 1)
    return TimedState(tt, (1 - tb) * pair.x0 + tb * pair.x1), pair.v


def reconstruct_x1(x_t: torch.Tensor, t, v_pred: torch.Tensor) -> torch.Tensor:
    if x_t.shape != v_pred.shape:
        raise ShapeError(f"x_t {tuple(x_t.shape)} vs v {tuple(v_pred.shape)}")
    tb = _as_time(t, x_t.shape[0], x_t).view(-1, 1, 1, 1)
    return x_t + (1 - tb) * v_pred


def pad_lr(lr: torch.Tensor, multiple: int) -> tuple[torch.Tensor, tuple[int, int]]:
    """Reflect-pad (bottom/right) so both spatial sides are multiples of ``multiple``."""
    lr = _batched(lr)
    h, w = lr.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        lr = F.pad(lr, (0, pw, 0, ph), mode=mode)
    return lr, (h, w)


def prepare_start(model, lr: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int]]:
    cfg = model.config
    dtype = next(model.parameters()).dtype
    lr = _batched(lr.to(dtype))
    if lr.shape[0] != 1:
        raise ContractError("inference handles one image at a time")
    # upsample before padding so the valid region is exactly bicubic of the unpadded input
    x0, size = pad_lr(rearranged_start(lr, cfg.scale), cfg.window)
    return x0, size


def finish_output(model, x1_hat: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    s = model.config.scale
    hr = pixel_shuffle(x1_hat, s)[0, :, : s * size[0], : s * size[1]]
    return hr.clamp(0, 1)


def _velocity(model, x: torch.Tensor, x0: torch.Tensor, t: float, exit):
    if exit == "auto":
        bundle = model(x, x0, t, route=True)
    else:
        bundle = model(x, x0, t, until_exit=int(exit))
    return bundle.final, bundle


@torch.no_grad()
def single_step_infer(model, lr: torch.Tensor, exit="auto", return_bundle: bool = False):
    """``shuffle(x0 + v(x0, x0, 0))`` clamped to [0, 1]; ``exit`` is 0..3 or ``"auto"``."""
    x0, size = prepare_start(model, lr)
    v, bundle = _velocity(model, x0, x0, 0.0, exit)
    out = finish_output(model, x0 + v, size)
    return (out, bundle) if return_bundle else out


@torch.no_grad()
def euler_infer(model, lr: torch.Tensor, n_steps: int, exit="auto") -> torch.Tensor:
    """Uniform-step Euler integration from t=0 to 1; with ``"auto"`` the exit is routed once, at t=0."""
    if n_steps < 1:
        raise ContractError("n_steps must be >= 1")
    x0, size = prepare_start(model, lr)
    x, dt = x0, 1.0 / n_steps
    for k in range(n_steps):
        v, bundle = _velocity(model, x, x0, k * dt, exit)
        if exit == "auto":
            exit = bundle.chosen_exit
        x = x + dt * v
    return finish_output(model, x, size)
