"""Losses, optimizer schedule, weight EMA and the two-phase training loop."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from caflow import checkpoint
from caflow.backbone import N_EXITS, BackboneConfig, ExitBundle, FlowResNet
from caflow.data import degrade, random_crop
from caflow.flow import FlowPair, interpolate, make_pair, reconstruct_x1
from caflow.imaging import pixel_shuffle, ssim_batch
from caflow.numerics import ContractError
from caflow.routing import ROUTER_T_MAX, oracle_labels, per_exit_losses, router_step
from caflow.sampling import LOSS_AWARE, WARMUP, SamplerState, sample_continuous, sample_t, update_bins

SSIM_WEIGHT = 0.1
CONSIST_WEIGHT = 0.1


@dataclass
class TrainConfig:
    epochs: int = 700
    warmup_epochs: int = 5
    batch: int = 32
    crop: int = 256
    crops_per_image: int = 1
    lr: float = 2e-4
    router_lr: float = 2e-4
    weight_decay: float = 1e-4
    ema_decay: float = 0.9999
    bin_decay: float = 0.9
    scale: int = 4
    t0_mixing: bool = True
    consistency: bool = True
    ssim_loss: bool = True
    early_exits: bool = True
    n_blocks: int = 16
    color_jitter: bool = False
    checkpoint_every: int = 50
    seed: int = 0

    def validate(self) -> None:
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ContractError("warmup_epochs must be smaller than epochs")
        if self.batch < 1 or self.crop < 1 or self.crops_per_image < 1:
            raise ContractError("batch, crop and crops_per_image must be positive")
        if self.crop % (self.scale * 8):
            raise ContractError(f"crop must be a multiple of scale*window = {self.scale * 8}")
        if self.n_blocks not in (8, 16):
            raise ContractError("n_blocks must be 8 or 16")

    def backbone(self) -> BackboneConfig:
        return BackboneConfig.for_blocks(self.n_blocks, self.scale)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: {"int": int, "float": float, "bool": bool}[f.type] for f in fields(cls)}


@dataclass
class LossReport:
    vel: list[float]
    x0: list[float]
    multi: float
    ssim: float
    consist: float
    total: float
    router: float | None = None
    bin_losses: list[float] = field(default_factory=list)
    skipped: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def multi_exit_loss(bundle: ExitBundle, x_t: torch.Tensor, t, x1: torch.Tensor, v_target: torch.Tensor,
                    early_exits: bool = True):
    """Equal-weight mean over exits of velocity L1 plus reconstruction L1.

    Returns ``(L_multi, vel_losses, x0_losses)``; the lists hold every
    materialized exit even when only the final one contributes.
    """
    vel = [(v - v_target).abs().mean() for v in bundle.velocities]
    rec = [(reconstruct_x1(x_t, t, v) - x1).abs().mean() for v in bundle.velocities]
    used = range(len(vel)) if early_exits else [len(vel) - 1]
    multi = sum(vel[e] + rec[e] for e in used) / len(used)
    return multi, vel, rec


def ssim_loss(x1_hat: torch.Tensor, x1: torch.Tensor, scale: int) -> torch.Tensor:
    """``1 - SSIM`` of the pixel-shuffled reconstruction, averaged over the batch."""
    return 1 - ssim_batch(pixel_shuffle(x1_hat, scale), pixel_shuffle(x1, scale)).mean()


def consistency_loss(model: FlowResNet, pair: FlowPair, t1, t2, x1_hat_t1: torch.Tensor | None = None) -> torch.Tensor:
    """Final-exit ``mean |x1_hat(t2) - sg(x1_hat(t1))|``; gradient flows only through t2."""
    if x1_hat_t1 is None:
        with torch.no_grad():
            s1, _ = interpolate(pair, t1)
            x1_hat_t1 = reconstruct_x1(s1.x_t, s1.t, model(s1.x_t, pair.x0, s1.t).final)
    s2, _ = interpolate(pair, t2)
    x1_hat_t2 = reconstruct_x1(s2.x_t, s2.t, model(s2.x_t, pair.x0, s2.t).final)
    return (x1_hat_t2 - x1_hat_t1.detach()).abs().mean()


def cosine_lr(step: int, total: int, lr0: float) -> float:
    return lr0 * 0.5 * (1 + math.cos(math.pi * min(step, total) / total))


def make_optimizer(params, lr: float, weight_decay: float) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=weight_decay)


def optimizer_step(optimizer: torch.optim.Optimizer, step: int, total: int, lr0: float) -> bool:
    """Apply one scheduled step; returns False (and skips) when any gradient is non-finite."""
    grads = [p.grad for g in optimizer.param_groups for p in g["params"] if p.grad is not None]
    if any(not torch.isfinite(g).all() for g in grads):
        optimizer.zero_grad(set_to_none=True)
        return False
    for group in optimizer.param_groups:
        group["lr"] = cosine_lr(step, total, lr0)
    optimizer.step()
    return True


class WeightEMA:
    """``ema <- decay * ema + (1 - decay) * params``, starting from a copy."""

    def __init__(self, model: torch.nn.Module, decay: float = 0.9999):
        self.decay = decay
        self.model = copy.deepcopy(model)
        self.model.requires_grad_(False)

    @torch.no_grad()
    def update(self, model: torch.nn.Module) -> None:
        d = self.decay
        for pe, p in zip(self.model.parameters(), model.parameters()):
            pe.mul_(d).add_(p.detach(), alpha=1 - d)


@dataclass
class TrainResult:
    model: FlowResNet
    ema: FlowResNet
    sampler: SamplerState
    reports: list[LossReport]
    step: int
    checkpoint_path: Path | None = None


class Trainer:
    """Two-phase training: warmup (logit-normal t, multi-exit loss only), then all losses + router."""

    def __init__(self, config: TrainConfig, dataset: Sequence[torch.Tensor]):
        config.validate()
        if not dataset:
            raise ContractError("empty dataset")
        for img in dataset:
            if min(img.shape[-2:]) < config.crop:
                raise ContractError(f"image {tuple(img.shape)} smaller than crop {config.crop}")
        self.config = config
        self.dataset = list(dataset)
        torch.manual_seed(config.seed)
        self.model = FlowResNet(config.backbone())
        self.ema = WeightEMA(self.model, config.ema_decay)
        self.opt = make_optimizer(self.model.backbone_parameters(), config.lr, config.weight_decay)
        self.router_opt = make_optimizer(self.model.classifier.parameters(), config.router_lr, config.weight_decay)
        self.sampler = SamplerState(decay=config.bin_decay, t0_fraction=0.5 if config.t0_mixing else 0.0)
        self.rng = np.random.default_rng(config.seed)
        self.steps_per_epoch = math.ceil(len(self.dataset) * config.crops_per_image / config.batch)
        self.total_steps = self.steps_per_epoch * config.epochs
        self.step = 0
        self.epoch = 0

    def batch_pair(self, indices) -> FlowPair:
        cfg = self.config
        hr = torch.stack([random_crop(self.dataset[i], cfg.crop, self.rng, cfg.color_jitter) for i in indices])
        return make_pair(degrade(hr, cfg.scale), hr, cfg.scale)

    def train_step(self, pair: FlowPair, warmup: bool) -> LossReport:
        cfg = self.config
        n = pair.x0.shape[0]
        t_np = sample_t(self.sampler, n, self.rng)
        state, v_target = interpolate(pair, torch.from_numpy(t_np).float())
        bundle = self.model(state.x_t, pair.x0, state.t)
        multi, vel, rec = multi_exit_loss(bundle, state.x_t, state.t, pair.x1, v_target, cfg.early_exits)
        x1_hat = reconstruct_x1(state.x_t, state.t, bundle.final)

        ssim_term = consist_term = torch.zeros((), dtype=torch.float64)
        if not warmup and cfg.ssim_loss:
            ssim_term = ssim_loss(x1_hat, pair.x1, cfg.scale)
        if not warmup and cfg.consistency:
            t2 = torch.from_numpy(sample_continuous(self.sampler, n, self.rng)).float()
            consist_term = consistency_loss(self.model, pair, state.t, t2, x1_hat)
        total = multi.double() + SSIM_WEIGHT * ssim_term.double() + CONSIST_WEIGHT * consist_term.double()

        self.opt.zero_grad(set_to_none=True)
        total.backward()
        ok = optimizer_step(self.opt, self.step, self.total_steps, cfg.lr)

        with torch.no_grad():
            used = range(N_EXITS) if cfg.early_exits else [N_EXITS - 1]
            per_sample = torch.stack([(bundle.velocities[e] - v_target).abs().mean(dim=(1, 2, 3)) for e in used]).mean(0)
        update_bins(self.sampler, t_np, per_sample.double().numpy())

        router = None
        near = state.t < ROUTER_T_MAX
        if not warmup and cfg.early_exits and bool(near.any()):
            with torch.no_grad():
                losses = per_exit_losses(bundle, state.x_t, state.t, pair.x1)[near]
            router = router_step(bundle.logits[near], oracle_labels(losses), self.router_opt)
        self.ema.update(self.model)
        self.step += 1
        return LossReport(
            vel=[float(x.item()) for x in vel], x0=[float(x.item()) for x in rec], multi=float(multi.item()),
            ssim=float(ssim_term.item()), consist=float(consist_term.item()), total=float(total.item()),
            router=router, skipped=0 if ok else 1,
        )

    def run_epoch(self) -> LossReport:
        self.epoch += 1
        warmup = self.epoch <= self.config.warmup_epochs
        self.sampler.phase = WARMUP if warmup else LOSS_AWARE
        self.model.train()
        order = np.concatenate([self.rng.permutation(len(self.dataset)) for _ in range(self.config.crops_per_image)])
        reports = []
        for k in range(self.steps_per_epoch):
            idx = order[k * self.config.batch:(k + 1) * self.config.batch]
            reports.append(self.train_step(self.batch_pair(idx), warmup))
        return _mean_report(reports, self.sampler.bin_losses)

    def manifest(self) -> dict:
        return {
            "format_version": checkpoint.FORMAT_VERSION,
            "backbone": checkpoint.backbone_config_dict(self.model.config),
            "train_config": self.config.to_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "sampler": self.sampler.to_dict(),
            "rng_state": self.rng.bit_generator.state,
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        checkpoint.save(path, self.manifest(), checkpoint.model_tensors(self.model, self.ema.model))
        return path

    def fit(self, out_dir: str | Path | None = None,
            on_epoch: Callable[[int, LossReport], None] | None = None) -> TrainResult:
        reports = []
        ckpt = None
        out_dir = Path(out_dir) if out_dir is not None else None
        while self.epoch < self.config.epochs:
            rep = self.run_epoch()
            reports.append(rep)
            if on_epoch:
                on_epoch(self.epoch, rep)
            if out_dir is not None and self.config.checkpoint_every and self.epoch % self.config.checkpoint_every == 0:
                self.save(out_dir / f"epoch{self.epoch:04d}.ckpt")
        if out_dir is not None:
            ckpt = self.save(out_dir / "final.ckpt")
        self.model.eval()
        self.ema.model.eval()
        return TrainResult(self.model, self.ema.model, self.sampler, reports, self.step, ckpt)


def _mean_report(reports: list[LossReport], bin_losses) -> LossReport:
    def avg(xs):
        return float(np.mean(xs))

    routers = [r.router for r in reports if r.router is not None]
    return LossReport(
        vel=[avg([r.vel[e] for r in reports]) for e in range(len(reports[0].vel))],
        x0=[avg([r.x0[e] for r in reports]) for e in range(len(reports[0].x0))],
        multi=avg([r.multi for r in reports]),
        ssim=avg([r.ssim for r in reports]),
        consist=avg([r.consist for r in reports]),
        total=avg([r.total for r in reports]),
        router=avg(routers) if routers else None,
        bin_losses=list(bin_losses),
        skipped=sum(r.skipped for r in reports),
    )


def train(config: TrainConfig, dataset: Sequence[torch.Tensor], out_dir: str | Path | None = None,
          on_epoch: Callable[[int, LossReport], None] | None = None) -> TrainResult:
    return Trainer(config, dataset).fit(out_dir, on_epoch)
