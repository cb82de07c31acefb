"""Desk-scale training run on procedural textures, with held-out evaluation."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

from caflow.data import synthetic_dataset
from caflow.evaluation import EvalReport, evaluate
from caflow.training import LossReport, TrainConfig, Trainer

N_TRAIN = 64
N_HELDOUT = 16
IMAGE_SIZE = 256
DATA_SEED = 1

# 200 epochs at 32-pixel crops; four crops per image per epoch gives 3200 optimizer steps
TOY_CONFIG = TrainConfig(
    epochs=200, warmup_epochs=5, batch=8, crop=32, crops_per_image=4,
    lr=1e-3, router_lr=1e-3, ema_decay=0.99, checkpoint_every=0, seed=0,
)


@dataclass
class ToyResult:
    config: TrainConfig
    epoch_reports: list[LossReport]
    report: EvalReport
    seconds: float

    @property
    def exit_psnr(self) -> list[float]:
        return self.report.summary["exit_psnr"]

    @property
    def bicubic_psnr(self) -> float:
        return self.report.summary["bicubic_psnr"]


def toy_data(n_train: int = N_TRAIN, n_heldout: int = N_HELDOUT, size: int = IMAGE_SIZE, seed: int = DATA_SEED):
    images = synthetic_dataset(n_train + n_heldout, size, seed)
    return images[:n_train], images[n_train:]


def toy_run(config: TrainConfig = TOY_CONFIG, data=None, on_epoch=None, **overrides) -> ToyResult:
    """Train on the toy set and evaluate the EMA weights on the held-out images."""
    config = replace(config, **overrides)
    train, heldout = toy_data() if data is None else data
    start = time.perf_counter()
    result = Trainer(config, train).fit(None, on_epoch)
    report = evaluate(result.ema, heldout)
    return ToyResult(config, result.reports, report, time.perf_counter() - start)
