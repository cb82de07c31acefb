"""Per-exit and routed quality on a set of HR images."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from caflow.backbone import N_EXITS, FlowResNet
from caflow.costmodel import exit_costs, expected_cost, histogram_to_probs
from caflow.data import degrade
from caflow.flow import finish_output, prepare_start
from caflow.imaging import bicubic_resize, pixel_unshuffle, psnr, quantize_8bit, ssim
from caflow.routing import oracle_label, predicted_exit, within_one_rate


def _metric(value: float) -> float | None:
    return None if math.isinf(value) else value


@dataclass
class ImageRecord:
    name: str
    bicubic_psnr: float
    bicubic_ssim: float
    exit_psnr: list[float]
    exit_ssim: list[float]
    exit_losses: list[float]
    predicted: int
    oracle: int

    @property
    def adaptive_psnr(self) -> float:
        return self.exit_psnr[self.predicted]

    @property
    def adaptive_ssim(self) -> float:
        return self.exit_ssim[self.predicted]

    def to_dict(self) -> dict:
        def clean(xs):
            return [_metric(x) for x in xs]

        return {
            "name": self.name,
            "bicubic": {"psnr": _metric(self.bicubic_psnr), "ssim": self.bicubic_ssim},
            "exits": [{"psnr": p, "ssim": s} for p, s in zip(clean(self.exit_psnr), self.exit_ssim)],
            "adaptive": {"psnr": _metric(self.adaptive_psnr), "ssim": self.adaptive_ssim},
            "psnr_infinite": any(math.isinf(x) for x in [self.bicubic_psnr, *self.exit_psnr]),
            "exit_losses": self.exit_losses,
            "predicted_exit": self.predicted,
            "oracle_exit": self.oracle,
        }


@dataclass
class EvalReport:
    records: list[ImageRecord]
    histogram: list[int]
    expected_flops: float
    full_flops: float
    within_one: float
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "summary": self.summary,
            "exit_histogram": self.histogram,
            "expected_flops": self.expected_flops,
            "full_depth_flops": self.full_flops,
            "router_within_one_exit": self.within_one,
            "images": [r.to_dict() for r in self.records],
        }


def _finite_mean(xs: Sequence[float]) -> float | None:
    vals = [x for x in xs if not math.isinf(x)]
    return float(np.mean(vals)) if vals else None


def evaluate_image(model: FlowResNet, hr: torch.Tensor, lr: torch.Tensor | None = None, name: str = "") -> ImageRecord:
    """All four exits from one t=0 pass; exit ``e`` output equals the until-exit-``e`` path.

    Metrics are taken on 8-bit outputs, the values ``infer`` writes to disk.
    """
    s = model.config.scale
    lr = degrade(hr, s) if lr is None else lr
    with torch.no_grad():
        x0, (h, w) = prepare_start(model, lr)
        bundle = model(x0, x0, 0.0)
        outs = [quantize_8bit(finish_output(model, x0 + v, (h, w))) for v in bundle.velocities]
        x1 = pixel_unshuffle(hr.to(x0.dtype).unsqueeze(0), s)
        losses = [float((x0 + v)[..., :h, :w].sub(x1).abs().mean()) for v in bundle.velocities]
    up = quantize_8bit(bicubic_resize(lr, s * h, s * w))
    return ImageRecord(
        name=name,
        bicubic_psnr=psnr(up, hr),
        bicubic_ssim=ssim(up, hr),
        exit_psnr=[psnr(o, hr) for o in outs],
        exit_ssim=[ssim(o, hr) for o in outs],
        exit_losses=losses,
        predicted=int(predicted_exit(bundle.logits)[0]),
        oracle=oracle_label(losses),
    )


def _cost_table(model: FlowResNet, hw):
    s, window = model.config.scale, model.config.window
    h, w = hw
    return exit_costs(model.config, -(-h // s // window) * window, -(-w // s // window) * window)


def evaluate(model: FlowResNet, hrs: Sequence[torch.Tensor], lrs: Sequence[torch.Tensor] | None = None,
             names: Sequence[str] | None = None) -> EvalReport:
    model.eval()
    names = list(names) if names is not None else [f"img{i:04d}" for i in range(len(hrs))]
    records = [evaluate_image(model, hr, None if lrs is None else lrs[i], names[i]) for i, hr in enumerate(hrs)]
    hist = [0] * N_EXITS
    for r in records:
        hist[r.predicted] += 1
    tables = [_cost_table(model, hr.shape[-2:]) for hr in hrs]
    table = tables[0]
    if all(t.per_exit == table.per_exit for t in tables):
        expected = expected_cost(table, histogram_to_probs(hist))
    else:
        # mixed sizes: average the cost each image actually paid at its own padded size
        expected = float(np.mean([t.per_exit[r.predicted] for t, r in zip(tables, records)]))
    within = within_one_rate([r.predicted for r in records], [r.oracle for r in records])
    summary = {
        "bicubic_psnr": _finite_mean([r.bicubic_psnr for r in records]),
        "bicubic_ssim": float(np.mean([r.bicubic_ssim for r in records])),
        "exit_psnr": [_finite_mean([r.exit_psnr[e] for r in records]) for e in range(N_EXITS)],
        "exit_ssim": [float(np.mean([r.exit_ssim[e] for r in records])) for e in range(N_EXITS)],
        "adaptive_psnr": _finite_mean([r.adaptive_psnr for r in records]),
        "adaptive_ssim": float(np.mean([r.adaptive_ssim for r in records])),
        "exit_gflops": table.gflops,
    }
    full = float(np.mean([t.per_exit[-1] for t in tables]))
    return EvalReport(records, hist, expected, full, within, summary)
