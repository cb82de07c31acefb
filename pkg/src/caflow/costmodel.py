"""Analytic FLOPs accounting for FlowResNet.

Convention: 2 FLOPs per multiply-accumulate for convolutions, linear layers
and the two attention matrix products; 1 FLOP per output element for bias
adds, activations, normalizations, FiLM modulation and residual adds;
5 FLOPs per attention logit for the softmax. Reaching exit ``e`` pays for
every exit head ``0..e`` because the until-exit forward materializes them.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from caflow.backbone import N_EXITS, BackboneConfig
from caflow.numerics import ContractError

SOFTMAX_FLOPS = 5


def flops_conv(cin: int, cout: int, k: int, h: int, w: int, bias: bool = True) -> int:
    if min(cin, cout, k, h, w) <= 0:
        raise ContractError("flops_conv needs positive dimensions")
    return 2 * h * w * cout * cin * k * k + (h * w * cout if bias else 0)


def flops_linear(din: int, dout: int, rows: int = 1, bias: bool = True) -> int:
    return 2 * rows * din * dout + (rows * dout if bias else 0)


@dataclass
class LayerCost:
    name: str
    segment: int  # exit segment the layer belongs to; -1 counts toward every exit
    macs_flops: int  # 2 * MACs of conv/linear/matmul work
    elementwise_flops: int
    kind: str = "conv"  # conv | attention | linear | misc

    @property
    def total(self) -> int:
        return self.macs_flops + self.elementwise_flops


@dataclass
class CostTable:
    h: int
    w: int
    per_exit: list[int]
    layers: list[LayerCost] = field(default_factory=list)

    @property
    def gflops(self) -> list[float]:
        return [f / 1e9 for f in self.per_exit]

    def exit_layers(self, e: int) -> list[LayerCost]:
        return [layer for layer in self.layers if layer.segment <= e]

    def by_kind(self, e: int) -> dict[str, int]:
        out: dict[str, int] = {}
        for layer in self.exit_layers(e):
            out[layer.kind] = out.get(layer.kind, 0) + layer.macs_flops
        return out

    def to_json(self) -> str:
        return json.dumps({
            "input_hw": [self.h, self.w],
            "per_exit_flops": self.per_exit,
            "per_exit_gflops": [round(g, 4) for g in self.gflops],
            "layers": [asdict(layer) for layer in self.layers],
        }, indent=2)

    def render(self) -> str:
        lines = [f"FlowResNet cost at {self.h}x{self.w} rearranged input", "exit  GFLOPs  ratio-to-E0"]
        for e, g in enumerate(self.gflops):
            lines.append(f"E{e}    {g:6.2f}  {g / self.gflops[0]:.2f}x")
        return "\n".join(lines)


def _block_costs(cfg: BackboneConfig, kind: str, shift: int, hw: int, n_windows: int, prefix: str, seg: int):
    c, td = cfg.features, cfg.time_dim
    out = [
        LayerCost(f"{prefix}.film_proj", seg, flops_linear(td, 2 * c, bias=False), td + 2 * c, "linear"),
        LayerCost(f"{prefix}.conv1", seg, flops_conv(c, c, 3, 1, hw, bias=False), hw * c * 2, "conv"),
        LayerCost(f"{prefix}.film_mod", seg, 0, hw * c * 2 + c, "misc"),
        LayerCost(f"{prefix}.conv2", seg, flops_conv(c, c, 3, 1, hw, bias=False), hw * c * 3, "conv"),
    ]
    if kind != "hybrid":
        return out
    t = cfg.window * cfg.window
    logits = n_windows * cfg.heads * t * t
    hidden = cfg.mlp_ratio * c
    out += [
        LayerCost(f"{prefix}.norm1", seg, 0, hw * c, "misc"),
        LayerCost(f"{prefix}.qkv", seg, flops_linear(c, 3 * c, hw, bias=False), hw * 3 * c + hw * c, "attention"),
        LayerCost(f"{prefix}.qk", seg, 2 * hw * t * c, logits * (2 if shift else 1), "attention"),
        LayerCost(f"{prefix}.softmax", seg, 0, SOFTMAX_FLOPS * logits, "attention"),
        LayerCost(f"{prefix}.av", seg, 2 * hw * t * c, 0, "attention"),
        LayerCost(f"{prefix}.proj", seg, flops_linear(c, c, hw, bias=False), 2 * hw * c, "attention"),
        LayerCost(f"{prefix}.norm2", seg, 0, hw * c, "misc"),
        LayerCost(f"{prefix}.mlp", seg, flops_linear(c, hidden, hw, bias=False) + flops_linear(hidden, c, hw, bias=False),
                  2 * hw * hidden + 2 * hw * c, "linear"),
    ]
    return out


def exit_costs(cfg: BackboneConfig | None = None, h: int = 64, w: int = 64) -> CostTable:
    """Per-exit FLOPs of one forward pass at rearranged size ``h x w`` (batch 1)."""
    cfg = cfg or BackboneConfig()
    cfg.validate()
    if h % cfg.window or w % cfg.window or h <= 0 or w <= 0:
        raise ContractError(f"input {h}x{w} must be a positive multiple of the window {cfg.window}")
    hw = h * w
    n_windows = hw // (cfg.window * cfg.window)
    c, cin = cfg.features, cfg.rearranged_channels
    layers = [
        LayerCost("time_embed", -1, 0, cfg.time_dim, "misc"),
        LayerCost("head", -1, flops_conv(2 * cin, c, 3, h, w, bias=False), hw * c, "conv"),
    ]
    seg = 0
    for spec in cfg.block_specs():
        layers += _block_costs(cfg, spec.kind, spec.shift, hw, n_windows, f"block{spec.index}", seg)
        for e in (e for e, b in enumerate(cfg.exit_after) if b == spec.index):
            if e == 0:
                dims = (c, *cfg.router_hidden, N_EXITS)
                router = sum(flops_linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
                layers.append(LayerCost("classifier", 0, router, hw * c + sum(cfg.router_hidden), "linear"))
            if e < N_EXITS - 1:
                layers.append(LayerCost(f"exit{e}.head", e, flops_conv(c, cin, 3, h, w, bias=False), hw * cin, "conv"))
            else:
                layers += [
                    LayerCost("exit3.body", e, flops_conv(c, c, 3, h, w, bias=False), hw * c, "conv"),
                    LayerCost("exit3.global_residual", e, 0, hw * c, "misc"),
                    LayerCost("exit3.tail", e, flops_conv(c, cin, 3, h, w, bias=False), hw * cin, "conv"),
                ]
            seg = e + 1
    table = CostTable(h, w, [], layers)
    table.per_exit = [sum(layer.total for layer in table.exit_layers(e)) for e in range(N_EXITS)]
    return table


def expected_cost(table: CostTable, probs: Sequence[float], tol: float = 1e-6) -> float:
    """Mean FLOPs under an exit distribution."""
    if len(probs) != N_EXITS or any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > tol:
        raise ContractError(f"invalid exit distribution {list(probs)}")
    return float(sum(p * c for p, c in zip(probs, table.per_exit)))


def histogram_to_probs(counts: Sequence[int]) -> list[float]:
    total = sum(counts)
    if total == 0:
        raise ContractError("empty histogram")
    return [k / total for k in counts]


@dataclass
class OperatingPoint:
    label: str
    gflops: float
    psnr: float
    nondominated: bool = True


def pareto_points(points: Sequence[tuple[str, float, float]]) -> list[OperatingPoint]:
    """Sort by compute and flag points dominated by a cheaper-or-equal, better-or-equal one."""
    ops = [OperatingPoint(lbl, float(g), float(p)) for lbl, g, p in points]
    for a in ops:
        a.nondominated = not any(
            b is not a and b.gflops <= a.gflops and b.psnr >= a.psnr and (b.gflops < a.gflops or b.psnr > a.psnr)
            for b in ops
        )
    return sorted(ops, key=lambda op: (op.gflops, -op.psnr))


def pareto_export(points: Sequence[tuple[str, float, float]], path: str | Path) -> list[OperatingPoint]:
    ops = pareto_points(points)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "gflops", "psnr", "nondominated"])
        for op in ops:
            writer.writerow([op.label, f"{op.gflops:.6g}", f"{op.psnr:.6g}", int(op.nondominated)])
    return ops
