"""FlowResNet: the multi-exit velocity network.

16 FiLM-conditioned residual blocks in rearranged space, six of which add
(shifted) window self-attention. Exits sit after blocks 3, 7, 11 and 15; the
last one goes through the body conv, the global residual from the head and
the tail conv. A small classifier reads globally pooled exit-0 features and
scores the four exits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from caflow.numerics import ContractError, ShapeError, conv3x3, layernorm_channels, linear, relu, silu, softmax

N_EXITS = 4


@dataclass(frozen=True)
class BlockSpec:
    index: int
    kind: str  # "film" or "hybrid"
    shift: int = 0


@dataclass(frozen=True)
class BackboneConfig:
    scale: int = 4
    features: int = 64
    n_blocks: int = 16
    hybrid_blocks: tuple[int, ...] = (5, 9, 11, 13, 14, 15)
    exit_after: tuple[int, ...] = (3, 7, 11, 15)
    time_dim: int = 128
    window: int = 8
    heads: int = 8
    mlp_ratio: int = 2
    res_scale: float = 0.1
    router_hidden: tuple[int, ...] = (64, 32)

    @classmethod
    def for_blocks(cls, n_blocks: int = 16, scale: int = 4) -> "BackboneConfig":
        if n_blocks == 16:
            return cls(scale=scale)
        if n_blocks == 8:
            return cls(scale=scale, n_blocks=8, hybrid_blocks=(3, 5, 6, 7), exit_after=(1, 3, 5, 7))
        raise ContractError(f"n_blocks must be 8 or 16, got {n_blocks}")

    @property
    def rearranged_channels(self) -> int:
        return 3 * self.scale * self.scale

    def validate(self) -> None:
        if len(self.exit_after) != N_EXITS or list(self.exit_after) != sorted(self.exit_after):
            raise ContractError("exit_after must list four non-decreasing block indices")
        if self.exit_after[-1] != self.n_blocks - 1:
            raise ContractError("the last exit must follow the last block")
        if any(not 0 <= i < self.n_blocks for i in self.hybrid_blocks):
            raise ContractError("hybrid block index out of range")
        if self.features % self.heads:
            raise ContractError("features must be divisible by heads")

    def block_specs(self) -> list[BlockSpec]:
        specs, n_hybrid = [], 0
        for i in range(self.n_blocks):
            if i in self.hybrid_blocks:
                specs.append(BlockSpec(i, "hybrid", 0 if n_hybrid % 2 == 0 else self.window // 2))
                n_hybrid += 1
            else:
                specs.append(BlockSpec(i, "film"))
        return specs


def time_embed(t: torch.Tensor, dim: int = 128) -> torch.Tensor:
    """Sinusoidal embedding of t in [0, 1]: ``[sin(w_k t), cos(w_k t)]``, w_k = 10000^(-k/(dim/2 - 1))."""
    half = dim // 2
    k = torch.arange(half, dtype=torch.float64)
    freqs = torch.exp(-math.log(10000.0) * k / (half - 1)).to(t.dtype)
    args = t.reshape(-1, 1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _zero_(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class FiLMResBlock(nn.Module):
    def __init__(self, features: int = 64, time_dim: int = 128, res_scale: float = 0.1):
        super().__init__()
        self.res_scale = res_scale
        self.conv1 = nn.Conv2d(features, features, 3, padding=1)
        self.conv2 = _zero_(nn.Conv2d(features, features, 3, padding=1))
        self.film = nn.Linear(time_dim, 2 * features)
        nn.init.normal_(self.film.weight, std=0.02)
        nn.init.zeros_(self.film.bias)

    def forward(self, x: torch.Tensor, e_t: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.conv1.in_channels:
            raise ShapeError(f"expected {self.conv1.in_channels} channels, got {x.shape[1]}")
        h = relu(conv3x3(x, self.conv1.weight, self.conv1.bias))
        gamma, beta = linear(silu(e_t), self.film.weight, self.film.bias).chunk(2, dim=-1)
        h = h * (1 + gamma[:, :, None, None]) + beta[:, :, None, None]
        return x + self.res_scale * conv3x3(h, self.conv2.weight, self.conv2.bias)


def _window_partition(x: torch.Tensor, w: int) -> torch.Tensor:
    n, h, wd, c = x.shape
    x = x.reshape(n, h // w, w, wd // w, w, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, w * w, c)


def _window_reverse(windows: torch.Tensor, w: int, n: int, h: int, wd: int) -> torch.Tensor:
    c = windows.shape[-1]
    x = windows.reshape(n, h // w, wd // w, w, w, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(n, h, wd, c)


def relative_position_index(w: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(w), torch.arange(w), indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (w - 1)
    return rel[..., 0] * (2 * w - 1) + rel[..., 1]


def shift_mask(h: int, wd: int, w: int, shift: int) -> torch.Tensor:
    """(n_windows, T, T) additive mask: -inf between tokens from different pre-roll regions."""
    regions = torch.zeros(h, wd)
    label = 0
    for hs in (slice(0, -w), slice(-w, -shift), slice(-shift, None)):
        for ws in (slice(0, -w), slice(-w, -shift), slice(-shift, None)):
            regions[hs, ws] = label
            label += 1
    win = _window_partition(regions[None, :, :, None], w).squeeze(-1)
    diff = win[:, :, None] != win[:, None, :]
    return torch.zeros(diff.shape).masked_fill(diff, float("-inf"))


class WindowAttention(nn.Module):
    """Multi-head self-attention inside non-overlapping windows, with learned relative position bias."""

    def __init__(self, features: int = 64, window: int = 8, heads: int = 8):
        super().__init__()
        self.window, self.heads = window, heads
        self.head_dim = features // heads
        self.qkv = nn.Linear(features, 3 * features)
        self.proj = nn.Linear(features, features)
        self.rel_bias = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        self.register_buffer("rel_index", relative_position_index(window), persistent=False)
        self._masks: dict[tuple[int, int, int], torch.Tensor] = {}

    def _mask(self, h: int, wd: int, shift: int, dtype: torch.dtype) -> torch.Tensor:
        key = (h, wd, shift)
        if key not in self._masks:
            self._masks[key] = shift_mask(h, wd, self.window, shift)
        return self._masks[key].to(dtype)

    def forward(self, x: torch.Tensor, shift: int = 0, return_weights: bool = False):
        n, c, h, wd = x.shape
        w = self.window
        if h % w or wd % w:
            raise ShapeError(f"spatial size ({h}, {wd}) not divisible by window {w}")
        z = x.permute(0, 2, 3, 1)
        if shift:
            z = torch.roll(z, shifts=(-shift, -shift), dims=(1, 2))
        win = _window_partition(z, w)
        b, t, _ = win.shape
        qkv = linear(win, self.qkv.weight, self.qkv.bias).reshape(b, t, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        logits = (q * self.head_dim**-0.5) @ k.transpose(-2, -1)
        bias = self.rel_bias[self.rel_index.reshape(-1)].reshape(t, t, self.heads).permute(2, 0, 1)
        logits = logits + bias
        if shift:
            n_win = b // n
            mask = self._mask(h, wd, shift, logits.dtype)
            logits = (logits.reshape(n, n_win, self.heads, t, t) + mask[None, :, None]).reshape(b, self.heads, t, t)
        weights = softmax(logits)
        out = (weights @ v).transpose(1, 2).reshape(b, t, c)
        out = linear(out, self.proj.weight, self.proj.bias)
        z = _window_reverse(out, w, n, h, wd)
        if shift:
            z = torch.roll(z, shifts=(shift, shift), dims=(1, 2))
        out = z.permute(0, 3, 1, 2)
        return (out, weights) if return_weights else out


class HybridFiLMBlock(nn.Module):
    def __init__(self, features: int = 64, time_dim: int = 128, res_scale: float = 0.1,
                 window: int = 8, heads: int = 8, mlp_ratio: int = 2, shift: int = 0):
        super().__init__()
        self.shift = shift
        self.film = FiLMResBlock(features, time_dim, res_scale)
        self.norm1 = nn.LayerNorm(features)
        self.attn = WindowAttention(features, window, heads)
        self.norm2 = nn.LayerNorm(features)
        self.fc1 = nn.Linear(features, mlp_ratio * features)
        self.fc2 = nn.Linear(mlp_ratio * features, features)

    def mlp(self, x: torch.Tensor) -> torch.Tensor:
        z = x.permute(0, 2, 3, 1)
        z = linear(nn.functional.gelu(linear(z, self.fc1.weight, self.fc1.bias)), self.fc2.weight, self.fc2.bias)
        return z.permute(0, 3, 1, 2)

    def forward(self, x: torch.Tensor, e_t: torch.Tensor) -> torch.Tensor:
        x = self.film(x, e_t)
        x = x + self.attn(layernorm_channels(x, self.norm1.weight, self.norm1.bias), self.shift)
        return x + self.mlp(layernorm_channels(x, self.norm2.weight, self.norm2.bias))


class ExitClassifier(nn.Module):
    """GAP -> 64 -> 64 -> 32 -> 4 logits."""

    def __init__(self, features: int = 64, hidden: tuple[int, ...] = (64, 32), n_exits: int = N_EXITS):
        super().__init__()
        dims = (features, *hidden, n_exits)
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, f_e0: torch.Tensor) -> torch.Tensor:
        z = f_e0.mean(dim=(2, 3))
        for i, layer in enumerate(self.layers):
            z = linear(z, layer.weight, layer.bias)
            if i < len(self.layers) - 1:
                z = relu(z)
        return z


@dataclass
class ExitBundle:
    """Outputs of one forward pass; ``velocities[e]`` exists for every materialized exit."""

    velocities: list[torch.Tensor]
    logits: torch.Tensor
    f_e0: torch.Tensor
    chosen_exit: int | None = None
    exits: list[int] = field(default_factory=list)

    @property
    def final(self) -> torch.Tensor:
        return self.velocities[-1]


class FlowResNet(nn.Module):
    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = config = config or BackboneConfig()
        config.validate()
        c, cin = config.features, config.rearranged_channels
        self.specs = config.block_specs()
        self.head = nn.Conv2d(2 * cin, c, 3, padding=1)
        blocks = []
        for spec in self.specs:
            if spec.kind == "hybrid":
                blocks.append(HybridFiLMBlock(c, config.time_dim, config.res_scale, config.window,
                                              config.heads, config.mlp_ratio, spec.shift))
            else:
                blocks.append(FiLMResBlock(c, config.time_dim, config.res_scale))
        self.blocks = nn.ModuleList(blocks)
        self.body = nn.Conv2d(c, c, 3, padding=1)
        self.exit_heads = nn.ModuleList(_zero_(nn.Conv2d(c, cin, 3, padding=1)) for _ in range(N_EXITS - 1))
        self.tail = _zero_(nn.Conv2d(c, cin, 3, padding=1))
        self.classifier = ExitClassifier(c, config.router_hidden)

    def backbone_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("classifier.")]

    def exit_velocity(self, e: int, h: torch.Tensor, head_out: torch.Tensor) -> torch.Tensor:
        if e < N_EXITS - 1:
            conv = self.exit_heads[e]
            return conv3x3(h, conv.weight, conv.bias)
        body = conv3x3(h, self.body.weight, self.body.bias) + head_out
        return conv3x3(body, self.tail.weight, self.tail.bias)

    def forward(self, x_t: torch.Tensor, x0: torch.Tensor, t: torch.Tensor | float,
                until_exit: int | None = None, route: bool = False) -> ExitBundle:
        """Run the network.

        ``until_exit=e`` stops after exit ``e`` (materializing exits ``0..e``);
        ``route=True`` lets the classifier pick that exit from the exit-0
        features (batch size 1 only). Router logits never backpropagate into
        the backbone.
        """
        if x_t.shape != x0.shape:
            raise ShapeError(f"x_t {tuple(x_t.shape)} and x0 {tuple(x0.shape)} differ")
        n = x_t.shape[0]
        if route and n != 1:
            raise ContractError("routed forward handles one sample at a time")
        t = torch.as_tensor(t, dtype=x_t.dtype).reshape(-1)
        if t.numel() == 1:
            t = t.expand(n)
        e_t = time_embed(t, self.config.time_dim)
        head_out = conv3x3(torch.cat([x_t, x0], dim=1), self.head.weight, self.head.bias)
        last = N_EXITS - 1 if until_exit is None else int(until_exit)
        if not 0 <= last < N_EXITS:
            raise ContractError(f"exit index {last} out of range")
        h = head_out
        velocities: list[torch.Tensor] = []
        logits = f_e0 = None
        for spec, block in zip(self.specs, self.blocks):
            h = block(h, e_t)
            for e in (e for e, b in enumerate(self.config.exit_after) if b == spec.index):
                if e == 0:
                    f_e0 = h
                    logits = self.classifier(h.detach())
                    if route:
                        last = int(torch.argmax(logits[0]).item())
                if len(velocities) <= last:
                    velocities.append(self.exit_velocity(e, h, head_out))
            if len(velocities) > last:
                break
        return ExitBundle(velocities, logits, f_e0, last if route else None, list(range(len(velocities))))


def parameter_census(model: FlowResNet) -> dict:
    named = list(model.named_parameters())
    return {
        "total": sum(p.numel() for _, p in named),
        "classifier": sum(p.numel() for n, p in named if n.startswith("classifier.")),
        "hybrid_extra": sum(
            p.numel() for b in model.blocks if isinstance(b, HybridFiLMBlock)
            for n, p in b.named_parameters() if not n.startswith("film.")
        ),
        "hybrid_indices": [s.index for s in model.specs if s.kind == "hybrid"],
    }
