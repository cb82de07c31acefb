"""Timestep sampling: exact-zero mixing, logit-normal base, loss-aware bins."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from caflow.numerics import ContractError

WARMUP, LOSS_AWARE = "warmup", "loss-aware"


def bin_probabilities(losses, alpha: float = 0.3, eps_mix: float = 0.5) -> np.ndarray:
    """``p_b = (1 - eps) * l_b^alpha / Z + eps / B``; uniform when every loss is zero."""
    losses = np.asarray(losses, dtype=np.float64)
    if np.any(losses < 0) or not np.all(np.isfinite(losses)):
        raise ContractError("bin losses must be finite and non-negative")
    n = losses.size
    powered = losses**alpha
    z = powered.sum()
    if z == 0:
        return np.full(n, 1.0 / n)
    return (1.0 - eps_mix) * powered / z + eps_mix / n


@dataclass
class SamplerState:
    n_bins: int = 20
    decay: float = 0.9
    mu: float = -1.0
    sigma: float = 1.0
    alpha: float = 0.3
    eps_mix: float = 0.5
    t0_fraction: float = 0.5
    phase: str = WARMUP
    bin_losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.bin_losses:
            self.bin_losses = [0.0] * self.n_bins

    def probabilities(self) -> np.ndarray:
        return bin_probabilities(self.bin_losses, self.alpha, self.eps_mix)

    def n_zero(self, batch_size: int) -> int:
        return math.ceil(self.t0_fraction * batch_size - 1e-12)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerState":
        return cls(**d)


def sample_continuous(state: SamplerState, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` timesteps from the phase's continuous distribution (no exact zeros)."""
    if state.phase == WARMUP:
        return 1.0 / (1.0 + np.exp(-rng.normal(state.mu, state.sigma, size=n)))
    if state.phase != LOSS_AWARE:
        raise ContractError(f"unknown sampler phase {state.phase!r}")
    bins = rng.choice(state.n_bins, size=n, p=state.probabilities())
    return (bins + rng.random(n)) / state.n_bins


def sample_t(state: SamplerState, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """First ``ceil(t0_fraction * batch)`` entries are exactly 0; the rest follow the phase."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    k = state.n_zero(batch_size)
    return np.concatenate([np.zeros(k), sample_continuous(state, batch_size - k, rng)])


def bin_index(t: np.ndarray, n_bins: int) -> np.ndarray:
    return np.minimum((np.asarray(t) * n_bins).astype(np.int64), n_bins - 1)


def update_bins(state: SamplerState, t, losses) -> SamplerState:
    """EMA update of each touched bin with the mean loss of the samples landing in it."""
    t = np.asarray(t, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    if not np.all(np.isfinite(losses)):
        raise ContractError("non-finite losses")
    idx = bin_index(t, state.n_bins)
    d = state.decay
    for b in np.unique(idx):
        state.bin_losses[b] = d * state.bin_losses[b] + (1 - d) * float(losses[idx == b].mean())
    return state
