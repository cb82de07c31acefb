"""Timestep sampling: half the batch at t=0, the rest logit-normal, then loss-aware bins.

Run: python3 demos/03_timestep_sampler.py
"""

import numpy as np

from caflow.sampling import LOSS_AWARE, SamplerState, bin_probabilities, sample_t, update_bins

rng = np.random.default_rng(0)
state = SamplerState()
t = sample_t(state, 16, rng)
print("warmup batch:", np.round(t, 3))

# feed the sampler losses that peak near t=0.9 and watch the bin weights move;
# bins never visited keep a zero loss and fall back to the uniform floor
for _ in range(200):
    t = rng.random(32)
    update_bins(state, t, 0.05 + np.exp(-((t - 0.9) / 0.1) ** 2))
state.phase = LOSS_AWARE
p = bin_probabilities(state.bin_losses)
print("bin probabilities (20 bins):", np.round(p, 3))
print("every bin keeps at least", round(p.min(), 4))
print("loss-aware batch t:", np.round(sample_t(state, 16, rng)[8:], 3))
