"""Oracle exit labels and what the router does with them.

Run: python3 demos/04_routing.py
"""

import numpy as np
import torch

from caflow.backbone import FlowResNet
from caflow.data import synthetic_texture
from caflow.routing import adaptive_infer, oracle_label

# the earliest exit within 0.02 of the best loss wins
for losses in ([0.100, 0.085, 0.080, 0.079], [0.30, 0.30, 0.30, 0.30], [0.40, 0.30, 0.20, 0.10]):
    print(losses, "-> exit", oracle_label(losses))

model = FlowResNet().eval()
lr = synthetic_texture(np.random.default_rng(0), 32)
with torch.no_grad():
    model.classifier.layers[-1].bias.copy_(torch.tensor([0.0, 0.0, 3.0, 0.0]))
calls = []
hooks = [b.register_forward_hook(lambda m, i, o, k=k: calls.append(k)) for k, b in enumerate(model.blocks)]
_, decision = adaptive_infer(model, lr)
for h in hooks:
    h.remove()
print("router chose exit", decision.exit, "and ran blocks", calls)
