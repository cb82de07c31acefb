"""Per-exit compute: analytic table, a measured cross-check, and routed averages.

Run: python3 demos/01_cost_model.py
"""

import torch
from torch.utils.flop_counter import FlopCounterMode

from caflow.backbone import BackboneConfig, FlowResNet
from caflow.costmodel import exit_costs, expected_cost

table = exit_costs()
print(table.render())

# the analytic multiply-accumulate terms should agree with torch's own counter
model = FlowResNet().eval()
x = torch.rand(1, 48, 64, 64)
for e in range(4):
    with FlopCounterMode(display=False) as counter, torch.no_grad():
        model(x, x, 0.0, until_exit=e)
    analytic = sum(layer.macs_flops for layer in table.exit_layers(e))
    print(f"exit {e}: counted {counter.get_total_flops() / 1e9:.3f} G, analytic MACs {analytic / 1e9:.3f} G")

# a router that sends a third of images to exit 1 and most of the rest to exit 2
probs = [0.0, 0.33, 0.61, 0.06]
mean = expected_cost(table, probs)
print(f"exit distribution {probs}: {mean / 1e9:.2f} GFLOPs, {100 * (1 - mean / table.per_exit[3]):.0f}% below full depth")

small = exit_costs(BackboneConfig.for_blocks(8))
print("8-block variant:", [round(g, 2) for g in small.gflops])
