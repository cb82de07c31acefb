"""Route the tiles of a synthetic slide and draw the exit map.

The slide is a grid of tiles: a white background, a smooth tissue half and a
textured tissue half. Without a checkpoint argument the demo trains a short
model first.

Run: python3 demos/06_slide_routing.py [checkpoint] [out_dir]
     (pass "" as the checkpoint to train the short model and still pick out_dir)
"""

import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from caflow import checkpoint
from caflow.cli import route_slide, routing_map_image
from caflow.data import synthetic_texture
from caflow.imaging import save_png
from caflow.toy import TOY_CONFIG, toy_data
from caflow.training import Trainer

out = Path(sys.argv[2] if len(sys.argv) > 2 else "runs/slide_demo")
if len(sys.argv) > 1 and sys.argv[1]:
    model = checkpoint.build_models(sys.argv[1])[1]
else:
    train, _ = toy_data(16, 0)
    model = Trainer(replace(TOY_CONFIG, epochs=8, warmup_epochs=2), train).fit().ema

rng = np.random.default_rng(3)
tiles = {}
for r in range(4):
    for c in range(6):
        if r == 0 or c == 0:
            tiles[(r, c)] = torch.full((3, 32, 32), 0.97)
        elif c < 3:
            tiles[(r, c)] = 0.35 + 0.1 * synthetic_texture(rng, 32, complexity=0.0)
        else:
            tiles[(r, c)] = 0.6 * synthetic_texture(rng, 32, complexity=1.0)

result = route_slide(model, tiles, tissue_frac=0.1)
out.mkdir(parents=True, exist_ok=True)
save_png(routing_map_image(result), out / "routing_map.png")
print(f"Otsu threshold {result['otsu_threshold']:.3f}, {result['n_tissue']}/{result['n_tiles']} tissue tiles")
print("exit histogram", result["exit_histogram"])
if result["mean_flops"] is not None:
    print(f"mean {result['mean_flops'] / 1e9:.3f} GFLOPs per tile, "
          f"{100 * result['savings_vs_full']:.1f}% below full depth")
print("map written to", out / "routing_map.png")
