"""Train on procedural textures and compare exits against bicubic on held-out images.

This is the scaled run behind the acceptance suite; it takes about 30 minutes on
one CPU core. Pass --quick for a short run that only shows the plumbing.

Run: python3 demos/05_toy_training.py [--quick]
"""

import sys

from caflow.toy import TOY_CONFIG, toy_data, toy_run

quick = "--quick" in sys.argv
overrides = dict(epochs=6, warmup_epochs=2) if quick else {}
data = toy_data(16, 4) if quick else toy_data()


def progress(epoch, rep):
    if quick or epoch % 20 == 0:
        print(f"epoch {epoch:3d}  total {rep.total:.4f}  x0 per exit {[round(x, 4) for x in rep.x0]}", flush=True)


run = toy_run(TOY_CONFIG, data=data, on_epoch=progress, **overrides)
s = run.report.summary
print(f"bicubic {run.bicubic_psnr:.3f} dB")
for e, (p, q) in enumerate(zip(s["exit_psnr"], s["exit_ssim"])):
    print(f"exit {e}: {p:.3f} dB  SSIM {q:.4f}  ({s['exit_gflops'][e]:.2f} GFLOPs at 64x64)")
print(f"adaptive {s['adaptive_psnr']:.3f} dB, histogram {run.report.histogram}, "
      f"{run.report.expected_flops / 1e9:.2f} GFLOPs per image, within-one {run.report.within_one:.2f}")
print(f"{run.seconds / 60:.1f} min")
