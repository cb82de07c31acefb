"""Command-line pipeline: train, infer, eval, flops, route-slide."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import re
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from caflow import checkpoint
from caflow.backbone import N_EXITS, BackboneConfig
from caflow.costmodel import exit_costs, expected_cost, histogram_to_probs
from caflow.data import load_folder, synthetic_dataset
from caflow.evaluation import evaluate
from caflow.flow import euler_infer, prepare_start
from caflow.imaging import (
    DegenerateHistogramError,
    dark_fraction,
    load_png,
    otsu_threshold,
    save_png,
    to_gray,
)
from caflow.numerics import ContractError, ShapeError
from caflow.routing import adaptive_infer
from caflow.training import TrainConfig, Trainer

SEED_ENV = "CAFLOW_SEED"
TILE_NAME = re.compile(r"r(\d+)_c(\d+)\.png$")
# one flat color per exit, plus background
EXIT_COLORS = [(44, 160, 44), (31, 119, 180), (255, 127, 14), (214, 39, 40)]
BACKGROUND_COLOR = (235, 235, 235)
MAP_CELL = 16


class ConfigError(ContractError):
    pass


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data_dir: str = ""
    out_dir: str = "runs/caflow"
    synthetic_images: int = 0
    synthetic_seed: int = 0
    exit: str = "auto"
    steps: int = 1
    tile_size: int = 0
    tissue_frac: float = 0.1

    def validate(self) -> None:
        self.train.validate()
        if self.exit != "auto" and self.exit not in {str(e) for e in range(N_EXITS)}:
            raise ConfigError(f"exit must be 'auto' or 0..{N_EXITS - 1}, got {self.exit!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.tile_size < 0 or self.synthetic_images < 0:
            raise ConfigError("tile_size and synthetic_images must be non-negative")
        if not 0 <= self.tissue_frac <= 1:
            raise ConfigError("tissue_frac must lie in [0, 1]")

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "train"}
        out.update(self.train.to_dict())
        return out


_RUN_TYPES = {"data_dir": str, "out_dir": str, "synthetic_images": int, "synthetic_seed": int, "exit": str,
              "steps": int, "tile_size": int, "tissue_frac": float}


def _coerce(key: str, raw: str, kind: type):
    if kind is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}") from None


def parse_config(text: str, env: dict | None = None) -> RunConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    env = os.environ if env is None else env
    train_types = TrainConfig.field_types()
    train_kw, run_kw = {}, {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in train_types:
            train_kw[key] = _coerce(key, raw, train_types[key])
        elif key in _RUN_TYPES:
            run_kw[key] = _coerce(key, raw, _RUN_TYPES[key])
        else:
            raise ConfigError(f"line {n}: unknown key {key!r}")
    if env.get(SEED_ENV):
        train_kw["seed"] = _coerce(SEED_ENV, env[SEED_ENV], int)
    cfg = RunConfig(train=TrainConfig(**train_kw), **run_kw)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return parse_config("")
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} does not exist")
    return parse_config(path.read_text())


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".json-")
    with os.fdopen(fd, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
    os.replace(tmp, path)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def _provenance(config: dict, ckpt: Path | None = None) -> dict:
    return {
        "config_hash": config_hash(config),
        "checkpoint_hash": checkpoint.file_hash(ckpt) if ckpt is not None else None,
    }


def _load_model(ckpt: Path, raw: bool):
    model, ema, manifest = checkpoint.build_models(ckpt)
    return (model if raw else ema), manifest


def _dataset(cfg: RunConfig) -> list[torch.Tensor]:
    if cfg.synthetic_images:
        return synthetic_dataset(cfg.synthetic_images, 256, cfg.synthetic_seed)
    if not cfg.data_dir:
        raise ConfigError("set data_dir or synthetic_images")
    return load_folder(cfg.data_dir)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.data:
        cfg.data_dir, cfg.synthetic_images = args.data, 0
    if args.out:
        cfg.out_dir = args.out
    data = _dataset(cfg)
    trainer = Trainer(cfg.train, data)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_tmp = out / ".train_log.jsonl.partial"
    with open(log_tmp, "w") as log:
        def on_epoch(epoch, rep):
            log.write(json.dumps({"epoch": epoch, **rep.to_dict()}, sort_keys=True) + "\n")
            log.flush()
            if not args.quiet:
                print(f"epoch {epoch:4d}  total {rep.total:.5f}  x0 {rep.x0[-1]:.5f}", flush=True)

        result = trainer.fit(out, on_epoch)
    os.replace(log_tmp, out / "train_log.jsonl")
    _write_json(out / "run.json", {"config": cfg.to_dict(), **_provenance(cfg.to_dict(), result.checkpoint_path),
                                   "steps": result.step})
    print(f"wrote {result.checkpoint_path}")
    return 0


def _input_images(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(path.glob("*.png"))
        if not files:
            raise ContractError(f"no PNG files in {path}")
        return files
    if not path.is_file():
        raise FileNotFoundError(path)
    return [path]


def cmd_infer(args) -> int:
    ckpt = Path(args.checkpoint)
    model, manifest = _load_model(ckpt, args.raw)
    exit = args.exit if args.exit == "auto" else int(args.exit)
    out = Path(args.out)
    records = []
    for f in _input_images(Path(args.input)):
        lr = load_png(f)
        sr, decision = adaptive_infer(model, lr, exit=exit)
        if args.steps > 1:
            sr = euler_infer(model, lr, args.steps, exit=decision.exit)
        save_png(sr, out / f.name)
        records.append({"image": f.name, **decision.to_dict()})
    _write_json(out / "routing.json", {"exit_policy": args.exit, "steps": args.steps, "images": records,
                                       **_provenance(manifest["train_config"], ckpt)})
    return 0


def _eval_data(path: Path):
    hr_dir, lr_dir = path / "HR", path / "LR"
    if hr_dir.is_dir() and lr_dir.is_dir():
        hr_files = sorted(hr_dir.glob("*.png"))
        missing = [f.name for f in hr_files if not (lr_dir / f.name).is_file()]
        if missing:
            raise ContractError(f"LR images missing for {missing[:3]}")
        return hr_files, [load_png(f) for f in hr_files], [load_png(lr_dir / f.name) for f in hr_files]
    hr_files = sorted(path.glob("*.png")) if path.is_dir() else []
    if not path.is_dir():
        raise FileNotFoundError(path)
    if not hr_files:
        raise ContractError(f"no PNG files in {path}")
    return hr_files, [load_png(f) for f in hr_files], None


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    model, manifest = _load_model(ckpt, args.raw)
    files, hrs, lrs = _eval_data(Path(args.data))
    report = evaluate(model, hrs, lrs, [f.name for f in files])
    payload = {**report.to_dict(), **_provenance(manifest["train_config"], ckpt)}
    _write_json(Path(args.out), payload)
    s = report.summary
    fmt = lambda v: "inf" if v is None else f"{v:.3f}"  # noqa: E731
    print(f"bicubic {fmt(s['bicubic_psnr'])} dB  adaptive {fmt(s['adaptive_psnr'])} dB  "
          f"exits {' '.join(fmt(p) for p in s['exit_psnr'])}")
    print(f"exit histogram {report.histogram}  expected {report.expected_flops / 1e9:.3f} GFLOPs")
    return 0


def cmd_flops(args) -> int:
    cfg = load_config(args.config)
    n_blocks = args.n_blocks or cfg.train.n_blocks
    backbone = BackboneConfig.for_blocks(n_blocks, cfg.train.scale)
    table = exit_costs(backbone, args.height, args.width)
    print(table.render())
    if args.json:
        payload = json.loads(table.to_json())
        _write_json(Path(args.json), {**payload, "config": cfg.to_dict(), **_provenance(cfg.to_dict())})
    return 0


def _collect_tiles(path: Path) -> dict[tuple[int, int], Path]:
    if not path.is_dir():
        raise FileNotFoundError(path)
    tiles = {}
    for f in sorted(path.glob("*.png")):
        m = TILE_NAME.fullmatch(f.name)
        if m:
            tiles[(int(m.group(1)), int(m.group(2)))] = f
    if not tiles:
        raise ContractError(f"no r{{row}}_c{{col}}.png tiles in {path}")
    return tiles


def route_slide(model, tiles: dict[tuple[int, int], torch.Tensor], tissue_frac: float = 0.1) -> dict:
    """Otsu over the whole slide, then route every tissue tile once at t=0."""
    shapes = {tuple(t.shape) for t in tiles.values()}
    if len(shapes) != 1:
        raise ShapeError(f"tiles must share dimensions, got {sorted(shapes)}")
    keys = sorted(tiles)
    grays = {k: to_gray(tiles[k]).numpy() for k in keys}
    try:
        thr = otsu_threshold(np.concatenate([g.ravel() for g in grays.values()]))
    except DegenerateHistogramError:
        thr = None
    _, h, w = shapes.pop()
    cfg = model.config
    x0, _ = prepare_start(model, tiles[keys[0]])
    table = exit_costs(cfg, x0.shape[-2], x0.shape[-1])
    hist = [0] * N_EXITS
    records = []
    for k in keys:
        frac = dark_fraction(grays[k], thr) if thr is not None else 0.0
        tissue = thr is not None and frac >= tissue_frac
        rec = {"row": k[0], "col": k[1], "tissue": tissue, "dark_fraction": frac, "exit": None, "flops": None}
        if tissue:
            with torch.no_grad():
                x0, _ = prepare_start(model, tiles[k])
                e = model(x0, x0, 0.0, route=True).chosen_exit
            hist[e] += 1
            rec.update(exit=e, flops=table.per_exit[e])
        records.append(rec)
    n_tissue = sum(hist)
    mean = expected_cost(table, histogram_to_probs(hist)) if n_tissue else None
    return {
        "otsu_threshold": thr,
        "tissue_fraction_rule": tissue_frac,
        "tile_hw": [h, w],
        "n_tiles": len(keys),
        "n_tissue": n_tissue,
        "exit_histogram": hist,
        "exit_flops": table.per_exit,
        "mean_flops": mean,
        "savings_vs_full": None if mean is None else 1.0 - mean / table.per_exit[-1],
        "tiles": records,
    }


def routing_map_image(result: dict) -> torch.Tensor:
    rows = 1 + max(t["row"] for t in result["tiles"])
    cols = 1 + max(t["col"] for t in result["tiles"])
    img = np.empty((rows * MAP_CELL, cols * MAP_CELL, 3), dtype=np.float32)
    img[:] = np.array(BACKGROUND_COLOR) / 255
    for t in result["tiles"]:
        if t["exit"] is not None:
            y, x = t["row"] * MAP_CELL, t["col"] * MAP_CELL
            img[y:y + MAP_CELL, x:x + MAP_CELL] = np.array(EXIT_COLORS[t["exit"]]) / 255
    return torch.from_numpy(img).permute(2, 0, 1)


def cmd_route_slide(args) -> int:
    ckpt = Path(args.checkpoint)
    model, manifest = _load_model(ckpt, args.raw)
    files = _collect_tiles(Path(args.tiles))
    tiles = {k: load_png(f) for k, f in files.items()}
    if args.tile_size and any(t.shape[-2:] != (args.tile_size, args.tile_size) for t in tiles.values()):
        raise ShapeError(f"tiles are not {args.tile_size}x{args.tile_size}")
    result = route_slide(model, tiles, args.tissue_frac)
    out = Path(args.out)
    _write_json(out / "routing_map.json", {**result, **_provenance(manifest["train_config"], ckpt)})
    save_png(routing_map_image(result), out / "routing_map.png")
    savings = result["savings_vs_full"]
    print(f"{result['n_tissue']}/{result['n_tiles']} tissue tiles  histogram {result['exit_histogram']}  "
          f"savings {'n/a' if savings is None else f'{100 * savings:.1f}%'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="caflow", description="Adaptive-depth single-step flow-matching SR.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", help="flat key = value config file")
    t.add_argument("--data", help="directory of HR PNGs (overrides data_dir)")
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    def model_args(q):
        q.add_argument("checkpoint")
        q.add_argument("--raw", action="store_true", help="use raw weights instead of the EMA copy")

    i = sub.add_parser("infer", help="super-resolve LR PNGs")
    model_args(i)
    i.add_argument("input", help="LR PNG or directory of PNGs")
    i.add_argument("--out", required=True)
    i.add_argument("--exit", default="auto", choices=["auto", *map(str, range(N_EXITS))])
    i.add_argument("--steps", type=int, default=1)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="per-exit and routed metrics")
    model_args(e)
    e.add_argument("data", help="HR directory, or a directory holding HR/ and LR/")
    e.add_argument("--out", required=True, help="metrics JSON path")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("flops", help="per-exit cost table")
    f.add_argument("--config")
    f.add_argument("--n-blocks", type=int, choices=[8, 16])
    f.add_argument("--height", type=int, default=64, help="rearranged input height")
    f.add_argument("--width", type=int, default=64)
    f.add_argument("--json", help="also write the table as JSON")
    f.set_defaults(func=cmd_flops)

    r = sub.add_parser("route-slide", help="route tissue tiles and draw an exit map")
    model_args(r)
    r.add_argument("tiles", help="directory of r{row}_c{col}.png tiles")
    r.add_argument("--out", required=True)
    r.add_argument("--tissue-frac", type=float, default=0.1)
    r.add_argument("--tile-size", type=int, default=0)
    r.set_defaults(func=cmd_route_slide)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "steps", 1) < 1:
        print("error: --steps must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
