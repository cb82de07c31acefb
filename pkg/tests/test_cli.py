import json

import numpy as np
import pytest
import torch

from caflow import checkpoint
from caflow.cli import (
    BACKGROUND_COLOR,
    EXIT_COLORS,
    MAP_CELL,
    ConfigError,
    config_hash,
    main,
    parse_config,
    route_slide,
)
from caflow.costmodel import exit_costs
from caflow.data import synthetic_dataset
from caflow.imaging import bicubic_resize, load_png, save_png
from caflow.training import TrainConfig, Trainer

TRAIN_CFG = """
# tiny run
epochs = 2
warmup_epochs = 1
batch = 4
crop = 32
n_blocks = 8
checkpoint_every = 0
t0_mixing = false
"""


def _force_router(model, exit):
    with torch.no_grad():
        model.classifier.layers[-1].weight.zero_()
        bias = torch.zeros(4)
        bias[exit] = 10.0
        model.classifier.layers[-1].bias.copy_(bias)


@pytest.fixture
def fresh_ckpt(tmp_path):
    trainer = Trainer(TrainConfig(n_blocks=8, crop=32, epochs=2, warmup_epochs=1), synthetic_dataset(1, 32))
    return trainer.save(tmp_path / "fresh.ckpt")


def _ckpt_routed_to(tmp_path, exit):
    trainer = Trainer(TrainConfig(n_blocks=8, crop=32, epochs=2, warmup_epochs=1), synthetic_dataset(1, 32))
    _force_router(trainer.model, exit)
    _force_router(trainer.ema.model, exit)
    return trainer.save(tmp_path / f"exit{exit}.ckpt")


def test_parse_config_types_and_errors():
    cfg = parse_config("lr = 0.001\nt0_mixing = no\nexit = 2  # forced\nsteps = 3\n", env={})
    assert cfg.train.lr == 0.001 and cfg.train.t0_mixing is False and cfg.exit == "2" and cfg.steps == 3
    for bad in ("bogus = 1", "lr = fast", "t0_mixing = maybe", "exit = 7", "steps = 0", "just words"):
        with pytest.raises(ConfigError):
            parse_config(bad, env={})
    assert parse_config("seed = 4", env={"CAFLOW_SEED": "11"}).train.seed == 11
    assert parse_config("seed = 4", env={}).train.seed == 4
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})


def test_train_missing_data_dir_writes_nothing(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(out), "--quiet"]) == 2
    assert "error" in capsys.readouterr().err
    assert not out.exists()


def test_train_records_flags_and_replays(tmp_path):
    data = tmp_path / "hr"
    data.mkdir()
    for i, img in enumerate(synthetic_dataset(5, 64, seed=2)):
        save_png(img, data / f"{i}.png")
    (tmp_path / "c.cfg").write_text(TRAIN_CFG)
    lines = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["train", "--config", str(tmp_path / "c.cfg"), "--data", str(data), "--out", str(out),
                     "--quiet"]) == 0
        lines.append((out / "train_log.jsonl").read_text().splitlines())
        assert not (out / ".train_log.jsonl.partial").exists()
    assert len(lines[0]) == 2 and lines[0][0] == lines[1][0]
    manifest, _ = checkpoint.load(tmp_path / "a" / "final.ckpt")
    assert manifest["train_config"]["t0_mixing"] is False
    run = json.loads((tmp_path / "a" / "run.json").read_text())
    assert run["checkpoint_hash"] == checkpoint.file_hash(tmp_path / "a" / "final.ckpt")
    assert run["config_hash"] == config_hash(run["config"])


def test_infer_fresh_checkpoint_is_bicubic(tmp_path, fresh_ckpt):
    lr = torch.rand(3, 12, 16, generator=torch.Generator().manual_seed(0))
    save_png(lr, tmp_path / "in.png")
    lr = load_png(tmp_path / "in.png")
    assert main(["infer", str(fresh_ckpt), str(tmp_path / "in.png"), "--out", str(tmp_path / "o1")]) == 0
    assert main(["infer", str(fresh_ckpt), str(tmp_path / "in.png"), "--out", str(tmp_path / "o2"),
                 "--steps", "1"]) == 0
    out = load_png(tmp_path / "o1" / "in.png")
    assert (out - bicubic_resize(lr, 48, 64).clamp(0, 1)).abs().max() <= 0.5 / 255 + 1e-6
    assert (tmp_path / "o1" / "in.png").read_bytes() == (tmp_path / "o2" / "in.png").read_bytes()
    routing = json.loads((tmp_path / "o1" / "routing.json").read_text())
    assert routing["checkpoint_hash"] == checkpoint.file_hash(fresh_ckpt) and len(routing["images"]) == 1


def test_infer_forced_exit_matches_auto(tmp_path):
    ckpt = _ckpt_routed_to(tmp_path, 3)
    save_png(torch.rand(3, 8, 8), tmp_path / "x.png")
    main(["infer", str(ckpt), str(tmp_path / "x.png"), "--out", str(tmp_path / "auto")])
    main(["infer", str(ckpt), str(tmp_path / "x.png"), "--out", str(tmp_path / "e3"), "--exit", "3"])
    assert json.loads((tmp_path / "auto" / "routing.json").read_text())["images"][0]["exit"] == 3
    assert (tmp_path / "auto" / "x.png").read_bytes() == (tmp_path / "e3" / "x.png").read_bytes()
    assert main(["infer", str(ckpt), str(tmp_path / "x.png"), "--out", str(tmp_path / "bad"), "--steps", "0"]) == 2


def test_eval_paired_and_on_the_fly(tmp_path, fresh_ckpt):
    for sub in ("HR", "LR"):
        (tmp_path / "set" / sub).mkdir(parents=True)
    for i, hr in enumerate(synthetic_dataset(2, 32, seed=3)):
        save_png(hr, tmp_path / "set" / "HR" / f"{i}.png")
        save_png(bicubic_resize(hr, 8, 8).clamp(0, 1), tmp_path / "set" / "LR" / f"{i}.png")
    assert main(["eval", str(fresh_ckpt), str(tmp_path / "set"), "--out", str(tmp_path / "m.json")]) == 0
    assert main(["eval", str(fresh_ckpt), str(tmp_path / "set" / "HR"), "--out", str(tmp_path / "m2.json")]) == 0
    report = json.loads((tmp_path / "m.json").read_text())
    assert report["checkpoint_hash"] == checkpoint.file_hash(fresh_ckpt)
    imgs = report["images"]
    assert abs(report["summary"]["exit_psnr"][0] - np.mean([r["exits"][0]["psnr"] for r in imgs])) < 1e-9
    for r in imgs:
        assert abs(r["exits"][3]["psnr"] - r["bicubic"]["psnr"]) < 1e-6
    table = exit_costs(checkpoint.build_models(fresh_ckpt)[0].config, 8, 8)
    assert report["expected_flops"] == table.per_exit[0] and report["exit_histogram"] == [2, 0, 0, 0]


def test_eval_degenerate_set_reports_null(tmp_path, fresh_ckpt):
    for sub in ("HR", "LR"):
        (tmp_path / sub).mkdir()
    lr = torch.full((3, 8, 8), 0.4)
    save_png(lr, tmp_path / "LR" / "a.png")
    save_png(bicubic_resize(load_png(tmp_path / "LR" / "a.png"), 32, 32), tmp_path / "HR" / "a.png")
    assert main(["eval", str(fresh_ckpt), str(tmp_path), "--out", str(tmp_path / "m.json")]) == 0
    img = json.loads((tmp_path / "m.json").read_text())["images"][0]
    assert img["psnr_infinite"] and img["bicubic"]["psnr"] is None


def test_flops_table(tmp_path, capsys):
    assert main(["flops", "--json", str(tmp_path / "f.json")]) == 0
    printed = capsys.readouterr().out
    for value in ("3.10", "6.1", "9.46", "13.47"):
        assert value in printed
    got = json.loads((tmp_path / "f.json").read_text())
    assert "config_hash" in got
    main(["flops", "--n-blocks", "8", "--json", str(tmp_path / "g.json")])
    small = json.loads((tmp_path / "g.json").read_text())
    assert small["per_exit_gflops"] == sorted(small["per_exit_gflops"])
    assert small["per_exit_gflops"][3] < got["per_exit_gflops"][3]
    assert main(["flops", "--height", "60"]) == 2


def _tiles(tmp_path, images):
    d = tmp_path / "tiles"
    d.mkdir(exist_ok=True)
    for (r, c), img in images.items():
        save_png(img, d / f"r{r}_c{c}.png")
    return d


def test_route_slide_all_white(tmp_path, fresh_ckpt):
    d = _tiles(tmp_path, {(r, c): torch.ones(3, 32, 32) for r in range(2) for c in range(2)})
    assert main(["route-slide", str(fresh_ckpt), str(d), "--out", str(tmp_path / "o")]) == 0
    result = json.loads((tmp_path / "o" / "routing_map.json").read_text())
    assert result["n_tissue"] == 0 and result["exit_histogram"] == [0, 0, 0, 0]
    assert result["mean_flops"] is None and result["savings_vs_full"] is None
    png = load_png(tmp_path / "o" / "routing_map.png")
    assert png.shape == (3, 2 * MAP_CELL, 2 * MAP_CELL)
    assert torch.all((png * 255).round() == torch.tensor(BACKGROUND_COLOR).view(3, 1, 1))


def test_route_slide_single_tissue_tile(tmp_path):
    ckpt = _ckpt_routed_to(tmp_path, 2)
    dark = torch.full((3, 32, 32), 0.2)
    dark[:, ::4] = 0.3
    d = _tiles(tmp_path, {(0, 0): torch.ones(3, 32, 32), (0, 1): dark, (1, 0): torch.ones(3, 32, 32)})
    assert main(["route-slide", str(ckpt), str(d), "--out", str(tmp_path / "o"), "--tile-size", "32"]) == 0
    result = json.loads((tmp_path / "o" / "routing_map.json").read_text())
    table = exit_costs(checkpoint.build_models(ckpt)[0].config, 32, 32)
    assert result["exit_histogram"] == [0, 0, 1, 0] and result["mean_flops"] == table.per_exit[2]
    assert abs(result["savings_vs_full"] - (1 - table.per_exit[2] / table.per_exit[3])) < 1e-12
    png = (load_png(tmp_path / "o" / "routing_map.png") * 255).round()
    assert torch.all(png[:, 0, MAP_CELL] == torch.tensor(EXIT_COLORS[2], dtype=png.dtype))
    assert torch.all(png[:, MAP_CELL, MAP_CELL] == torch.tensor(BACKGROUND_COLOR, dtype=png.dtype))
    assert [t["tissue"] for t in result["tiles"]] == [False, True, False]
    assert main(["route-slide", str(ckpt), str(d), "--out", str(tmp_path / "p"), "--tile-size", "64"]) == 2


def test_route_slide_rejects_mixed_sizes(fresh_ckpt):
    model = checkpoint.build_models(fresh_ckpt)[1]
    with pytest.raises(ValueError):
        route_slide(model, {(0, 0): torch.rand(3, 32, 32), (0, 1): torch.rand(3, 16, 32)})
