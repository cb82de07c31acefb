import numpy as np
import pytest
import torch

from caflow.data import color_jitter, degrade, load_folder, random_crop, synthetic_dataset
from caflow.imaging import bicubic_resize, save_png
from caflow.numerics import ContractError


def test_synthetic_dataset_is_seeded_and_in_range():
    a, b = synthetic_dataset(3, 64, seed=5), synthetic_dataset(3, 64, seed=5)
    assert all(torch.equal(x, y) for x, y in zip(a, b))
    assert not torch.equal(a[0], synthetic_dataset(1, 64, seed=6)[0])
    for img in a:
        assert img.shape == (3, 64, 64) and img.min() >= 0 and img.max() <= 1


def test_degrade_is_bicubic_downscale():
    hr = torch.rand(2, 3, 16, 24)
    assert torch.equal(degrade(hr, 4), bicubic_resize(hr, 4, 6))
    with pytest.raises(ContractError):
        degrade(torch.rand(3, 15, 16), 4)


def test_random_crop_is_a_dihedral_view_of_a_window():
    img = torch.arange(3 * 10 * 12, dtype=torch.float32).view(3, 10, 12)
    rng = np.random.default_rng(0)
    for _ in range(20):
        patch = random_crop(img, 6, rng)
        assert patch.shape == (3, 6, 6)
        matched = False
        for y in range(5):
            for x in range(7):
                window = img[:, y:y + 6, x:x + 6]
                for flip in (False, True):
                    w = window.flip(-1) if flip else window
                    if any(torch.equal(torch.rot90(w, k, dims=(-2, -1)), patch) for k in range(4)):
                        matched = True
        assert matched
    with pytest.raises(ContractError):
        random_crop(img, 11, rng)


def test_color_jitter_stays_in_range_and_is_seeded():
    img = torch.rand(3, 8, 8)
    a = color_jitter(img, np.random.default_rng(1))
    b = color_jitter(img, np.random.default_rng(1))
    assert torch.equal(a, b) and a.min() >= 0 and a.max() <= 1
    assert torch.equal(color_jitter(img, np.random.default_rng(1), 0, 0, 0), img.clamp(0, 1))


def test_load_folder(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_folder(tmp_path / "missing")
    with pytest.raises(ContractError):
        load_folder(tmp_path)
    imgs = synthetic_dataset(2, 16, seed=0)
    for i, img in enumerate(imgs):
        save_png(img, tmp_path / f"{1 - i}.png")
    loaded = load_folder(tmp_path)
    assert len(loaded) == 2
    assert (loaded[1] - imgs[0]).abs().max() <= 0.5 / 255 + 1e-6
