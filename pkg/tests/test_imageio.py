import numpy as np
import pytest

from venibot.errors import DataError
from venibot.imageio import load_image, load_mask, save_image, save_mask


@pytest.mark.parametrize("suffix", [".png", ".pgm"])
def test_image_roundtrip_is_quantised(tmp_path, suffix):
    img = np.random.default_rng(0).random((13, 21))
    save_image(tmp_path / f"a{suffix}", img)
    back = load_image(tmp_path / f"a{suffix}")
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


@pytest.mark.parametrize("suffix", [".png", ".pgm"])
def test_mask_roundtrip_exact(tmp_path, suffix):
    m = np.random.default_rng(1).random((9, 7)) > 0.5
    save_mask(tmp_path / f"m{suffix}", m)
    assert np.array_equal(load_mask(tmp_path / f"m{suffix}"), m)


def test_pgm_header(tmp_path):
    save_image(tmp_path / "a.pgm", np.zeros((2, 3)))
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n3 2\n255\n")


def test_corrupt_file(tmp_path):
    p = tmp_path / "bad.png"
    p.write_bytes(b"\x89PNG garbage")
    with pytest.raises(DataError):
        load_image(p)


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_image(tmp_path / "none.png")


def test_unknown_suffix(tmp_path):
    with pytest.raises(DataError):
        save_image(tmp_path / "a.jpg", np.zeros((2, 2)))
