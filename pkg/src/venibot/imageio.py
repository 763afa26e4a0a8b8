"""8-bit single-channel image files (PNG or binary PGM)."""

from pathlib import Path

import numpy as np
from PIL import Image

from ._validation import check_image, check_mask
from .errors import DataError


def to_uint8(img):
    return np.round(check_image(img) * 255.0).astype(np.uint8)


def save_image(path, img):
    """Write a gray image; format follows the suffix (.png or .pgm)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _save(path, to_uint8(img))


def save_mask(path, mask):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _save(path, check_mask(mask).astype(np.uint8) * 255)


def _save(path, arr):
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        h, w = arr.shape
        path.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes())
    elif suffix == ".png":
        Image.fromarray(arr, mode="L").save(path, format="PNG")
    else:
        raise DataError(f"unsupported image format {suffix!r} (use .png or .pgm)")


def _load_u8(path):
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "1", "P", "I", "I;16"):
                im = im.convert("L")
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim != 2:
        raise DataError(f"{path}: expected a single-channel image")
    if arr.dtype != np.uint8:
        if arr.dtype == bool:
            arr = arr.astype(np.uint8) * 255
        elif arr.max() > 255:
            raise DataError(f"{path}: only 8-bit images are supported")
        else:
            arr = arr.astype(np.uint8)
    return arr


def load_image(path):
    return _load_u8(path).astype(np.float64) / 255.0


def load_mask(path):
    return _load_u8(path) >= 128
