"""Input validation helpers in the spirit of ``sklearn.utils.validation``.

Images are plain ``numpy`` arrays: a gray image is a 2-D float array with
values in ``[0, 1]`` (rows = y, columns = x) and a mask is a 2-D bool array.
"""

import numpy as np

from .errors import ParameterError


def check_image(img, name="img", copy=False):
    """Return ``img`` as a 2-D float64 array with values in [0, 1].

    Raises
    ------
    ParameterError
        If the array is not 2-D, is empty, contains NaN, or leaves [0, 1].
    """
    arr = np.array(img, dtype=np.float64, copy=copy) if copy else np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ParameterError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ParameterError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ParameterError(f"{name} intensities must lie in [0, 1]")
    return arr


def check_mask(mask, name="mask", shape=None):
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ParameterError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.dtype != bool:
        if not np.all((arr == 0) | (arr == 1)):
            raise ParameterError(f"{name} must be boolean or {{0, 1}} valued")
        arr = arr.astype(bool)
    if shape is not None and arr.shape != tuple(shape):
        raise ParameterError(f"{name} shape {arr.shape} does not match {tuple(shape)}")
    return arr


def check_same_shape(a, b, names=("a", "b")):
    if np.shape(a) != np.shape(b):
        raise ParameterError(
            f"{names[0]} shape {np.shape(a)} does not match {names[1]} shape {np.shape(b)}"
        )


def check_positive(value, name, strict=True):
    value = float(value)
    if not np.isfinite(value) or (value <= 0 if strict else value < 0):
        raise ParameterError(f"{name} must be {'> 0' if strict else '>= 0'}, got {value}")
    return value


def check_open_unit(value, name):
    value = float(value)
    if not 0.0 < value < 1.0:
        raise ParameterError(f"{name} must lie in (0, 1), got {value}")
    return value


def check_random_state(seed):
    """Turn ``seed`` into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
