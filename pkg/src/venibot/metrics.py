"""Overlap and angle metrics."""

import numpy as np

from ._validation import check_mask
from .errors import ParameterError


def dsc(a, b):
    """Dice similarity coefficient; two empty masks score 1.0."""
    a = check_mask(a, "a")
    b = check_mask(b, "b")
    if a.shape != b.shape:
        raise ParameterError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def axis_angle_difference(phi_a, phi_b):
    """Distance between two undirected axes given in degrees, in [0, 90]."""
    d = abs(float(phi_a) - float(phi_b)) % 180.0
    return min(d, 180.0 - d)


def wrap_axis_angle(phi):
    """Wrap an axis angle in degrees into (-90, 90]."""
    w = (float(phi) + 90.0) % 180.0 - 90.0
    return 90.0 if w == -90.0 else w
