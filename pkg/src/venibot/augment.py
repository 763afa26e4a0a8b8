"""Random flips, resized crops, rotations and intensity jitter.

Image, vein mask and suitable mask share one geometric warp (bilinear for
the image, nearest for masks) and target angles are updated analytically.
Ops are applied as flip, then crop/resize, then rotation, then intensity.
Angles are on-screen: counter-clockwise positive, y up.
"""

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from ._validation import check_image, check_random_state
from .errors import GenerationError, ParameterError
from .geometry import anchor_point
from .metrics import wrap_axis_angle
from .synth import TargetRecord
from .vision import EIGHT_CONNECTED


@dataclass
class AugmentPolicy:
    p_vflip: float = 0.5
    p_hflip: float = 0.5
    scale: tuple = (0.2, 1.0)            # crop area fraction
    ratio: tuple = (0.5, 2.0)            # crop aspect (w/h relative to the image's)
    output_size: tuple = (128, 208)      # (H, W)
    rotation: tuple = (-45.0, 45.0)      # degrees
    brightness: tuple = (0.8, 1.2)
    contrast: tuple = (0.8, 1.2)
    saturation: tuple = (0.8, 1.2)       # no-op on single-channel images
    seed: int = 0
    max_tries: int = 10

    def __post_init__(self):
        for name in ("p_vflip", "p_hflip"):
            if not 0.0 <= float(getattr(self, name)) <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1]")
        for name in ("scale", "ratio", "rotation", "brightness", "contrast", "saturation"):
            lo, hi = (float(v) for v in getattr(self, name))
            if hi < lo:
                raise ParameterError(f"{name} range is empty: {(lo, hi)}")
            setattr(self, name, (lo, hi))
        if not 0.0 < self.scale[0] <= self.scale[1] <= 1.0:
            raise ParameterError("scale must lie within (0, 1]")
        if self.ratio[0] <= 0:
            raise ParameterError("ratio must be positive")
        self.output_size = tuple(int(v) for v in self.output_size)
        if min(self.output_size) < 2:
            raise ParameterError("output_size must be at least 2x2")
        self._rng = check_random_state(self.seed)

    def reseed(self, seed=None):
        self._rng = check_random_state(self.seed if seed is None else seed)

    def to_dict(self):
        d = {k: v for k, v in asdict(self).items()}
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def identity(cls, **kw):
        base = dict(p_vflip=0.0, p_hflip=0.0, scale=(1.0, 1.0), ratio=(1.0, 1.0),
                    rotation=(0.0, 0.0), brightness=(1.0, 1.0), contrast=(1.0, 1.0),
                    saturation=(1.0, 1.0))
        base.update(kw)
        return cls(**base)


@dataclass
class TransformParams:
    hflip: bool = False
    vflip: bool = False
    crop: tuple = None          # (x0, y0, w, h) in the flipped source, None = full image
    angle: float = 0.0
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0


@dataclass
class AugmentedSample:
    image: np.ndarray
    vein_gt: np.ndarray
    suitable_gt: np.ndarray
    targets: list
    suitable_labels: np.ndarray = None     # warped component ids of the source
    params: TransformParams = field(default=None)


def draw(policy, shape, rng=None):
    """Sample one transform for a source image of ``shape`` (H, W)."""
    rng = policy._rng if rng is None else check_random_state(rng)
    h, w = shape
    hflip = bool(rng.random() < policy.p_hflip)
    vflip = bool(rng.random() < policy.p_vflip)
    for _ in range(policy.max_tries):
        s = rng.uniform(*policy.scale)
        r = math.exp(rng.uniform(math.log(policy.ratio[0]), math.log(policy.ratio[1])))
        # aspect is relative to the source, so (1, 1) keeps the full frame
        cw = min(w, w * math.sqrt(s * r))
        ch = min(h, h * math.sqrt(s / r))
        if cw >= 2 and ch >= 2:
            x0 = rng.uniform(0, w - cw)
            y0 = rng.uniform(0, h - ch)
            break
    else:
        raise GenerationError(f"no valid crop window after {policy.max_tries} tries")
    return TransformParams(
        hflip=hflip, vflip=vflip, crop=(x0, y0, cw, ch),
        angle=float(rng.uniform(*policy.rotation)),
        brightness=float(rng.uniform(*policy.brightness)),
        contrast=float(rng.uniform(*policy.contrast)),
        saturation=float(rng.uniform(*policy.saturation)),
    )


def _forward_matrix(params, shape, out_size):
    """3x3 homogeneous map from source pixel (x, y, 1) to output pixel."""
    h, w = shape
    oh, ow = out_size
    m = np.eye(3)
    if params.hflip:
        m = np.array([[-1, 0, w - 1], [0, 1, 0], [0, 0, 1]], float) @ m
    if params.vflip:
        m = np.array([[1, 0, 0], [0, -1, h - 1], [0, 0, 1]], float) @ m
    x0, y0, cw, ch = params.crop if params.crop is not None else (0.0, 0.0, w, h)
    sx, sy = ow / cw, oh / ch
    # pixel centres: x_out + 0.5 = (x_in + 0.5 - x0) * sx
    m = np.array([[sx, 0, (0.5 - x0) * sx - 0.5], [0, sy, (0.5 - y0) * sy - 0.5],
                  [0, 0, 1]]) @ m
    a = math.radians(params.angle)
    cx, cy = (ow - 1) / 2.0, (oh - 1) / 2.0
    c, s = math.cos(a), math.sin(a)
    # counter-clockwise on screen is (x, y) -> (x cos + y sin, -x sin + y cos) in pixel frame
    rot = np.array([[c, s, 0], [-s, c, 0], [0, 0, 1]])
    shift = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1]])
    unshift = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]])
    return shift @ rot @ unshift @ m, (sx, sy)


def _warp(arr, inv, out_size, order, mode="constant"):
    # affine_transform works in (row, col) = (y, x) order
    mat = np.array([[inv[1, 1], inv[1, 0]], [inv[0, 1], inv[0, 0]]])
    off = np.array([inv[1, 2], inv[0, 2]])
    return ndimage.affine_transform(arr, mat, offset=off, output_shape=out_size,
                                    order=order, mode=mode, cval=0)


def transform_phi(phi, params, scales=(1.0, 1.0)):
    """Analytic angle update for a drawn transform."""
    if params.hflip:
        phi = -phi
    if params.vflip:
        phi = -phi
    sx, sy = scales
    r = math.radians(phi)
    phi = math.degrees(math.atan2(sy * math.sin(r), sx * math.cos(r)))
    return wrap_axis_angle(phi + params.angle)


def transport_phi(xs, ys, linear):
    """Axis angle of a pixel set after the linear map ``linear`` (pixel frame).

    The set's second-moment matrix is carried through the map exactly,
    ``S' = A S A^T``; for a thin section this reduces to
    :func:`transform_phi`, for thick or curved sections it stays exact.
    """
    if len(xs) < 5:
        return None
    pts = np.column_stack([xs, ys]).astype(np.float64)
    cov = np.cov(pts.T, bias=True) + np.eye(2) / 12.0
    cov = linear @ cov @ linear.T
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] - evals[0] <= 1e-9 * evals[1]:
        return None
    vx, vy = evecs[:, 1]
    return wrap_axis_angle(math.degrees(math.atan2(-vy, vx)))


def intensity_jitter(img, brightness=1.0, contrast=1.0, saturation=1.0):
    """Brightness multiply, contrast about the mean, then clamp; saturation
    has nothing to act on in a single-channel image."""
    img = check_image(img)
    for name, g in (("brightness", brightness), ("contrast", contrast),
                    ("saturation", saturation)):
        if not 0.8 - 1e-12 <= g <= 1.2 + 1e-12:
            raise ParameterError(f"{name} gain {g} outside [0.8, 1.2]")
    out = img * brightness
    mean = out.mean()
    out = (out - mean) * contrast + mean
    return np.clip(out, 0.0, 1.0)


def _source_labels(sample):
    labels, _ = ndimage.label(sample.suitable_gt, structure=EIGHT_CONNECTED)
    return labels


def apply_params(params, sample, output_size=None):
    """Apply an explicit transform to a sample (anything with ``image``,
    ``vein_gt``, ``suitable_gt`` and ``targets``)."""
    shape = sample.image.shape
    out_size = tuple(output_size or shape)
    fwd, scales = _forward_matrix(params, shape, out_size)
    inv = np.linalg.inv(fwd)
    identity = np.allclose(fwd, np.eye(3)) and out_size == shape
    if identity:
        img = sample.image.astype(np.float64).copy()
        vein, suit = sample.vein_gt.copy(), sample.suitable_gt.copy()
        labels = _source_labels(sample)
    else:
        img = np.clip(_warp(sample.image.astype(np.float64), inv, out_size, 1), 0.0, 1.0)
        vein = _warp(sample.vein_gt.astype(np.uint8), inv, out_size, 0).astype(bool)
        labels = _warp(_source_labels(sample), inv, out_size, 0)
        suit = (labels > 0) & vein
        labels = np.where(suit, labels, 0)
    if (params.brightness, params.contrast, params.saturation) != (1.0, 1.0, 1.0):
        img = intensity_jitter(img, params.brightness, params.contrast, params.saturation)

    src_labels = _source_labels(sample)
    oh, ow = out_size
    targets = []
    for t in sample.targets:
        if not isinstance(t, TargetRecord):
            t = TargetRecord(**{k: t[k] for k in ("cx", "cy", "phi_deg", "length_px")})
        comp = int(src_labels[int(round(t.cy)), int(round(t.cx))])
        ys, xs = np.nonzero(src_labels == comp) if comp else (np.array([]), np.array([]))
        px, py, _ = fwd @ np.vstack([xs, ys, np.ones(len(xs))])
        seen = (px >= -0.5) & (px < ow - 0.5) & (py >= -0.5) & (py < oh - 0.5)
        if seen.sum() < 5:
            continue        # section cropped or rotated out of view
        frac = seen.mean()
        if frac < 1.0:
            cx, cy = anchor_point(xs[seen], ys[seen])
        else:
            cx, cy = t.cx, t.cy
        x, y, _ = fwd @ np.array([cx, cy, 1.0])
        phi = transport_phi(xs[seen], ys[seen], fwd[:2, :2])
        if phi is None:
            continue
        r = math.radians(phi)
        stretch = math.hypot(scales[0] * math.cos(r), scales[1] * math.sin(r))
        targets.append(TargetRecord(float(x), float(y), phi, t.length_px * frac * stretch, comp))
    return AugmentedSample(img, vein, suit, targets, labels, params)


def apply(policy, sample, rng=None):
    """Draw a transform from ``policy`` and apply it."""
    params = draw(policy, sample.image.shape, rng)
    return apply_params(params, sample, policy.output_size)


def resize(sample, size):
    """Plain resize of a sample to ``size`` (H, W); no randomness."""
    return apply_params(TransformParams(), sample, size)


def angle_map(labels, targets):
    """Per-pixel normalised angle ``(phi + 90) / 180`` over target components."""
    out = np.zeros(labels.shape)
    for t in targets:
        if t.component:
            out[labels == t.component] = (t.phi_deg + 90.0) / 180.0
    return out


def replace_policy(policy, **kw):
    return replace(policy, **kw)


def resize_array(arr, size, order=1):
    """Resize a 2-D array to ``size`` (H, W), pixel-centre aligned."""
    arr = np.asarray(arr)
    if arr.shape == tuple(size):
        return arr.copy()
    fwd, _ = _forward_matrix(TransformParams(), arr.shape, tuple(size))
    dtype = arr.dtype
    out = _warp(arr.astype(np.float64), np.linalg.inv(fwd), tuple(size), order, mode="nearest")
    return out > 0.5 if dtype == bool else out.astype(dtype)
