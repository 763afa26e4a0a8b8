"""Suitable puncture areas and their signed angles from a vein mask.

Angle conventions
-----------------
``EllipseFit.gamma`` is the major-axis angle from the +x axis in pixel
coordinates (y pointing down), in [0, 180). The reference labelling tool
reports the longitudinal axis relative to the vertical instead; that
angle, ``gamma_ref = (gamma + 90) mod 180``, is what :func:`axis_theta`
maps to the continuous angle ``theta = |gamma_ref - 90|``. The signed angle
``phi`` in (-90, 90] is ``theta`` with the sign of the on-screen slope:
positive when the axis rises from left to right.
"""

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize as _sk_skeletonize
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_mask, check_positive
from .errors import DegenerateOrientationError, FitError
from .vision import EIGHT_CONNECTED, connected_components

# neighbour offsets (dy, dx) in Zhang-Suen order P2..P9 (clockwise from north)
RING = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))
SQRT2 = math.sqrt(2.0)


@dataclass
class SuitabilityRules:
    """Thresholds that make a vein section suitable for puncture."""

    min_length: float = 40.0       # px, measured inside the edge margin
    max_turning: float = 1.5       # mean |turn| in deg/px
    edge_margin: int = 8           # px
    min_diameter: float = 4.0      # px
    smoothing_window: int = 7      # px, tangent estimation
    prune_length: float = 4.0      # px, minimum spur length kept

    def __post_init__(self):
        for name in ("min_length", "max_turning", "min_diameter", "smoothing_window"):
            check_positive(getattr(self, name), name)
        check_positive(self.edge_margin, "edge_margin", strict=False)
        check_positive(self.prune_length, "prune_length", strict=False)


@dataclass
class Skeleton:
    image: np.ndarray              # bool, same shape as the source mask

    @property
    def pixels(self):
        """(N, 2) array of (x, y)."""
        ys, xs = np.nonzero(self.image)
        return np.column_stack([xs, ys])

    @property
    def degree_map(self):
        return neighbour_count(self.image) * self.image

    @property
    def degrees(self):
        return self.degree_map[self.image]


def _neighbours(img):
    p = np.pad(img, 1)
    h, w = img.shape
    return [p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w] for dy, dx in RING]


def neighbour_count(img):
    return sum(n.astype(np.int32) for n in _neighbours(img.astype(bool)))


@lru_cache(maxsize=None)
def _ring_components(code):
    """Number of 8-connected groups among the set bits of a neighbour ring."""
    pts = [RING[i] for i in range(8) if code >> i & 1]
    seen, groups = set(), 0
    for start in pts:
        if start in seen:
            continue
        groups += 1
        stack = [start]
        seen.add(start)
        while stack:
            cy, cx = stack.pop()
            for q in pts:
                if q not in seen and max(abs(q[0] - cy), abs(q[1] - cx)) == 1:
                    seen.add(q)
                    stack.append(q)
    return groups


def _ring_code(img, y, x):
    h, w = img.shape
    code = 0
    for i, (dy, dx) in enumerate(RING):
        yy, xx = y + dy, x + dx
        if 0 <= yy < h and 0 <= xx < w and img[yy, xx]:
            code |= 1 << i
    return code


def _remove_staircases(img):
    """Delete corner pixels left by Zhang-Suen whose removal keeps the
    local 8-connectivity, so that curves become strictly one pixel wide."""
    img = img.copy()
    changed = True
    while changed:
        changed = False
        for y, x in zip(*np.nonzero(img)):
            code = _ring_code(img, y, x)
            north, east, south, west = code & 1, code >> 2 & 1, code >> 4 & 1, code >> 6 & 1
            corner = (north and east) or (east and south) or (south and west) or (west and north)
            if corner and bin(code).count("1") >= 2 and _ring_components(code) == 1:
                img[y, x] = False
                changed = True
    return img


def zhang_suen(mask):
    """Zhang-Suen thinning (scikit-image's table-driven implementation)."""
    return _sk_skeletonize(check_mask(mask), method="zhang")


def skeletonize(mask):
    """One-pixel-wide, 8-connected skeleton (Zhang-Suen + staircase cleanup)."""
    return Skeleton(_remove_staircases(zhang_suen(mask)))


# -- branch tracing -----------------------------------------------------------

def _trace_branches(skel_img):
    """Split a skeleton at junction pixels (degree >= 3).

    Returns ``(branches, junction_labels)`` where each branch is a dict with
    an ordered ``(n, 2)`` array of (y, x) pixels and the ids of the junction
    clusters it touches at either end.
    """
    deg = neighbour_count(skel_img) * skel_img
    junction = skel_img & (deg >= 3)
    jlabels, _ = ndimage.label(junction, structure=EIGHT_CONNECTED)
    h, w = skel_img.shape
    visited = np.zeros_like(skel_img)

    def nbrs(y, x):
        for dy, dx in RING:
            yy, xx = y + dy, x + dx
            if 0 <= yy < h and 0 <= xx < w and skel_img[yy, xx]:
                yield yy, xx

    def walk(start, prev_j):
        path = [start]
        visited[start] = True
        ends = [prev_j] if prev_j else []
        cur = start
        while True:
            nxt = None
            for q in nbrs(*cur):
                if jlabels[q] and (len(path) > 1 or jlabels[q] != prev_j):
                    ends.append(int(jlabels[q]))
                    continue
                if not jlabels[q] and not visited[q]:
                    nxt = q
                    break
            if nxt is None:
                break
            visited[nxt] = True
            path.append(nxt)
            cur = nxt
        return {"pixels": np.array(path), "junctions": sorted(set(ends))}

    branches = []
    # branches leaving junctions
    for y, x in zip(*np.nonzero(junction)):
        for q in nbrs(y, x):
            if not jlabels[q] and not visited[q]:
                branches.append(walk(q, int(jlabels[y, x])))
    # free branches starting at endpoints, then closed loops
    for y, x in zip(*np.nonzero(skel_img & (deg <= 1) & ~junction)):
        if not visited[y, x]:
            branches.append(walk((y, x), 0))
    for y, x in zip(*np.nonzero(skel_img & ~junction)):
        if not visited[y, x]:
            branches.append(walk((y, x), 0))
    return branches, jlabels


def _chain_length(pix):
    if len(pix) < 2:
        return 0.0
    steps = np.abs(np.diff(pix, axis=0)).sum(axis=1)
    return float(np.sum(np.where(steps == 2, SQRT2, 1.0)))


def prune_spurs(skel_img, dist, min_length):
    """Iteratively drop end branches shorter than ``max(min_length, local
    vein diameter)`` that hang off a junction."""
    img = skel_img.copy()
    for _ in range(50):
        branches, jlabels = _trace_branches(img)
        removed = False
        for br in branches:
            pix = br["pixels"]
            if len(br["junctions"]) != 1 or len(pix) == 0:
                continue
            ends_free = neighbour_count(img)[tuple(pix[-1])] <= 1 or \
                neighbour_count(img)[tuple(pix[0])] <= 1
            if not ends_free:
                continue
            j = br["junctions"][0]
            local_diam = 2.0 * float(dist[jlabels == j].max())
            if _chain_length(pix) + 1.0 <= max(min_length, local_diam):
                img[pix[:, 0], pix[:, 1]] = False
                removed = True
        if not removed:
            break
        img = _remove_staircases(img)
    return img


def mean_turning(pix, window=7):
    """Mean absolute tangent change in deg/px along an ordered pixel chain.

    Tangents come from principal axes of ``2*window+1`` pixel neighbourhoods
    and are compared ``window`` pixels apart, which averages out the
    direction jitter of digital lines.
    """
    n = len(pix)
    if n < 2 * window + 2:
        window = max(1, (n - 2) // 3)
    if n < 2 * window + 2:
        return 0.0
    pts = pix[:, ::-1].astype(np.float64)            # (x, y)
    angles = []
    for i in range(n):
        lo, hi = max(0, i - window), min(n, i + window + 1)
        seg = pts[lo:hi] - pts[lo:hi].mean(axis=0)
        cov = seg.T @ seg
        evals, evecs = np.linalg.eigh(cov)
        v = evecs[:, 1]
        chord = pts[hi - 1] - pts[lo]
        if v @ chord < 0:
            v = -v
        angles.append(math.atan2(v[1], v[0]))
    angles = np.unwrap(np.array(angles))
    steps = np.where(np.abs(np.diff(pts, axis=0)).sum(axis=1) == 2, SQRT2, 1.0)
    arc = np.concatenate([[0.0], np.cumsum(steps)])
    idx = np.arange(window, n - window - 1)
    j = np.minimum(idx + window, n - 1)
    dtheta = np.abs(angles[j] - angles[idx])
    darc = arc[j] - arc[idx]
    ok = darc > 0
    if not ok.any():
        return 0.0
    return float(np.degrees(np.mean(dtheta[ok] / darc[ok])))


@dataclass
class SegmentStats:
    component: int
    length: float
    diameter: float
    turning: float
    has_bifurcation: bool
    touches_edge: bool
    interior_length: float = 0.0
    pixels: np.ndarray = field(default=None, repr=False)       # (n, 2) (y, x)
    junctions: tuple = ()

    def is_suitable(self, rules):
        return (not self.has_bifurcation
                and self.interior_length >= rules.min_length
                and self.turning <= rules.max_turning
                and self.diameter >= rules.min_diameter)


def _interior(shape, margin):
    h, w = shape
    box = np.zeros(shape, dtype=bool)
    if h > 2 * margin and w > 2 * margin:
        box[margin:h - margin, margin:w - margin] = True
    return box


def analyze_segments(mask, skel, edge_margin=8, rules=None):
    """Branch statistics of a skeleton, split at junction pixels."""
    rules = rules or SuitabilityRules(edge_margin=edge_margin)
    mask = check_mask(mask)
    dist = ndimage.distance_transform_edt(mask)
    img = prune_spurs(skel.image & mask, dist, rules.prune_length)
    skel.pruned = img
    branches, _ = _trace_branches(img)
    comps = connected_components(mask).labels
    inside = _interior(mask.shape, edge_margin)
    h, w = mask.shape
    stats = []
    for br in branches:
        pix = br["pixels"]
        if len(pix) == 0:
            continue
        ys, xs = pix[:, 0], pix[:, 1]
        interior_pix = pix[inside[ys, xs]]
        touches = bool(xs.min() < edge_margin or ys.min() < edge_margin
                       or xs.max() > w - 1 - edge_margin or ys.max() > h - 1 - edge_margin)
        stats.append(SegmentStats(
            component=int(comps[ys[0], xs[0]]),
            length=_chain_length(pix),
            diameter=float(2.0 * dist[ys, xs].mean()),
            turning=mean_turning(pix, rules.smoothing_window),
            has_bifurcation=bool(br["junctions"]),
            touches_edge=touches,
            interior_length=_chain_length(interior_pix) if len(interior_pix) else 0.0,
            pixels=pix,
            junctions=tuple(br["junctions"]),
        ))
    return stats


def erase_unsuitable(mask, stats, rules=None, skel=None):
    """Keep only mask pixels owned by suitable branches, trimmed to the edge margin.

    Pixels are owned by their nearest skeleton pixel within the same
    connected component; pixels within one local diameter of a junction are
    always erased.
    """
    rules = rules or SuitabilityRules()
    mask = check_mask(mask)
    if not stats:
        return np.zeros_like(mask)
    owner = np.zeros(mask.shape, dtype=np.int32)       # 0 = junction / none
    suitable = np.zeros(len(stats) + 1, dtype=bool)
    for i, s in enumerate(stats, start=1):
        owner[s.pixels[:, 0], s.pixels[:, 1]] = i
        suitable[i] = s.is_suitable(rules)
    skeleton_img = owner > 0
    if skel is not None:
        skeleton_img |= getattr(skel, "pruned", skel.image) & mask
    _, (iy, ix) = ndimage.distance_transform_edt(~skeleton_img, return_indices=True)
    labels = connected_components(mask).labels
    nearest_owner = owner[iy, ix]
    same_comp = labels[iy, ix] == labels
    keep = mask & same_comp & suitable[nearest_owner]
    keep &= _interior(mask.shape, rules.edge_margin)
    if skel is not None:
        junction = skeleton_img & (neighbour_count(skeleton_img) >= 3)
        if junction.any():
            dist = ndimage.distance_transform_edt(mask)
            to_junction = ndimage.distance_transform_edt(~junction)
            local_diam = 2.0 * dist[junction].max()
            keep &= to_junction > local_diam
    return keep


# -- ellipse fit and angles -----------------------------------------------------

@dataclass
class EllipseFit:
    center: tuple      # (x, y)
    a: float           # major half-axis
    b: float           # minor half-axis
    gamma: float       # degrees in [0, 180), from +x, pixel frame (y down)

    @property
    def direction(self):
        g = math.radians(self.gamma)
        return math.cos(g), math.sin(g)


def fit_points(xs, ys, min_pixels=5, iso_tol=0.01):
    """Second-moment ellipse of a pixel set (each pixel a unit square)."""
    if len(xs) < min_pixels:
        raise FitError(f"component has {len(xs)} pixels, need >= {min_pixels}")
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    cx, cy = xs.mean(), ys.mean()
    dx, dy = xs - cx, ys - cy
    mu20 = np.mean(dx * dx) + 1.0 / 12.0
    mu02 = np.mean(dy * dy) + 1.0 / 12.0
    mu11 = np.mean(dx * dy)
    half_tr = 0.5 * (mu20 + mu02)
    root = math.hypot(0.5 * (mu20 - mu02), mu11)
    lmax, lmin = half_tr + root, half_tr - root
    a, b = 2.0 * math.sqrt(lmax), 2.0 * math.sqrt(max(lmin, 1e-12))
    if a - b <= iso_tol * a:
        raise DegenerateOrientationError(f"a={a:.3f} and b={b:.3f} are within {iso_tol:.0%}")
    gamma = math.degrees(0.5 * math.atan2(2.0 * mu11, mu20 - mu02)) % 180.0
    return EllipseFit((float(cx), float(cy)), a, b, gamma)


def fit_component_angle(mask, component, labels=None):
    """Moment-based ellipse of connected component ``component`` of ``mask``."""
    if labels is None:
        labels = connected_components(mask).labels
    ys, xs = np.nonzero(labels == component)
    return fit_points(xs, ys)


def axis_theta(gamma_ref):
    """Continuous angle from the vertical-referenced axis angle."""
    return abs(gamma_ref - 90.0)


def reference_gamma(gamma):
    """Convert a +x-referenced axis angle to the vertical-referenced one."""
    return (gamma + 90.0) % 180.0


@dataclass
class PunctureTarget:
    component: int
    centroid: tuple     # (x, y) pixel, inside the component
    theta: float        # [0, 90]
    phi: float          # (-90, 90]
    gamma_ref: float    # vertical-referenced axis angle in [0, 180)
    fit: EllipseFit = None
    length: float = 0.0

    def to_record(self):
        return {"cx": round(float(self.centroid[0]), 6), "cy": round(float(self.centroid[1]), 6),
                "phi_deg": round(float(self.phi), 6), "length_px": round(float(self.length), 6)}


def sign_from_endpoints(a_pt, b_pt):
    """+1 if the endpoint with larger x lies higher on screen (smaller y)."""
    right, left = (a_pt, b_pt) if a_pt[0] >= b_pt[0] else (b_pt, a_pt)
    return -1.0 if right[1] > left[1] else 1.0


def anchor_point(xs, ys):
    """Component centroid, snapped to the nearest member pixel if it falls outside."""
    cx, cy = float(np.mean(xs)), float(np.mean(ys))
    pts = set(zip(np.asarray(xs).tolist(), np.asarray(ys).tolist()))
    if (int(round(cx)), int(round(cy))) in pts:
        return cx, cy
    i = int(np.argmin((np.asarray(xs) - cx) ** 2 + (np.asarray(ys) - cy) ** 2))
    return float(xs[i]), float(ys[i])


def continuous_angle(fit, mask=None, component=None, labels=None):
    """Continuous angle ``theta`` and signed angle ``phi`` of a fitted component."""
    gamma_ref = reference_gamma(fit.gamma)
    theta = axis_theta(gamma_ref)
    ux, uy = fit.direction
    cx, cy = fit.center
    a_pt = (cx + fit.a * ux, cy + fit.a * uy)
    b_pt = (cx - fit.a * ux, cy - fit.a * uy)
    phi = theta if theta >= 90.0 else sign_from_endpoints(a_pt, b_pt) * theta
    centroid, length = fit.center, 2.0 * fit.a
    if mask is not None and component is not None:
        if labels is None:
            labels = connected_components(mask).labels
        ys, xs = np.nonzero(labels == component)
        centroid = anchor_point(xs, ys)
    return PunctureTarget(int(component or 0), centroid, theta, phi, gamma_ref, fit, length)


def targets_from_components(area_mask):
    """Fit every connected component of ``area_mask``; returns (targets, n_failed)."""
    comps = connected_components(area_mask)
    targets, failed = [], 0
    for s in comps.stats:
        try:
            fit = fit_component_angle(area_mask, s.label, comps.labels)
        except FitError:
            failed += 1
            continue
        targets.append(continuous_angle(fit, area_mask, s.label, comps.labels))
    return targets, failed


def suitable_areas(mask, rules=None):
    """Full chain up to the suitable-area mask: skeleton, analysis, erasure."""
    rules = rules or SuitabilityRules()
    mask = check_mask(mask)
    skel = skeletonize(mask)
    stats = analyze_segments(mask, skel, rules.edge_margin, rules)
    return erase_unsuitable(mask, stats, rules, skel)


def extract_targets(mask, rules=None, return_mask=False):
    """Suitable puncture targets of a vein mask.

    Components that cannot be fitted are skipped; a warning reports how many.
    """
    rules = rules or SuitabilityRules()
    area = suitable_areas(mask, rules)
    area = ndimage.binary_opening(area, structure=np.ones((2, 2), bool)) & area
    targets, failed = targets_from_components(area)
    # discard fragments shorter than a suitable section can be
    keep = [t for t in targets if t.length >= 0.5 * rules.min_length]
    if failed:
        warnings.warn(f"{failed} component(s) skipped: fit failed", RuntimeWarning, stacklevel=2)
    if return_mask:
        kept = np.isin(connected_components(area).labels, [t.component for t in keep])
        return keep, kept
    return keep


class SuitableAreaExtractor(TransformerMixin, BaseEstimator):
    """Transformer from vein masks to suitable-puncture-area masks."""

    def __init__(self, min_length=40.0, max_turning=1.5, edge_margin=8, min_diameter=4.0,
                 smoothing_window=7, prune_length=4.0):
        self.min_length = min_length
        self.max_turning = max_turning
        self.edge_margin = edge_margin
        self.min_diameter = min_diameter
        self.smoothing_window = smoothing_window
        self.prune_length = prune_length

    def _rules(self):
        return SuitabilityRules(**self.get_params())

    def fit(self, X, y=None):
        self.rules_ = self._rules()
        return self

    def transform(self, X):
        rules = getattr(self, "rules_", None) or self._rules()
        return np.stack([extract_targets(m, rules, return_mask=True)[1] for m in _masks(X)])

    def predict_targets(self, X):
        rules = getattr(self, "rules_", None) or self._rules()
        return [extract_targets(m, rules) for m in _masks(X)]


def _masks(X):
    arr = np.asarray(X, dtype=bool)
    return arr[None] if arr.ndim == 2 else arr
