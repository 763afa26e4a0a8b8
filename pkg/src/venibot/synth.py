"""Procedural NIR-like forearm images with exact ground truth.

Veins are grown as constant-curvature arcs (a trunk, optionally splitting
into two children at its end), stamped as dark tubes on a bright skin
background. Ground truth is computed before any noise layer is added.
Contrast levels are stand-ins, not measurements of a real device.
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from ._validation import check_positive
from .errors import DataError, GenerationError, ParameterError
from .geometry import SuitabilityRules, anchor_point
from .metrics import wrap_axis_angle
from .vision import EIGHT_CONNECTED

STEP = 0.25          # centerline sampling, px


def _check_range(rng_, name, lo_bound=0.0, strict=False):
    lo, hi = float(rng_[0]), float(rng_[1])
    if hi < lo or lo < lo_bound or (strict and lo <= lo_bound):
        raise ParameterError(f"{name} must be a non-empty range above {lo_bound}, got {rng_}")
    return lo, hi


@dataclass
class VeinTreeSpec:
    """Generator settings. Ranges are inclusive ``(lo, hi)`` pairs."""

    seed: int = 0
    canvas: tuple = (128, 208)               # (H, W)
    trunks: tuple = (2, 3)
    branch_prob: float = 0.3                 # split probability at a branch end
    max_depth: int = 2
    curvature_range: tuple = (0.0, 2.5)      # |deg/px|
    diameter_range: tuple = (5.0, 9.0)
    length_range: tuple = (70.0, 220.0)      # trunk
    child_length_range: tuple = (25.0, 80.0)
    angle_range: tuple = (-90.0, 90.0)       # trunk direction on screen
    max_total_turn: float = 150.0            # deg per branch, avoids loops
    spacing: float = 4.0                     # px kept free between trunks
    background: float = 0.75
    vein_core: float = 0.25
    hair_count: int = 5
    blemish_count: int = 3
    vignette: float = 0.15
    noise_sigma: float = 0.02
    rules: SuitabilityRules = field(default_factory=SuitabilityRules)
    dead_band_length: float = 6.0            # px around rules.min_length
    dead_band_turning: float = 0.25          # deg/px around rules.max_turning
    max_retries: int = 40

    def __post_init__(self):
        if isinstance(self.rules, dict):
            self.rules = SuitabilityRules(**self.rules)
        h, w = (int(v) for v in self.canvas)
        if h < 8 or w < 8:
            raise ParameterError("canvas must be at least 8x8")
        self.canvas = (h, w)
        t = self.trunks if isinstance(self.trunks, (tuple, list)) else (self.trunks, self.trunks)
        self.trunks = (int(t[0]), int(t[1]))
        if self.trunks[0] < 1 or self.trunks[1] < self.trunks[0]:
            raise ParameterError(f"trunks must be a range of positive counts, got {t}")
        if not 0.0 <= self.branch_prob <= 1.0:
            raise ParameterError("branch_prob must lie in [0, 1]")
        self.curvature_range = _check_range(self.curvature_range, "curvature_range")
        self.diameter_range = _check_range(self.diameter_range, "diameter_range", strict=True)
        self.length_range = _check_range(self.length_range, "length_range", strict=True)
        self.child_length_range = _check_range(self.child_length_range, "child_length_range",
                                               strict=True)
        self.angle_range = _check_range(self.angle_range, "angle_range", lo_bound=-90.0)
        for name in ("hair_count", "blemish_count", "max_depth"):
            if int(getattr(self, name)) < 0:
                raise ParameterError(f"{name} must be >= 0")
        for name in ("vignette", "noise_sigma", "spacing", "dead_band_length",
                     "dead_band_turning"):
            check_positive(getattr(self, name), name, strict=False)
        if not 0.0 <= self.vein_core < self.background <= 1.0:
            raise ParameterError("need 0 <= vein_core < background <= 1")
        check_positive(self.max_retries, "max_retries")

    def noise_free(self):
        return replace(self, hair_count=0, blemish_count=0, vignette=0.0, noise_sigma=0.0)

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class Branch:
    points: np.ndarray        # (n, 2) centerline samples (x, y), STEP apart
    diameter: float
    curvature: float          # signed deg/px (screen sense is irrelevant here)
    trunk: int
    depth: int
    bifurcating: bool = False
    suitable: bool = False
    runs: int = 0
    nodes: list = field(default_factory=list)     # split points touching this branch
    interior_length: float = 0.0
    phi: float = 0.0


@dataclass
class TargetRecord:
    cx: float
    cy: float
    phi_deg: float
    length_px: float
    component: int = 0

    def to_record(self):
        return {"cx": round(self.cx, 6), "cy": round(self.cy, 6),
                "phi_deg": round(self.phi_deg, 6), "length_px": round(self.length_px, 6)}


@dataclass
class SyntheticSample:
    image: np.ndarray
    vein_gt: np.ndarray
    suitable_gt: np.ndarray
    targets: list
    layers: dict = field(default_factory=dict)     # noise masks ("hair", "blemish")
    branches: list = field(default_factory=list, repr=False)


def _arc(start, heading_deg, curvature, length):
    """Centerline of a constant-curvature arc; heading in screen degrees."""
    n = max(2, int(round(length / STEP)) + 1)
    s = np.linspace(0.0, length, n)
    head = np.radians(heading_deg + curvature * s)
    # screen angle -> pixel frame: y grows downwards
    dx, dy = np.cos(head), -np.sin(head)
    xs = start[0] + np.concatenate([[0.0], np.cumsum(0.5 * (dx[1:] + dx[:-1]) * np.diff(s))])
    ys = start[1] + np.concatenate([[0.0], np.cumsum(0.5 * (dy[1:] + dy[:-1]) * np.diff(s))])
    return np.column_stack([xs, ys]), heading_deg + curvature * length


def _interior_runs(points, shape, margin):
    h, w = shape
    x, y = points[:, 0], points[:, 1]
    inside = (x >= margin) & (x <= w - 1 - margin) & (y >= margin) & (y <= h - 1 - margin)
    labels, k = ndimage.label(inside)
    return inside, k


def _principal_phi(points):
    c = points - points.mean(axis=0)
    evals, evecs = np.linalg.eigh(c.T @ c)
    vx, vy = evecs[:, 1]
    return wrap_axis_angle(math.degrees(math.atan2(-vy, vx)))


class _Generator:
    def __init__(self, spec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        self.h, self.w = spec.canvas
        yy, xx = np.mgrid[0:self.h, 0:self.w]
        self.pix = np.column_stack([xx.ravel() + 0.0, yy.ravel() + 0.0])

    def uniform(self, lo_hi):
        return float(self.rng.uniform(*lo_hi))

    def curvature(self, length):
        k = self.uniform(self.spec.curvature_range)
        k = min(k, self.spec.max_total_turn / length)
        return k if self.rng.random() < 0.5 else -k

    def grow_trunk(self, tid):
        sp, m = self.spec, self.spec.rules.edge_margin
        length = self.uniform(sp.length_range)
        heading = self.uniform(sp.angle_range)
        kappa = self.curvature(length)
        diam = self.uniform(sp.diameter_range)
        centre = (self.uniform((m, self.w - 1 - m)), self.uniform((m, self.h - 1 - m)))
        # start half a length back so the arc is centred on ``centre``
        back, _ = _arc(centre, heading + 180.0, -kappa, length / 2.0)
        start = back[-1]
        pts, end_heading = _arc(start, heading, kappa, length)
        root = Branch(pts, diam, kappa, tid, 0)
        branches = [root]
        self._split(root, end_heading, branches)
        return branches

    def _split(self, parent, heading, out):
        sp = self.spec
        if parent.depth >= sp.max_depth or self.rng.random() >= sp.branch_prob:
            return
        node = parent.points[-1]
        parent.nodes.append(node)
        spread = self.uniform((20.0, 45.0))
        for sign in (1.0, -1.0):
            length = self.uniform(sp.child_length_range)
            kappa = self.curvature(length)
            pts, end = _arc(parent.points[-1], heading + sign * spread, kappa, length)
            child = Branch(pts, max(parent.diameter * 0.8, 1.0), kappa, parent.trunk,
                           parent.depth + 1, nodes=[node])
            out.append(child)
            self._split(child, end, out)

    def render_distance(self, branches):
        """Distance to the nearest centerline, the owning branch, and the
        per-branch distance fields (``inf`` beyond the tube neighbourhood)."""
        pad = 1.5 + self.spec.spacing
        per = []
        for b in branches:
            d, _ = cKDTree(b.points).query(self.pix, distance_upper_bound=b.diameter / 2.0 + pad)
            per.append(d.reshape(self.h, self.w))
        stack = np.stack(per)
        own = np.argmin(stack, axis=0)
        dist = np.take_along_axis(stack, own[None], axis=0)[0]
        own[~np.isfinite(dist)] = -1
        return dist, own, per

    def border_distance(self, x, y):
        """Signed distance to the canvas border, positive inside."""
        return min(x, self.w - 1 - x, y, self.h - 1 - y)

    def classify(self, b):
        r = self.spec.rules
        # a split outside the field of view leaves no visible junction
        b.bifurcating = any(self.border_distance(x, y) > 0 for x, y in b.nodes)
        inside, runs = _interior_runs(b.points, (self.h, self.w), r.edge_margin)
        b.runs = runs
        b.interior_length = float(inside.sum() - 1) * STEP if inside.any() else 0.0
        b.suitable = (not b.bifurcating and runs == 1
                      and b.interior_length >= r.min_length
                      and abs(b.curvature) <= r.max_turning
                      and b.diameter >= r.min_diameter)

    def ambiguous(self, branches, per):
        """True when the tree sits too close to a suitability decision
        boundary for the ground truth to be unambiguous; the tree is redrawn."""
        r, sp = self.spec.rules, self.spec
        for b in branches:
            d = b.diameter
            for x, y in b.nodes:
                if abs(self.border_distance(x, y)) < 2.0 * d:
                    return True
            if b.depth > 0 and self.border_distance(*b.points[0]) > 0:
                sd = np.array([self.border_distance(x, y) for x, y in b.points])
                visible = np.argmax(sd < 0) if (sd < 0).any() else len(sd)
                if visible * STEP < 4.0 * d + r.edge_margin:
                    return True
            if b.bifurcating:
                continue
            if b.runs > 1 or abs(b.interior_length - r.min_length) < sp.dead_band_length \
                    or abs(abs(b.curvature) - r.max_turning) < sp.dead_band_turning:
                return True
        # branches of one tree may meet only at their shared split point
        yy, xx = np.mgrid[0:self.h, 0:self.w]
        dmax = max(b.diameter for b in branches)
        for i in range(len(branches)):
            for j in range(i + 1, len(branches)):
                bi, bj = branches[i], branches[j]
                near = ((per[i] <= bi.diameter / 2.0 + sp.spacing)
                        & (per[j] <= bj.diameter / 2.0 + sp.spacing))
                if not near.any():
                    continue
                for nx, ny in bi.nodes:
                    if any(np.allclose((nx, ny), q) for q in bj.nodes):
                        near &= np.hypot(xx - nx, yy - ny) > 3.0 * dmax
                if near.any():
                    return True
        return False

    def sample(self):
        sp = self.spec
        count = int(self.rng.integers(sp.trunks[0], sp.trunks[1] + 1))
        occupied = np.zeros((self.h, self.w), dtype=bool)
        all_branches, fields_ = [], []
        for tid in range(count):
            for _ in range(sp.max_retries):
                branches = self.grow_trunk(tid)
                dist, own, per = self.render_distance(branches)
                radius = np.array([b.diameter / 2.0 for b in branches])
                body = (own >= 0) & (dist <= radius[np.maximum(own, 0)])
                if body.sum() < 20:
                    continue
                if (body & occupied).any():
                    continue
                for b in branches:
                    self.classify(b)
                if self.ambiguous(branches, per):
                    continue
                occupied |= ndimage.binary_dilation(
                    body, structure=EIGHT_CONNECTED, iterations=max(1, int(math.ceil(sp.spacing))))
                all_branches.extend(branches)
                fields_.append((dist, own, radius, len(all_branches) - len(branches)))
                break
        if not all_branches:
            raise GenerationError(f"no vein could be placed after {sp.max_retries} tries")
        return self.compose(all_branches, fields_)

    def compose(self, branches, fields_):
        sp, r = self.spec, self.spec.rules
        vein = np.zeros((self.h, self.w), dtype=bool)
        owner = np.full((self.h, self.w), -1)
        depth = np.zeros((self.h, self.w))
        for dist, own, radius, offset in fields_:
            rad = np.where(own >= 0, radius[np.maximum(own, 0)], 0.0)
            body = (own >= 0) & (dist <= rad)
            vein |= body
            owner[body] = own[body] + offset
            soft = (own >= 0) & (dist < rad + 1.0)
            prof = np.zeros_like(depth)
            prof[soft] = np.cos(0.5 * np.pi * dist[soft] / (rad[soft] + 1.0))
            np.maximum(depth, prof, out=depth)

        interior = np.zeros_like(vein)
        m = r.edge_margin
        interior[m:self.h - m, m:self.w - m] = True
        suitable = np.zeros_like(vein)
        targets = []
        for i, b in enumerate(branches):
            if not b.suitable:
                continue
            comp = (owner == i) & interior
            if comp.sum() < 5:
                b.suitable = False
                continue
            suitable |= comp
        labels, _ = ndimage.label(suitable, structure=EIGHT_CONNECTED)
        for i, b in enumerate(branches):
            if not b.suitable:
                continue
            comp = (owner == i) & suitable
            ys, xs = np.nonzero(comp)
            b.phi = _principal_phi(np.column_stack([xs, ys]).astype(np.float64))
            cx, cy = anchor_point(xs, ys)
            targets.append(TargetRecord(cx, cy, b.phi, b.interior_length,
                                        int(labels[int(round(cy)), int(round(cx))])))

        img = np.full((self.h, self.w), sp.background)
        if sp.vignette > 0:
            yy, xx = np.mgrid[0:self.h, 0:self.w]
            rr = ((xx - (self.w - 1) / 2) / (self.w / 2)) ** 2 + ((yy - (self.h - 1) / 2) / (self.h / 2)) ** 2
            img *= 1.0 - sp.vignette * rr / 2.0
        img = img - (img - sp.vein_core) * depth
        layers = self.noise(img)
        img = np.clip(img, 0.0, 1.0)
        return SyntheticSample(img, vein, suitable, targets, layers, branches)

    def noise(self, img):
        sp = self.spec
        hair = np.zeros((self.h, self.w), dtype=bool)
        for _ in range(int(sp.hair_count)):
            start = (self.uniform((0, self.w - 1)), self.uniform((0, self.h - 1)))
            pts, _ = _arc(start, self.uniform((-180.0, 180.0)), self.uniform((-1.0, 1.0)),
                          self.uniform((20.0, 50.0)))
            xi, yi = np.round(pts[:, 0]).astype(int), np.round(pts[:, 1]).astype(int)
            ok = (xi >= 0) & (xi < self.w) & (yi >= 0) & (yi < self.h)
            hair[yi[ok], xi[ok]] = True
        img[hair] -= 0.2
        blemish = np.zeros_like(hair)
        yy, xx = np.mgrid[0:self.h, 0:self.w]
        for _ in range(int(sp.blemish_count)):
            cx, cy = self.uniform((0, self.w - 1)), self.uniform((0, self.h - 1))
            rad, amp = self.uniform((2.0, 4.0)), self.uniform((0.1, 0.25))
            d = np.hypot(xx - cx, yy - cy)
            blemish |= d <= rad
            img -= amp * np.clip(1.0 - (d / (rad + 1.0)) ** 2, 0.0, None)
        if sp.noise_sigma > 0:
            img += self.rng.normal(0.0, sp.noise_sigma, img.shape)
        return {"hair": hair, "blemish": blemish}


def generate_sample(spec=None):
    """One synthetic sample; deterministic in ``spec`` (including its seed)."""
    return _Generator(spec or VeinTreeSpec()).sample()


def derive_seed(*parts):
    """Stable 63-bit seed from any printable parts."""
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def volunteer_spec(spec, master_seed, volunteer):
    """Per-volunteer spec: skin tone and vein calibre vary between people."""
    rng = np.random.default_rng(derive_seed(master_seed, "volunteer", volunteer))
    tone = float(np.clip(spec.background + rng.uniform(-0.05, 0.05), spec.vein_core + 0.2, 1.0))
    scale = float(rng.uniform(0.9, 1.1))
    lo, hi = spec.diameter_range
    return replace(spec, background=tone, diameter_range=(lo * scale, hi * scale))


def generate_corpus(spec, volunteers, images_per_volunteer, out_dir, master_seed=None,
                    fmt="png"):
    """Write a corpus and its ``manifest.json`` under ``out_dir``; returns the manifest."""
    from .imageio import save_image, save_mask

    volunteers, per = int(volunteers), int(images_per_volunteer)
    if volunteers < 1 or per < 1:
        raise ParameterError("volunteers and images_per_volunteer must be >= 1")
    master_seed = spec.seed if master_seed is None else master_seed
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    samples = []
    for v in range(volunteers):
        vid = f"v{v:03d}"
        vspec = volunteer_spec(spec, master_seed, vid)
        for k in range(per):
            sid = f"{vid}_{k:03d}"
            s = generate_sample(replace(vspec, seed=derive_seed(master_seed, vid, k)))
            rec = {
                "sample_id": sid,
                "volunteer_id": vid,
                "image_path": f"images/{sid}.{fmt}",
                "vein_gt_path": f"masks/{sid}_vein.{fmt}",
                "suitable_gt_path": f"masks/{sid}_suitable.{fmt}",
                "targets": [t.to_record() for t in s.targets],
            }
            save_image(out / rec["image_path"], s.image)
            save_mask(out / rec["vein_gt_path"], s.vein_gt)
            save_mask(out / rec["suitable_gt_path"], s.suitable_gt)
            samples.append(rec)
    samples.sort(key=lambda r: r["sample_id"])
    manifest = {"master_seed": master_seed, "canvas": list(spec.canvas), "samples": samples}
    (out / "manifest.json").write_text(dumps_manifest(manifest))
    return manifest


def dumps_manifest(manifest):
    return json.dumps(manifest, indent=2, sort_keys=True) + "\n"


def load_manifest(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(data, dict) or not isinstance(data.get("samples"), list):
        raise DataError(f"{path}: manifest has no sample list")
    data["root"] = str(path.parent)
    return data
