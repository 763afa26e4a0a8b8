"""In-memory samples and corpus loading."""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError
from .imageio import load_image, load_mask
from .synth import TargetRecord, load_manifest
from .vision import EIGHT_CONNECTED


@dataclass
class Sample:
    image: np.ndarray
    vein_gt: np.ndarray
    suitable_gt: np.ndarray
    targets: list = field(default_factory=list)
    sample_id: str = ""
    volunteer_id: str = ""


def attach_components(suitable_gt, targets):
    """Set each target's ``component`` to the suitable-mask label under its centroid."""
    labels, _ = ndimage.label(suitable_gt, structure=EIGHT_CONNECTED)
    h, w = labels.shape
    out = []
    for t in targets:
        if isinstance(t, dict):
            t = TargetRecord(t["cx"], t["cy"], t["phi_deg"], t.get("length_px", 0.0))
        x = min(max(int(round(t.cx)), 0), w - 1)
        y = min(max(int(round(t.cy)), 0), h - 1)
        out.append(TargetRecord(t.cx, t.cy, t.phi_deg, t.length_px, int(labels[y, x])))
    return out


def from_synthetic(s, sample_id="", volunteer_id=""):
    return Sample(s.image, s.vein_gt, s.suitable_gt, attach_components(s.suitable_gt, s.targets),
                  sample_id, volunteer_id)


def load_record(root, rec):
    root = Path(root)
    image = load_image(root / rec["image_path"])
    vein = load_mask(root / rec["vein_gt_path"])
    suitable = load_mask(root / rec["suitable_gt_path"])
    if not (image.shape == vein.shape == suitable.shape):
        raise DataError(f"{rec['sample_id']}: image and masks differ in size")
    return Sample(image, vein, suitable, attach_components(suitable, rec.get("targets", [])),
                  rec["sample_id"], rec["volunteer_id"])


def load_corpus(manifest, volunteers=None):
    """Load the samples of ``manifest`` (a path or a loaded manifest dict),
    optionally restricted to a set of volunteer ids."""
    if not isinstance(manifest, dict):
        manifest = load_manifest(manifest)
    root = manifest.get("root", ".")
    wanted = None if volunteers is None else set(volunteers)
    return [load_record(root, rec) for rec in manifest["samples"]
            if wanted is None or rec["volunteer_id"] in wanted]
