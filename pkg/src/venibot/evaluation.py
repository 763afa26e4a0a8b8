"""Overlap and angle metrics, volunteer-level folds and benchmark tables."""

import csv
import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import load_corpus
from .errors import DataError, ParameterError
from .metrics import axis_angle_difference, dsc
from .models.arch import ArchConfig, Topology
from .models.training import TrainConfig, decode, predict_maps, train_step1, train_step2
from .synth import load_manifest
from .vision import connected_components

MISS_PENALTY = 90.0
ORACLE = "oracle"

__all__ = ["dsc", "angle_error", "make_folds", "run_benchmark", "FoldSplit", "Fold",
           "MetricsReport", "BenchmarkConfig"]


def angle_error(pred, gt, pred_mask, gt_mask):
    """Axis error for every ground-truth target.

    Each ground-truth component is matched to the predicted component with
    the largest pixel overlap; a component without any overlap, or whose
    match carries no angle, scores the full 90 degrees.
    """
    gt_labels = connected_components(gt_mask).labels
    pred_labels = connected_components(pred_mask).labels
    pred_phi = {t.component: t.phi for t in pred}
    errors = []
    for t in gt:
        comp = getattr(t, "component", 0)
        phi = getattr(t, "phi_deg", None)
        phi = t.phi if phi is None else phi
        if not comp:
            continue
        hits = pred_labels[(gt_labels == comp) & (pred_labels > 0)]
        if hits.size == 0:
            errors.append(MISS_PENALTY)
            continue
        best = int(np.bincount(hits).argmax())
        errors.append(axis_angle_difference(pred_phi[best], phi) if best in pred_phi
                      else MISS_PENALTY)
    return errors


@dataclass
class Fold:
    index: int
    train: list
    val: list
    test: list


@dataclass
class FoldSplit:
    seed: int
    groups: list
    folds: list

    def check(self):
        for f in self.folds:
            roles = [set(f.train), set(f.val), set(f.test)]
            if (roles[0] & roles[1]) or (roles[0] & roles[2]) or (roles[1] & roles[2]):
                raise DataError(f"fold {f.index}: a volunteer appears in two roles")
        return self


def _volunteers(manifest):
    if isinstance(manifest, (list, tuple)):
        return sorted(set(manifest))
    if not isinstance(manifest, dict):
        manifest = load_manifest(manifest)
    return sorted({r["volunteer_id"] for r in manifest["samples"]})


def make_folds(manifest, seed=0, n_folds=5):
    """Shuffle volunteers and cut them into ``n_folds`` groups; fold ``i``
    tests on group ``i``, validates on group ``i + 1`` and trains on the rest."""
    vols = _volunteers(manifest)
    if len(vols) < n_folds:
        raise ParameterError(f"need at least {n_folds} volunteers, got {len(vols)}")
    order = np.random.default_rng(seed).permutation(len(vols))
    groups = [sorted(vols[j] for j in part) for part in np.array_split(order, n_folds)]
    folds = []
    for i in range(n_folds):
        v = (i + 1) % n_folds
        train = sorted(x for k, g in enumerate(groups) if k not in (i, v) for x in g)
        folds.append(Fold(i, train, list(groups[v]), list(groups[i])))
    return FoldSplit(seed, groups, folds).check()


# -- reports -----------------------------------------------------------------------

@dataclass
class MetricsReport:
    """Per-fold sample values; cells and averages are computed from them."""

    n_folds: int = 5
    dsc: dict = field(default_factory=dict)      # row -> [per-fold list of values]
    angle: dict = field(default_factory=dict)

    def add(self, table, row, fold, values):
        rows = getattr(self, table)
        rows.setdefault(row, [[] for _ in range(self.n_folds)])[fold].extend(values)

    @staticmethod
    def cell(values, scale=1.0):
        if not values:
            return "n/a"
        v = np.asarray(values, dtype=np.float64) * scale
        return f"{v.mean():.2f}±{v.std():.2f}"

    def rows(self, table):
        scale = 100.0 if table == "dsc" else 1.0
        out = []
        for name, per_fold in getattr(self, table).items():
            pooled = [x for f in per_fold for x in f]
            out.append([name] + [self.cell(f, scale) for f in per_fold] + [self.cell(pooled, scale)])
        return out

    @property
    def header(self):
        return [f"Fold {i}" for i in range(self.n_folds)] + ["Average"]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["table", "method"] + self.header)
        for table, label in (("dsc", "DSC (%)"), ("angle", "Angle error (deg)")):
            for row in self.rows(table):
                w.writerow([label] + row)
        return buf.getvalue()

    def to_text(self):
        blocks = []
        for table, title in (("dsc", "Mean and std DSC (%)"),
                             ("angle", "Mean and std angle error (deg)")):
            rows = [["Method"] + self.header] + self.rows(table)
            widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
            lines = [title]
            for k, r in enumerate(rows):
                lines.append("  ".join(c.ljust(widths[i]) if i == 0 else c.rjust(widths[i])
                                       for i, c in enumerate(r)).rstrip())
                if k == 0:
                    lines.append("-" * len(lines[-1]))
            blocks.append("\n".join(lines))
        return "\n\n".join(blocks) + "\n"

    def write(self, directory, stem="report"):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{stem}.csv").write_text(self.to_csv())
        (d / f"{stem}.txt").write_text(self.to_text())
        return d / f"{stem}.csv", d / f"{stem}.txt"


@dataclass
class BenchmarkConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    step1: TrainConfig = field(default_factory=TrainConfig)
    step2: TrainConfig = field(default_factory=TrainConfig)
    fold_seed: int = 0
    n_folds: int = 5
    threshold: float = 0.5
    folds: tuple = None              # subset of fold indices to run (None = all)


def method_name(m):
    return ORACLE if m == ORACLE else Topology(m).label


def evaluate_predictions(samples, predictions):
    """Per-sample area DSC and per-target angle errors.

    ``predictions`` holds ``(mask, targets)`` pairs aligned with ``samples``.
    """
    dscs, errs = [], []
    for s, (mask, targets) in zip(samples, predictions):
        dscs.append(dsc(mask, s.suitable_gt))
        errs.extend(angle_error(targets, s.targets, mask, s.suitable_gt))
    return dscs, errs


def oracle_predictions(samples):
    out = []
    for s in samples:
        targets = [_Pred(t.component, t.phi_deg) for t in s.targets]
        out.append((s.suitable_gt.copy(), targets))
    return out


@dataclass
class _Pred:
    component: int
    phi: float


def run_benchmark(manifest, methods, cfg=None, log=None):
    """Train and test every method on every fold; returns a :class:`MetricsReport`."""
    cfg = cfg or BenchmarkConfig()
    if not isinstance(manifest, dict):
        manifest = load_manifest(manifest)
    split = make_folds(manifest, cfg.fold_seed, cfg.n_folds)
    methods = [m if m == ORACLE else Topology(m) for m in methods]
    report = MetricsReport(cfg.n_folds)
    # fixed row order whatever the fold subset
    needs_step1 = any(m != ORACLE and m.dual_in for m in methods)
    if needs_step1:
        report.dsc["Segmentation (step 1)"] = [[] for _ in range(cfg.n_folds)]
    for m in methods:
        report.dsc[method_name(m)] = [[] for _ in range(cfg.n_folds)]
        report.angle[method_name(m)] = [[] for _ in range(cfg.n_folds)]
    fold_ids = range(cfg.n_folds) if cfg.folds is None else cfg.folds
    for i in fold_ids:
        fold = split.folds[i]
        test = load_corpus(manifest, fold.test)
        train = val = None
        step1 = None
        for m in methods:
            if m == ORACLE:
                preds = oracle_predictions(test)
            else:
                if train is None:
                    train = load_corpus(manifest, fold.train)
                    val = load_corpus(manifest, fold.val)
                _check_leakage(fold, train, val, test)
                if m.dual_in and step1 is None:
                    step1 = train_step1(train, cfg.step1, cfg.arch, val=val, log=log)
                    seg = predict_segmentation(step1, test)
                    report.add("dsc", "Segmentation (step 1)", i,
                               [dsc(p, s.vein_gt) for p, s in zip(seg, test)])
                pipe = train_step2(step1 if m.dual_in else None, train, cfg.step2, m,
                                   cfg.arch, val=val, log=log)
                preds = []
                for area, ang, _ in predict_maps(pipe, [s.image for s in test]):
                    preds.append(decode(area, ang, cfg.threshold))
            d, e = evaluate_predictions(test, preds)
            report.add("dsc", method_name(m), i, d)
            report.add("angle", method_name(m), i, e)
            if log:
                log(f"fold {i} {method_name(m)}: DSC {np.mean(d):.4f}, "
                    f"angle {np.mean(e) if e else float('nan'):.2f}")
    return report


def predict_segmentation(step1_pipeline, samples, threshold=0.5):
    from .augment import resize_array
    g = step1_pipeline.step1.graph
    size = tuple(step1_pipeline.step1.arch.input_size)
    out = []
    for s in samples:
        x = resize_array(s.image, size)[None, None].astype(g.dtype)
        g.eval()
        prob = g.forward([x], record=False)[0][0, 0]
        out.append(resize_array(prob.astype(np.float64), s.image.shape) >= threshold)
    return out


def _check_leakage(fold, train, val, test):
    roles = [{s.volunteer_id for s in part} for part in (train, val, test)]
    if (roles[0] & roles[1]) or (roles[0] & roles[2]) or (roles[1] & roles[2]):
        raise DataError(f"fold {fold.index}: volunteer leakage between train/val/test")


def mean_angle_error(errors):
    if not errors:
        warnings.warn("no ground-truth targets to score", RuntimeWarning, stacklevel=2)
        return float("nan")
    return float(np.mean(errors))
