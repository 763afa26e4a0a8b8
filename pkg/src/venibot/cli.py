"""Command-line entry point: ``venibot {gen,label,train,eval,infer,plan}``.

Exit codes: 0 success, 2 configuration error, 3 data error (including a
missing upstream artifact), 4 workspace violation, 1 anything else.
"""

import argparse
import csv
import json
import math
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from filelock import FileLock
from PIL import Image, ImageDraw

from .config import load_config
from .data import load_corpus
from .errors import (ConfigError, DataError, GenerationError, ParameterError, StateError,
                     VeniBotError, WorkspaceError)
from .evaluation import BenchmarkConfig, make_folds, run_benchmark
from .imageio import load_image, load_mask, save_mask, to_uint8
from .metrics import dsc
from .models.arch import Topology
from .models.training import (TrainedPipeline, infer, load_checkpoint, load_pipeline,
                              param_hash, save_checkpoint, train_step1, train_step2,
                              write_history)
from .planner import dumps_events, plan, simulate_sequence
from .synth import generate_corpus, load_manifest
from .vision import label_vein

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_WORKSPACE = 0, 1, 2, 3, 4
LOCK_NAME = ".venibot.lock"


@contextmanager
def locked(directory):
    """Hold the output directory's lockfile while writing into it."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with FileLock(str(d / LOCK_NAME), timeout=600):
        yield d


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


# -- gen -------------------------------------------------------------------------

def cmd_gen(args):
    cfg = load_config(args.config)
    corpus = cfg.corpus_section()
    out = Path(args.out) if args.out else cfg.manifest_path.parent
    volunteers = corpus.volunteers if args.volunteers is None else args.volunteers
    per = corpus.per_volunteer if args.per_volunteer is None else args.per_volunteer
    seed = corpus.seed if args.seed is None else args.seed
    with locked(out):
        manifest = generate_corpus(cfg.synth_spec(), volunteers, per, out, master_seed=seed,
                                   fmt=args.format or corpus.format)
    print(f"wrote {len(manifest['samples'])} samples to {out / 'manifest.json'}")
    return EXIT_OK


# -- label -----------------------------------------------------------------------

def cmd_label(args):
    cfg = load_config(args.config)
    params = cfg.label_params()
    manifest = load_manifest(args.input)
    root = Path(manifest["root"])
    failed, rows = 0, []
    with locked(args.out) as out:
        for rec in manifest["samples"]:
            sid = rec.get("sample_id", "?")
            try:
                image = load_image(root / rec["image_path"])
                mask = label_vein(image, params)
                save_mask(out / f"{sid}_label.png", mask)
                score = ""
                if rec.get("vein_gt_path"):
                    gt = load_mask(root / rec["vein_gt_path"])
                    score = f"{dsc(mask, gt):.6f}"
                rows.append((sid, score))
            except (DataError, KeyError, ValueError) as exc:
                failed += 1
                _err(f"{sid}: {exc}")
        with open(out / "labels.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "dsc"])
            w.writerows(rows)
    scores = [float(s) for _, s in rows if s]
    if scores:
        print(f"labelled {len(rows)} images, mean DSC {np.mean(scores):.4f}")
    else:
        print(f"labelled {len(rows)} images")
    return EXIT_DATA if failed else EXIT_OK


# -- train -----------------------------------------------------------------------

def _fold(cfg, manifest, k):
    ev = cfg.eval_section()
    if not 0 <= k < ev.n_folds:
        raise ConfigError(f"--fold must lie in [0, {ev.n_folds - 1}], got {k}")
    return make_folds(manifest, ev.fold_seed, ev.n_folds).folds[k]


def _override(tc, args):
    if getattr(args, "iterations", None) is not None:
        tc.iterations = args.iterations
    if getattr(args, "seed", None) is not None:
        tc.seed = args.seed
    tc.__post_init__()
    return tc


def cmd_train(args):
    cfg = load_config(args.config)
    topology = Topology(args.topology or cfg.topology)
    manifest_path = Path(args.manifest) if args.manifest else cfg.manifest_path
    out_root = Path(args.out) if args.out else cfg.output_path
    manifest = load_manifest(manifest_path)
    fold = _fold(cfg, manifest, args.fold)
    arch = cfg.arch_config()
    tc = _override(cfg.train_config(args.step), args)
    fold_dir = out_root / f"fold{fold.index}"
    step1_path = fold_dir / "step1.vbnn"
    pipeline = None
    if args.step == 2 and topology.dual_in:
        if not step1_path.exists():
            raise StateError(f"{topology.value} step 2 needs {step1_path}; run --step 1 first")
        step1, _ = load_checkpoint(step1_path)
        pipeline = TrainedPipeline(Topology.SISO, step1=step1, step1_hash=param_hash(step1.graph))
    train = load_corpus(manifest, fold.train)
    val = load_corpus(manifest, fold.val)
    if args.step == 1:
        result = train_step1(train, tc, arch, val=val, log=_log).step1
        ckpt, hist = step1_path, fold_dir / "history_step1.csv"
        extra = {}
    else:
        result = train_step2(pipeline, train, tc, topology, arch, val=val, log=_log).step2
        ckpt = fold_dir / f"step2_{topology.value}.vbnn"
        hist = fold_dir / f"history_step2_{topology.value}.csv"
        extra = {"threshold": tc.threshold}
    with locked(fold_dir):
        save_checkpoint(ckpt, result, args.step, extra)
        write_history(hist, result.history)
    print(json.dumps({"checkpoint": str(ckpt), "history": str(hist),
                      "best_metric": result.best_metric, "initial_loss": result.initial_loss,
                      "final_loss": result.final_loss, "converged": result.converged}))
    return EXIT_OK


# -- eval ------------------------------------------------------------------------

def _methods(items):
    out = []
    for item in items:
        out.extend(m.strip().lower() for m in item.split(",") if m.strip())
    for m in out:
        if m != "oracle":
            try:
                Topology(m)
            except ValueError as exc:
                raise ConfigError(f"unknown method {m!r}") from exc
    return out


def cmd_eval(args):
    cfg = load_config(args.config)
    ev = cfg.eval_section()
    methods = _methods(args.methods) if args.methods else list(ev.methods)
    manifest = load_manifest(Path(args.manifest) if args.manifest else cfg.manifest_path)
    folds = None
    if args.folds:
        folds = tuple(int(f) for f in args.folds.split(","))
        if any(not 0 <= f < ev.n_folds for f in folds):
            raise ConfigError(f"fold indices must lie in [0, {ev.n_folds - 1}]")
    bench = BenchmarkConfig(arch=cfg.arch_config(),
                            step1=_override(cfg.train_config(1), args),
                            step2=_override(cfg.train_config(2), args),
                            fold_seed=ev.fold_seed, n_folds=ev.n_folds,
                            threshold=ev.threshold, folds=folds)
    report = run_benchmark(manifest, methods, bench, log=_log)
    out = Path(args.out) if args.out else cfg.output_path
    with locked(out):
        csv_path, txt_path = report.write(out, args.stem)
    print(report.to_text(), end="")
    print(f"wrote {csv_path} and {txt_path}")
    return EXIT_OK


# -- infer -----------------------------------------------------------------------

def target_records(targets):
    return [dict(component=int(t.component), **t.to_record()) for t in targets]


def render_overlay(image, mask, targets, half_length=15.0):
    """RGB overlay: predicted area tinted red, each target's axis in green."""
    gray = to_uint8(image)
    rgb = np.repeat(gray[..., None], 3, axis=2).astype(np.float64)
    tint = np.array([255.0, 0.0, 0.0])
    rgb[mask] = 0.5 * rgb[mask] + 0.5 * tint
    im = Image.fromarray(np.round(rgb).astype(np.uint8), mode="RGB")
    draw = ImageDraw.Draw(im)
    for t in targets:
        cx, cy = t.centroid
        r = math.radians(t.phi)
        dx, dy = half_length * math.cos(r), -half_length * math.sin(r)   # screen y is down
        draw.line([(cx - dx, cy - dy), (cx + dx, cy + dy)], fill=(0, 255, 0), width=1)
    return im


def cmd_infer(args):
    pipeline = load_pipeline(args.ckpt, args.step1)
    image = load_image(args.image)
    res = infer(pipeline, image, args.threshold)
    records = target_records(res.targets)
    text = json.dumps(records, indent=2)
    if args.json:
        Path(args.json).parent.mkdir(parents=True, exist_ok=True)
        Path(args.json).write_text(text + "\n")
    if args.overlay:
        out = Path(args.overlay)
        with locked(out.parent):
            render_overlay(image, res.mask, res.targets).save(out, format="PNG")
    print(text)
    return EXIT_OK


# -- plan ------------------------------------------------------------------------

def _parse_target(text):
    try:
        cx, cy, phi = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"--target wants cx,cy,phi; got {text!r}") from exc
    return cx, cy, phi


def cmd_plan(args):
    cfg = load_config(args.calib)
    motion = cfg.motion_profile()
    travel = motion.travel_height if args.travel_height is None else args.travel_height
    limits = cfg.limits_obj()
    pose = plan(_parse_target(args.target), cfg.calibration_obj(), limits, travel)
    print(json.dumps(pose.to_dict(), sort_keys=True))
    if args.contact is not None:
        events = simulate_sequence(pose, args.contact, limits, motion)
        text = dumps_events(events)
        if args.log:
            Path(args.log).parent.mkdir(parents=True, exist_ok=True)
            Path(args.log).write_text(text)
        else:
            sys.stdout.write(text)
    return EXIT_OK


# -- wiring ----------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="venibot", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--config")
    g.add_argument("--out")
    g.add_argument("--volunteers", type=int)
    g.add_argument("--per-volunteer", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--format", choices=["png", "pgm"])
    g.set_defaults(func=cmd_gen)

    lb = sub.add_parser("label", help="classical vein labelling over a corpus")
    lb.add_argument("--in", dest="input", required=True, help="manifest.json")
    lb.add_argument("--out", required=True)
    lb.add_argument("--config")
    lb.set_defaults(func=cmd_label)

    t = sub.add_parser("train", help="train one step of one topology on one fold")
    t.add_argument("--config")
    t.add_argument("--topology", choices=[x.value for x in Topology])
    t.add_argument("--fold", type=int, default=0)
    t.add_argument("--step", type=int, choices=[1, 2], default=1)
    t.add_argument("--manifest")
    t.add_argument("--out")
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="cross-validated benchmark report")
    e.add_argument("--config")
    e.add_argument("--methods", nargs="+", help="siso sido diso dido oracle (space or comma separated)")
    e.add_argument("--manifest")
    e.add_argument("--out")
    e.add_argument("--folds", help="comma-separated subset of fold indices")
    e.add_argument("--stem", default="report")
    e.add_argument("--iterations", type=int)
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict puncture targets for one image")
    i.add_argument("--image", required=True)
    i.add_argument("--ckpt", required=True, help="step-2 checkpoint")
    i.add_argument("--step1", help="step-1 checkpoint (default: next to --ckpt)")
    i.add_argument("--overlay")
    i.add_argument("--json")
    i.add_argument("--threshold", type=float)
    i.set_defaults(func=cmd_infer)

    pl = sub.add_parser("plan", help="map a target to gantry setpoints")
    pl.add_argument("--target", required=True, help="cx,cy,phi")
    pl.add_argument("--calib", help="YAML with calibration/limits/motion sections")
    pl.add_argument("--contact", type=float, help="contact height (mm); simulates the sequence")
    pl.add_argument("--travel-height", type=float)
    pl.add_argument("--log", help="write the event log here instead of stdout")
    pl.set_defaults(func=cmd_plan)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParameterError) as exc:
        _err(exc)
        return EXIT_CONFIG
    except (DataError, StateError, GenerationError) as exc:
        _err(exc)
        return EXIT_DATA
    except WorkspaceError as exc:
        _err(exc)
        return EXIT_WORKSPACE
    except VeniBotError as exc:
        _err(exc)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
