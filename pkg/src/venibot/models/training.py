"""Two-step training, inference and checkpoints for the four topologies."""

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..augment import AugmentPolicy, angle_map, apply_params, draw, resize, resize_array
from ..errors import ConfigError, DataError, FitError, StateError
from ..geometry import PunctureTarget, anchor_point, fit_points, continuous_angle
from ..metrics import dsc
from ..nn import AdamState, PlateauScheduler, adam_step, bce_loss, dumps, l2_loss, loads
from ..nn.checkpoint import graph_state, load_graph_state
from ..synth import derive_seed
from ..vision import connected_components
from .arch import ArchConfig, Topology, build

LOGITS_NODE = "area.logits"


@dataclass
class TrainConfig:
    batch_size: int = 2
    lr: float = 1e-3
    weight_decay: float = 1e-5
    iterations: int = 1575
    val_interval: int = None          # None: 50 for step 1 / single-in, 20 for dual-in step 2
    seed: int = 0
    factor: float = 0.5
    patience: int = 5
    augment: bool = True
    augment_policy: dict = field(default_factory=dict)
    threshold: float = 0.5
    max_val_samples: int = 32

    def __post_init__(self):
        for name in ("batch_size", "iterations"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("lr",):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.val_interval is not None:
            if int(self.val_interval) < 1:
                raise ConfigError("val_interval must be >= 1")
            if self.val_interval > self.iterations:
                raise ConfigError("val_interval must not exceed iterations")

    def interval(self, step, topology):
        if self.val_interval is not None:
            return int(self.val_interval)
        return 20 if step == 2 and Topology(topology).dual_in else 50

    def to_dict(self):
        return asdict(self)


@dataclass
class HistoryRow:
    iteration: int
    loss: float
    val_metric: float
    lr: float


@dataclass
class TrainResult:
    graph: object
    arch: ArchConfig
    topology: Topology
    history: list
    losses: list                 # per-iteration training loss
    best_metric: float
    converged: bool
    seconds: float

    @property
    def initial_loss(self):
        return float(np.mean(self.losses[:10]))

    @property
    def final_loss(self):
        return float(np.mean(self.losses[-10:]))


@dataclass
class TrainedPipeline:
    topology: Topology
    step2: TrainResult = None
    step1: TrainResult = None
    step1_hash: str = None
    threshold: float = 0.5

    @property
    def history(self):
        return {"step1": self.step1.history if self.step1 else [],
                "step2": self.step2.history if self.step2 else []}


def param_hash(graph):
    h = hashlib.sha256()
    for k in sorted(graph.params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(graph.params[k]).tobytes())
    for k in sorted(graph.buffers):
        h.update(k.encode())
        h.update(np.ascontiguousarray(graph.buffers[k]).tobytes())
    return h.hexdigest()


# -- batches ---------------------------------------------------------------------

def _prepared(sample, size, policy, rng):
    if policy is not None:
        params = draw(policy, sample.image.shape, rng)
        return apply_params(params, sample, size)
    return resize(sample, size)


def step1_channel(step1_graph, images):
    """Standardised pre-sigmoid step-1 map for a batch ``(N, 1, H, W)``."""
    step1_graph.eval()
    step1_graph.forward([images], record=False)
    logits = step1_graph.activation(LOGITS_NODE)
    mean = logits.mean(axis=(1, 2, 3), keepdims=True)
    std = logits.std(axis=(1, 2, 3), keepdims=True)
    return (logits - mean) / (std + 1e-6)


def _assemble(items, dtype):
    x = np.stack([a.image for a in items])[:, None].astype(dtype)
    vein = np.stack([a.vein_gt for a in items])[:, None].astype(dtype)
    area = np.stack([a.suitable_gt for a in items])[:, None].astype(dtype)
    ang = np.stack([angle_map(a.suitable_labels, a.targets) for a in items])[:, None]
    return x, vein, area, ang.astype(dtype)


def _inputs(topology, x, step1_graph):
    if Topology(topology).dual_in:
        if step1_graph is None:
            raise StateError("dual-input topologies need a trained step-1 network")
        return [np.concatenate([x, step1_channel(step1_graph, x)], axis=1)]
    return [x]


def _step2_loss(outputs, area, ang, dual_out):
    loss, g_area = l2_loss(outputs[0], area)
    grads = [g_area]
    if dual_out:
        m = area > 0.5
        if m.any():
            l_ang, g_ang = l2_loss(outputs[1], ang, m)
        else:
            l_ang, g_ang = 0.0, np.zeros_like(outputs[1])
        loss += l_ang
        grads.append(g_ang)
    return loss, grads


def _snapshot(graph):
    return {k: v.copy() for k, v in graph.params.items()}, \
        {k: v.copy() for k, v in graph.buffers.items()}


def _policy(cfg, arch):
    if not cfg.augment:
        return None
    kw = dict(cfg.augment_policy)
    kw["output_size"] = arch.input_size
    return AugmentPolicy(**kw)


def _train(step, data, val, cfg, arch, topology, step1_graph=None, log=None):
    if not data:
        raise DataError("training set is empty")
    topology = Topology(topology)
    graph = build(arch, topology)
    graph.init_params(derive_seed(cfg.seed, "init", step, topology.value))
    graph.train()
    rng = np.random.default_rng(derive_seed(cfg.seed, "batches", step, topology.value))
    policy = _policy(cfg, arch)
    size = arch.input_size
    dtype = graph.dtype
    interval = cfg.interval(step, topology)
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = PlateauScheduler(mode="max" if step == 1 else "min", factor=cfg.factor,
                             patience=cfg.patience)
    val_items = [resize(s, size) for s in (val or data)[:cfg.max_val_samples]]
    best, best_state = None, None
    history, losses, window = [], [], []
    order = np.array([], dtype=int)
    t0 = time.perf_counter()
    for it in range(1, cfg.iterations + 1):
        if len(order) < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(len(data))])
        idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
        items = [_prepared(data[i], size, policy, rng) for i in idx]
        x, vein, area, ang = _assemble(items, dtype)
        outputs = graph.forward(_inputs(topology, x, step1_graph))
        if step == 1:
            loss, g = bce_loss(outputs[0], vein)
            grads = [g]
        else:
            loss, grads = _step2_loss(outputs, area, ang, topology.dual_out)
        graph.zero_grad()
        graph.backward(grads)
        adam_step(opt, graph.params, graph.grads)
        losses.append(float(loss))
        window.append(float(loss))
        if it % interval == 0 or (it == cfg.iterations and not history):
            metric = _validate(step, graph, topology, val_items, cfg.threshold, step1_graph)
            graph.train()
            improved = best is None or (metric > best if step == 1 else metric < best)
            if improved:
                best, best_state = metric, _snapshot(graph)
            opt.lr = sched.step(metric, opt.lr)
            history.append(HistoryRow(it, float(np.mean(window)), float(metric), opt.lr))
            window = []
            if log:
                log(f"step{step} {topology.value} it={it} loss={history[-1].loss:.5f} "
                    f"val={metric:.5f} lr={opt.lr:g}")
    graph.params, graph.buffers = best_state
    graph.zero_grad()
    graph.eval()
    res = TrainResult(graph, arch, topology, history, losses, float(best), False,
                      time.perf_counter() - t0)
    res.converged = res.final_loss <= 0.5 * res.initial_loss
    return res


def _validate(step, graph, topology, items, threshold, step1_graph):
    graph.eval()
    scores = []
    for a in items:
        x, vein, area, ang = _assemble([a], graph.dtype)
        outputs = graph.forward(_inputs(topology, x, step1_graph), record=False)
        if step == 1:
            scores.append(dsc(outputs[0][0, 0] >= threshold, a.vein_gt))
        else:
            scores.append(_step2_loss(outputs, area, ang, topology.dual_out)[0])
    return float(np.mean(scores))


def train_step1(data, cfg=None, arch=None, val=None, log=None):
    """Train the single-input segmentation network on vein masks (BCE)."""
    cfg = cfg or TrainConfig()
    arch = arch or ArchConfig()
    res = _train(1, data, val, cfg, arch, Topology.SISO, log=log)
    return TrainedPipeline(Topology.SISO, step1=res, step1_hash=param_hash(res.graph),
                           threshold=cfg.threshold)


def train_step2(pipeline, data, cfg=None, topology="dido", arch=None, val=None, log=None):
    """Train the regression network; step 1 stays frozen (hash-checked)."""
    cfg = cfg or TrainConfig()
    topology = Topology(topology)
    step1 = pipeline.step1 if pipeline is not None else None
    if topology.dual_in and step1 is None:
        raise StateError(f"{topology.value} needs a step-1 network; train step 1 first")
    arch = arch or (step1.arch if step1 else ArchConfig())
    if step1 is not None and tuple(step1.arch.input_size) != tuple(arch.input_size):
        raise ConfigError("step-1 and step-2 networks must share the input size")
    before = param_hash(step1.graph) if step1 else None
    res = _train(2, data, val, cfg, arch, topology, step1.graph if step1 else None, log=log)
    if step1 is not None and param_hash(step1.graph) != before:
        raise StateError("step-1 parameters changed during step-2 training")
    return TrainedPipeline(topology, step2=res, step1=step1, step1_hash=before,
                           threshold=cfg.threshold)


# -- inference ---------------------------------------------------------------------

@dataclass
class Inference:
    area_map: np.ndarray
    angle_map: np.ndarray
    mask: np.ndarray
    targets: list
    segmentation: np.ndarray = None     # step-1 probability map, when available


def predict_maps(pipeline, images):
    """Raw network maps for a list of images, at each image's own size."""
    if pipeline is None or pipeline.step2 is None:
        raise StateError("pipeline has no trained step-2 network")
    res = pipeline.step2
    size = tuple(res.arch.input_size)
    out = []
    for img in images:
        x = resize_array(np.asarray(img, dtype=np.float64), size)[None, None]
        x = np.clip(x, 0.0, 1.0).astype(res.graph.dtype)
        step1 = pipeline.step1.graph if pipeline.step1 else None
        res.graph.eval()
        maps = res.graph.forward(_inputs(res.topology, x, step1), record=False)
        area = np.clip(resize_array(maps[0][0, 0].astype(np.float64), img.shape), 0, 1)
        ang = (np.clip(resize_array(maps[1][0, 0].astype(np.float64), img.shape), 0, 1)
               if len(maps) > 1 else None)
        seg = None
        if step1 is not None:
            step1.forward([x], record=False)
            seg = np.clip(resize_array(step1.activation("area.sigmoid")[0, 0]
                                       .astype(np.float64), img.shape), 0, 1)
        out.append((area, ang, seg))
    return out


def decode(area_map, angle_map=None, threshold=0.5):
    """Threshold an area map and derive one target per connected component."""
    mask = np.asarray(area_map) >= threshold
    if threshold >= 1.0:
        mask = np.zeros_like(mask)
    comps = connected_components(mask)
    targets = []
    for s in comps.stats:
        ys, xs = np.nonzero(comps.labels == s.label)
        if angle_map is not None:
            phi = 180.0 * float(np.mean(angle_map[ys, xs])) - 90.0
            phi = 90.0 if phi <= -90.0 else min(phi, 90.0)
            fit = None
        else:
            try:
                fit = fit_points(xs, ys)
            except FitError:
                continue
            phi = continuous_angle(fit).phi
        cx, cy = anchor_point(xs, ys)
        targets.append(PunctureTarget(s.label, (cx, cy), abs(phi), phi, (90.0 - phi) % 180.0,
                                      fit, float(len(xs))))
    return mask, targets


def infer(pipeline, image, threshold=None):
    threshold = pipeline.threshold if threshold is None else threshold
    area, ang, seg = predict_maps(pipeline, [image])[0]
    mask, targets = decode(area, ang, threshold)
    return Inference(area, ang, mask, targets, seg)


# -- checkpoints ---------------------------------------------------------------------

def save_checkpoint(path, result, step, extra=None):
    header = {"arch": result.arch.to_dict(), "topology": result.topology.value, "step": step,
              "best_metric": result.best_metric}
    header.update(extra or {})
    tensors = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), np.uint8)}
    tensors.update(graph_state(result.graph))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(dumps(tensors))


def load_checkpoint(path):
    """Rebuild a trained network; returns a :class:`TrainResult` without history."""
    try:
        tensors = loads(Path(path).read_bytes())
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if "__header__" not in tensors:
        raise DataError(f"{path}: checkpoint has no architecture header")
    header = json.loads(tensors.pop("__header__").tobytes().decode())
    arch = ArchConfig(**header["arch"])
    topology = Topology(header["topology"])
    graph = build(arch, topology)
    load_graph_state(graph, tensors)
    graph.eval()
    res = TrainResult(graph, arch, topology, [], [], header.get("best_metric", float("nan")),
                      False, 0.0)
    return res, header


def save_pipeline(directory, pipeline):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {}
    if pipeline.step1:
        paths["step1"] = d / "step1.vbnn"
        save_checkpoint(paths["step1"], pipeline.step1, 1)
    if pipeline.step2:
        paths["step2"] = d / f"step2_{pipeline.topology.value}.vbnn"
        save_checkpoint(paths["step2"], pipeline.step2, 2, {"threshold": pipeline.threshold})
    return paths


def load_pipeline(step2_path, step1_path=None):
    step2, header = load_checkpoint(step2_path)
    step1 = None
    if step2.topology.dual_in:
        if step1_path is None:
            step1_path = Path(step2_path).parent / "step1.vbnn"
        if not Path(step1_path).exists():
            raise DataError(f"{step2.topology.value} checkpoint needs step-1 weights at {step1_path}")
        step1, _ = load_checkpoint(step1_path)
    return TrainedPipeline(step2.topology, step2=step2, step1=step1,
                           step1_hash=param_hash(step1.graph) if step1 else None,
                           threshold=header.get("threshold", 0.5))


def write_history(path, history):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss", "val_metric", "lr"])
        for r in history:
            w.writerow([r.iteration, f"{r.loss:.8g}", f"{r.val_metric:.8g}", f"{r.lr:.8g}"])
