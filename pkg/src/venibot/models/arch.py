"""ResNeXt50-UNet graph construction for the four input/output topologies."""

from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from ..errors import ConfigError
from ..nn import Add, BatchNorm, Concat, Conv, ModelGraph, ReLU, Sigmoid, TransConv

# Full-width channel plan.
STEM_CHANNELS = 64
STAGE_CHANNELS = ((128, 256), (256, 512), (512, 1024), (1024, 2048))
BOTTOM_CHANNELS = 2048
DECODER_CHANNELS = (1024, 512, 256)
HEAD_CHANNELS = (128, 64)


class Topology(str, Enum):
    SISO = "siso"
    SIDO = "sido"
    DISO = "diso"
    DIDO = "dido"

    @property
    def dual_in(self):
        return self in (Topology.DISO, Topology.DIDO)

    @property
    def dual_out(self):
        return self in (Topology.SIDO, Topology.DIDO)

    @property
    def in_channels(self):
        return 2 if self.dual_in else 1

    @property
    def heads(self):
        return ("area", "angle") if self.dual_out else ("area",)

    @property
    def label(self):
        return {"siso": "Single-In-Single-Out", "sido": "Single-In-Dual-Out",
                "diso": "Dual-In-Single-Out", "dido": "Dual-In-Dual-Out"}[self.value]


@dataclass
class ArchConfig:
    """Width/cardinality/resolution of the network.

    ``width=1, cardinality=32, input_size=(128, 208)`` is the full-size
    network; the defaults are the CPU-sized desk variant.
    """

    width: float = 1 / 8
    cardinality: int = 4
    depths: tuple = (3, 5, 6, 3)
    input_size: tuple = (64, 104)
    batchnorm: bool = True
    dtype: str = "float64"
    extra: dict = field(default_factory=dict)

    @classmethod
    def full(cls, **kw):
        kw.setdefault("width", 1.0)
        kw.setdefault("cardinality", 32)
        kw.setdefault("input_size", (128, 208))
        return cls(**kw)

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.input_size = tuple(int(s) for s in self.input_size)
        if len(self.depths) != 4 or min(self.depths) < 1:
            raise ConfigError(f"depths must be four positive ints, got {self.depths}")
        if len(self.input_size) != 2 or min(self.input_size) < 16:
            raise ConfigError(f"input_size must be (H, W) with both >= 16, got {self.input_size}")
        if self.cardinality < 1:
            raise ConfigError("cardinality must be >= 1")
        for bottleneck, _ in STAGE_CHANNELS:
            if self.ch(bottleneck) % self.cardinality:
                raise ConfigError(
                    f"bottleneck width {self.ch(bottleneck)} not divisible by "
                    f"cardinality {self.cardinality}"
                )

    def ch(self, full_channels):
        c = full_channels * self.width
        if c < 1 or abs(c - round(c)) > 1e-9:
            raise ConfigError(f"width {self.width} gives non-integer channels for {full_channels}")
        return int(round(c))

    def to_dict(self):
        d = asdict(self)
        d["depths"] = list(self.depths)
        d["input_size"] = list(self.input_size)
        return d


def _conv_block(g, name, x, cin, cout, k, stride, pad, groups=1, relu=True, bn=True):
    x = g.add(f"{name}.conv", Conv(cin, cout, k, stride, pad, groups), x)
    if bn:
        x = g.add(f"{name}.bn", BatchNorm(cout), x)
    if relu:
        x = g.add(f"{name}.relu", ReLU(), x)
    return x


def _bottleneck(g, name, x, cin, width, cout, stride, groups, bn):
    y = _conv_block(g, f"{name}.reduce", x, cin, width, 1, 1, 0, bn=bn)
    y = _conv_block(g, f"{name}.grouped", y, width, width, 3, stride, 1, groups, bn=bn)
    y = _conv_block(g, f"{name}.expand", y, width, cout, 1, 1, 0, relu=False, bn=bn)
    if stride != 1 or cin != cout:
        x = _conv_block(g, f"{name}.shortcut", x, cin, cout, 1, stride, 0, relu=False, bn=bn)
    y = g.add(f"{name}.add", Add(), (y, x))
    return g.add(f"{name}.relu", ReLU(), y)


def _up_block(g, name, x, cin, cout, target_hw, bn):
    """3x3 stride-2 transposed conv whose output padding hits ``target_hw``."""
    _, h, w = g.shapes[x]
    out_pad = (target_hw[0] - (2 * h - 1), target_hw[1] - (2 * w - 1))
    if not all(p in (0, 1) for p in out_pad):
        raise ConfigError(f"{name}: cannot upsample {h}x{w} to {target_hw}")
    x = g.add(f"{name}.tconv", TransConv(cin, cout, 3, 2, 1, out_pad), x)
    if bn:
        x = g.add(f"{name}.bn", BatchNorm(cout), x)
    return g.add(f"{name}.relu", ReLU(), x)


def build(arch, topology):
    """Instantiate the network graph (parameters are not allocated yet).

    ``graph.stages`` maps the reference stage names (Conv0 ... Conv14) to
    node names; dual-output heads are suffixed with the head name.
    """
    topology = Topology(topology)
    bn = arch.batchnorm
    h, w = arch.input_size
    g = ModelGraph(dtype=np.dtype(arch.dtype))
    stages = {}
    x = g.add_input("input", (topology.in_channels, h, w))

    stem = arch.ch(STEM_CHANNELS)
    x = _conv_block(g, "conv0", x, topology.in_channels, stem, 7, 2, 3, bn=bn)
    stages["Conv0"] = x

    cin = stem
    skips = []
    for i, ((width, cout), depth) in enumerate(zip(STAGE_CHANNELS, arch.depths), start=1):
        width, cout = arch.ch(width), arch.ch(cout)
        for j in range(depth):
            stride = 2 if (j == 0 and i > 1) else 1
            x = _bottleneck(g, f"layer{i}.{j}", x, cin, width, cout, stride, arch.cardinality, bn)
            cin = cout
        stages[f"Res-layer{i}"] = x
        skips.append((x, cout))

    bottom = arch.ch(BOTTOM_CHANNELS)
    x = _conv_block(g, "conv5", x, cin, bottom, 3, 1, 1, bn=bn)
    stages["Conv5"] = x
    cin = bottom

    # decoder trunk: TransConv6/ConvBlock7 ... TransConv10/ConvBlock11
    for idx, (cout_full, (skip, skip_c)) in enumerate(
            zip(DECODER_CHANNELS, reversed(skips[:3]))):
        t_stage, b_stage = 6 + 2 * idx, 7 + 2 * idx
        cout = arch.ch(cout_full)
        x = _up_block(g, f"tconv{t_stage}", x, cin, cout, g.shapes[skip][1:], bn)
        stages[f"TransConv{t_stage}"] = x
        x = g.add(f"block{b_stage}.concat", Concat(), (x, skip))
        x = _conv_block(g, f"block{b_stage}.a", x, cout + skip_c, cout, 3, 1, 1, bn=bn)
        x = _conv_block(g, f"block{b_stage}.b", x, cout, cout, 3, 1, 1, bn=bn)
        stages[f"ConvBlock{b_stage}"] = x
        cin = cout
    trunk = x

    # heads: TransConv12, ConvBlock13, Conv14 (duplicated per head)
    outputs = []
    c12, c13 = (arch.ch(c) for c in HEAD_CHANNELS)
    for head in topology.heads:
        suffix = "" if len(topology.heads) == 1 else f"[{head}]"
        y = _up_block(g, f"{head}.tconv12", trunk, cin, c12, (h, w), bn)
        stages[f"TransConv12{suffix}"] = y
        y = _conv_block(g, f"{head}.block13.a", y, c12, c13, 3, 1, 1, bn=bn)
        y = _conv_block(g, f"{head}.block13.b", y, c13, c13, 3, 1, 1, bn=bn)
        stages[f"ConvBlock13{suffix}"] = y
        y = g.add(f"{head}.logits", Conv(c13, 1, 1, 1, 0), y)
        stages[f"Conv14{suffix}"] = y
        outputs.append(g.add(f"{head}.sigmoid", Sigmoid(), y))
    g.set_outputs(outputs)
    g.stages = stages
    g.topology = topology
    return g
