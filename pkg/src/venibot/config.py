"""Run configuration: one YAML file, nested sections, unknown keys rejected.

Relative paths are resolved against the directory holding the config file.
"""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import AugmentPolicy
from .errors import ConfigError, VeniBotError
from .geometry import SuitabilityRules
from .models.arch import ArchConfig, Topology
from .models.training import TrainConfig
from .planner import Calibration, MotionProfile, WorkspaceLimits
from .synth import VeinTreeSpec
from .vision import LabelPipelineParams


@dataclass
class CorpusSection:
    volunteers: int = 30
    per_volunteer: int = 30
    seed: int = 0
    format: str = "png"
    manifest: str = "corpus/manifest.json"


@dataclass
class TrainSection:
    common: dict = field(default_factory=dict)
    step1: dict = field(default_factory=dict)
    step2: dict = field(default_factory=dict)


@dataclass
class EvalSection:
    fold_seed: int = 0
    n_folds: int = 5
    threshold: float = 0.5
    methods: tuple = ("siso", "sido", "diso", "dido")


# section name -> class whose fields are the accepted keys
_SECTIONS = {
    "synth": VeinTreeSpec,
    "label": LabelPipelineParams,
    "augment": AugmentPolicy,
    "arch": ArchConfig,
    "corpus": CorpusSection,
    "train": TrainSection,
    "evaluation": EvalSection,
    "calibration": Calibration,
    "limits": WorkspaceLimits,
    "motion": MotionProfile,
}
_SCALARS = {"topology", "output_dir"}


def _keys(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _check(section, cls, values):
    if not isinstance(values, dict):
        raise ConfigError(f"section '{section}' must be a mapping")
    unknown = set(values) - _keys(cls)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(sorted(unknown))}")


@dataclass
class RunConfig:
    synth: dict = field(default_factory=dict)
    label: dict = field(default_factory=dict)
    augment: dict = field(default_factory=dict)
    arch: dict = field(default_factory=dict)
    topology: str = "dido"
    corpus: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=dict)
    calibration: dict = field(default_factory=dict)
    limits: dict = field(default_factory=dict)
    motion: dict = field(default_factory=dict)
    output_dir: str = "runs"
    base_dir: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        for name, cls in _SECTIONS.items():
            values = getattr(self, name) or {}
            _check(name, cls, values)
            setattr(self, name, dict(values))
        if "rules" in self.synth:
            _check("synth.rules", SuitabilityRules, self.synth["rules"])
        for step in ("common", "step1", "step2"):
            _check(f"train.{step}", TrainConfig, self.train.get(step) or {})
        try:
            Topology(self.topology)
        except ValueError as exc:
            raise ConfigError(f"unknown topology {self.topology!r}") from exc
        self.base_dir = Path(self.base_dir)
        # build everything once so bad values surface at load time
        try:
            self.synth_spec(), self.label_params(), self.augment_policy(), self.arch_config()
            self.train_config(1), self.train_config(2), self.eval_section()
            self.calibration_obj(), self.limits_obj(), self.motion_profile(), self.corpus_section()
        except ConfigError:
            raise
        except (VeniBotError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    # -- typed views ------------------------------------------------------------

    def synth_spec(self, **kw):
        return VeinTreeSpec(**{**self.synth, **kw})

    def label_params(self):
        return LabelPipelineParams(**self.label)

    def augment_policy(self):
        return AugmentPolicy(**self.augment)

    def arch_config(self):
        return ArchConfig(**self.arch)

    def train_config(self, step):
        kw = dict(self.train.get("common") or {})
        kw.update(self.train.get(f"step{step}") or {})
        kw.setdefault("augment_policy", self.augment)
        return TrainConfig(**kw)

    def eval_section(self):
        return EvalSection(**self.evaluation)

    def corpus_section(self):
        return CorpusSection(**self.corpus)

    def calibration_obj(self):
        return Calibration(**self.calibration)

    def limits_obj(self):
        return WorkspaceLimits(**self.limits)

    def motion_profile(self):
        return MotionProfile(**self.motion)

    def path(self, p):
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def output_path(self):
        return self.path(self.output_dir)

    @property
    def manifest_path(self):
        return self.path(self.corpus_section().manifest)

    def to_dict(self):
        d = {name: getattr(self, name) for name in _SECTIONS}
        d.update(topology=self.topology, output_dir=self.output_dir)
        return d


def load_config(path=None):
    """Read a YAML run config; ``None`` gives the defaults rooted at the cwd."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(raw) - set(_SECTIONS) - _SCALARS
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    return RunConfig(**raw, base_dir=path.resolve().parent)


def dump_config(cfg):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
