"""Experiment configuration: JSON schema, strict validation, named presets.

A config file is a JSON object with a ``schema`` tag and one section per
stage of an experiment (backbone, data, split, pet, train, flags, seeds).
Unknown keys anywhere are errors, so typos fail loudly instead of silently
running the default.  ``seeds.model`` drives both backbone initialisation
and training-time randomness; ``seeds.class_orders`` lists the class-order
repeats, one full run per entry.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from .bench import PetSpec, SplitSpec
from .continual import AblationFlags, TrainConfig
from .model import BackboneConfig
from .pet import KINDS

CONFIG_SCHEMA = "petcl-config-v1"

PIPELINES = ("dual", "naive", "seqft")


@dataclass
class DataConfig:
    pretext_classes: int = 10
    cl_classes: int = 20
    per_class_train: int = 100
    per_class_test: int = 40
    mean_scale: float = 1.25
    noise_std: float = 1.0
    pretrain_epochs: int = 20
    pretrain_lr: float = 3e-3
    pretrain_batch: int = 32

    def validate(self) -> None:
        if self.pretext_classes < 2:
            raise ValueError("data.pretext_classes must be at least 2")
        if self.cl_classes < 2:
            raise ValueError("data.cl_classes must be at least 2")
        if self.per_class_train < 1 or self.per_class_test < 1:
            raise ValueError("data per-class sample counts must be positive")
        if self.mean_scale <= 0 or self.noise_std <= 0:
            raise ValueError("data.mean_scale and data.noise_std must be positive")
        if self.pretrain_epochs < 1 or self.pretrain_batch < 1:
            raise ValueError("data.pretrain_epochs and data.pretrain_batch must be positive")
        if self.pretrain_lr <= 0:
            raise ValueError("data.pretrain_lr must be positive")


@dataclass
class SeedConfig:
    model: int = 0
    data: int = 0
    class_orders: list[int] = field(default_factory=lambda: [0, 1, 2])

    def validate(self) -> None:
        if not self.class_orders:
            raise ValueError("seeds.class_orders must list at least one seed")
        if len(set(self.class_orders)) != len(self.class_orders):
            raise ValueError("seeds.class_orders must not repeat")


_SECTIONS = {
    "backbone": BackboneConfig,
    "data": DataConfig,
    "split": SplitSpec,
    "pet": PetSpec,
    "train": TrainConfig,
    "flags": AblationFlags,
    "seeds": SeedConfig,
}


@dataclass
class ExperimentConfig:
    label: str = "run"
    pipeline: str = "dual"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    pet: PetSpec = field(default_factory=PetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    flags: AblationFlags = field(default_factory=AblationFlags)
    seeds: SeedConfig = field(default_factory=SeedConfig)

    # -- resolved pieces -------------------------------------------------

    def backbone_config(self) -> BackboneConfig:
        return replace(self.backbone, seed=self.seeds.model)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seeds.model)

    def split_spec(self, class_order_seed: int) -> SplitSpec:
        return replace(self.split, class_order_seed=class_order_seed)

    # -- validation --------------------------------------------------------

    def validate(self) -> None:
        if not self.label or "/" in self.label:
            raise ValueError("label must be non-empty and contain no '/'")
        if self.pipeline not in PIPELINES:
            raise ValueError(f"pipeline must be one of {PIPELINES}, got {self.pipeline!r}")
        self.backbone.validate()
        self.data.validate()
        self.train_config().validate()
        self.seeds.validate()
        if self.split.num_tasks < 1 or self.split.classes_per_task < 1:
            raise ValueError("split.num_tasks and split.classes_per_task must be positive")
        if self.split.num_tasks * self.split.classes_per_task != self.data.cl_classes:
            raise ValueError(
                f"split covers {self.split.num_tasks * self.split.classes_per_task} "
                f"classes but data.cl_classes is {self.data.cl_classes}")
        if self.pet.kind not in KINDS:
            raise ValueError(f"pet.kind must be one of {KINDS}, got {self.pet.kind!r}")
        if self.pet.size < 1:
            raise ValueError("pet.size must be at least 1")
        if self.pet.adapter_mode not in ("parallel", "sequential"):
            raise ValueError(f"pet.adapter_mode must be 'parallel' or 'sequential', "
                             f"got {self.pet.adapter_mode!r}")
        if self.pet.blocks is not None:
            bad = [b for b in self.pet.blocks if not 0 <= b < self.backbone.depth]
            if bad:
                raise ValueError(f"pet.blocks {bad} fall outside depth "
                                 f"{self.backbone.depth}")

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        out = {"schema": CONFIG_SCHEMA, "label": self.label, "pipeline": self.pipeline}
        for name, _ in _SECTIONS.items():
            section = asdict(getattr(self, name))
            section.pop("seed", None)              # driven by seeds.model
            section.pop("class_order_seed", None)  # driven by seeds.class_orders
            out[name] = section
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ValueError("config must be a JSON object")
        raw = dict(raw)
        schema = raw.pop("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise ValueError(f"unsupported config schema {schema!r} "
                             f"(expected {CONFIG_SCHEMA!r})")
        kwargs = {}
        for key in ("label", "pipeline"):
            if key in raw:
                kwargs[key] = raw.pop(key)
        for name, section_cls in _SECTIONS.items():
            section = raw.pop(name, None)
            if section is None:
                continue
            if not isinstance(section, dict):
                raise ValueError(f"section {name!r} must be an object")
            known = {f.name for f in fields(section_cls)}
            unknown = set(section) - known
            if unknown:
                raise ValueError(f"unknown config key {name}.{sorted(unknown)[0]}")
            kwargs[name] = section_cls(**section)
        if raw:
            raise ValueError(f"unknown config key {sorted(raw)[0]}")
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())


# ---------------------------------------------------------------------------
# presets


def _desk(label: str, pipeline: str = "dual", kind: str = "adapter",
          size: int = 10, **overrides) -> ExperimentConfig:
    cfg = ExperimentConfig(label=label, pipeline=pipeline,
                           pet=PetSpec(kind=kind, size=size))
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


def _flag_label(flags: AblationFlags) -> str:
    parts = [name for name, on in [("learn", flags.learning),
                                   ("accum", flags.accumulation),
                                   ("ens", flags.ensemble)] if on]
    return "+".join(parts) if parts else "none"


def _ablation_grid() -> list[ExperimentConfig]:
    out = []
    for learning in (True, False):
        for accumulation in (True, False):
            for ensemble in (True, False):
                flags = AblationFlags(learning, accumulation, ensemble)
                out.append(_desk(f"abl-{_flag_label(flags)}", flags=flags))
    return out


def _calibration_grid() -> list[ExperimentConfig]:
    combos = [("prefix-calibrated", True, True),
              ("prefix-comp-only", True, False),
              ("prefix-scales-only", False, True),
              ("prefix-plain", False, False)]
    return [_desk(label, pet=PetSpec(kind="prefix", size=10,
                                     prefix_compensate=comp, prefix_scales=scales))
            for label, comp, scales in combos]


def _insertion_sweep() -> list[ExperimentConfig]:
    out = []
    for depth_used in range(1, 5):
        blocks = list(range(depth_used))
        out.append(_desk(f"insert-{depth_used}",
                         pet=PetSpec(kind="adapter", size=10, blocks=blocks)))
    return out


def _quick() -> list[ExperimentConfig]:
    cfg = ExperimentConfig(
        label="quick", pipeline="dual",
        data=DataConfig(pretext_classes=2, cl_classes=4, per_class_train=10,
                        per_class_test=8, mean_scale=0.8, noise_std=0.5,
                        pretrain_epochs=2),
        split=SplitSpec(num_tasks=2, classes_per_task=2),
        pet=PetSpec(kind="adapter", size=4),
        train=TrainConfig(epochs=2, freeze_epochs=1),
        seeds=SeedConfig(class_orders=[0]))
    return [cfg]


PRESETS: dict[str, tuple[str, callable]] = {
    "desk-dual-adapter10": ("dual-expert pipeline, parallel adapters of size 10",
                            lambda: [_desk("desk-dual-adapter10")]),
    "desk-dual-lora10": ("dual-expert pipeline, rank-10 attention deltas",
                         lambda: [_desk("desk-dual-lora10", kind="lora")]),
    "desk-dual-prefix10": ("dual-expert pipeline, 10 calibrated prefix tokens",
                           lambda: [_desk("desk-dual-prefix10", kind="prefix")]),
    "desk-naive-adapter10": ("single-expert adapter baseline, no protocol features",
                             lambda: [_desk("desk-naive-adapter10", pipeline="naive")]),
    "desk-naive-lora10": ("single-expert low-rank baseline",
                          lambda: [_desk("desk-naive-lora10", pipeline="naive",
                                         kind="lora")]),
    "desk-naive-prefix10": ("single-expert plain-prefix baseline",
                            lambda: [_desk("desk-naive-prefix10", pipeline="naive",
                                           kind="prefix")]),
    "desk-seqft": ("sequential full fine-tuning of the whole backbone",
                   lambda: [_desk("desk-seqft", pipeline="seqft")]),
    "ablation-grid": ("all eight on/off combinations of the three protocol features",
                      _ablation_grid),
    "prefix-calibration-grid": ("prefix tuning with calibration fully on, "
                                "half on, and off", _calibration_grid),
    "insertion-sweep": ("adapters attached to the first 1..4 blocks",
                        _insertion_sweep),
    "quick": ("tiny two-task smoke run (seconds, not minutes)", _quick),
}


def preset_names() -> list[str]:
    return list(PRESETS)


def preset_description(name: str) -> str:
    return PRESETS[name][0]


def build_preset(name: str) -> list[ExperimentConfig]:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: "
                       f"{', '.join(preset_names())}")
    return PRESETS[name][1]()
