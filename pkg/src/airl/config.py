"""Line-oriented experiment configuration: `section.key = value`.

Human-diffable on purpose: every study arm is one config diff. Unknown keys
and duplicate keys are hard errors so typos cannot silently revert a setting
to its default. Framework keys left unset inherit the preset of
`framework.kind`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from . import augment
from .errors import ConfigError
from .frameworks import _PRESETS, KINDS, FrameworkConfig
from .optim import (
    EXCLUDE_BIAS_ROLES,
    EXCLUDE_NORM_ROLES,
    LarsConfig,
    LrSchedule,
    Optimizer,
    SgdConfig,
)

_REQUIRED = object()
_PRESET = object()

# key -> (type tag, default). `preset` defaults resolve from framework.kind.
KEY_SPEC: dict[str, tuple[str, object]] = {
    "framework.kind": ("str", _REQUIRED),
    "framework.temperature": ("float", 0.2),
    "framework.queue_size": ("int", 256),
    "framework.symmetric_loss": ("bool", _PRESET),
    "framework.predictor_placement": ("str", _PRESET),
    "framework.momentum_base": ("float", _PRESET),
    "framework.momentum_schedule": ("str", _PRESET),
    "framework.projector_hidden_bn": ("bool", _PRESET),
    "framework.bn_mode": ("str", _PRESET),
    "framework.stop_gradient": ("bool", True),
    "framework.symmetric_sum": ("bool", False),
    "encoder.backbone_hidden": ("int", 64),
    "encoder.backbone_out": ("int", 64),
    "encoder.projector_hidden": ("int", 64),
    "encoder.projector_out": ("int", 32),
    "augment.out_side": ("int", 16),
    "augment.removed": ("str", ""),
    "augment.crop_scale": ("floats", (0.08, 1.0)),
    "data.classes": ("int", 8),
    "data.per_class": ("int", 64),
    "data.val_per_class": ("int", 16),
    "data.side": ("int", 16),
    "data.noise": ("float", 0.05),
    "data.tint": ("float", 0.35),
    "data.seed": ("int", 1),
    "optimizer.kind": ("str", "sgd"),
    "optimizer.lr": ("float", 0.06),
    "optimizer.momentum": ("float", 0.9),
    "optimizer.weight_decay": ("float", 1e-4),
    "optimizer.nesterov": ("bool", False),
    "optimizer.trust_coefficient": ("float", 1e-3),
    "optimizer.eps": ("float", 1e-9),
    "optimizer.exclude_norm": ("bool", True),
    "optimizer.exclude_bias": ("bool", True),
    "schedule.kind": ("str", "cosine"),
    "schedule.warmup_epochs": ("int", 3),
    "schedule.milestones": ("floats", (0.6, 0.8)),
    "schedule.decay_factor": ("float", 0.1),
    "run.name": ("str", ""),
    "run.epochs": ("int", 30),
    "run.batch": ("int", 64),
    "run.seed": ("int", 0),
    "run.checkpoint_every": ("int", 0),
}

_PRESET_KEYS = [k for k, (_, default) in KEY_SPEC.items() if default is _PRESET]


def _parse_value(key: str, raw: str, line_no: int):
    kind = KEY_SPEC[key][0]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            lowered = raw.lower()
            if lowered in ("true", "false"):
                return lowered == "true"
            raise ValueError(raw)
        if kind == "floats":
            if not raw.strip():
                return ()
            return tuple(float(p) for p in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(
            f"line {line_no}: cannot parse {key} value {raw!r} as {kind}"
        ) from None


def _format_value(key: str, value) -> str:
    kind = KEY_SPEC[key][0]
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return repr(float(value))
    if kind == "floats":
        return ",".join(repr(float(v)) for v in value)
    return str(value)


@dataclass
class ExperimentConfig:
    values: dict[str, object]

    def __getitem__(self, key: str):
        return self.values[key]

    def canonical_text(self) -> str:
        lines = [
            f"{key} = {_format_value(key, self.values[key])}"
            for key in sorted(self.values)
        ]
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()

    @property
    def input_dim(self) -> int:
        return 3 * self.values["augment.out_side"] ** 2

    def framework_config(self) -> FrameworkConfig:
        v = self.values
        return FrameworkConfig(
            kind=v["framework.kind"],
            temperature=v["framework.temperature"],
            queue_size=v["framework.queue_size"],
            symmetric_loss=v["framework.symmetric_loss"],
            predictor_placement=v["framework.predictor_placement"],
            momentum_base=v["framework.momentum_base"],
            momentum_schedule=v["framework.momentum_schedule"],
            projector_hidden_bn=v["framework.projector_hidden_bn"],
            bn_mode=v["framework.bn_mode"],
            stop_gradient=v["framework.stop_gradient"],
            symmetric_sum=v["framework.symmetric_sum"],
            input_dim=self.input_dim,
            backbone_hidden=v["encoder.backbone_hidden"],
            backbone_out=v["encoder.backbone_out"],
            projector_hidden=v["encoder.projector_hidden"],
            projector_out=v["encoder.projector_out"],
        )

    def pipeline(self) -> augment.AugPipeline:
        removed = tuple(
            name.strip()
            for name in self.values["augment.removed"].split(",")
            if name.strip()
        )
        return augment.AugPipeline.default(
            out_side=self.values["augment.out_side"],
            removed=removed,
            crop_scale=tuple(self.values["augment.crop_scale"]),
        )

    def schedule(self) -> LrSchedule:
        v = self.values
        total = max(v["run.epochs"], 1)  # 0-epoch runs never consult the lr
        return LrSchedule(
            kind=v["schedule.kind"],
            base_lr=v["optimizer.lr"],
            warmup_epochs=min(v["schedule.warmup_epochs"], total),
            total_epochs=total,
            milestones=tuple(v["schedule.milestones"]),
            decay_factor=v["schedule.decay_factor"],
        )

    def optimizer(self) -> Optimizer:
        v = self.values
        if v["optimizer.kind"] == "sgd":
            cfg = SgdConfig(
                lr=v["optimizer.lr"],
                momentum=v["optimizer.momentum"],
                weight_decay=v["optimizer.weight_decay"],
                nesterov=v["optimizer.nesterov"],
            )
        elif v["optimizer.kind"] == "lars":
            exclude = frozenset()
            if v["optimizer.exclude_norm"]:
                exclude |= EXCLUDE_NORM_ROLES
            if v["optimizer.exclude_bias"]:
                exclude |= EXCLUDE_BIAS_ROLES
            cfg = LarsConfig(
                lr=v["optimizer.lr"],
                momentum=v["optimizer.momentum"],
                weight_decay=v["optimizer.weight_decay"],
                trust_coefficient=v["optimizer.trust_coefficient"],
                eps=v["optimizer.eps"],
                exclude_roles=exclude,
            )
        else:
            raise ConfigError(
                f"unknown optimizer kind {v['optimizer.kind']!r}"
            )
        return Optimizer(cfg, self.schedule())


def parse_config(text: str) -> ExperimentConfig:
    provided: dict[str, object] = {}
    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'section.key = value'")
        key, _, raw_value = line.partition("=")
        key = key.strip()
        raw_value = raw_value.strip()
        if key not in KEY_SPEC:
            raise ConfigError(f"line {line_no}: unknown config key {key!r}")
        if key in provided:
            raise ConfigError(f"line {line_no}: duplicate config key {key!r}")
        provided[key] = _parse_value(key, raw_value, line_no)

    if "framework.kind" not in provided:
        raise ConfigError("missing required key framework.kind")
    kind = provided["framework.kind"]
    if kind not in KINDS:
        raise ConfigError(f"unknown framework kind {kind!r}")

    values: dict[str, object] = {}
    preset = _PRESETS[kind]
    for key, (_, default) in KEY_SPEC.items():
        if key in provided:
            values[key] = provided[key]
        elif default is _PRESET:
            values[key] = preset[key.split(".", 1)[1]]
        elif default is _REQUIRED:
            raise ConfigError(f"missing required key {key}")
        else:
            values[key] = default
    cfg = ExperimentConfig(values)
    # Fail fast on invalid combinations.
    cfg.framework_config()
    cfg.pipeline()
    cfg.schedule()
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_from_overrides(**overrides) -> ExperimentConfig:
    """Build a config from `section_key=value` keyword overrides (the dots
    replaced by double underscores), mainly for studies and tests."""
    lines = []
    for key, value in overrides.items():
        dotted = key.replace("__", ".")
        if dotted not in KEY_SPEC:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{dotted} = {value}")
    return parse_config("\n".join(lines) + "\n")
