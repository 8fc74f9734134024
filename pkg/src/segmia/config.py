"""Declarative experiment configuration with a strict, versioned loader.

A config file is a nested key-value document (YAML subset: plain mappings,
scalars, and a list of defense entries). Unknown keys are hard errors so a
typo cannot silently fall back to a default and corrupt an experiment.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from .attack import AttackTrainConfig, PatchSelector
from .defense import DefenseConfig
from .errors import ConfigError
from .scenes import DEFAULT_PALETTE, SHIFTED_PALETTE, SceneConfig
from .segmodel import TrainConfig

CONFIG_VERSION = 1

SETTINGS = ("dependent", "independent")
PALETTES = {"default": DEFAULT_PALETTE, "shifted": SHIFTED_PALETTE}


@dataclass(frozen=True)
class SplitSizes:
    victim_in: int = 96
    victim_out: int = 64
    shadow_in: int = 96
    shadow_out: int = 64

    def __post_init__(self):
        for name in ("victim_in", "victim_out", "shadow_in", "shadow_out"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"split.{name} must be positive")

    @property
    def total(self) -> int:
        return self.victim_in + self.victim_out + self.shadow_in + self.shadow_out


@dataclass(frozen=True)
class SelectorConfig:
    """Selector parameters without a seed; per-image seeds are derived at run time."""

    kind: str = "rejection"
    step: int = 8
    count: int = 10
    tau: float = 0.99

    def build(self, seed: int) -> PatchSelector:
        return PatchSelector(
            kind=self.kind, step=self.step, count=self.count, tau=self.tau, seed=seed
        )


@dataclass(frozen=True)
class ExperimentConfig:
    config_version: int = CONFIG_VERSION
    seed: int = 42
    out_dir: str = "out"
    setting: str = "dependent"
    scene: SceneConfig = field(default_factory=SceneConfig)
    shadow_scene: SceneConfig | None = None
    split: SplitSizes = field(default_factory=SplitSizes)
    victim: TrainConfig = field(default_factory=TrainConfig)
    shadow: TrainConfig | None = None
    attacker: AttackTrainConfig = field(default_factory=AttackTrainConfig)
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    defenses: tuple = (DefenseConfig(kind="none"),)

    def __post_init__(self):
        if self.config_version != CONFIG_VERSION:
            raise ConfigError(
                f"config_version {self.config_version} unsupported (expected {CONFIG_VERSION})"
            )
        if self.setting not in SETTINGS:
            raise ConfigError(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.setting == "dependent":
            if self.shadow is not None and self.shadow != self.victim:
                raise ConfigError(
                    "dependent setting requires victim and shadow to share one "
                    "training protocol; remove the shadow section or make it "
                    "identical to victim"
                )
            if self.shadow_scene is not None and self.shadow_scene != self.scene:
                raise ConfigError(
                    "dependent setting requires shadow data from the victim "
                    "distribution; remove the shadow_scene section"
                )

    @property
    def resolved_shadow(self) -> TrainConfig:
        return self.victim if self.shadow is None else self.shadow

    @property
    def resolved_shadow_scene(self) -> SceneConfig:
        if self.setting == "dependent":
            return self.scene
        if self.shadow_scene is not None:
            return self.shadow_scene
        return dataclasses.replace(
            self.scene, palette=SHIFTED_PALETTE[: self.scene.num_classes]
        )


def default_config(**overrides) -> ExperimentConfig:
    return ExperimentConfig(**overrides)


def _require_mapping(value, path: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(value).__name__}")
    return value


def _pop_scalar(mapping: dict, key: str, path: str, kind, default):
    if key not in mapping:
        return default
    raw = mapping.pop(key)
    where = f"{path}.{key}" if path else key
    if kind is float and isinstance(raw, int) and not isinstance(raw, bool):
        raw = float(raw)
    if kind is int and (isinstance(raw, bool) or not isinstance(raw, int)):
        raise ConfigError(f"{where}: expected an integer, got {raw!r}")
    if not isinstance(raw, kind):
        raise ConfigError(f"{where}: expected {kind.__name__}, got {raw!r}")
    return raw


def _reject_unknown(mapping: dict, path: str):
    if mapping:
        key = sorted(mapping)[0]
        where = f"{path}.{key}" if path else key
        raise ConfigError(f"unknown key {where!r}")


def _parse_scene(raw, path: str) -> SceneConfig:
    m = dict(_require_mapping(raw, path))
    palette_name = _pop_scalar(m, "palette", path, str, "default")
    if palette_name not in PALETTES:
        raise ConfigError(f"{path}.palette: expected one of {sorted(PALETTES)}, got {palette_name!r}")
    kwargs = {}
    for f in dataclasses.fields(SceneConfig):
        if f.name == "palette":
            continue
        kind = int if f.type is int or f.type == "int" else float
        value = _pop_scalar(m, f.name, path, kind, None)
        if value is not None:
            kwargs[f.name] = value
    _reject_unknown(m, path)
    num_classes = kwargs.get("num_classes", SceneConfig.num_classes)
    full = PALETTES[palette_name]
    if num_classes > len(full):
        raise ConfigError(
            f"{path}: palette {palette_name!r} has styles for at most {len(full)} classes"
        )
    kwargs["palette"] = full[:num_classes]
    try:
        return SceneConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_fields(raw, path: str, cls):
    """Build a flat dataclass from a mapping, casting ints to declared floats."""
    m = dict(_require_mapping(raw, path))
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name == "seed":
            continue
        if f.type in (int, "int"):
            kind = int
        elif f.type in (float, "float"):
            kind = float
        else:
            kind = str
        value = _pop_scalar(m, f.name, path, kind, None)
        if value is not None:
            kwargs[f.name] = value
    _reject_unknown(m, path)
    try:
        return cls(**kwargs)
    except (ValueError, ConfigError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_attacker(raw, path: str):
    m = dict(_require_mapping(raw, path))
    selector_raw = m.pop("selector", None)
    attacker = _parse_fields(m, path, AttackTrainConfig)
    if selector_raw is None:
        selector = SelectorConfig()
    else:
        selector = _parse_fields(selector_raw, f"{path}.selector", SelectorConfig)
    return attacker, selector


def _parse_defense(raw, path: str) -> DefenseConfig:
    if isinstance(raw, str):
        raw = {"kind": raw}
    return _parse_fields(raw, path, DefenseConfig)


def parse_config(document: dict) -> ExperimentConfig:
    m = dict(_require_mapping(document, "config"))
    kwargs = {}
    kwargs["config_version"] = _pop_scalar(m, "config_version", "", int, CONFIG_VERSION)
    kwargs["seed"] = _pop_scalar(m, "seed", "", int, ExperimentConfig.seed)
    kwargs["out_dir"] = _pop_scalar(m, "out_dir", "", str, ExperimentConfig.out_dir)
    kwargs["setting"] = _pop_scalar(m, "setting", "", str, ExperimentConfig.setting)
    if "scene" in m:
        kwargs["scene"] = _parse_scene(m.pop("scene"), "scene")
    if "shadow_scene" in m:
        kwargs["shadow_scene"] = _parse_scene(m.pop("shadow_scene"), "shadow_scene")
    if "split" in m:
        kwargs["split"] = _parse_fields(m.pop("split"), "split", SplitSizes)
    if "victim" in m:
        kwargs["victim"] = _parse_fields(m.pop("victim"), "victim", TrainConfig)
    if "shadow" in m:
        kwargs["shadow"] = _parse_fields(m.pop("shadow"), "shadow", TrainConfig)
    if "attacker" in m:
        kwargs["attacker"], kwargs["selector"] = _parse_attacker(m.pop("attacker"), "attacker")
    if "defenses" in m:
        raw_list = m.pop("defenses")
        if not isinstance(raw_list, list) or not raw_list:
            raise ConfigError("defenses: expected a non-empty list")
        kwargs["defenses"] = tuple(
            _parse_defense(entry, f"defenses[{i}]") for i, entry in enumerate(raw_list)
        )
    _reject_unknown(m, "")
    return ExperimentConfig(**kwargs)


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            document = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not parseable: {exc}") from exc
    if document is None:
        document = {}
    return parse_config(document)


def _scene_to_dict(scene: SceneConfig) -> dict:
    d = {f.name: getattr(scene, f.name) for f in dataclasses.fields(SceneConfig)}
    for name, palette in PALETTES.items():
        if d["palette"] == palette[: len(d["palette"])]:
            d["palette"] = name
            break
    else:
        raise ConfigError("only the named palettes can be serialized")
    return d


def config_to_dict(config: ExperimentConfig) -> dict:
    """Round-trippable snapshot: parse_config(config_to_dict(c)) == c."""
    out = {
        "config_version": config.config_version,
        "seed": config.seed,
        "out_dir": config.out_dir,
        "setting": config.setting,
        "scene": _scene_to_dict(config.scene),
        "split": dataclasses.asdict(config.split),
        "victim": dataclasses.asdict(config.victim),
        "attacker": dataclasses.asdict(config.attacker),
        "defenses": [dataclasses.asdict(d) for d in config.defenses],
    }
    out["attacker"]["selector"] = dataclasses.asdict(config.selector)
    if config.shadow is not None:
        out["shadow"] = dataclasses.asdict(config.shadow)
    if config.shadow_scene is not None:
        out["shadow_scene"] = _scene_to_dict(config.shadow_scene)
    return out
