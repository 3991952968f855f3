"""Flat INI configuration covering every design-decision default.

The file has five sections (scene, fusion, head, train, data) whose keys
mirror the corresponding dataclass fields; speed ranges are flattened into
``*_min`` / ``*_max`` key pairs.  Parsing starts from the package defaults,
so a config file only needs the keys it wants to change.  Unknown sections
or keys are rejected rather than ignored, and all value errors surface as
ConfigError.
"""

from __future__ import annotations

import dataclasses
import io
from configparser import ConfigParser, Error as IniError

from .errors import ConfigError
from .fusion import FusionConfig
from .head import HeadConfig
from .scene import NUM_CLASSES, SceneConfig
from .training import TrainConfig


@dataclasses.dataclass(frozen=True)
class DataConfig:
    """Dataset sizing for gen and the loops."""

    train_sequences: int = 50
    eval_sequences: int = 20
    workers: int = 1

    def __post_init__(self):
        if self.train_sequences < 0 or self.eval_sequences < 0:
            raise ConfigError("sequence counts must be non-negative")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")


@dataclasses.dataclass(frozen=True)
class AppConfig:
    scene: SceneConfig
    fusion: FusionConfig
    head: HeadConfig
    train: TrainConfig
    data: DataConfig


# tuple-valued dataclass fields flattened into min/max INI keys
_TUPLE_KEYS = {
    "scene": {"small_speed": ("small_speed_min", "small_speed_max"),
              "large_speed": ("large_speed_min", "large_speed_max")},
}


def default_config() -> AppConfig:
    scene = SceneConfig()
    return AppConfig(
        scene=scene,
        fusion=FusionConfig(channels=scene.channels),
        head=HeadConfig(num_classes=NUM_CLASSES, channels=scene.channels),
        train=TrainConfig(),
        data=DataConfig())


def _to_str(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _from_str(raw: str, template, section: str, key: str):
    raw = raw.strip()
    try:
        if isinstance(template, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc


def _section_items(section: str, obj) -> list:
    items = []
    tuples = _TUPLE_KEYS.get(section, {})
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if f.name in tuples:
            lo_key, hi_key = tuples[f.name]
            items.append((lo_key, _to_str(value[0])))
            items.append((hi_key, _to_str(value[1])))
        else:
            items.append((f.name, _to_str(value)))
    return items


def dump_config(app: AppConfig) -> str:
    """Serialize to INI text; stable ordering, round-trips through parse."""
    cp = ConfigParser(interpolation=None)
    for section in ("scene", "fusion", "head", "train", "data"):
        cp.add_section(section)
        for key, value in _section_items(section, getattr(app, section)):
            cp.set(section, key, value)
    out = io.StringIO()
    cp.write(out)
    return out.getvalue()


def _parse_section(section: str, cp: ConfigParser, default_obj):
    kwargs = {f.name: getattr(default_obj, f.name)
              for f in dataclasses.fields(default_obj)}
    if not cp.has_section(section):
        return kwargs
    tuples = _TUPLE_KEYS.get(section, {})
    reverse = {ini_key: (field, pos)
               for field, keys in tuples.items()
               for pos, ini_key in enumerate(keys)}
    for key, raw in cp.items(section):
        if key in reverse:
            field, pos = reverse[key]
            pair = list(kwargs[field])
            pair[pos] = _from_str(raw, pair[pos], section, key)
            kwargs[field] = tuple(pair)
        elif key in kwargs:
            kwargs[key] = _from_str(raw, kwargs[key], section, key)
        else:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
    return kwargs


def parse_config(text: str) -> AppConfig:
    cp = ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except IniError as exc:
        raise ConfigError(f"bad config syntax: {exc}") from exc
    known = ("scene", "fusion", "head", "train", "data")
    for section in cp.sections():
        if section not in known:
            raise ConfigError(f"unknown config section [{section}]")

    base = default_config()
    scene = SceneConfig(**_parse_section("scene", cp, base.scene))
    fusion_kwargs = _parse_section("fusion", cp, base.fusion)
    head_kwargs = _parse_section("head", cp, base.head)
    # channels follow the scene unless explicitly overridden
    if not (cp.has_section("fusion") and cp.has_option("fusion", "channels")):
        fusion_kwargs["channels"] = scene.channels
    if not (cp.has_section("head") and cp.has_option("head", "channels")):
        head_kwargs["channels"] = scene.channels
    app = AppConfig(
        scene=scene,
        fusion=FusionConfig(**fusion_kwargs),
        head=HeadConfig(**head_kwargs),
        train=TrainConfig(**_parse_section("train", cp, base.train)),
        data=DataConfig(**_parse_section("data", cp, base.data)))

    if app.fusion.channels != app.scene.channels:
        raise ConfigError(
            f"fusion channels {app.fusion.channels} do not match scene "
            f"channels {app.scene.channels}")
    if app.head.channels != app.scene.channels:
        raise ConfigError(
            f"head channels {app.head.channels} do not match scene "
            f"channels {app.scene.channels}")
    return app


def load_config(path) -> AppConfig:
    with open(path) as fh:
        return parse_config(fh.read())
