"""Flat key=value experiment configuration with dotted section prefixes.

Example::

    paths.work_dir = runs/toy
    data.toy = true
    gan.lam = 1
    gan.epochs = 20
    aug.rot_per_image = 2

Unknown keys are rejected outright so typos cannot silently change a run.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, get_args, get_origin

from .augment import AugConfig
from .recognition import ClassifierConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    data_root: str = "."
    work_dir: str = "runs/default"


@dataclass
class DataConfig:
    toy: bool = True
    toy_seed: int = 0
    toy_side: int = 64
    toy_train_counts: str = (
        "plain_healthy:10,striped_healthy:10,plain_diseased:2,striped_diseased:2"
    )
    toy_test_per_class: int = 20
    manifest: str = ""  # pre-existing manifest path when toy=false
    target_per_class: int = 10
    frozen: str = ""  # ';'-separated class labels exempt from augmentation


@dataclass
class SyntheticConfig:
    # healthy>diseased pairs, ';'-separated, for routing translations to labels
    map: str = "plain_healthy>plain_diseased;striped_healthy>striped_diseased"


@dataclass
class ReportConfig:
    charts: bool = False
    reference: bool = True
    nima_cmd: str = ""


@dataclass
class ExperimentConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    gan: TrainConfig = field(default_factory=TrainConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    clf: ClassifierConfig = field(default_factory=ClassifierConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    def work_dir(self) -> Path:
        return Path(self.paths.work_dir)

    def synthetic_map(self) -> dict[str, str]:
        out = {}
        for pair in self.synthetic.map.split(";"):
            pair = pair.strip()
            if not pair:
                continue
            if ">" not in pair:
                raise ConfigError(f"bad synthetic.map entry {pair!r}")
            src, dst = (p.strip() for p in pair.split(">", 1))
            out[src] = dst
        return out

    def frozen_classes(self) -> set[str]:
        return {c.strip() for c in self.data.frozen.split(";") if c.strip()}

    def toy_train_counts(self) -> dict[str, int]:
        out = {}
        for pair in self.data.toy_train_counts.split(","):
            pair = pair.strip()
            if not pair:
                continue
            label, _, count = pair.partition(":")
            try:
                out[label.strip()] = int(count)
            except ValueError as e:
                raise ConfigError(f"bad data.toy_train_counts entry {pair!r}") from e
        return out


def _coerce(raw: str, annotation: Any, key: str) -> Any:
    import types
    import typing

    origin = get_origin(annotation)
    if origin in (typing.Union, types.UnionType):
        non_none = [a for a in get_args(annotation) if a is not type(None)]
        return _coerce(raw, non_none[0], key)
    if origin is tuple:
        args = get_args(annotation)
        parts = [p for p in raw.replace(";", ",").split(",") if p.strip()]
        elem = args[0]
        return tuple(_coerce(p.strip(), elem, key) for p in parts)
    if annotation in (int,):
        return int(raw)
    if annotation in (float,):
        return float(raw)
    if annotation is bool:
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if annotation is str:
        return raw
    raise ConfigError(f"{key}: unsupported value type {annotation!r}")


_RESOLVED_TYPES: dict[type, dict[str, Any]] = {}


def _field_types(cls) -> dict[str, Any]:
    if cls not in _RESOLVED_TYPES:
        import typing

        hints = typing.get_type_hints(cls)
        _RESOLVED_TYPES[cls] = hints
    return _RESOLVED_TYPES[cls]


def _resolve(config: ExperimentConfig, key: str, raw: str) -> tuple[str, str, Any]:
    """Validate a dotted key against the config schema and coerce its value."""
    if "." not in key:
        raise ConfigError(f"key {key!r} must be of the form section.name")
    section_name, _, name = key.partition(".")
    if not hasattr(config, section_name) or section_name.startswith("_"):
        raise ConfigError(f"unknown section {section_name!r}")
    section = getattr(config, section_name)
    if not dataclasses.is_dataclass(section):
        raise ConfigError(f"unknown section {section_name!r}")
    valid = {f.name for f in fields(section)}
    if name not in valid:
        raise ConfigError(f"unknown key {key!r}")
    annotation = _field_types(type(section))[name]
    return section_name, name, _coerce(raw, annotation, key)


def apply_setting(config: ExperimentConfig, key: str, raw: str) -> None:
    """Apply one setting immediately; section validation re-runs at once."""
    section_name, name, value = _resolve(config, key, raw)
    updated = dataclasses.replace(getattr(config, section_name), **{name: value})
    setattr(config, section_name, updated)


def load_config(path: str | Path | None, overrides: list[str] = ()) -> ExperimentConfig:
    """Parse a config file (optional), then apply ``key=value`` overrides.

    All settings for a section are applied as one batch, so interdependent
    fields (e.g. ``gan.epochs`` and ``gan.decay_start_epoch``) can be changed
    together in any order; overrides win over file values.
    """
    config = ExperimentConfig()
    staged: dict[str, dict[str, Any]] = {}

    def stage(key: str, raw: str, where: str) -> None:
        try:
            section_name, name, value = _resolve(config, key.strip(), raw.strip())
        except (ConfigError, ValueError) as e:
            raise ConfigError(f"{where}: {e}" if where else str(e)) from e
        staged.setdefault(section_name, {})[name] = value

    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            stage(key, value, f"{path}:{lineno}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must be key=value")
        key, _, value = item.partition("=")
        stage(key, value, "")
    for section_name, values in staged.items():
        try:
            setattr(
                config, section_name,
                dataclasses.replace(getattr(config, section_name), **values),
            )
        except (ConfigError, ValueError) as e:
            raise ConfigError(f"invalid {section_name} settings: {e}") from e
    return config
