"""Plain-text ``section.key = value`` run configuration.

Sections map onto the library dataclasses; unknown keys are rejected and
every run writes the fully resolved configuration next to its outputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional

from .adapt import AdaptConfig, CalibrationProtocol
from .model import ModelConfig
from .pseudolabel import NoiseConfig
from .synthcorpus import CorpusConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


SECTIONS = {
    "corpus": CorpusConfig,
    "noise": NoiseConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "adapt": AdaptConfig,
    "calib": CalibrationProtocol,
}


@dataclass(frozen=True)
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    calib: CalibrationProtocol = field(default_factory=CalibrationProtocol)

    def to_text(self) -> str:
        lines = []
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                lines.append(f"{section}.{f.name} = {format_value(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:8]

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(format_value(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _scalar(text: str, kind):
    text = text.strip()
    if kind is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind in (int, float):
        return kind(text)
    return text


def parse_value(text: str, hint):
    """Convert ``text`` according to a resolved type hint (scalars, tuples, Optional)."""
    origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin is typing.Union:
        if text.strip().lower() == "none":
            return None
        inner = [a for a in args if a is not type(None)]
        return parse_value(text, inner[0])
    if hint is tuple or origin is tuple:
        kind = args[0] if args and args[0] is not Ellipsis else float
        parts = [p for p in text.split(",") if p.strip()]
        return tuple(_scalar(p, kind if kind in (int, float, bool, str) else float) for p in parts)
    if hint in (bool, int, float, str):
        return _scalar(text, hint)
    raise ConfigError(f"unsupported config type {hint!r}")


def _hints(cls):
    return typing.get_type_hints(cls)


# tuples whose elements are not floats
_TUPLE_KINDS = {("train", "enabled_tasks"): str, ("calib", "k_samples"): int, ("calib", "subjects"): str,
                ("model", "channels"): int, ("model", "probe_widths"): int, ("model", "image_size"): int}


def parse_lines(lines: Iterable[str], origin: str = "<config>") -> Dict[str, str]:
    out = {}
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def build_config(values: Dict[str, str], base: Optional[RunConfig] = None) -> RunConfig:
    """Apply raw ``section.key -> text`` values on top of ``base`` (defaults)."""
    base = base or RunConfig()
    updates: Dict[str, dict] = {s: {} for s in SECTIONS}
    for key, text in values.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        hints = _hints(SECTIONS[section])
        if name not in hints:
            raise ConfigError(f"unknown config key {key!r}")
        hint = hints[name]
        if (section, name) in _TUPLE_KINDS:
            kind = _TUPLE_KINDS[(section, name)]
            hint = Optional[typing.Tuple[kind, ...]] if typing.get_origin(hint) is typing.Union else typing.Tuple[kind, ...]
        try:
            updates[section][name] = parse_value(text, hint)
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {e}") from None
    sections = {}
    for section in SECTIONS:
        try:
            sections[section] = dataclasses.replace(getattr(base, section), **updates[section])
        except (ValueError, TypeError) as e:
            raise ConfigError(f"invalid {section} config: {e}") from None
    return RunConfig(**sections)


def load_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    """Read a config file (optional) and then ``section.key=value`` overrides."""
    values: Dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        values.update(parse_lines(path.read_text().splitlines(), str(path)))
    values.update(parse_lines(overrides, "--set"))
    return build_config(values)
