"""``key = value`` configuration files.

Keys are ``section.field`` where the section names one of the config types
(``train``, ``fusion``, ``detector``, ``render``, ``encoding``, ``mlp``) and the
field is a dataclass field of that type, e.g. ``train.lr_start = 0.01``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

from .detector import DetectorConfig
from .field import EncodingConfig, MLPConfig
from .pipeline import FusionConfig
from .render import RenderConfig
from .trainer import TrainConfig

SECTIONS = {
    "train": TrainConfig,
    "fusion": FusionConfig,
    "detector": DetectorConfig,
    "render": RenderConfig,
    "encoding": EncodingConfig,
    "mlp": MLPConfig,
}


class ConfigError(ValueError):
    pass


def parse_config(text: str, source: str = "<config>") -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {name: {} for name in SECTIONS}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"{source}:{n}: key {key!r} needs a section prefix")
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"{source}:{n}: unknown section {section!r}")
        if name not in {f.name for f in dataclasses.fields(SECTIONS[section])}:
            raise ConfigError(f"{source}:{n}: {section} has no field {name!r}")
        out[section][name] = value
    return out


def _convert(value: str, default):
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float) or default is None:
        if value.lower() in ("none", ""):
            return None
        v = value.lower()
        if v.endswith("deg"):
            return math.radians(float(v[:-3]))
        return float(value)
    return value


@dataclass
class Settings:
    train: TrainConfig = field(default_factory=TrainConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    mlp: MLPConfig = field(default_factory=MLPConfig)

    def update(self, section: str, **values) -> None:
        """Override fields of one section; string values are converted to the field's type."""
        cur = getattr(self, section)
        conv = {}
        for k, v in values.items():
            if v is None:
                continue
            conv[k] = _convert(v, getattr(cur, k)) if isinstance(v, str) else v
        if conv:
            setattr(self, section, dataclasses.replace(cur, **conv))


def load_settings(path=None, base: Settings | None = None) -> Settings:
    s = base or Settings()
    if path is None:
        return s
    parsed = parse_config(Path(path).read_text(), str(path))
    for section, values in parsed.items():
        try:
            s.update(section, **values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: section {section}: {exc}") from None
    return s
