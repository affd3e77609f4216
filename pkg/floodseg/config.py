"""Plain-text run configuration.

One `key = value` per line, `#` comments and blank lines ignored. Keys are
matched against the CLI's parameter names (dashes and underscores are
interchangeable) and become click default values, so flags always win.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import click
from structlog import get_logger

from . import ConfigError

_log = get_logger(__name__)


def normalise_key(key: str) -> str:
    return key.strip().lower().replace("-", "_")


@dataclass
class RunConfig:
    values: Dict[str, str] = field(default_factory=dict)
    path: Optional[Path] = None

    @classmethod
    def parse(cls, text: str, path: Optional[Path] = None) -> "RunConfig":
        values: Dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = line.split("=", 1)
            key = normalise_key(key)
            if not key:
                raise ConfigError(f"line {lineno}: empty key")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = value.strip()
        return cls(values, path)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as err:
            raise ConfigError(f"Cannot read config {path}: {err.strerror}") from err
        config = cls.parse(text, path)
        _log.debug("Loaded config", path=str(path), keys=sorted(config.values))
        return config


def _param_names(command: click.Command):
    return {p.name for p in command.params if p.name}


def build_default_map(config: RunConfig, group: click.Group) -> Dict:
    """click `default_map` for `group` from a loaded config.

    A key naming a group option sets only that; any other key applies to every
    subcommand that has a parameter of that name.
    """
    global_names = _param_names(group) - {"config"}
    default_map: Dict = {}
    for key, value in config.values.items():
        if key in global_names:
            default_map[key] = value
            continue
        matched = False
        for name, command in group.commands.items():
            if key in _param_names(command):
                default_map.setdefault(name, {})[key] = value
                matched = True
        if not matched:
            raise ConfigError(f"Unknown config key {key!r}")
    return default_map
