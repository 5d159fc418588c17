"""``key=value`` configuration files feeding click's ``default_map``.

Precedence is flag > file > built-in default. ``serve.max_sessions=4``
scopes a value to one command; a bare ``seed=3`` applies to every command
that has a ``seed`` option. Dashes and underscores in keys are equivalent.
"""

import logging
import os
from collections.abc import Mapping
from pathlib import Path

import click

from cipherdenoise.errors import EXIT_IO, ConfigError

logger = logging.getLogger(__name__)

CONFIG_ENV = "CIPHERDENOISE_CONFIG"
GLOBAL_SCOPE = ""

ConfigTable = dict[str, dict[str, str]]


def _normalize(key: str) -> str:
    return key.strip().replace("-", "_")


def parse_config(text: str, source: str = "<config>") -> ConfigTable:
    """Group values by command; bare keys land under :data:`GLOBAL_SCOPE`."""
    table: ConfigTable = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        command, dot, name = key.strip().rpartition(".")
        scope = command if dot else GLOBAL_SCOPE
        table.setdefault(scope, {})[_normalize(name)] = value.strip()
    return table


def read_config(path: str | Path | None = None) -> ConfigTable:
    """Read ``path``, or the file named by $CIPHERDENOISE_CONFIG; empty when neither."""
    location = path if path is not None else os.environ.get(CONFIG_ENV)
    if not location:
        return {}
    try:
        text = Path(location).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        error = ConfigError(f"cannot read config file {location}: {exc}")
        error.exit_code = EXIT_IO
        raise error from exc
    logger.debug("[cipherdenoise] Loaded configuration from %s", location)
    return parse_config(text, str(location))


def _option_names(command: click.Command) -> set[str]:
    return {p.name for p in command.params if isinstance(p, click.Option) and p.name}


def default_map(
    table: ConfigTable, commands: Mapping[str, click.Command]
) -> dict[str, dict[str, str]]:
    """Resolve a parsed table against the CLI's commands.

    Unknown commands or options are rejected so typos do not silently fall
    back to defaults.
    """
    result: dict[str, dict[str, str]] = {}
    for scope in table:
        if scope != GLOBAL_SCOPE and scope not in commands:
            raise ConfigError(f"config names unknown command {scope!r}")
    known_anywhere: set[str] = set()
    for name, command in commands.items():
        options = _option_names(command)
        known_anywhere |= options
        values = {k: v for k, v in table.get(GLOBAL_SCOPE, {}).items() if k in options}
        for key, value in table.get(name, {}).items():
            if key not in options:
                raise ConfigError(f"command {name!r} has no option {key!r}")
            values[key] = value
        if values:
            result[name] = values
    stray = set(table.get(GLOBAL_SCOPE, {})) - known_anywhere
    if stray:
        raise ConfigError(f"config sets unknown options: {', '.join(sorted(stray))}")
    return result
