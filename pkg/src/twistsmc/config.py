"""Structured text configs: TOML in, TOML out.

Parsing uses the stdlib; emission is a small writer restricted to the value
kinds configs actually use (strings, booleans, integers, floats, flat lists,
nested tables), so parse -> emit -> parse is the identity.
"""

from __future__ import annotations

import json

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


def load_config(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def parse_config(text: str) -> dict:
    return tomllib.loads(text)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise TypeError(f"cannot emit config value of type {type(value).__name__}")


def emit_config(cfg: dict, _prefix: str = "") -> str:
    """Render a nested dict as TOML; scalars before sub-tables, keys in order."""
    lines = []
    tables = []
    for key, value in cfg.items():
        if isinstance(value, dict):
            tables.append((key, value))
        else:
            lines.append(f"{key} = {_fmt(value)}")
    for key, value in tables:
        name = f"{_prefix}{key}"
        lines.append(f"\n[{name}]")
        lines.append(emit_config(value, _prefix=f"{name}.").rstrip("\n"))
    return "\n".join(lines).strip("\n") + "\n"


def save_config(cfg: dict, path) -> None:
    with open(path, "w") as fh:
        fh.write(emit_config(cfg))
