"""JSON config loading with strict validation.

Config files mirror the dataclass field names in snake_case; unknown
keys are rejected before any compute starts, and the dataclass
__post_init__ validators run on construction.
"""

from __future__ import annotations

import dataclasses
import json

from statm.errors import ConfigurationError


def dataclass_from_dict(cls, data, context: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{context}: expected an object, got {type(data).__name__}")
    field_map = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(field_map)
    if unknown:
        raise ConfigurationError(
            f"{context}: unknown key(s) {sorted(unknown)}; "
            f"valid keys: {sorted(field_map)}")
    kwargs = {}
    for name, value in data.items():
        f = field_map[name]
        ftype = f.type if not isinstance(f.type, str) else None
        target = _resolve_dataclass(cls, f)
        if target is not None and isinstance(value, dict):
            kwargs[name] = dataclass_from_dict(target, value, f"{context}.{name}")
        elif isinstance(value, list):
            kwargs[name] = _freeze(value)
        else:
            kwargs[name] = value
        del ftype
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigurationError(f"{context}: {e}") from None


def _freeze(value):
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


def _resolve_dataclass(owner, f: dataclasses.Field):
    """Nested dataclass type of a field, if any (handles string annotations)."""
    if dataclasses.is_dataclass(f.type):
        return f.type
    if f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
        probe = f.default_factory()  # type: ignore[misc]
        if dataclasses.is_dataclass(probe):
            return type(probe)
    return None


def load_json(path, context: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigurationError(f"{context}: file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{context}: invalid JSON in {path}: {e}") from None


def load_scene_spec(path):
    from statm.datagen import SceneSpec

    return dataclass_from_dict(SceneSpec, load_json(path, "scene spec"), "scene spec")


def load_run_config(path):
    from statm.train import RunConfig

    return dataclass_from_dict(RunConfig, load_json(path, "run config"), "run config")
