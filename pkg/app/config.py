import hashlib
import json
import os
from dataclasses import MISSING, asdict, fields, is_dataclass
from pathlib import Path
from typing import Any

from app.runtime import ConfigError


def LOG_LEVEL():
    return os.getenv("MPSEG_LOG_LEVEL", "INFO").upper()


def DETERMINISTIC():
    return os.getenv("MPSEG_DETERMINISTIC")


def SLOW_TESTS():
    return os.getenv("MPSEG_SLOW_TESTS")


def _coerce(name: str, default: object, value: object) -> object:
    """Coerce JSON values back into the shape of the dataclass default"""
    match default:
        case bool():
            if not isinstance(value, bool):
                raise ConfigError(f"'{name}' must be true or false, got {value!r}")
            return value
        case int():
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"'{name}' must be an integer, got {value!r}")
            return value
        case float():
            if isinstance(value, bool) or not isinstance(value, int | float):
                raise ConfigError(f"'{name}' must be a number, got {value!r}")
            return float(value)
        case tuple():
            if not isinstance(value, list | tuple) or len(value) != len(default):
                raise ConfigError(f"'{name}' must be a list of {len(default)} values, got {value!r}")
            return tuple(_coerce(name, d, v) for d, v in zip(default, value, strict=True))
        case str():
            if not isinstance(value, str):
                raise ConfigError(f"'{name}' must be a string, got {value!r}")
            return value
        case _:
            return value


def from_dict[T](cls: type[T], values: dict[str, Any]) -> T:
    if not is_dataclass(cls):
        raise TypeError(f"{cls} is not a dataclass")  # pragma: no cover
    known = {f.name: f for f in fields(cls)}
    if unknown := sorted(set(values) - set(known)):
        raise ConfigError(f"Unknown {cls.__name__} keys: {', '.join(unknown)}")

    kwargs = {}
    for name, value in values.items():
        f = known[name]
        default = f.default if f.default is not MISSING else None
        kwargs[name] = _coerce(name, default, value)
    obj = cls(**kwargs)
    if validate := getattr(obj, "validate", None):
        validate()
    return obj


def load_config[T](path: Path | str, cls: type[T]) -> T:
    try:
        values = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Can't read config {path}: {e}") from e
    if not isinstance(values, dict):
        raise ConfigError(f"Config {path} must be a JSON object")
    return from_dict(cls, values)


def to_dict(obj: object) -> dict[str, Any]:
    if not is_dataclass(obj) or isinstance(obj, type):
        raise TypeError(f"{obj!r} is not a dataclass instance")  # pragma: no cover
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(obj).items()}


def dump_config(obj: object, path: Path | str):
    Path(path).write_text(json.dumps(to_dict(obj), indent=2, sort_keys=True) + "\n")


def with_overrides[T](obj: T, **changes: object) -> T:
    """dataclasses.replace() that skips None values, i.e. CLI flags that weren't given"""
    given = {k: v for k, v in changes.items() if v is not None}
    if not given:
        return obj
    values = to_dict(obj) | given
    return from_dict(type(obj), values)


def fingerprint(*objs: object) -> str:
    """Short stable hash of config dataclasses and plain values"""
    payload = [to_dict(o) if is_dataclass(o) else o for o in objs]
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]
