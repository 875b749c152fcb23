"""Canonical JSON codec for configurations, instances and reports.

Every dataclass in :mod:`shopstream.model` round-trips through
:func:`dumps`/:func:`loads` byte-identically: keys are sorted, floats use the
shortest repr that parses back to the same double, and unknown fields are
rejected with the path of the offending entry.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from enum import Enum
from functools import lru_cache
from pathlib import Path

from .model import SCHEMA_VERSION, EventStream, InputConfig, TargetMetrics


class SchemaError(ValueError):
    """Raised when a document does not match the expected schema."""


@lru_cache(maxsize=None)
def _hints(cls) -> dict[str, typing.Any]:
    return typing.get_type_hints(cls)


def _union_args(tp) -> tuple | None:
    origin = typing.get_origin(tp)
    if origin is typing.Union or origin is types.UnionType:
        return typing.get_args(tp)
    return None


def encode(value, tp=None):
    """Convert ``value`` into plain JSON types following its declared type."""
    if value is None:
        return None
    if dataclasses.is_dataclass(value):
        out = {}
        hints = _hints(type(value))
        for f in dataclasses.fields(value):
            out[f.name] = encode(getattr(value, f.name), hints[f.name])
        args = _union_args(tp) if tp is not None else None
        if args and sum(dataclasses.is_dataclass(a) for a in args) > 1:
            out["type"] = type(value).__name__
        return out
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, bool):
        return value
    if isinstance(value, (tuple, list)):
        inner = None
        if tp is not None and typing.get_args(tp):
            inner = typing.get_args(tp)[0]
        return [encode(v, inner) for v in value]
    if isinstance(value, dict):
        return {str(k): encode(v) for k, v in value.items()}
    if tp is float or (tp is not None and _union_args(tp) and float in _union_args(tp)):
        return float(value)
    if hasattr(value, "item"):  # numpy scalar
        return value.item()
    return value


def decode(tp, data, path: str = "$"):
    """Strictly rebuild a value of type ``tp`` from JSON data."""
    args = _union_args(tp)
    if args is not None:
        if data is None:
            if type(None) in args:
                return None
            raise SchemaError(f"{path}: null not allowed")
        classes = [a for a in args if dataclasses.is_dataclass(a)]
        if len(classes) > 1:
            if not isinstance(data, dict) or "type" not in data:
                raise SchemaError(f"{path}: missing 'type' discriminator")
            by_name = {c.__name__: c for c in classes}
            name = data["type"]
            if name not in by_name:
                raise SchemaError(f"{path}.type: unknown variant {name!r}")
            rest = {k: v for k, v in data.items() if k != "type"}
            return decode(by_name[name], rest, path)
        non_null = [a for a in args if a is not type(None)]
        return decode(non_null[0], data, path)

    if dataclasses.is_dataclass(tp):
        if not isinstance(data, dict):
            raise SchemaError(f"{path}: expected object for {tp.__name__}")
        hints = _hints(tp)
        names = {f.name for f in dataclasses.fields(tp)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise SchemaError(f"{path}: unknown field '{unknown[0]}'")
        kwargs = {}
        for f in dataclasses.fields(tp):
            if f.name in data:
                kwargs[f.name] = decode(hints[f.name], data[f.name], f"{path}.{f.name}")
            elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise SchemaError(f"{path}: missing field '{f.name}'")
        return tp(**kwargs)

    origin = typing.get_origin(tp)
    if origin in (tuple, list):
        if not isinstance(data, list):
            raise SchemaError(f"{path}: expected array")
        inner = typing.get_args(tp)[0] if typing.get_args(tp) else typing.Any
        items = [decode(inner, v, f"{path}[{i}]") for i, v in enumerate(data)]
        return tuple(items) if origin is tuple else items
    if isinstance(tp, type) and issubclass(tp, Enum):
        try:
            return tp(data)
        except ValueError as exc:
            raise SchemaError(f"{path}: {exc}") from None
    if tp is float:
        if isinstance(data, bool) or not isinstance(data, (int, float)):
            raise SchemaError(f"{path}: expected number")
        return float(data)
    if tp is int:
        if isinstance(data, bool) or not isinstance(data, int):
            raise SchemaError(f"{path}: expected integer")
        return data
    if tp is str:
        if not isinstance(data, str):
            raise SchemaError(f"{path}: expected string")
        return data
    if tp is bool:
        if not isinstance(data, bool):
            raise SchemaError(f"{path}: expected boolean")
        return data
    return data


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False, ensure_ascii=False)


def _document(kind: str, body) -> str:
    return canonical({"schema_version": SCHEMA_VERSION, "kind": kind, "body": body}) + "\n"


_KINDS = {"config": InputConfig, "instance": EventStream, "targets": TargetMetrics}


def dumps(obj) -> str:
    """Serialize a config, target set or event stream to canonical text."""
    if isinstance(obj, InputConfig):
        return _document("config", encode(obj))
    if isinstance(obj, TargetMetrics):
        return _document("targets", encode(obj))
    if isinstance(obj, EventStream):
        return _document("instance", encode(obj))
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def loads(text: str, expect: str | None = None):
    """Parse canonical text back into the matching dataclass."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise SchemaError("$: expected a JSON object")
    unknown = sorted(set(doc) - {"schema_version", "kind", "body"})
    if unknown:
        raise SchemaError(f"$: unknown field '{unknown[0]}'")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"$.schema_version: unsupported version {version!r}")
    kind = doc.get("kind")
    if kind not in _KINDS:
        raise SchemaError(f"$.kind: unknown document kind {kind!r}")
    if expect is not None and kind != expect:
        raise SchemaError(f"$.kind: expected {expect!r}, found {kind!r}")
    return decode(_KINDS[kind], doc.get("body"), "$.body")


def roundtrip(obj) -> str:
    """Serialize, parse and re-serialize; returns the final text."""
    return dumps(loads(dumps(obj)))


def save(obj, path: str | Path) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def load(path: str | Path, expect: str | None = None):
    return loads(Path(path).read_text(encoding="utf-8"), expect)


def write_json(path: str | Path, data) -> None:
    """Write an arbitrary JSON-able structure canonically."""
    Path(path).write_text(canonical(encode(data)) + "\n", encoding="utf-8")
