"""
Versioned YAML documents, dataclass (de)serialization and seed fan-out.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Type, TypeVar

import numpy as np
import yaml
from rich.logging import RichHandler

from . import constants
from .errors import InvalidConfigError, VersionError

logger = logging.getLogger(__name__)
logger.addHandler(RichHandler())

D = TypeVar("D")


def plain(value: Any) -> Any:
    "Converts tuples, numpy scalars and arrays to YAML-safe builtins."

    if isinstance(value, dict):
        return {str(k): plain(v) for (k, v) in value.items()}

    if isinstance(value, (list, tuple)):
        return [plain(v) for v in value]

    if isinstance(value, np.ndarray):
        return plain(value.tolist())

    if isinstance(value, np.integer):
        return int(value)

    if isinstance(value, np.floating):
        return float(value)

    return value


def load_document(path: str | Path, version: int) -> Dict[str, Any]:
    """
    Reads a YAML mapping with a top-level integer ``version``.

    Raises
    ------

    InvalidConfigError when the file cannot be read or is not a versioned mapping,
    VersionError when the version is not ``version``.
    """

    try:
        with open(path) as f:
            document = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise InvalidConfigError(f"cannot read {path}: {e}") from e

    return check_document(document, version, str(path))


def check_document(document: Any, version: int, name: str = "document") -> Dict[str, Any]:
    if not isinstance(document, dict):
        raise InvalidConfigError(f"{name} must be a mapping")

    found = document.get("version")
    if not isinstance(found, int):
        raise InvalidConfigError(f"{name} has no integer version")

    if found != version:
        raise VersionError(f"{name} has version {found}, supported version {version}")

    return document


def dump_document(document: Mapping[str, Any], path: str | Path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(plain(dict(document)), f, sort_keys=True)


def config_hash(document: Mapping[str, Any]) -> str:
    "Stable short digest of a document's canonical YAML form."

    text = yaml.safe_dump(plain(dict(document)), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def from_dict(
    cls: Type[D],
    document: Mapping[str, Any],
    converters: Mapping[str, Callable[[Any], Any]] | None = None,
) -> D:
    """
    Builds a dataclass from a mapping, rejecting unknown keys.

    Missing keys take the dataclass defaults. ``converters`` coerce individual fields.
    """

    converters = converters or {}
    names = {f.name for f in dataclasses.fields(cls)}

    if unknown := set(document) - names - {"version"}:
        raise InvalidConfigError(f"unknown {cls.__name__} keys {sorted(unknown)}")

    values = {}
    for (name, value) in document.items():
        if name not in names:
            continue

        try:
            values[name] = converters[name](value) if name in converters else value
        except (TypeError, ValueError) as e:
            raise InvalidConfigError(f"bad value for {name!r}: {e}") from e

    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise InvalidConfigError(f"bad {cls.__name__}: {e}") from e


def to_dict(instance: Any) -> Dict[str, Any]:
    return plain(dataclasses.asdict(instance))


def stage_rng(seed: int, stage: str, index: int = 0) -> np.random.Generator:
    """
    Random generator for one pipeline stage.

    Streams are keyed by ``(stage, index)`` under the run seed, so adding a stage or a
    tracker never changes the numbers drawn by the others.
    """

    sequence = np.random.SeedSequence(seed, spawn_key=(constants.STAGES[stage], index))
    return np.random.default_rng(sequence)
