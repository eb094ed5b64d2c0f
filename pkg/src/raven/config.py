"""Resolved pipeline configuration: defaults < config file < RAVEN_* env < flags."""

from __future__ import annotations

import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Optional, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .augment import DEFAULT_MAX_SOURCE_LENGTH, DEFAULT_SEPARATOR_TOKEN, TASKS, get_mode
from .decode import DEFAULT_BEAM
from .errors import RavenError
from .index import DEFAULT_TOP_K
from .retriever import DEFAULT_DEDUP_THRESHOLD

ENV_PREFIX = "RAVEN_"


class ConfigError(RavenError):
    """Invalid or conflicting configuration (reported as a usage error)."""


@dataclass
class PipelineConfig:
    store: Optional[str] = None
    backend: str = "exact"
    nlist: int = 16
    nprobe: int = 1
    top_k: int = DEFAULT_TOP_K
    dedup_threshold: float = DEFAULT_DEDUP_THRESHOLD
    max_source_length: int = DEFAULT_MAX_SOURCE_LENGTH
    task: str = "captioning"
    mode: str = "top_caption_all_captions"
    separator: str = DEFAULT_SEPARATOR_TOKEN
    beam: int = DEFAULT_BEAM
    seed: int = 0
    threads: int = 1

    def validate(self) -> "PipelineConfig":
        if self.backend not in ("exact", "ivf"):
            raise ConfigError(f"backend must be 'exact' or 'ivf', got {self.backend!r}")
        for name in ("nlist", "nprobe", "top_k", "max_source_length", "beam", "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.nprobe > self.nlist:
            raise ConfigError(f"nprobe ({self.nprobe}) exceeds nlist ({self.nlist})")
        if not 0.0 < self.dedup_threshold <= 1.0:
            raise ConfigError("dedup_threshold must be in (0, 1]")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        try:
            get_mode(self.task, self.mode)
        except RavenError as exc:
            raise ConfigError(str(exc)) from None
        if not self.separator or any(c.isspace() for c in self.separator):
            raise ConfigError("separator must be a single token without whitespace")
        return self

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


_FIELDS = {f.name: f for f in fields(PipelineConfig)}
_TYPES = {"int": int, "float": float, "str": str, "Optional[str]": str}


def _coerce(name: str, value: Any, source: str) -> Any:
    kind = _TYPES[str(_FIELDS[name].type)]
    if kind is int and isinstance(value, bool):
        raise ConfigError(f"{source}: {name} must be an integer")
    try:
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise ValueError
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{source}: cannot read {name}={value!r} as {kind.__name__}") from None


def load_config_file(path: Union[str, Path]) -> dict[str, Any]:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    unknown = sorted(set(raw) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {', '.join(unknown)}")
    return {k: _coerce(k, v, str(path)) for k, v in raw.items()}


def env_overrides(environ: Mapping[str, str]) -> dict[str, Any]:
    out = {}
    for key, value in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX) :].lower()
        if name not in _FIELDS:
            continue
        out[name] = _coerce(name, value, key)
    return out


def resolve(
    flags: Mapping[str, Any],
    config_path: Optional[Union[str, Path]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> PipelineConfig:
    """Merge the layers; ``flags`` entries that are ``None`` count as unset."""
    merged: dict[str, Any] = {}
    if config_path is not None:
        merged.update(load_config_file(config_path))
    merged.update(env_overrides(os.environ if environ is None else environ))
    merged.update({k: _coerce(k, v, "--" + k.replace("_", "-")) for k, v in flags.items() if v is not None and k in _FIELDS})
    return PipelineConfig(**merged).validate()
