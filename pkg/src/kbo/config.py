"""Flat, typed ``key = value`` configuration files.

One setting per line; ``#`` starts a comment. Lists are comma separated
(surrounding brackets optional). Unknown keys, duplicate keys and values of
the wrong type are errors, so a config file fully determines a run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from kbo.errors import ConfigError
from kbo.experiments import StudyConfig


def _parse_int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        val = float(text)  # accepts "1e5"
        if not val.is_integer():
            raise ValueError(f"{text!r} is not an integer") from None
        return int(val)


def _parse_float(text: str) -> float:
    val = float(text)
    if not math.isfinite(val):
        raise ValueError(f"{text!r} is not finite")
    return val


def _parse_int_list(text: str) -> tuple:
    body = text.strip().removeprefix("[").removesuffix("]").strip()
    if not body:
        return ()
    return tuple(_parse_int(part.strip()) for part in body.split(","))


def _parse_str(text: str) -> str:
    return text.strip().strip('"').strip("'")


# config key -> (StudyConfig / RunConfig attribute, parser)
SCHEMA = {
    "kernel.sigma": ("sigma", _parse_float),
    "problem.p": ("p", _parse_int),
    "problem.d": ("d", _parse_int),
    "problem.coercivity": ("coercivity", _parse_float),
    "lambda": ("lam", _parse_float),
    "data.instrument_dist": ("instrument_dist", _parse_str),
    "data.nu": ("nu", _parse_float),
    "data.noise_std": ("noise_std", _parse_float),
    "data.truth_seed": ("truth_seed", _parse_int),
    "data.seed": ("data_seed", _parse_int),
    "data.n": ("data_n", _parse_int),
    "data.m": ("data_m", _parse_int),
    "study.grid": ("grid", _parse_int_list),
    "study.m_grid": ("m_grid", _parse_int_list),
    "study.seeds": ("seeds", _parse_int),
    "study.base_seed": ("base_seed", _parse_int),
    "oracle.kind": ("oracle_kind", _parse_str),
    "oracle.samples": ("oracle_samples", _parse_int),
    "oracle.features": ("oracle_features", _parse_int),
    "oracle.block_size": ("oracle_block_size", _parse_int),
    "oracle.seed": ("oracle_seed", _parse_int),
    "oracle.cache": ("oracle_cache", _parse_str),
    "optimizer.tol": ("tol", _parse_float),
    "optimizer.max_iter": ("max_iter", _parse_int),
}

_RUN_KEYS = {"data_seed", "data_n", "data_m"}


@dataclass(frozen=True)
class RunConfig:
    """A study configuration plus the single instance used by ``solve``,
    ``grad-check`` and ``equiv-check``."""

    study: StudyConfig = field(default_factory=StudyConfig)
    data_seed: int = 0
    data_n: int = 200
    data_m: int = 200

    def __post_init__(self):
        if self.data_n < 1 or self.data_m < 1:
            raise ConfigError("data.n and data.m must be positive")


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    study_kw: dict = {}
    run_kw: dict = {}
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        attr, parse = SCHEMA[key]
        try:
            parsed = parse(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
        (run_kw if attr in _RUN_KEYS else study_kw)[attr] = parsed
    try:
        return RunConfig(study=StudyConfig(**study_kw), **run_kw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise ConfigError(f"{source}: {exc}") from exc
        raise ConfigError(f"{source}: invalid configuration: {exc}") from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, source=str(path))


def format_config(cfg: RunConfig) -> str:
    """Canonical text form; ``parse_config(format_config(c)) == c``."""
    values = {f.name: getattr(cfg.study, f.name) for f in fields(cfg.study)}
    values.update(data_seed=cfg.data_seed, data_n=cfg.data_n, data_m=cfg.data_m)
    lines = []
    for key, (attr, _) in SCHEMA.items():
        val = values[attr]
        if isinstance(val, tuple):
            text = ", ".join(str(v) for v in val)
        elif isinstance(val, float):
            text = repr(val)
        else:
            text = str(val)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def override(cfg: RunConfig, **study_kw) -> RunConfig:
    return replace(cfg, study=replace(cfg.study, **study_kw))
