"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Every key of :class:`AVRetriever` is
accepted; its constructor default is the documented default. The dataset spec file
used by ``gen-data`` has the same syntax with :class:`SyntheticDatasetSpec` keys.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .alignment import AlignmentConfig, MarginConfig, Temperature
from .data_io import SyntheticDatasetSpec
from .estimator import AVRetriever

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(raw)
            return low in _TRUE
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _typed(values: dict[str, str], defaults: dict, what: str) -> dict:
    unknown = sorted(set(values) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown {what} keys: {', '.join(unknown)}")
    return {k: _coerce(k, v, defaults[k]) for k, v in values.items()}


def run_config_defaults() -> dict:
    return AVRetriever().get_params()


def estimator_from_config(values: dict[str, str] | None = None, **overrides) -> AVRetriever:
    """Build and validate an estimator; any constraint violation becomes :class:`ConfigError`."""
    params = _typed(values or {}, run_config_defaults(), "config")
    params.update(overrides)
    est = AVRetriever(**params)
    try:
        est._validate_params()
        est.model_dims()
        AlignmentConfig(est.alpha, est.alignment_mode, est.lse_normalized)
        MarginConfig(est.lam, est.delta, est.margin_mode, est.fixed_margin)
        Temperature(est.tau_init)
        if est.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if est.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be adam or sgd")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return est


def read_kv(path) -> dict[str, str]:
    return parse_kv(_read(path), str(path))


def load_run_config(path, **overrides) -> AVRetriever:
    return estimator_from_config(read_kv(path), **overrides)


def load_dataset_spec(path) -> SyntheticDatasetSpec:
    defaults = {f.name: f.default for f in dataclasses.fields(SyntheticDatasetSpec)}
    values = _typed(read_kv(path), defaults, "dataset spec")
    try:
        return SyntheticDatasetSpec(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def dump_kv(values: dict) -> str:
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in values.items())


def _read(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path} is not UTF-8 text") from exc
