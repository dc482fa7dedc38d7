"""Settings from a JSON config file, environment variables and CLI flags.

Precedence, lowest first: built-in defaults, the config file, environment
variables, explicit command-line flags.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .backends.base import CAPABILITIES, Backend, CompositeBackend
from .backends.oracle import OracleBackend
from .backends.wire import WireBackend, WireConfig
from .simenv.spec import AppSpec

BACKENDS = ("oracle", "wire")
SECTIONS = {"backend", "seed", "trace", "oracle", "wire", "overrides", "explore", "run", "bench"}

# environment variable -> (section, key, type)
ENV_VARS = {
    "KOBE_BACKEND": (None, "backend", str),
    "KOBE_SEED": (None, "seed", int),
    "KOBE_WIRE_BASE_URL": ("wire", "base_url", str),
    "KOBE_WIRE_API_KEY_ENV": ("wire", "api_key_env", str),
    "KOBE_WIRE_MODEL": ("wire", "default_model", str),
    "KOBE_WIRE_EMBEDDING_MODEL": ("wire", "embedding_model", str),
    "KOBE_WIRE_TIMEOUT_MS": ("wire", "timeout_ms", int),
    "KOBE_WIRE_MAX_ATTEMPTS": ("wire", "max_attempts", int),
    "KOBE_WIRE_CONCURRENCY": ("wire", "concurrency", int),
}


class ConfigError(ValueError):
    pass


@dataclass
class Settings:
    backend: str = "oracle"
    seed: int = 0
    trace: str | None = None
    oracle: dict[str, Any] = field(default_factory=dict)
    wire: dict[str, Any] = field(default_factory=dict)
    overrides: dict[str, str] = field(default_factory=dict)
    explore: dict[str, Any] = field(default_factory=dict)
    run: dict[str, Any] = field(default_factory=dict)
    bench: dict[str, Any] = field(default_factory=dict)

    def validate(self) -> None:
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, not {self.backend!r}")
        for capability, name in self.overrides.items():
            if capability not in CAPABILITIES:
                raise ConfigError(f"unknown capability {capability!r} in overrides")
            if name not in BACKENDS:
                raise ConfigError(f"override for {capability} names unknown backend {name!r}")
        try:
            WireConfig.from_dict(self.wire)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"wire: {exc}") from None
        unknown = set(self.oracle) - {"dim", "fallback_accuracy"}
        if unknown:
            raise ConfigError(f"unknown oracle keys {sorted(unknown)}")


def load_settings(path: str | Path | None = None, env: dict[str, str] | None = None,
                  **flags: Any) -> Settings:
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(data) - SECTIONS
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
    settings = Settings(**data)
    env = os.environ if env is None else env
    for var, (section, key, kind) in ENV_VARS.items():
        if var not in env:
            continue
        try:
            value = kind(env[var])
        except ValueError:
            raise ConfigError(f"{var} must be {kind.__name__}") from None
        if section is None:
            setattr(settings, key, value)
        else:
            getattr(settings, section)[key] = value
    for key, value in flags.items():
        if value is not None:
            setattr(settings, key, value)
    settings.validate()
    return settings


def make_backend(settings: Settings, apps: Iterable[AppSpec], trace_path: str | Path | None = None) -> Backend:
    apps = list(apps)
    built: dict[str, Backend] = {}

    def get(name: str) -> Backend:
        if name not in built:
            if name == "oracle":
                built[name] = OracleBackend(apps, seed=settings.seed, **settings.oracle)
            else:
                built[name] = WireBackend(WireConfig.from_dict(settings.wire))
        return built[name]

    default = get(settings.backend)
    overrides = {cap: get(name) for cap, name in settings.overrides.items()}
    return CompositeBackend(default, overrides, trace_path=trace_path)
