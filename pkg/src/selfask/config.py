"""Run configuration: named backend profiles, seeds, cache and output paths.

The config file is JSON. String values may interpolate environment variables
with ``${VAR}``; API keys themselves never appear in the config, only the name
of the environment variable that holds them. Backend endpoints of the form
``mock:<script-path>`` route through the in-process scripted backend, with the
path resolved relative to the config file.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

from .gateway import BackendProfile, Gateway
from .jsonio import canonical_json, sha256_hex
from .mockllm import MockBackend, mock_transport


class ConfigError(ValueError):
    """Config file is missing, malformed, or internally inconsistent."""


_ENV_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def _interpolate(value: Any) -> Any:
    if isinstance(value, str):

        def sub(match: re.Match) -> str:
            name = match.group(1)
            if name not in os.environ:
                raise ConfigError(f"environment variable {name} is not set")
            return os.environ[name]

        return _ENV_RE.sub(sub, value)
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    return value


@dataclass(frozen=True)
class RunConfig:
    backends: Mapping[str, BackendProfile]
    default_backend: str
    seed: int = 0
    cache_path: str | None = None
    out_dir: str = "out"
    concurrency: int = 4
    config_dir: str = "."
    resolved: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.default_backend not in self.backends:
            raise ConfigError(f"default backend {self.default_backend!r} is not defined")

    def backend(self, backend_id: str | None = None) -> BackendProfile:
        backend_id = backend_id or self.default_backend
        if backend_id not in self.backends:
            raise ConfigError(f"backend {backend_id!r} is not defined")
        return self.backends[backend_id]


def _profile_from(backend_id: str, raw: Mapping[str, Any]) -> BackendProfile:
    if "endpoint" not in raw or "model" not in raw:
        raise ConfigError(f"backend {backend_id!r} needs endpoint and model")
    try:
        return BackendProfile(
            backend_id=backend_id,
            endpoint=raw["endpoint"],
            model=raw["model"],
            api_key_env=raw.get("api_key_env"),
            max_in_flight=int(raw.get("max_in_flight", 4)),
            retry_budget=int(raw.get("retry_budget", 2)),
            backoff_base=float(raw.get("backoff_base", 0.5)),
            timeout=float(raw.get("timeout", 60.0)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"backend {backend_id!r}: {exc}") from exc


def load_config(
    path: str,
    backend: str | None = None,
    seed: int | None = None,
    cache: str | None = None,
    out: str | None = None,
    concurrency: int | None = None,
) -> RunConfig:
    """Load a config file and apply command-line overrides."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    resolved = _interpolate(raw)

    backends_raw = resolved.get("backends")
    if not isinstance(backends_raw, dict) or not backends_raw:
        raise ConfigError("config needs a non-empty backends map")
    backends = {bid: _profile_from(bid, spec) for bid, spec in backends_raw.items()}

    config_dir = os.path.dirname(os.path.abspath(path))

    def anchored(value: str | None) -> str | None:
        # paths from the config file resolve against the file, not the cwd
        if value is None or os.path.isabs(value):
            return value
        return os.path.join(config_dir, value)

    if out is not None:
        out_dir = out  # command-line override stays cwd-relative
    else:
        out_dir = anchored(resolved.get("out", "out"))
    if cache is not None:
        cache_path = cache
    else:
        cache_path = anchored(resolved.get("cache"))

    config = RunConfig(
        backends=backends,
        default_backend=backend or resolved.get("default_backend") or next(iter(backends)),
        seed=seed if seed is not None else int(resolved.get("seed", 0)),
        cache_path=cache_path,
        out_dir=out_dir,
        concurrency=concurrency if concurrency is not None else int(resolved.get("concurrency", 4)),
        config_dir=config_dir,
        resolved=resolved,
    )
    return config


def config_digest(config: RunConfig) -> str:
    """Digest over the semantic config: backends, seed, concurrency.

    Output and cache placement are deliberately excluded so reruns into a
    different directory stay byte-comparable.
    """
    material = {
        "backends": {
            bid: {
                "endpoint": p.endpoint,
                "model": p.model,
                "api_key_env": p.api_key_env,
                "max_in_flight": p.max_in_flight,
                "retry_budget": p.retry_budget,
                "backoff_base": p.backoff_base,
                "timeout": p.timeout,
            }
            for bid, p in sorted(config.backends.items())
        },
        "default_backend": config.default_backend,
        "seed": config.seed,
        "concurrency": config.concurrency,
    }
    return sha256_hex(canonical_json(material))


def make_gateway(config: RunConfig) -> Gateway:
    """Build a gateway for all configured backends, wiring mock: endpoints."""
    transports = {}
    profiles = {}
    for backend_id, profile in config.backends.items():
        if profile.endpoint.startswith("mock:"):
            script_path = profile.endpoint[len("mock:"):]
            if not os.path.isabs(script_path):
                script_path = os.path.join(config.config_dir, script_path)
            transports[backend_id] = mock_transport(MockBackend.load(script_path))
            profile = replace(profile, endpoint="mock:")
        profiles[backend_id] = profile
    return Gateway(profiles, transports=transports)
