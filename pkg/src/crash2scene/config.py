"""Pipeline configuration: one TOML file, environment overrides, loud failures."""

from __future__ import annotations

import os

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .gateway import ENV_API_KEY, ENV_ENDPOINT, ENV_PROVIDER
from .optimize import GAConfig


@dataclass
class PipelineConfig:
    provider: str = "oracle"
    endpoint: str = ""
    api_key: str = ""
    oracle_book: str = ""
    cache_dir: str = ""
    out_dir: str = "out"
    seed: int = 0
    jobs: int = 1
    dt: float = 0.1
    horizon: float = 30.0
    samples_per_node: int = 1
    elements_path: str = ""
    rules_path: str = ""
    ga: GAConfig = field(default_factory=GAConfig)

    def validate(self) -> None:
        if self.jobs < 1:
            raise ConfigError(f"jobs must be at least 1, got {self.jobs}")
        if not 0.0 < self.dt <= 0.2:
            raise ConfigError(f"dt must lie in (0, 0.2], got {self.dt}")
        if self.horizon <= 0:
            raise ConfigError(f"horizon must be positive, got {self.horizon}")
        if self.samples_per_node < 1:
            raise ConfigError(
                f"samples_per_node must be at least 1, got {self.samples_per_node}")
        for label, path in (("oracle_book", self.oracle_book),
                            ("elements_path", self.elements_path),
                            ("rules_path", self.rules_path)):
            if path and not Path(path).exists():
                raise ConfigError(f"{label} does not exist: {path}")
        try:
            self.ga.validate()
        except Exception as exc:
            raise ConfigError(f"ga section invalid: {exc}") from exc


_PIPELINE_KEYS = {
    "out_dir": str, "cache_dir": str, "seed": int, "jobs": int,
    "samples_per_node": int,
}
_PROVIDER_KEYS = {
    "name": str, "endpoint": str, "api_key": str, "oracle_book": str,
}
_SIM_KEYS = {"dt": float, "horizon": float}
_PATH_KEYS = {"elements": str, "rules": str}
_GA_FIELDS = {f.name: f.type for f in fields(GAConfig)}


def _take(section: dict, allowed: dict, where: str) -> dict:
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    out = {}
    for key, value in section.items():
        want = allowed[key]
        if want is float and isinstance(value, int):
            value = float(value)
        if not isinstance(value, want):
            raise ConfigError(
                f"[{where}] {key} must be {want.__name__}, got {type(value).__name__}")
        out[key] = value
    return out


def load_config(path: str | Path | None = None, **overrides) -> PipelineConfig:
    """Read the TOML config file, then apply env vars, then explicit overrides.

    Sections: [pipeline], [provider], [simulator], [ga], [paths]. Unknown
    sections or keys fail loudly rather than being ignored.
    """
    cfg = PipelineConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config file is not valid TOML: {exc}") from exc
        unknown = sorted(set(raw) - {"pipeline", "provider", "simulator", "ga", "paths"})
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
        for key, value in _take(raw.get("pipeline", {}), _PIPELINE_KEYS, "pipeline").items():
            setattr(cfg, key, value)
        prov = _take(raw.get("provider", {}), _PROVIDER_KEYS, "provider")
        cfg.provider = prov.get("name", cfg.provider)
        cfg.endpoint = prov.get("endpoint", cfg.endpoint)
        cfg.api_key = prov.get("api_key", cfg.api_key)
        cfg.oracle_book = prov.get("oracle_book", cfg.oracle_book)
        for key, value in _take(raw.get("simulator", {}), _SIM_KEYS, "simulator").items():
            setattr(cfg, key, value)
        paths = _take(raw.get("paths", {}), _PATH_KEYS, "paths")
        cfg.elements_path = paths.get("elements", cfg.elements_path)
        cfg.rules_path = paths.get("rules", cfg.rules_path)
        ga_raw = raw.get("ga", {})
        unknown = sorted(set(ga_raw) - set(_GA_FIELDS))
        if unknown:
            raise ConfigError(f"unknown key(s) in [ga]: {', '.join(unknown)}")
        for key, value in ga_raw.items():
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"[ga] {key} must be numeric, got {type(value).__name__}")
            current = getattr(cfg.ga, key)
            setattr(cfg.ga, key, type(current)(value))

    if ENV_PROVIDER in os.environ:
        cfg.provider = os.environ[ENV_PROVIDER]
    if ENV_ENDPOINT in os.environ:
        cfg.endpoint = os.environ[ENV_ENDPOINT]
    if ENV_API_KEY in os.environ:
        cfg.api_key = os.environ[ENV_API_KEY]

    allowed = {f.name for f in fields(PipelineConfig)}
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in allowed:
            raise ConfigError(f"unknown config override: {key}")
        setattr(cfg, key, value)

    # seed reaches every stochastic stage through the one GA config
    cfg.ga.seed = cfg.seed
    cfg.ga.dt = cfg.dt
    cfg.ga.horizon = cfg.horizon
    cfg.validate()
    return cfg
