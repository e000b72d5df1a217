"""
Configuration management with immutable snapshots.

Loads from: flag overrides > environment (.env files) > settings JSON > defaults
and hands every run an immutable RunConfig snapshot.
"""

import json
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from dotenv import load_dotenv

from .objective import GAMMA_PRESETS
from .storage import read_json, write_json
from .synthgen import SynthConfig
from .types import ConfigurationError, RunConfig


ENV_OUTPUT_ROOT = "SCALEGRAPH_OUTPUT_ROOT"

# Defaults (one entry per RunConfig field)
DEFAULT_CONFIG: Dict[str, Any] = RunConfig().to_dict()

SYNTH_DEFAULTS: Dict[str, Any] = SynthConfig().to_dict()


def _parse_text(value: str) -> Any:
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def coerce_value(key: str, value: Any, defaults: Optional[Dict[str, Any]] = None) -> Any:
    """
    Coerce a raw value (JSON scalar or flag string) to the type of the
    field's default.
    """
    defaults = DEFAULT_CONFIG if defaults is None else defaults
    if key not in defaults:
        raise ConfigurationError(f"unknown config key: {key}")
    default = defaults[key]
    if isinstance(value, str) and not isinstance(default, str):
        value = _parse_text(value)

    if key == "seeds":
        if isinstance(value, (int, float)):
            value = [value]
        elif isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        return tuple(int(v) for v in value)
    if default is None:
        # optional float fields (synth text_noise)
        return None if value is None else float(value)
    if isinstance(default, bool):
        if isinstance(value, str):
            lowered = value.strip().lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigurationError(f"{key} expects a boolean (got {value!r})")
            return lowered in ("true", "1", "yes")
        return bool(value)
    try:
        return type(default)(value)
    except (TypeError, ValueError):
        raise ConfigurationError(
            f"{key} expects {type(default).__name__} (got {value!r})"
        ) from None


class Config:
    """
    Single source of truth for run settings.

    Usage:
        config = Config.load("settings.json", overrides={"shots": 8})
        run_config = config.snapshot()    # immutable, validated
        synth = config.synth_config()
    """

    def __init__(self):
        self.values: Dict[str, Any] = dict(DEFAULT_CONFIG)
        self.synth: Dict[str, Any] = dict(SYNTH_DEFAULTS)
        self.gamma_preset: str = ""
        self.settings_file: Optional[Path] = None
        self._explicit: set = set()

    @classmethod
    def load(
        cls,
        settings_file: Optional[Path] = None,
        overrides: Optional[Dict[str, Any]] = None,
        env_files: Iterable[Path] = (),
    ) -> "Config":
        """Load configuration from all sources."""
        config = cls()
        if settings_file is not None:
            config.settings_file = Path(settings_file)
            config._apply_settings(read_json(settings_file))
        config._load_env(env_files)
        if overrides:
            config.apply(overrides)
        return config

    def _load_env(self, env_files: Iterable[Path]) -> None:
        """Read .env files (project root, data dir) then the environment."""
        candidates = [Path(".env"), *map(Path, env_files)]
        if self.values["dataset_path"]:
            candidates.append(Path(self.values["dataset_path"]) / ".env")
        for env_file in candidates:
            if env_file.exists():
                load_dotenv(env_file, override=False)

        output_root = os.getenv(ENV_OUTPUT_ROOT)
        if output_root:
            self.values["output_dir"] = output_root

    def _apply_settings(self, data: Dict[str, Any]) -> None:
        if not isinstance(data, dict):
            raise ConfigurationError("settings file must hold a JSON object")
        data = dict(data)
        synth = data.pop("synth", None)
        if synth is not None:
            self.apply({f"synth.{k}": v for k, v in synth.items()})
        self.apply(data)

    def apply(self, overrides: Dict[str, Any]) -> None:
        """
        Apply key/value overrides. `synth.<field>` keys target the
        synthetic dataset config; `gamma_preset` selects a named gamma.
        """
        for key, value in overrides.items():
            if key == "gamma_preset":
                if value not in GAMMA_PRESETS:
                    raise ConfigurationError(
                        f"unknown gamma preset: {value!r} (expected one of {sorted(GAMMA_PRESETS)})"
                    )
                self.gamma_preset = str(value)
            elif key.startswith("synth."):
                name = key[len("synth."):]
                self.synth[name] = coerce_value(name, value, SYNTH_DEFAULTS)
            else:
                self.values[key] = coerce_value(key, value)
                self._explicit.add(key)

    def snapshot(self) -> RunConfig:
        """Return an immutable, validated copy for one run."""
        values = dict(self.values)
        values["seeds"] = tuple(values["seeds"])
        if self.gamma_preset and "gamma" not in self._explicit:
            values["gamma"] = GAMMA_PRESETS[self.gamma_preset]
        run_config = RunConfig(**values)
        run_config.validate()
        return run_config

    def synth_config(self) -> SynthConfig:
        synth = SynthConfig(**self.synth)
        synth.validate()
        return synth

    def save_settings(self, path: Path) -> None:
        """Write the current settings (including synth and gamma preset) as JSON."""
        data = dict(self.values)
        data["seeds"] = list(data["seeds"])
        if self.gamma_preset:
            data["gamma_preset"] = self.gamma_preset
            if "gamma" not in self._explicit:
                del data["gamma"]
        data["synth"] = dict(self.synth)
        write_json(path, data)
