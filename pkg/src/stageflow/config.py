"""Flat key-value run configuration.

Every key has a default; unknown keys are rejected on load. The serialized
config hashes to a fingerprint that is embedded in all run outputs, and the
architecture-relevant subset hashes to a second fingerprint used to refuse
mixing checkpoints across incompatible model/world geometry.
"""

from __future__ import annotations

import hashlib
import sys
from pathlib import Path

from .errors import ConfigurationError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULTS: dict[str, object] = {
    "seed": 0,
    # world physics and rendering
    "world.v_max": 0.05,
    "world.r_grasp": 0.04,
    "world.t_hold": 8,
    "world.fall_dx": 0.0,
    "world.fall_dy": -0.08,
    "world.exo_grid": 12,
    "world.ego_grid": 5,
    "world.start_jitter": 0.25,
    # policy architecture
    "policy.d_model": 64,
    "policy.depth": 2,
    "policy.heads": 4,
    "policy.chunk_len": 8,
    "policy.action_dim": 3,
    "policy.d_cue": 32,
    "policy.film_hidden": 64,
    "policy.tau_dim": 16,
    "policy.sample_steps": 10,
    "policy.instr_budget": 12,
    "policy.done_window": 6,
    "policy.done_eps": 0.004,
    # training
    "train.batch_size": 16,
    "train.steps": 3000,
    "train.warmup": 300,
    "train.peak_lr": 1e-3,
    "train.final_lr": 1e-4,
    "train.beta1": 0.9,
    "train.beta2": 0.95,
    "train.adam_eps": 1e-8,
    "train.weight_decay": 1e-4,
    "train.clip": 1.0,
    "train.ema": 0.999,
    "train.observer": "off",
    "train.checkpoint_every": 1000,
    "train.log_every": 50,
    # demonstrations
    "demos.per_task": 40,
    # benchmark
    "bench.episodes": 100,
    "bench.seeds": 3,
    # observer backends
    "observer.refresh": "chunk",
    "vlm.endpoint": "",
    "vlm.timeout_s": 5.0,
    "vlm.retries": 2,
}

# Keys that determine whether a checkpoint is loadable against a config.
ARCH_KEYS = (
    "world.v_max",
    "world.exo_grid",
    "world.ego_grid",
    "policy.d_model",
    "policy.depth",
    "policy.heads",
    "policy.chunk_len",
    "policy.action_dim",
    "policy.d_cue",
    "policy.film_hidden",
    "policy.tau_dim",
    "policy.instr_budget",
)

PRESETS: dict[str, dict[str, object]] = {
    "desk": {},
    # Paper-scale hyperparameters kept verbatim for documentation parity;
    # not trainable on a desk CPU.
    "paper-scale": {
        "train.batch_size": 32,
        "train.steps": 60000,
        "train.warmup": 3000,
        "train.peak_lr": 2.0e-5,
        "train.final_lr": 2.0e-6,
        "policy.chunk_len": 50,
        "policy.d_cue": 8192,
    },
}


class RunConfig:
    """Immutable-ish flat config; index with the dotted key."""

    def __init__(self, overrides: dict[str, object] | None = None):
        self._values = dict(DEFAULTS)
        if overrides:
            for key, value in overrides.items():
                self._set(key, value)

    def _set(self, key: str, value: object) -> None:
        if key not in DEFAULTS:
            raise ConfigurationError(f"unknown config key: {key!r}")
        default = DEFAULTS[key]
        if isinstance(default, bool) != isinstance(value, bool):
            raise ConfigurationError(f"config key {key!r} expects {type(default).__name__}")
        if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, type(default)):
            raise ConfigurationError(
                f"config key {key!r} expects {type(default).__name__}, got {type(value).__name__}"
            )
        self._values[key] = value

    def __getitem__(self, key: str) -> object:
        if key not in self._values:
            raise ConfigurationError(f"unknown config key: {key!r}")
        return self._values[key]

    def items(self):
        return sorted(self._values.items())

    def with_overrides(self, overrides: dict[str, object]) -> "RunConfig":
        merged = dict(self._values)
        merged.update(overrides)
        return RunConfig(merged)

    def fingerprint(self) -> str:
        return _digest(self.items())

    def arch_fingerprint(self) -> str:
        return _digest((k, self._values[k]) for k in ARCH_KEYS)

    def as_dict(self) -> dict[str, object]:
        return dict(self._values)


def _digest(items) -> str:
    h = hashlib.sha256()
    for key, value in items:
        h.update(f"{key}={value!r}\n".encode("utf-8"))
    return h.hexdigest()[:16]


def _flatten(table: dict, prefix: str = "") -> dict[str, object]:
    flat: dict[str, object] = {}
    for key, value in table.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def load_config(path: str | Path | None = None, preset: str = "desk",
                overrides: dict[str, object] | None = None) -> RunConfig:
    """Build a config from preset + optional TOML file + explicit overrides."""
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; have {sorted(PRESETS)}")
    merged = dict(PRESETS[preset])
    if path is not None:
        with open(path, "rb") as fh:
            merged.update(_flatten(tomllib.load(fh)))
    if overrides:
        merged.update(overrides)
    return RunConfig(merged)


def dump_toml(config: RunConfig) -> str:
    """Resolved config as TOML (grouped by dotted prefix)."""
    groups: dict[str, list[tuple[str, object]]] = {}
    for key, value in config.items():
        table, _, leaf = key.rpartition(".")
        groups.setdefault(table, []).append((leaf, value))
    lines: list[str] = []
    for leaf, value in groups.pop("", []):
        lines.append(f"{leaf} = {_toml_value(value)}")
    for table in sorted(groups):
        lines.append("")
        lines.append(f"[{table}]")
        for leaf, value in groups[table]:
            lines.append(f"{leaf} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"


def _toml_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, float):
        text = repr(value)
        return text if ("." in text or "e" in text or "E" in text) else text + ".0"
    return str(value)
