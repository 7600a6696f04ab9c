"""Layered run configuration.

Resolution order (later wins): built-in defaults, a JSON file (``--config``
or the ``STAB_CONFIG`` environment variable), ``STAB_<SECTION>_<KEY>``
environment variables, then command-line overrides. Keys are addressed as
``section.key``; anything not in the defaults is rejected so typos fail
loudly. The resolved mapping is embedded in every report.
"""
from __future__ import annotations

import copy
import json
import os
from pathlib import Path

DEFAULTS: dict = {
    "seed": 0,
    "affine": {
        "input_size": 32, "patch_size": 64, "width": 8, "iters": 4000, "batch_size": 16, "lr": 2e-3,
        "max_rotation_deg": 10.0, "max_translation_frac": 0.1, "affine_weight": 1.0, "pixel_weight": 1.0,
    },
    "flow": {"levels": 3, "iters": 10, "min_size": 8},
    "losses": {
        "lambda_s_in": 10.0, "lambda_q_in": 1.0, "lambda_s_out": 1.0, "lambda_q_out": 10.0,
        "lambda_rec": 1.0, "feature_channels": [8, 16, 32],
    },
    "stabilizer": {"k": 2, "hidden": 16, "recurrent": False},
    "meta": {
        "alpha": 1e-4, "beta": 1e-4, "M": 1, "r": 5, "batch_tasks": 2, "iterations": 200,
        "first_order": True, "fresh_outer_clip": False,
    },
    "adapt": {
        "strategy": "vanilla", "M": 1, "alpha": 1e-4, "p": 10, "count": 100, "centered": False,
        "raw_units": False,
    },
    "metrics": {"persistence_iou": 0.5, "temporal_iou_match": 0.1, "min_inliers": 20, "min_frames": 8},
    "judge": {"stride": 10, "threshold": 0.3, "attempts": 3},
    "jobs": 1,
}

ENV_PREFIX = "STAB_"
# keys that also accept null (``adapt.count: null`` = one pass over all clips)
NULLABLE = {"adapt.count"}


class ConfigError(ValueError):
    """Unknown key or badly typed value in a configuration layer."""


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value, default):
    """Convert ``value`` (possibly a string) to the type of ``default``."""
    if isinstance(value, str) and not isinstance(default, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{key}: cannot parse {value!r}") from exc
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or float(value) != int(value):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    return str(value)


class GlobalConfig:
    """Resolved configuration with ``get("section.key")`` access."""

    def __init__(self, values: dict | None = None, sources: list | None = None):
        self._flat = _flatten(DEFAULTS)
        self.sources = list(sources or ["defaults"])
        if values:
            self.update(values, "init")

    # ------------------------------------------------------------ layering
    def update(self, values: dict, source: str = "override") -> "GlobalConfig":
        flat = _flatten(values) if any(isinstance(v, dict) for v in values.values()) else dict(values)
        unknown = sorted(k for k in flat if k not in self._flat)
        if unknown:
            raise ConfigError(f"unknown config key(s) from {source}: {', '.join(unknown)}")
        for k, v in flat.items():
            if k in NULLABLE and (v is None or v in ("null", "all")):
                self._flat[k] = None
            else:
                self._flat[k] = _coerce(k, v, _flatten(DEFAULTS)[k])
        self.sources.append(source)
        return self

    def update_file(self, path) -> "GlobalConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must contain a JSON object")
        return self.update(data, f"file:{path.name}")

    def update_env(self, environ=None) -> "GlobalConfig":
        environ = os.environ if environ is None else environ
        by_env = {ENV_PREFIX + k.replace(".", "_").upper(): k for k in self._flat}
        found = {by_env[name]: value for name, value in environ.items() if name in by_env}
        if found:
            self.update(found, "env")
        return self

    def set_pairs(self, pairs) -> "GlobalConfig":
        """Apply ``key=value`` strings (the ``--set`` flag)."""
        values = {}
        for pair in pairs or []:
            if "=" not in pair:
                raise ConfigError(f"--set expects key=value, got {pair!r}")
            k, v = pair.split("=", 1)
            values[k.strip()] = v.strip()
        return self.update(values, "flags") if values else self

    @classmethod
    def resolve(cls, path=None, overrides: dict | None = None, pairs=None, environ=None) -> "GlobalConfig":
        environ = os.environ if environ is None else environ
        cfg = cls()
        path = path or environ.get("STAB_CONFIG")
        if path:
            cfg.update_file(path)
        cfg.update_env(environ)
        cfg.set_pairs(pairs)
        if overrides:
            cfg.update({k: v for k, v in overrides.items() if v is not None}, "flags")
        return cfg

    # -------------------------------------------------------------- access
    def get(self, key: str):
        if key not in self._flat:
            raise ConfigError(f"unknown config key {key!r}")
        return copy.deepcopy(self._flat[key])

    def __getitem__(self, key: str):
        return self.get(key)

    def section(self, name: str) -> dict:
        pre = name + "."
        return {k[len(pre):]: copy.deepcopy(v) for k, v in self._flat.items() if k.startswith(pre)}

    def as_dict(self) -> dict:
        out: dict = {}
        for k in sorted(self._flat):
            node = out
            *parents, leaf = k.split(".")
            for p in parents:
                node = node.setdefault(p, {})
            node[leaf] = copy.deepcopy(self._flat[k])
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=2)
