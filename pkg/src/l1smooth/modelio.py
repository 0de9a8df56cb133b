"""Reading model descriptions and matrices from disk.

A model file is JSON. Either it names a built-in model::

    {"kind": "builtin", "name": "linear-tracking", "params": {"dt": 0.1, "T": 100}}

or it spells out a linear model::

    {"kind": "linear", "T": 50, "n_x": 2, "n_y": 1, "stationary": true,
     "A": [[1, 0.1], [0, 1]], "H": {"csv": "H.csv"}, "Q": ..., "R": ...,
     "Omega": ..., "m1": [0, 0], "P1": ...}

Matrices are nested row-major lists or ``{"csv": path}`` references
(relative to the JSON file). With ``"stationary": false`` every matrix
entry is instead a list of ``T`` such matrices.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Union

import numpy as np

from .model import LinearModel, Model
from .scenarios import coordinated_turn_model, linear_tracking_model

BUILTIN_MODELS = {
    "linear-tracking": linear_tracking_model,
    "coordinated-turn": coordinated_turn_model,
}


class ConfigError(ValueError):
    """A configuration file or value is malformed."""


def load_matrix_csv(path) -> np.ndarray:
    """Comma-separated matrix, one row per line, no header."""
    try:
        return np.loadtxt(path, delimiter=",", ndmin=2, dtype=float)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read matrix CSV {path}: {exc}") from exc


def _matrix(value, base: Path) -> np.ndarray:
    if isinstance(value, dict):
        if "csv" not in value:
            raise ConfigError(f"matrix reference must have a 'csv' key, got {sorted(value)}")
        return load_matrix_csv(base / value["csv"])
    try:
        return np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad matrix entry: {exc}") from exc


def model_from_dict(spec: dict, base: Union[str, Path] = ".") -> Model:
    base = Path(base)
    kind = spec.get("kind")
    if kind == "builtin":
        name = spec.get("name")
        if name not in BUILTIN_MODELS:
            raise ConfigError(f"unknown builtin model {name!r}; valid: {sorted(BUILTIN_MODELS)}")
        try:
            return BUILTIN_MODELS[name](**spec.get("params", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad parameters for {name}: {exc}") from exc
    if kind != "linear":
        raise ConfigError(f"model kind must be 'linear' or 'builtin', got {kind!r}")
    required = ("T", "A", "H", "Q", "R", "Omega", "m1", "P1")
    missing = [k for k in required if k not in spec]
    if missing:
        raise ConfigError(f"missing model keys: {missing}")
    stationary = bool(spec.get("stationary", True))
    mats = {}
    for key in ("A", "H", "Q", "R", "Omega"):
        val = spec[key]
        if stationary:
            mats[key] = _matrix(val, base)
        else:
            if not isinstance(val, list) or len(val) != spec["T"]:
                raise ConfigError(f"time-varying {key} must be a list of T={spec['T']} matrices")
            mats[key] = np.stack([_matrix(v, base) for v in val])
    model = LinearModel(T=int(spec["T"]), m1=np.asarray(spec["m1"], float).ravel(),
                        P1=_matrix(spec["P1"], base), **mats)
    for key, attr in (("n_x", "n_x"), ("n_y", "n_y")):
        if key in spec and int(spec[key]) != getattr(model, attr):
            raise ConfigError(f"{key}={spec[key]} disagrees with matrix shapes ({getattr(model, attr)})")
    return model


def load_model(path) -> Model:
    path = Path(path)
    try:
        spec = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read model file {path}: {exc}") from exc
    return model_from_dict(spec, path.parent)
