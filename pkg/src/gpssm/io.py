"""Config files, dataset CSVs and JSON reports."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .model import Dataset


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


PGAS_KEYS = {
    "n_particles": int, "n_iterations": int, "burn_in": int, "seed": int, "prior": str,
    "n_inducing": int, "inducing_strategy": str, "inducing_bounds": list,
    "slice_width": float, "max_expansions": int, "theta_order": str,
}
BENCH_KEYS = {"params": list, "T_train": int, "T_test": int, "n_repeats": int,
              "seeds": list, "x0_var": float}
PRIOR_KEYS = {"median": float, "log_sd": float}
TOP_KEYS = {"pgas": dict, "benchmark": dict, "priors": dict, "test_points": int, "keep": int,
            "n_jobs": int}


def _typed(section: str, values: dict, schema: dict) -> dict:
    out = {}
    for k, v in values.items():
        key = f"{section}.{k}" if section else k
        if k not in schema:
            raise ConfigError(key, "unknown key")
        want = schema[k]
        if want is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if want is int and isinstance(v, float) and v.is_integer():
            v = int(v)
        if not isinstance(v, want) or isinstance(v, bool):
            raise ConfigError(key, f"expected {want.__name__}, got {type(v).__name__}")
        out[k] = v
    return out


def load_config(path=None, overrides: dict = None) -> dict:
    """Read and validate a JSON config; command-line ``overrides`` win.

    Returns a dict with the sections ``pgas``, ``benchmark`` and ``priors``
    (each possibly empty) plus any top-level scalars.
    """
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"not valid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config", "top level must be an object")
    cfg = _typed("", raw, TOP_KEYS)
    cfg["pgas"] = _typed("pgas", cfg.get("pgas", {}), PGAS_KEYS)
    cfg["benchmark"] = _typed("benchmark", cfg.get("benchmark", {}), BENCH_KEYS)
    priors = {}
    for name, p in cfg.get("priors", {}).items():
        if not isinstance(p, dict):
            raise ConfigError(f"priors.{name}", "expected an object with median and log_sd")
        priors[name] = _typed(f"priors.{name}", p, PRIOR_KEYS)
        if priors[name].get("median", 1.0) <= 0:
            raise ConfigError(f"priors.{name}.median", "must be positive")
        if priors[name].get("log_sd", 0.0) < 0:
            raise ConfigError(f"priors.{name}.log_sd", "must be non-negative")
    cfg["priors"] = priors
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg["pgas"][k] = v
    return cfg


# datasets -----------------------------------------------------------------


def write_dataset(path, data: Dataset) -> None:
    """CSV with columns t, u_*, y_*, and x_*, f_* when known."""
    cols = {"u": data.inputs, "y": data.observations, "x": data.states, "f": data.f_values}
    header = ["t"]
    blocks = []
    for name, arr in cols.items():
        if arr is None:
            continue
        header += [f"{name}_{j}" for j in range(arr.shape[1])]
        blocks.append(arr)
    table = np.hstack([np.arange(data.T + 1)[:, None]] + blocks)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in table:
            w.writerow([str(int(row[0]))] + [repr(float(v)) for v in row[1:]])


def read_dataset(path) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty dataset file")
    header, body = rows[0], rows[1:]
    try:
        table = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(len(body), len(header))
    except ValueError as exc:
        raise ValueError(f"{path}: malformed row ({exc})") from exc

    def block(prefix):
        idx = [i for i, h in enumerate(header) if h.startswith(prefix + "_")]
        return table[:, idx] if idx else None

    y = block("y")
    if y is None:
        raise ValueError(f"{path}: no observation columns (y_*)")
    u = block("u")
    return Dataset(
        inputs=np.zeros((len(body), 0)) if u is None else u,
        observations=y,
        states=block("x"),
        f_values=block("f"),
    )


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, default=_jsonable), encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
