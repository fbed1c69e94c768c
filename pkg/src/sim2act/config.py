"""Experiment configuration: JSON documents, env overrides, stage seeds.

Precedence, lowest first: built-in defaults, the ``--config`` file, CLI
flags, then environment variables ``SIM2ACT__<SECTION>__<KEY>=<value>``.
Values in the environment are parsed as JSON literals and fall back to
plain strings. Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import zlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np

from .calibrator import CalibrationConfig
from .data import ColumnMapping, SyntheticEnvConfig
from .policy import DecisionTrainConfig
from .robustness import DEFAULT_LEVELS, PERTURB_KINDS
from .simulator import LossCoefficients, SimTrainConfig

VARIANTS = ("none", "sim_cal", "dec_pert", "both")
ENV_PREFIX = "SIM2ACT__"

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "variant": "both",
    "out": "runs/sim2act",
    "dataset": {
        "source": "synthetic",
        "synthetic": {
            "d": 16,
            "K": 4,
            "C": 5,
            "n_rows": 50_000,
            "action_frequency_skew": 3.0,
            "rare_action_label_bias": 0.3,
            "label_noise": 0.05,
            "kind": "supply_chain",
        },
        "csv": {"path": None, "mapping": None},
    },
    "simulator": {
        "latent_dim": 8,
        "hidden": 32,
        "learning_rate": 0.05,
        "epochs": 30,
        "batch_size": 256,
        "early_stopping_patience": 4,
        "l2_penalty": 1e-5,
        "momentum": 0.9,
        "coefs": {f.name: f.default for f in fields(LossCoefficients)},
    },
    "calibration": {
        "ascent_rate": 2.0,
        "descent_rate": 0.05,
        "rounds": 20,
        "ascent_steps": 5,
        "descent_steps": 50,
        "batch_size": 256,
        "tolerance": 1e-3,
        "patience": 3,
        "monitor_rows": 4096,
        "action_balanced": True,
    },
    "decision": {
        "hidden": 32,
        "M": 8,
        "eta": 1.0,
        "perturb_scale": 1.0,
        "learning_rate": 0.01,
        "optimizer": "adam",
        "momentum": 0.9,
        "epochs": 10,
        "batch_size": 256,
        "patience": 3,
        "r_star_rule": "per_state_max",
    },
    "robustness": {
        "levels": list(DEFAULT_LEVELS),
        "runs": 3,
        "delta": -0.05,
        "alpha": 0.05,
        "ablate_kind": "random_input",
    },
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, update: Mapping, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _find_key(d: dict, name: str, where: str) -> str:
    for key in d:
        if key.lower() == name.lower():
            return key
    raise ConfigError(f"unknown config key {where}{name!r} in environment override")


def env_overrides(environ: Mapping[str, str]) -> dict:
    """Nested override dict from ``SIM2ACT__A__B=value`` variables."""
    out: dict = {}
    for var in sorted(environ):
        if not var.startswith(ENV_PREFIX):
            continue
        parts = var[len(ENV_PREFIX) :].split("__")
        node, defaults, where = out, DEFAULTS, ""
        for part in parts[:-1]:
            key = _find_key(defaults, part, where)
            if not isinstance(defaults[key], dict):
                raise ConfigError(f"{var}: {where}{key} is not a section")
            node = node.setdefault(key, {})
            defaults, where = defaults[key], f"{where}{key}."
        key = _find_key(defaults, parts[-1], where)
        raw = environ[var]
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node[key] = value
    return out


def resolve_config(
    path: Optional[str | Path] = None,
    flags: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> dict:
    """Defaults, then file, then flags, then environment; validated."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(path)
        doc = json.loads(path.read_text())
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        cfg = _merge(cfg, doc)
    if flags:
        cfg = _merge(cfg, {k: v for k, v in flags.items() if v is not None})
    cfg = _merge(cfg, env_overrides(os.environ if environ is None else environ))
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if cfg["variant"] not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {cfg['variant']!r}")
    seed = cfg["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    ds = cfg["dataset"]
    has_csv = ds["csv"]["path"] is not None
    if ds["source"] == "synthetic":
        if has_csv:
            raise ConfigError("exactly one dataset source: source is 'synthetic' but dataset.csv.path is set")
    elif ds["source"] == "csv":
        if not has_csv or ds["csv"]["mapping"] is None:
            raise ConfigError("dataset.source 'csv' needs dataset.csv.path and dataset.csv.mapping")
    else:
        raise ConfigError(f"dataset.source must be 'synthetic' or 'csv', got {ds['source']!r}")
    rob = cfg["robustness"]
    if rob["ablate_kind"] not in PERTURB_KINDS:
        raise ConfigError(f"robustness.ablate_kind must be one of {PERTURB_KINDS}")
    if 0.0 not in [float(v) for v in rob["levels"]] or any(float(v) < 0 for v in rob["levels"]):
        raise ConfigError("robustness.levels must be >= 0 and include 0")
    if int(rob["runs"]) < 2:
        raise ConfigError("robustness.runs must be >= 2")
    if not np.isfinite(rob["delta"]):
        raise ConfigError("robustness.delta must be finite")
    if cfg["decision"]["eta"] <= 0:
        raise ConfigError("decision.eta must be > 0 (variants without groups set it to 0 internally)")
    try:
        synthetic_config(cfg).validate()
        sim_train_config(cfg).validate()
        calibration_config(cfg).validate()
        decision_config(cfg, "both").validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical config, ignoring the output directory."""
    doc = {k: v for k, v in cfg.items() if k != "out"}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# seeds


STAGES = ("data", "sim_init", "sim_train", "calibration", "policy_init", "policy_train", "evaluate")


def stage_seed(seed: int, stage: str) -> int:
    """Per-stage seed: the first 32-bit word of ``SeedSequence([seed, crc32(stage)])``."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def stage_seeds(seed: int) -> dict[str, int]:
    return {s: stage_seed(seed, s) for s in STAGES}


# ---------------------------------------------------------------------------
# typed views


def synthetic_config(cfg: dict) -> SyntheticEnvConfig:
    return SyntheticEnvConfig(**cfg["dataset"]["synthetic"], seed=stage_seed(cfg["seed"], "data"))


def column_mapping(cfg: dict) -> ColumnMapping:
    m = cfg["dataset"]["csv"]["mapping"]
    return ColumnMapping.load(m) if isinstance(m, str) else ColumnMapping.from_dict(m)


def sim_train_config(cfg: dict) -> SimTrainConfig:
    s = {k: v for k, v in cfg["simulator"].items() if k not in ("latent_dim", "hidden", "coefs")}
    return SimTrainConfig(**s, seed=stage_seed(cfg["seed"], "sim_train"), coefs=LossCoefficients(**cfg["simulator"]["coefs"]))


def calibration_config(cfg: dict) -> CalibrationConfig:
    return CalibrationConfig(**cfg["calibration"], seed=stage_seed(cfg["seed"], "calibration"))


def decision_config(cfg: dict, variant: str) -> DecisionTrainConfig:
    """Variants without decision perturbation train on the utility gap alone."""
    d = {k: v for k, v in cfg["decision"].items() if k != "hidden"}
    if variant not in ("dec_pert", "both"):
        d["eta"], d["perturb_scale"] = 0.0, 0.0
    return DecisionTrainConfig(**d, seed=stage_seed(cfg["seed"], "policy_train"))


@dataclass(frozen=True)
class RobustnessSettings:
    levels: tuple
    runs: int
    delta: float
    alpha: float
    ablate_kind: str


def robustness_settings(cfg: dict) -> RobustnessSettings:
    r = cfg["robustness"]
    return RobustnessSettings(tuple(float(v) for v in r["levels"]), int(r["runs"]), float(r["delta"]), float(r["alpha"]), r["ablate_kind"])
