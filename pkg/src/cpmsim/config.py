"""Configuration schema: TOML files <-> SimConfig.

The file layout mirrors the dataclass layout, one table per subsystem:

    [run]       seed, duration, tick
    [scenario]  road_length, lanes_per_direction, comms_region, logging_region,
                target_density, desired_speed_mean, desired_speed_stddev,
                vehicle_length, vehicle_width, lane_width, penetration_rate
    [sensor]    range, period, sigma_min, alpha_dist, beta_occl,
                min_visible_fraction, anisotropy
    [tracking]  accel_stddev, init_velocity_var, stale_after
    [policy]    mode ("etsi"|"accuracy"), theta, gamma, position_threshold,
                speed_threshold, heading_threshold_deg, max_interval,
                check_period, self_echo, kl_use_means, header_bytes,
                object_bytes, min_heading_speed
    [radio]     bit_rate, tx_power_dbm, signal_threshold_dbm,
                noise_threshold_dbm, carrier_freq, path_loss_exponent,
                reference_loss_db, carrier_sense_threshold_dbm,
                preamble_overhead, slot, cw, cbr_window
    [metrics]   model_kind ("lem"|"v2x"|"fused"), warmup, max_ote_distance,
                bin_width, ote_every_n_ticks

Unknown keys are rejected with the offending field name.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:       # Python 3.10
    import tomli as tomllib

from .channel import RadioParams
from .engine import SimConfig
from .metrics import MetricsConfig
from .mobility import ConfigError, ScenarioSpec
from .policy import PolicyConfig, PolicyMode
from .sensor import SensorParams
from .tracking import ModelKind, MotionModelParams

_SECTIONS = {
    "scenario": (ScenarioSpec, "scenario"),
    "sensor": (SensorParams, "sensor"),
    "tracking": (MotionModelParams, "motion_model"),
    "policy": (PolicyConfig, "policy"),
    "radio": (RadioParams, "radio"),
    "metrics": (MetricsConfig, "metrics"),
}


def _apply(obj, section: str, data: dict):
    fields = {f.name for f in dataclasses.fields(obj)}
    for key, value in data.items():
        if section == "policy" and key == "mode":
            try:
                value = PolicyMode(value)
            except ValueError:
                raise ConfigError(f"policy.mode: unknown mode {value!r}") from None
        elif section == "policy" and key == "heading_threshold_deg":
            key, value = "heading_threshold", math.radians(value)
        elif section == "metrics" and key == "model_kind":
            try:
                value = ModelKind(value)
            except ValueError:
                raise ConfigError(f"metrics.model_kind: unknown kind {value!r}") from None
        elif key in ("comms_region", "logging_region"):
            value = (float(value[0]), float(value[1]))
        if key not in fields:
            raise ConfigError(f"{section}.{key}: unknown configuration key")
        setattr(obj, key, value)
    return obj


def config_from_dict(data: dict) -> SimConfig:
    cfg = SimConfig()
    for section, content in data.items():
        if section == "run":
            for key, value in content.items():
                if key not in ("seed", "duration", "tick"):
                    raise ConfigError(f"run.{key}: unknown configuration key")
                setattr(cfg, key, value)
        elif section in _SECTIONS:
            _, attr = _SECTIONS[section]
            _apply(getattr(cfg, attr), section, content)
        else:
            raise ConfigError(f"{section}: unknown configuration section")
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> SimConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with path.open("rb") as f:
        data = tomllib.load(f)
    return config_from_dict(data)


def config_to_dict(cfg: SimConfig) -> dict:
    """Plain-scalar mirror of the effective configuration, suitable for
    JSON echo and hashing."""
    out = {"run": {"seed": cfg.seed, "duration": cfg.duration, "tick": cfg.tick}}
    for section, (_, attr) in _SECTIONS.items():
        obj = getattr(cfg, attr)
        table = {}
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, (PolicyMode, ModelKind)):
                v = v.value
            elif isinstance(v, tuple):
                v = list(v)
            table[f.name] = v
        out[section] = table
    return out


def config_hash(cfg: SimConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:10]


def load_profile(name: str) -> SimConfig:
    """Load one of the shipped profiles (e.g. 'desk_low', 'paper_high')."""
    ref = resources.files("cpmsim").joinpath(f"profiles/{name}.toml")
    if not ref.is_file():
        raise FileNotFoundError(f"no shipped profile named {name!r}")
    data = tomllib.loads(ref.read_text())
    return config_from_dict(data)


def desk_config(density: float = 60.0, mode: str = "etsi", gamma: float = 3.0,
                seed: int = 1, duration: float = 120.0) -> SimConfig:
    """The desk-scale evaluation profile: 2 km road, communication enabled on
    the central 1.2 km, logging on the central 500 m."""
    cfg = load_profile("desk_low" if density <= 90 else "desk_high")
    cfg.scenario.target_density = density
    cfg.policy.mode = PolicyMode(mode)
    cfg.policy.gamma = gamma
    cfg.seed = seed
    cfg.duration = duration
    cfg.validate()
    return cfg
