"""Run configuration: one TOML file of dotted keys covering every module.

Every key has a documented default, unknown keys are rejected, and CLI flags
override file values (flag > file > default). The same flat mapping is
serialized into checkpoints so a trained scene carries its exact settings.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

from .geometry import LaneSwitchConfig
from .losses import BETA_SCHEDULES, LossWeights
from .raster import RasterSettings
from .refine import RefineConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - version dependent
    import tomli as tomllib

__all__ = [
    "CONFIG_SCHEMA",
    "ConfigError",
    "default_config",
    "load_config",
    "apply_overrides",
    "config_help",
    "canonical_config_bytes",
    "config_from_bytes",
    "lane_config_from",
    "refine_config_from",
    "loss_weights_from",
    "raster_settings_from",
]


class ConfigError(ValueError):
    pass


# key -> (default, type, help)
CONFIG_SCHEMA: dict[str, tuple[object, type, str]] = {
    "scene.dir": ("", str, "dataset directory (layout written by make-synthetic)"),
    "out.dir": ("out", str, "output directory for checkpoints, logs and renders"),
    "train.steps": (1500, int, "gradient descent steps"),
    "train.seed": (0, int, "seed controlling every stochastic choice"),
    "train.switch_every": (5, int, "steps between virtual-lane cycle evaluations"),
    "train.diffusion_every": (10, int, "steps between denoiser-prior evaluations"),
    "train.context": (2, int, "frames on each side of the target used to build the scene"),
    "train.cycle_frames": (3, int, "contiguous frames per virtual-lane cycle evaluation"),
    "train.momentum": (0.9, float, "gradient descent momentum"),
    "train.lr_features": (1e-2, float, "learning rate: per-pixel features"),
    "train.lr_heads": (1e-3, float, "learning rate: decode heads"),
    "train.lr_depth": (1e-3, float, "learning rate: per-pixel depth residuals"),
    "train.lr_fusion": (1e-3, float, "learning rate: depth fusion weights"),
    "train.lr_confidence": (1e-2, float, "learning rate: per-pixel confidence"),
    "train.enable_switch": (True, bool, "train with the virtual-lane cycle loss"),
    "train.enable_diffusion": (True, bool, "train with the multi-lane denoiser loss"),
    "train.t_min": (0.1, float, "lower bound of the sampled noise level"),
    "train.t_max": (0.6, float, "upper bound of the sampled noise level"),
    "features.dim": (16, int, "per-pixel feature dimension"),
    "decode.scale_bias": (-2.0, float, "initial softplus bias of the scale head"),
    "decode.color_gain": (6.0, float, "initial gain of the color head on the RGB channels"),
    "lane.gamma": (3.0, float, "lateral translation coefficient, meters"),
    "lane.omega": (float(np.pi / 4), float, "per-frame switching period angle, radians"),
    "lane.max_offset": (3.0, float, "corridor bound on lateral offsets, meters"),
    "refine.alpha_threshold": (0.5, float, "opacity threshold gating the depth blend"),
    "refine.beta_blend": (0.7, float, "blend weight toward predicted depth"),
    "refine.neighborhood_k": (2, int, "one-sided neighborhood size for feature gathering"),
    "refine.hidden": (16, int, "hidden channels of the depth fusion operator"),
    "loss.lambda_smooth": (0.5, float, "second-derivative factor in the depth loss"),
    "loss.w_recon": (1.0, float, "weight of the reconstruction term"),
    "loss.w_depth": (1.0, float, "weight of the depth smoothness term"),
    "loss.w_switch": (1.0, float, "weight of the lane switching term"),
    "loss.w_diffusion": (1.0, float, "weight of the denoiser term"),
    "loss.beta_schedule": ("one_minus_t", str, "noise-level weight schedule"),
    "loss.t_steps": (1, int, "noise levels sampled per denoiser evaluation"),
    "raster.bg_r": (0.5, float, "background red"),
    "raster.bg_g": (0.5, float, "background green"),
    "raster.bg_b": (0.5, float, "background blue"),
    "raster.near_plane": (0.1, float, "near plane, meters"),
    "raster.cutoff_sigma": (6.5, float, "binning/evaluation radius in sigmas"),
    "raster.tile_size": (16, int, "rasterizer tile size in pixels"),
    "render.window": (4, int, "frames nearest the render pose used to build the scene (0 = all)"),
    "denoiser.kind": ("reference", str, "denoiser prior: reference, identity or remote"),
    "denoiser.url": ("", str, "remote denoiser endpoint URL"),
    "denoiser.timeout_ms": (10000, int, "remote denoiser timeout, milliseconds"),
    "denoiser.text": ("", str, "optional text condition sent to a remote denoiser"),
    "denoiser.sigma_scale": (2.0, float, "reference prior: blur sigma per unit noise"),
    "synthetic.frames": (8, int, "synthetic scene: training frame count"),
    "synthetic.width": (128, int, "synthetic scene: image width"),
    "synthetic.height": (64, int, "synthetic scene: image height"),
    "synthetic.lane_width": (3.0, float, "synthetic scene: lane spacing, meters"),
    "synthetic.spacing": (1.0, float, "synthetic scene: camera spacing along the lane, meters"),
    "synthetic.cloud_stride": (4, int, "synthetic scene: pixel stride of the emitted cloud"),
    "service.listen": ("127.0.0.1:8090", str, "render service listen address"),
    "service.cors_origin": ("*", str, "value for Access-Control-Allow-Origin"),
}


def default_config() -> dict:
    return {k: v for k, (v, _, _) in CONFIG_SCHEMA.items()}


def _coerce(key: str, value) -> object:
    _, typ, _ = CONFIG_SCHEMA[key]
    if typ is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if typ is int:
        if isinstance(value, bool) or (not isinstance(value, int) and not
                                       (isinstance(value, str) and value.lstrip("+-").isdigit())):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if typ is float:
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    return str(value)


def _flatten(tree: dict, prefix: str = "") -> dict:
    flat = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(_flatten(v, key + "."))
        else:
            flat[key] = v
    return flat


def load_config(path) -> dict:
    """Parse a config file and return the full mapping with defaults filled."""
    try:
        with open(path, "rb") as fh:
            tree = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return apply_overrides(default_config(), _flatten(tree))


def apply_overrides(cfg: dict, overrides: dict) -> dict:
    out = dict(cfg)
    for key, value in overrides.items():
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, value)
    if out["loss.beta_schedule"] not in BETA_SCHEDULES:
        raise ConfigError(f"loss.beta_schedule must be one of {sorted(BETA_SCHEDULES)}")
    return out


def config_help() -> str:
    lines = ["configuration keys (file value < flag override):"]
    for key, (default, _, help_text) in CONFIG_SCHEMA.items():
        lines.append(f"  {key} = {default!r}  # {help_text}")
    return "\n".join(lines)


def canonical_config_bytes(cfg: dict) -> bytes:
    return json.dumps({k: cfg[k] for k in sorted(cfg)}, separators=(",", ":")).encode("utf-8")


def config_from_bytes(data: bytes) -> dict:
    return apply_overrides(default_config(), json.loads(data.decode("utf-8")))


def lane_config_from(cfg: dict, k_first: int = 0, k_last: int = 0) -> LaneSwitchConfig:
    return LaneSwitchConfig(
        gamma=cfg["lane.gamma"], omega=cfg["lane.omega"],
        k_first=k_first, k_last=k_last, max_offset=cfg["lane.max_offset"],
    )


def refine_config_from(cfg: dict) -> RefineConfig:
    return RefineConfig(
        alpha_threshold=cfg["refine.alpha_threshold"],
        beta_blend=cfg["refine.beta_blend"],
        neighborhood_k=cfg["refine.neighborhood_k"],
    )


def loss_weights_from(cfg: dict) -> LossWeights:
    return LossWeights(
        lambda_smooth=cfg["loss.lambda_smooth"],
        recon=cfg["loss.w_recon"], depth=cfg["loss.w_depth"],
        switch=cfg["loss.w_switch"], diffusion=cfg["loss.w_diffusion"],
        beta_schedule=cfg["loss.beta_schedule"], t_steps=cfg["loss.t_steps"],
    )


def raster_settings_from(cfg: dict) -> RasterSettings:
    return RasterSettings(
        background=(cfg["raster.bg_r"], cfg["raster.bg_g"], cfg["raster.bg_b"]),
        near_plane=cfg["raster.near_plane"],
        cutoff_sigma=cfg["raster.cutoff_sigma"],
        tile_size=cfg["raster.tile_size"],
    )


def write_config(cfg: dict, path):
    """Write a TOML view of a flat config mapping."""
    sections: dict[str, dict] = {}
    for key, value in cfg.items():
        sect, sub = key.split(".", 1)
        sections.setdefault(sect, {})[sub] = value
    with open(path, "w", encoding="utf-8") as fh:
        for sect in sorted(sections):
            fh.write(f"[{sect}]\n")
            for sub in sorted(sections[sect]):
                v = sections[sect][sub]
                if isinstance(v, bool):
                    fh.write(f"{sub} = {'true' if v else 'false'}\n")
                elif isinstance(v, (int, float)):
                    fh.write(f"{sub} = {v!r}\n")
                else:
                    fh.write(f'{sub} = "{v}"\n')
            fh.write("\n")
