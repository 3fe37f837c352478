"""Flat dotted-key run configuration.

A config is a plain dict from dotted key to typed value. The full key set and
its defaults live in ``DEFAULTS``; files and ``--set key=value`` overrides may
only touch known keys (unknown keys report the valid ones). File format is one
``key = value`` per line with ``#`` comments; prompt lists are separated by
semicolons; optional values write as ``none``.
"""

from __future__ import annotations

from pathlib import Path

from .field import PretrainConfig
from .guidance import (AugmentConfig, SyntheticOracleEncoder,
                       ToyTransformerEncoder, parse_vocab)
from .rendering import PoseRanges
from .scenes import load_scene, two_blob_scene
from .training import PromptSet, TrainConfig

__all__ = [
    "ConfigError", "DEFAULTS", "default_config", "parse_config", "load_config",
    "save_config", "format_config", "apply_overrides", "pose_ranges_from",
    "pretrain_config_from", "train_config_from", "prompts_from",
    "encoder_from", "scene_from",
]


class ConfigError(ValueError):
    pass


class _OptFloat:
    """Marker for float-or-none keys."""


DEFAULTS: dict = {
    # scene: empty file means the built-in two-blob scene
    "scene.file": "",
    # generator stack
    "model.n_groups": 4,
    "model.group_dim": 16,
    "model.resolution": 32,
    "model.channels": 8,
    "model.synth_hidden": 16,
    "model.style_scale": 1.0,
    "model.decoder_hidden": 64,
    "model.extent": 1.0,
    # camera orbit (radians)
    "pose.radius": 2.7,
    "pose.azimuth_min": -0.5,
    "pose.azimuth_max": 0.5,
    "pose.elevation_min": -0.3,
    "pose.elevation_max": 0.3,
    "pose.fov_y": 0.75,
    # generator fitting
    "pretrain.steps": 2500,
    "pretrain.lr": 3e-3,
    "pretrain.lr_floor": 0.05,
    "pretrain.views": 10,
    "pretrain.eval_views": 3,
    "pretrain.eval_interval": 250,
    "pretrain.oracle_steps": 512,
    "pretrain.coupled_latents": 20,
    "pretrain.coupling_radius": 0.18,
    "pretrain.color_swing": 0.55,
    "pretrain.coupling_seed": 777,
    "pretrain.seed": 0,
    # guidance encoder: "oracle" or "transformer"
    "encoder.kind": "oracle",
    "encoder.vocab_file": "",
    # edit training
    "edit.prompt": "red left blob",
    "edit.mask_prompt": "left blob",
    "edit.source_prompt": "scene",
    "edit.distractors": ("green left blob", "blue left blob"),
    "edit.seed": 0,
    "edit.steps": 2000,
    "edit.lr_lrm": 1e-3,
    "edit.lr_afn": 1e-3,
    "edit.lr_dn": 1e-4,
    "edit.lambda_mask": 1.0,
    "edit.lambda_tv": 0.05,
    "edit.lambda_sparsity": 0.01,
    "edit.lambda_clip_plus": 1.0,
    "edit.lambda_l2": 0.8,
    "edit.lambda_id": 0.1,
    "edit.top_fraction": 0.01,
    "edit.label_interval": 25,
    "edit.tv_grid": 16,
    "edit.deformation_enabled": False,
    "edit.aug_enabled": False,
    "edit.aug_min_area": 0.9,
    "edit.aug_flip_prob": 0.5,
    "edit.lrm_hidden": 64,
    "edit.afn_hidden": 64,
    "edit.dn_hidden": 64,
    "edit.dn_gamma": 0.1,
    "edit.afn_bias": -4.0,
    "edit.freeze_check_interval": 500,
    "edit.image_interval": 0,
    "edit.dump_pseudolabels": False,
    "edit.force_mask": None,
    # shared render geometry
    "render.feature_hw": 32,
    "render.n_samples": 48,
    "render.near": 1.2,
    "render.far": 4.2,
    # evaluation
    "eval.views": 4,
    "eval.seed": 123,
    "eval.region_scale": 2.0,
    "eval.blobs": ("left",),
}

# keys whose value may be "none"
_OPTIONAL_FLOAT_KEYS = frozenset({"edit.force_mask"})


def default_config() -> dict:
    return dict(DEFAULTS)


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def coerce(key: str, raw: str):
    """Parse a raw string for a known key into its typed value."""
    if key not in DEFAULTS:
        raise ConfigError(
            f"unknown config key {key!r}; valid keys: {', '.join(sorted(DEFAULTS))}")
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if key in _OPTIONAL_FLOAT_KEYS:
            return None if raw.lower() in ("none", "") else float(raw)
        if isinstance(default, bool):
            return _parse_bool(raw, key)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(p.strip() for p in raw.split(";") if p.strip())
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {raw!r} "
                          f"as {type(default).__name__}") from e
    return raw  # plain string


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return "; ".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, base: dict | None = None) -> dict:
    cfg = default_config() if base is None else dict(base)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        try:
            cfg[key.strip()] = coerce(key.strip(), value)
        except ConfigError as e:
            raise ConfigError(f"line {lineno}: {e}") from None
    return cfg


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return default_config()
    return parse_config(Path(path).read_text())


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {_format_value(cfg[k])}\n" for k in sorted(cfg))


def save_config(cfg: dict, path: str | Path) -> None:
    Path(path).write_text(format_config(cfg))


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply ``key=value`` strings (from ``--set``) onto a config."""
    out = dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, value = item.partition("=")
        out[key.strip()] = coerce(key.strip(), value)
    return out


# ---------------------------------------------------------------------------
# builders


def pose_ranges_from(cfg: dict) -> PoseRanges:
    return PoseRanges(
        radius=cfg["pose.radius"],
        azimuth_range=(cfg["pose.azimuth_min"], cfg["pose.azimuth_max"]),
        elevation_range=(cfg["pose.elevation_min"], cfg["pose.elevation_max"]),
        fov_y=cfg["pose.fov_y"],
    )


def pretrain_config_from(cfg: dict) -> PretrainConfig:
    return PretrainConfig(
        steps=cfg["pretrain.steps"], lr=cfg["pretrain.lr"],
        views=cfg["pretrain.views"], eval_views=cfg["pretrain.eval_views"],
        eval_interval=cfg["pretrain.eval_interval"],
        oracle_steps=cfg["pretrain.oracle_steps"],
        coupled_latents=cfg["pretrain.coupled_latents"],
        coupling_radius=cfg["pretrain.coupling_radius"],
        color_swing=cfg["pretrain.color_swing"],
        coupling_seed=cfg["pretrain.coupling_seed"],
        feature_hw=cfg["render.feature_hw"], n_samples=cfg["render.n_samples"],
        near=cfg["render.near"], far=cfg["render.far"],
        lr_floor=cfg["pretrain.lr_floor"],
    )


def train_config_from(cfg: dict) -> TrainConfig:
    return TrainConfig(
        steps=cfg["edit.steps"], lr_lrm=cfg["edit.lr_lrm"],
        lr_afn=cfg["edit.lr_afn"], lr_dn=cfg["edit.lr_dn"],
        lambda_mask=cfg["edit.lambda_mask"], lambda_tv=cfg["edit.lambda_tv"],
        lambda_sparsity=cfg["edit.lambda_sparsity"],
        lambda_clip_plus=cfg["edit.lambda_clip_plus"],
        lambda_l2=cfg["edit.lambda_l2"], lambda_id=cfg["edit.lambda_id"],
        top_fraction=cfg["edit.top_fraction"],
        label_interval=cfg["edit.label_interval"], tv_grid=cfg["edit.tv_grid"],
        deformation_enabled=cfg["edit.deformation_enabled"],
        feature_hw=cfg["render.feature_hw"], n_samples=cfg["render.n_samples"],
        near=cfg["render.near"], far=cfg["render.far"],
        aug=AugmentConfig(enabled=cfg["edit.aug_enabled"],
                          min_area=cfg["edit.aug_min_area"],
                          flip_prob=cfg["edit.aug_flip_prob"]),
        lrm_hidden=cfg["edit.lrm_hidden"], afn_hidden=cfg["edit.afn_hidden"],
        dn_hidden=cfg["edit.dn_hidden"], dn_gamma=cfg["edit.dn_gamma"],
        afn_bias=cfg["edit.afn_bias"],
        freeze_check_interval=cfg["edit.freeze_check_interval"],
        image_interval=cfg["edit.image_interval"],
        dump_pseudolabels=cfg["edit.dump_pseudolabels"],
        force_mask=cfg["edit.force_mask"],
    )


def prompts_from(cfg: dict) -> PromptSet:
    return PromptSet(edit=cfg["edit.prompt"], mask=cfg["edit.mask_prompt"],
                     source=cfg["edit.source_prompt"],
                     distractors=tuple(cfg["edit.distractors"]))


def encoder_from(cfg: dict):
    kind = cfg["encoder.kind"]
    if kind == "oracle":
        vocab = None
        if cfg["encoder.vocab_file"]:
            vocab = parse_vocab(Path(cfg["encoder.vocab_file"]).read_text())
        return SyntheticOracleEncoder(vocab)
    if kind == "transformer":
        return ToyTransformerEncoder()
    raise ConfigError(f"encoder.kind must be 'oracle' or 'transformer', "
                      f"got {kind!r}")


def scene_from(cfg: dict):
    if cfg["scene.file"]:
        return load_scene(cfg["scene.file"])
    return two_blob_scene()
