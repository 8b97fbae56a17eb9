"""Flat dotted-key configuration with three layers: built-in defaults, an
optional YAML file, and command-line key=value overrides. Unknown keys are
rejected rather than silently ignored.
"""
from __future__ import annotations

import re
from pathlib import Path

import yaml

from .discriminator import HEADS, LAYOUTS
from .generator import GeneratorConfig
from .losses import LossWeights
from .mixer import MODALITIES
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Malformed or unknown configuration."""


DEFAULTS: dict[str, object] = {
    "data.root": "",
    "data.num_classes": 40,
    "data.max_depth_m": 10.0,
    "data.size": [256, 512],
    "gen.num_classes": None,          # defaults to data.num_classes
    "gen.noise_channels": 64,
    "gen.encoder_stem_width": 32,
    "gen.encoder_width": 64,
    "gen.decoder_channels": [1024, 1024, 512, 256, 128, 64],
    "gen.spade_hidden": 128,
    "gen.eps": 1e-5,
    "disc.depth": "middle",
    "disc.head": "pp",
    "disc.input": "rgb",
    "disc.channel_scale": 1.0,
    "disc.init": "scratch",
    "disc.init_weights": "",
    "loss.w_adv": 1.0,
    "loss.w_ap": 1.0,
    "loss.w_depth": 1.0,
    "loss.w_lm": 1.0,
    "loss.ap_updates_disc": False,
    "loss.global_class_weights": False,
    "train.lr_g": 1e-4,
    "train.lr_d": 2e-4,
    "train.adam_betas": [0.0, 0.999],
    "train.ema_decay": 0.9999,
    "train.batch_size": 8,
    "train.max_steps": 50_000,
    "train.seed": 0,
    "train.ckpt_every": 1000,
    "train.log_every": 1,
    "train.out_dir": "runs/scmis",
}

_FLOAT_KEYS = {k for k, v in DEFAULTS.items() if isinstance(v, float)}


def flatten(nested: dict, prefix: str = "") -> dict[str, object]:
    flat: dict[str, object] = {}
    for key, value in nested.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, dotted + "."))
        else:
            flat[dotted] = value
    return flat


def unflatten(flat: dict[str, object]) -> dict:
    nested: dict = {}
    for dotted, value in flat.items():
        node = nested
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return nested


def load_config_file(path) -> dict[str, object]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        nested = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if nested is None:
        return {}
    if not isinstance(nested, dict):
        raise ConfigError(f"config file {path} must contain a mapping")
    return flatten(nested)


_BARE_FLOAT = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)[eE][+-]?\d+$")


def parse_override(text: str) -> tuple[str, object]:
    """'key=value' with the value parsed as YAML (so 1e-4, true, [1,2] work)."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override '{text}' is not of the form key=value")
    try:
        value = yaml.safe_load(raw) if raw != "" else ""
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value in '{text}': {exc}") from exc
    if isinstance(value, str) and _BARE_FLOAT.match(value):
        value = float(value)  # YAML leaves dot-less exponents like 1e-4 as strings
    return key.strip(), value


def merge_config(file_path=None, overrides=()) -> dict[str, object]:
    """defaults <- file <- overrides, rejecting keys that aren't defaults."""
    cfg = dict(DEFAULTS)
    layers = []
    if file_path:
        layers.append(load_config_file(file_path))
    if overrides:
        layers.append(dict(parse_override(o) for o in overrides))
    for layer in layers:
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key '{key}'")
            if key in _FLOAT_KEYS and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            cfg[key] = value
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict[str, object]) -> None:
    def bad(msg: str):
        return ConfigError(msg)

    if cfg["disc.depth"] not in LAYOUTS:
        raise bad(f"disc.depth must be one of {sorted(LAYOUTS)}, got '{cfg['disc.depth']}'")
    if cfg["disc.head"] not in HEADS:
        raise bad(f"disc.head must be one of {HEADS}, got '{cfg['disc.head']}'")
    if cfg["disc.input"] not in ("rgb", "rgbd"):
        raise bad(f"disc.input must be 'rgb' or 'rgbd', got '{cfg['disc.input']}'")
    if cfg["disc.init"] not in ("scratch", "pretrained"):
        raise bad(f"disc.init must be 'scratch' or 'pretrained', got '{cfg['disc.init']}'")
    if cfg["disc.init"] == "pretrained" and not cfg["disc.init_weights"]:
        raise bad("disc.init=pretrained requires disc.init_weights to point at a weights file")
    if not isinstance(cfg["data.num_classes"], int) or cfg["data.num_classes"] < 1:
        raise bad("data.num_classes must be a positive integer")
    if cfg["gen.num_classes"] is not None and (
            not isinstance(cfg["gen.num_classes"], int) or cfg["gen.num_classes"] < 1):
        raise bad("gen.num_classes must be null or a positive integer")
    size = cfg["data.size"]
    if (not isinstance(size, (list, tuple)) or len(size) != 2
            or not all(isinstance(s, int) and s > 0 for s in size)):
        raise bad("data.size must be [height, width] with positive integers")
    for key in ("loss.w_adv", "loss.w_ap", "loss.w_depth", "loss.w_lm",
                "train.lr_g", "train.lr_d", "data.max_depth_m",
                "disc.channel_scale", "gen.eps"):
        if not isinstance(cfg[key], (int, float)) or isinstance(cfg[key], bool) or cfg[key] < 0:
            raise bad(f"{key} must be a non-negative number")
    if cfg["data.max_depth_m"] <= 0:
        raise bad("data.max_depth_m must be positive")
    if cfg["disc.channel_scale"] <= 0:
        raise bad("disc.channel_scale must be positive")
    for key in ("train.batch_size", "train.max_steps", "train.ckpt_every", "train.log_every"):
        if not isinstance(cfg[key], int) or cfg[key] < 1:
            raise bad(f"{key} must be a positive integer")
    if not isinstance(cfg["train.seed"], int):
        raise bad("train.seed must be an integer")
    chans = cfg["gen.decoder_channels"]
    if (not isinstance(chans, (list, tuple))
            or not all(isinstance(c, int) and c > 0 for c in chans)):
        raise bad("gen.decoder_channels must be a list of positive integers")


def dump_config(cfg: dict[str, object]) -> str:
    return yaml.safe_dump(unflatten(cfg), sort_keys=True, default_flow_style=None)


# -------------------------------------------------------------- object builders

def generator_config(cfg: dict[str, object]) -> GeneratorConfig:
    num_classes = cfg["gen.num_classes"]
    if num_classes is None:
        num_classes = cfg["data.num_classes"]
    return GeneratorConfig(
        num_classes=num_classes,
        noise_channels=cfg["gen.noise_channels"],
        encoder_stem_width=cfg["gen.encoder_stem_width"],
        encoder_width=cfg["gen.encoder_width"],
        decoder_channels=tuple(cfg["gen.decoder_channels"]),
        spade_hidden=cfg["gen.spade_hidden"],
        image_size=tuple(cfg["data.size"]),
        eps=cfg["gen.eps"],
    )


def discriminator_kwargs(cfg: dict[str, object]) -> dict:
    num_classes = cfg["gen.num_classes"]
    if num_classes is None:
        num_classes = cfg["data.num_classes"]
    return {
        "num_classes": num_classes,
        "depth": cfg["disc.depth"],
        "head": cfg["disc.head"],
        "in_channels": 4 if cfg["disc.input"] == "rgbd" else 3,
        "channel_scale": cfg["disc.channel_scale"],
    }


def train_config(cfg: dict[str, object]) -> TrainConfig:
    return TrainConfig(
        lr_g=cfg["train.lr_g"],
        lr_d=cfg["train.lr_d"],
        adam_betas=tuple(cfg["train.adam_betas"]),
        ema_decay=cfg["train.ema_decay"],
        batch_size=cfg["train.batch_size"],
        max_steps=cfg["train.max_steps"],
        seed=cfg["train.seed"],
        ckpt_every=cfg["train.ckpt_every"],
        log_every=cfg["train.log_every"],
    )


def loss_weights(cfg: dict[str, object]) -> LossWeights:
    return LossWeights(w_adv=cfg["loss.w_adv"], w_ap=cfg["loss.w_ap"],
                       w_depth=cfg["loss.w_depth"], w_lm=cfg["loss.w_lm"])
