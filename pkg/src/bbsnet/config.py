"""Flat ``section.key = value`` configuration with environment overrides.

Example file::

    # toy run
    model.variant = BBS_RL
    backbone.kind = toy
    train.lr = 1e-3
    data.toy = true

Any key can be overridden with ``BBS_<SECTION>_<KEY>`` (dots become
underscores, upper case), e.g. ``BBS_TRAIN_LR=5e-4``.
"""

from __future__ import annotations

import logging
import os
from typing import Mapping, Optional

logger = logging.getLogger(__name__)

ENV_PREFIX = "BBS_"

DEFAULTS = {
    "model.variant": "BBS_RL",
    "backbone.kind": "full",  # full | toy
    "backbone.weights": "",
    "model.gate": "sigmoid",
    "model.dem_ratio": 16,
    "model.spatial_kernel": 7,
    "model.width": 32,
    "train.lr": 1e-4,
    "train.decay_every": 60,  # 0 disables decay
    "train.decay_factor": 10.0,
    "train.epochs": 150,
    "train.batch": 10,
    "train.clip": 0.5,
    "train.weight_decay": 0.0,
    "train.side": 352,
    "train.loss_alpha": 0.5,
    "train.seed": 0,
    "train.init_seed": 0,
    "train.augment": True,
    "train.checkpoint_every": 1,
    "data.train_root": "",  # comma-separated dataset roots
    "data.invert_depth": False,
    "data.toy": False,
    "data.toy_n": 8,
    "data.toy_style": "near",
    "data.toy_seed": 0,
    "eval.normalize": True,
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw, default):
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            low = str(raw).lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return str(raw)


def parse_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'section.key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{n}: unknown config key {key!r}")
        values[key] = _coerce(key, raw, DEFAULTS[key])
    return values


def env_key(key: str) -> str:
    return ENV_PREFIX + key.replace(".", "_").upper()


def load_config(path: Optional[str] = None, env: Optional[Mapping[str, str]] = None,
                overrides: Optional[Mapping] = None) -> dict:
    """Defaults, then the file, then ``BBS_*`` environment variables, then ``overrides``."""
    cfg = dict(DEFAULTS)
    if path:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg.update(parse_text(text, path))
    env = os.environ if env is None else env
    known = {env_key(k): k for k in DEFAULTS}
    for name, raw in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        if name not in known:
            logger.warning("ignoring unknown environment override %s", name)
            continue
        cfg[known[name]] = _coerce(known[name], raw, DEFAULTS[known[name]])
    for key, val in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, val, DEFAULTS[key])
    return cfg


def dump_config(cfg: Mapping) -> str:
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in cfg.items())


def model_config(cfg: Mapping):
    from .backbone import BackboneConfig
    from .model import ModelConfig, variant_config

    bb = BackboneConfig(kind=cfg["backbone.kind"], weights=cfg["backbone.weights"] or None)
    base = ModelConfig(backbone=bb, gate=cfg["model.gate"], dem_ratio=cfg["model.dem_ratio"],
                       spatial_kernel=cfg["model.spatial_kernel"], width=cfg["model.width"])
    return variant_config(cfg["model.variant"], base)


def train_config(cfg: Mapping):
    from .trainer import TrainConfig

    return TrainConfig(
        lr=cfg["train.lr"], decay_every=cfg["train.decay_every"] or None, decay_factor=cfg["train.decay_factor"],
        epochs=cfg["train.epochs"], batch=cfg["train.batch"], clip=cfg["train.clip"],
        weight_decay=cfg["train.weight_decay"], side=cfg["train.side"], loss_alpha=cfg["train.loss_alpha"],
        seed=cfg["train.seed"], augment=cfg["train.augment"], checkpoint_every=cfg["train.checkpoint_every"],
    )
