"""Flat key-value run configuration and the run manifest.

Config files are UTF-8 text, one ``key = value`` per line, ``#`` comments,
with an explicit ``version`` field. Overrides arrive as repeated
``--set key=value`` flags; the manifest records the post-override snapshot
and its hash, which is enough to reproduce a run exactly.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

from .model import EncoderSpec, ModelConfig
from .saccades import SaccadeWorld
from .sprites import SpriteWorld
from .training import AblationFlags, TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _int_tuple(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


# key -> (parser, default); None default means required
SCHEMA: dict = {
    "version": (int, None),
    "world.kind": (str, "sprite"),
    "world.conditioning": (str, "rotation_quat"),
    "world.resolution": (int, 64),
    "world.patch_size": (int, 32),
    "world.ior_radius": (float, 16.0),
    "model.d_z": (int, 256),
    "model.d_a": (int, 128),
    "model.encoder": (str, "conv"),
    "model.conv_channels": (_int_tuple, (16, 32, 64, 128)),
    "model.mlp_hidden": (_int_tuple, (512,)),
    "model.aggregator_layers": (int, 3),
    "model.aggregator_heads": (int, 4),
    "model.predictor_hidden": (int, 1024),
    "model.ema_tau_base": (float, 0.996),
    "model.positional_embedding": (_bool, False),
    "train.total_steps": (int, 1000),
    "train.batch_size": (int, 128),
    "train.M_tr": (int, 3),
    "train.peak_lr": (float, 4e-4),
    "train.floor_lr": (float, 1e-5),
    "train.warmup_steps": (int, 100),
    "train.weight_decay": (float, 1e-3),
    "train.grad_clip": (float, 5.0),
    "train.seed": (int, 0),
    "train.no_transformer_cond": (_bool, False),
    "train.no_predictor_cond": (_bool, False),
    "train.tie_target": (_bool, False),
    "train.checkpoint_interval": (int, 0),
    "train.episode_pool": (int, 0),
}


def parse_config_text(text: str) -> dict:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (part.strip() for part in line.split("=", 1))
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = val
    return resolve_config(raw)


def resolve_config(raw: dict[str, str]) -> dict:
    cfg = {}
    for key, val in raw.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            cfg[key] = parser(val) if isinstance(val, str) else val
        except (ValueError, ConfigError) as e:
            raise ConfigError(f"bad value for {key!r}: {e}") from e
    if "version" not in cfg:
        raise ConfigError("config is missing the required 'version' field")
    if cfg["version"] != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {cfg['version']}")
    for key, (_, default) in SCHEMA.items():
        cfg.setdefault(key, default)
    return cfg


def load_config(path: str | Path, overrides: list[str] | None = None) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    cfg = parse_config_text(text)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, val = (part.strip() for part in item.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"unknown override key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            cfg[key] = parser(val)
        except (ValueError, ConfigError) as e:
            raise ConfigError(f"bad override for {key!r}: {e}") from e
    return cfg


def snapshot_hash(cfg: dict) -> str:
    lines = sorted(f"{k}={cfg[k]}" for k in cfg)
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


def build_world(cfg: dict):
    kind = cfg["world.kind"]
    if kind == "sprite":
        return SpriteWorld(
            conditioning_kind=cfg["world.conditioning"],
            resolution=cfg["world.resolution"],
        )
    if kind == "saccade":
        return SaccadeWorld(
            resolution=cfg["world.resolution"],
            patch_size=cfg["world.patch_size"],
            ior_radius=cfg["world.ior_radius"] or None,
        )
    raise ConfigError(f"unknown world kind {kind!r}")


def build_model_config(cfg: dict, world, d_a: int | None = None) -> ModelConfig:
    spec = EncoderSpec(
        kind=cfg["model.encoder"],
        image_shape=world.image_shape,
        conv_channels=cfg["model.conv_channels"],
        mlp_hidden=cfg["model.mlp_hidden"],
    )
    return ModelConfig(
        action_dim=world.action_dim,
        total_steps=cfg["train.total_steps"],
        d_z=cfg["model.d_z"],
        d_a=d_a if d_a is not None else cfg["model.d_a"],
        encoder_spec=spec,
        aggregator_layers=cfg["model.aggregator_layers"],
        aggregator_heads=cfg["model.aggregator_heads"],
        predictor_hidden=cfg["model.predictor_hidden"],
        ema_tau_base=cfg["model.ema_tau_base"],
        positional_embedding=cfg["model.positional_embedding"],
    )


def build_train_config(cfg: dict, M_tr: int | None = None, seed: int | None = None) -> TrainConfig:
    return TrainConfig(
        total_steps=cfg["train.total_steps"],
        batch_size=cfg["train.batch_size"],
        M_tr=M_tr if M_tr is not None else cfg["train.M_tr"],
        peak_lr=cfg["train.peak_lr"],
        floor_lr=cfg["train.floor_lr"],
        warmup_steps=cfg["train.warmup_steps"],
        weight_decay=cfg["train.weight_decay"],
        grad_clip=cfg["train.grad_clip"],
        seed=seed if seed is not None else cfg["train.seed"],
        ablation=AblationFlags(
            no_transformer_cond=cfg["train.no_transformer_cond"],
            no_predictor_cond=cfg["train.no_predictor_cond"],
        ),
        tie_target=cfg["train.tie_target"],
        checkpoint_interval=cfg["train.checkpoint_interval"],
        episode_pool=cfg["train.episode_pool"],
    )


def write_manifest(out_dir: Path, cfg: dict, extra: dict | None = None) -> dict:
    manifest = {
        "artifact_version": 1,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()},
        "config_hash": snapshot_hash(cfg),
        "seed": cfg["train.seed"],
        "world_kind": cfg["world.kind"],
        "created_unix": time.time(),
        "out_dir": str(out_dir),
    }
    manifest.update(extra or {})
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def read_manifest(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read manifest {path}: {e}") from e
