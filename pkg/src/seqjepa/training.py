"""Training loop: batching, optimization, EMA updates, records, checkpoints."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .episodes import Episode, batch_actions, batch_views
from .model import (
    ModelConfig,
    NumericDegeneracyError,
    SeqJEPA,
    ema_tau,
)
from .saccades import SaliencySamplingError
from .schedules import lr_at

SALIENCY_RETRY_LIMIT = 8


class TrainingAbort(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


@dataclass
class AblationFlags:
    no_transformer_cond: bool = False
    no_predictor_cond: bool = False


@dataclass
class TrainConfig:
    total_steps: int
    batch_size: int = 128
    M_tr: int = 3
    peak_lr: float = 4e-4
    floor_lr: float = 1e-5
    warmup_steps: int = 100
    weight_decay: float = 1e-3
    grad_clip: float = 5.0
    seed: int = 0
    ablation: AblationFlags = field(default_factory=AblationFlags)
    tie_target: bool = False  # collapse probe: target = online, no EMA/sg
    decay_token_params: bool = False
    checkpoint_interval: int = 0  # 0: only at the end
    episode_pool: int = 0  # >0: cycle through a fixed pool of episodes

    def __post_init__(self):
        if self.warmup_steps >= self.total_steps:
            raise ValueError("warmup_steps must be < total_steps")
        if min(self.peak_lr, self.floor_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if self.M_tr < 1:
            raise ValueError("M_tr must be >= 1")


@dataclass
class TrainRecord:
    step: int
    loss: float
    cosine: float
    collapse_std: float
    lr: float
    tau: float
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def config_hash(model_cfg: ModelConfig, train_cfg: TrainConfig, world_desc: dict | None = None) -> str:
    blob = json.dumps(
        {
            "model": asdict(model_cfg),
            "train": asdict(train_cfg),
            "world": world_desc or {},
        },
        sort_keys=True,
        default=str,
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def episode_rng(seed: int, step: int, index: int, attempt: int = 0) -> np.random.Generator:
    """Per-episode stream keyed by position, not worker; reproducible."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(step, index, attempt))
    )


class EpisodePool:
    """Fixed set of episodes cycled through in step order.

    Episode j is always generated from the stream (seed, 0, j), so pool
    contents are independent of when they are first touched; resumed runs
    rebuild identical pools lazily.
    """

    def __init__(self, world, M: int, size: int, seed: int):
        self.world, self.M, self.size, self.seed = world, M, size, seed
        self._cache: dict[int, Episode] = {}

    def batch(self, step: int, batch_size: int) -> list[Episode]:
        idxs = [
            (step * batch_size + i) % self.size for i in range(batch_size)
        ]
        missing = sorted({j for j in idxs if j not in self._cache})
        if missing:
            rngs = [episode_rng(self.seed, 0, j) for j in missing]
            if hasattr(self.world, "sample_episode_batch"):
                eps = self.world.sample_episode_batch(rngs, self.M)
            else:
                eps = [
                    _sample_with_retry(self.world, rng, self.M, self.seed, 0, j)
                    for j, rng in zip(missing, rngs)
                ]
            self._cache.update(zip(missing, eps))
        return [self._cache[j] for j in idxs]


def _sample_with_retry(world, rng, M, seed, step, index) -> Episode:
    for attempt in range(SALIENCY_RETRY_LIMIT + 1):
        try:
            return world.sample_episode(
                rng if attempt == 0 else episode_rng(seed, step, index, attempt),
                M,
            )
        except SaliencySamplingError:
            if attempt == SALIENCY_RETRY_LIMIT:
                raise
    raise AssertionError("unreachable")


def sample_batch(world, M: int, batch_size: int, seed: int, step: int) -> list[Episode]:
    if hasattr(world, "sample_episode_batch"):
        rngs = [episode_rng(seed, step, i) for i in range(batch_size)]
        return world.sample_episode_batch(rngs, M)
    return [
        _sample_with_retry(world, episode_rng(seed, step, i), M, seed, step, i)
        for i in range(batch_size)
    ]


def batch_tensors(episodes: list[Episode]) -> tuple[torch.Tensor, torch.Tensor]:
    return (
        torch.from_numpy(batch_views(episodes)),
        torch.from_numpy(batch_actions(episodes)),
    )


def build_model(world, model_cfg: ModelConfig, seed: int) -> SeqJEPA:
    if model_cfg.action_dim != world.action_dim:
        raise ValueError(
            f"model action_dim {model_cfg.action_dim} != world {world.action_dim}"
        )
    torch.manual_seed(seed)
    return SeqJEPA(model_cfg)


def make_optimizer(model: SeqJEPA, cfg: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for name, p in model.online_parameters():
        token_like = p.dim() <= 1 or name in ("agg_token", "pos_embedding")
        if token_like and not cfg.decay_token_params:
            no_decay.append(p)
        else:
            decay.append(p)
    return torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": cfg.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=cfg.peak_lr,
        betas=(0.9, 0.999),
        eps=1e-8,
    )


@dataclass
class TrainResult:
    model: SeqJEPA
    records: list[TrainRecord]
    config_hash: str
    checkpoint_path: Path | None


def train(
    world,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    record_hook=None,
) -> TrainResult:
    if model_cfg.total_steps != cfg.total_steps:
        raise ValueError("model total_steps must match train total_steps")
    chash = config_hash(model_cfg, cfg, getattr(world, "describe", dict)())
    model = build_model(world, model_cfg, cfg.seed)
    optimizer = make_optimizer(model, cfg)
    start_step = 0
    if resume_from is not None:
        manifest, arrays = ckpt.load_checkpoint(resume_from)
        if manifest["config_hash"] != chash:
            raise ckpt.CheckpointError(
                "checkpoint config hash does not match the current config"
            )
        ckpt.restore_model(model, manifest, arrays)
        ckpt.restore_optimizer(optimizer, model, arrays)
        start_step = int(manifest["step"])

    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_f = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_f = open(out_dir / "metrics.jsonl", "a" if resume_from else "w")

    def save(path: Path, step: int, tau: float):
        ckpt.save_checkpoint(
            path, model, optimizer,
            step=step, tau=tau, seed=cfg.seed, config_hash=chash,
        )

    pool = (
        EpisodePool(world, cfg.M_tr, cfg.episode_pool, cfg.seed)
        if cfg.episode_pool > 0
        else None
    )
    records: list[TrainRecord] = []
    ckpt_path: Path | None = None
    try:
        model.train()
        for step in range(start_step, cfg.total_steps):
            t0 = time.monotonic()
            lr = lr_at(step, cfg.warmup_steps, cfg.total_steps,
                       cfg.peak_lr, cfg.floor_lr)
            for group in optimizer.param_groups:
                group["lr"] = lr
            if pool is not None:
                episodes = pool.batch(step, cfg.batch_size)
            else:
                episodes = sample_batch(
                    world, cfg.M_tr, cfg.batch_size, cfg.seed, step
                )
            views, acts = batch_tensors(episodes)
            try:
                loss, stats = model.training_loss(
                    views, acts,
                    no_transformer_cond=cfg.ablation.no_transformer_cond,
                    no_predictor_cond=cfg.ablation.no_predictor_cond,
                    tie_target=cfg.tie_target,
                )
            except NumericDegeneracyError as e:
                raise TrainingAbort(str(e), step) from e
            optimizer.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(
                    [p for _, p in model.online_parameters()], cfg.grad_clip
                )
            optimizer.step()
            if cfg.tie_target:
                tau = 0.0
            else:
                tau = model.ema_update(step)
            model.step.fill_(step + 1)
            rec = TrainRecord(
                step=step,
                loss=stats.loss,
                cosine=stats.cosine,
                collapse_std=stats.collapse_std,
                lr=lr,
                tau=tau,
                wall_ms=(time.monotonic() - t0) * 1e3,
            )
            records.append(rec)
            if metrics_f is not None:
                metrics_f.write(rec.to_json() + "\n")
            if record_hook is not None:
                record_hook(rec)
            if (
                out_dir is not None
                and cfg.checkpoint_interval > 0
                and (step + 1) % cfg.checkpoint_interval == 0
            ):
                save(out_dir / f"ckpt_{step + 1:07d}.sjck", step + 1, tau)
        final_step = cfg.total_steps
        final_tau = ema_tau(final_step, cfg.total_steps, model_cfg.ema_tau_base)
        if out_dir is not None:
            ckpt_path = out_dir / "ckpt_final.sjck"
            save(ckpt_path, final_step, final_tau)
            summary = {
                "config_hash": chash,
                "final_loss": records[-1].loss if records else None,
                "steps": final_step,
                "checkpoint": str(ckpt_path),
            }
            (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    finally:
        if metrics_f is not None:
            metrics_f.close()
    model.eval()
    return TrainResult(model, records, chash, ckpt_path)
