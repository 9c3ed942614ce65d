"""The network: encoder, action embedder, aggregator, predictor, EMA target.

A sequence of M views is encoded, each paired with the embedding of the
action that produced the next view, and aggregated by a transformer
encoder through a learnable aggregate token. The aggregate, concatenated
with the final action embedding, feeds an MLP that predicts the latent of
the held-out view, encoded by a slow EMA copy of the encoder behind a
stop-gradient. Loss is one minus cosine similarity.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

NORM_EPS = 1e-12


class ConfigurationError(ValueError):
    pass


class SequenceAssemblyError(ValueError):
    pass


class NumericDegeneracyError(FloatingPointError):
    """A representation norm underflowed; collapse or a bug upstream."""


@dataclass
class EncoderSpec:
    kind: str = "conv"  # "conv" or "mlp"
    image_shape: tuple[int, int, int] = (3, 64, 64)
    conv_channels: tuple[int, ...] = (16, 32, 64, 128)
    mlp_hidden: tuple[int, ...] = (512,)

    def __post_init__(self):
        if self.kind not in ("conv", "mlp"):
            raise ConfigurationError(f"unknown encoder kind {self.kind!r}")


@dataclass
class ModelConfig:
    action_dim: int
    total_steps: int
    d_z: int = 256
    d_a: int = 128
    encoder_spec: EncoderSpec = field(default_factory=EncoderSpec)
    aggregator_layers: int = 3
    aggregator_heads: int = 4
    predictor_hidden: int = 1024
    ema_tau_base: float = 0.996
    positional_embedding: bool = False
    max_seq_len: int = 16

    def __post_init__(self):
        for name in ("d_z", "d_a", "predictor_hidden", "aggregator_layers",
                     "aggregator_heads", "action_dim", "total_steps"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if (self.d_z + self.d_a) % self.aggregator_heads != 0:
            raise ConfigurationError(
                f"d_z + d_a = {self.d_z + self.d_a} not divisible by "
                f"{self.aggregator_heads} heads"
            )
        if not (0.0 < self.ema_tau_base < 1.0):
            raise ConfigurationError("ema_tau_base must lie in (0, 1)")

    @property
    def token_width(self) -> int:
        return self.d_z + self.d_a


@dataclass
class LossOutput:
    loss: float
    cosine: float
    collapse_std: float


class ConvEncoder(nn.Module):
    """Stride-2 conv stack with batch norm, global average pool, linear head."""

    def __init__(self, spec: EncoderSpec, d_z: int):
        super().__init__()
        c_in = spec.image_shape[0]
        blocks = []
        for i, c_out in enumerate(spec.conv_channels):
            blocks.append(nn.Conv2d(c_in, c_out, 3, stride=2, padding=1))
            if i == len(spec.conv_channels) - 1:
                blocks.append(nn.BatchNorm2d(c_out))
            blocks.append(nn.ReLU())
            c_in = c_out
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Linear(c_in, d_z)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.blocks(x)
        h = h.mean(dim=(2, 3))
        return self.head(h)


class MlpEncoder(nn.Module):
    def __init__(self, spec: EncoderSpec, d_z: int):
        super().__init__()
        c, h, w = spec.image_shape
        widths = [c * h * w, *spec.mlp_hidden]
        layers: list[nn.Module] = []
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            layers += [nn.Linear(w_in, w_out), nn.ReLU()]
        layers.append(nn.Linear(widths[-1], d_z))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x.flatten(1))


def build_encoder(spec: EncoderSpec, d_z: int) -> nn.Module:
    if spec.kind == "conv":
        return ConvEncoder(spec, d_z)
    return MlpEncoder(spec, d_z)


class Predictor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(cfg.d_z + cfg.d_a, cfg.predictor_hidden),
            nn.ReLU(),
            nn.Linear(cfg.predictor_hidden, cfg.d_z),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def _init_parameters(module: nn.Module) -> None:
    """Uniform fan-in init for weights, zeros for biases."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            fan_in = m.weight.shape[1] * (
                m.weight[0, 0].numel() if m.weight.dim() > 2 else 1
            )
            bound = 1.0 / math.sqrt(fan_in)
            nn.init.uniform_(m.weight, -bound, bound)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def ema_tau(step: int, total_steps: int, tau_base: float) -> float:
    """Cosine ramp of the target decay rate from tau_base up to 1."""
    k = min(max(step, 0), total_steps)
    return 1.0 - (1.0 - tau_base) * (math.cos(math.pi * k / total_steps) + 1.0) / 2.0


def seqjepa_loss(z_pred: torch.Tensor, z_target: torch.Tensor) -> tuple[torch.Tensor, LossOutput]:
    """1 - cosine(z_pred, z_target), averaged over the batch.

    Raises NumericDegeneracyError if any representation norm underflows;
    a zero-norm latent means collapse or an upstream bug, so it is never
    silently clamped.
    """
    if z_pred.dim() == 1:
        z_pred = z_pred[None]
        z_target = z_target[None]
    for name, z in (("prediction", z_pred), ("target", z_target)):
        norms = z.norm(dim=-1)
        if bool((norms < NORM_EPS).any()):
            raise NumericDegeneracyError(f"{name} norm underflowed")
    p = z_pred / z_pred.norm(dim=-1, keepdim=True)
    t = z_target / z_target.norm(dim=-1, keepdim=True)
    cosine = (p * t).sum(dim=-1).mean()
    loss = 1.0 - cosine
    if z_target.shape[0] > 1:
        collapse_std = t.detach().std(dim=0, unbiased=False).mean()
    else:
        collapse_std = torch.zeros(())
    return loss, LossOutput(
        loss=float(loss.detach()),
        cosine=float(cosine.detach()),
        collapse_std=float(collapse_std),
    )


class SeqJEPA(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = build_encoder(cfg.encoder_spec, cfg.d_z)
        self.action_embedder = nn.Linear(cfg.action_dim, cfg.d_a, bias=False)
        width = cfg.token_width
        layer = nn.TransformerEncoderLayer(
            d_model=width,
            nhead=cfg.aggregator_heads,
            dim_feedforward=4 * width,
            dropout=0.0,
            activation="relu",
            batch_first=True,
            norm_first=False,  # post-normalization
        )
        self.aggregator = nn.TransformerEncoder(
            layer, num_layers=cfg.aggregator_layers, enable_nested_tensor=False
        )
        self.agg_token = nn.Parameter(torch.empty(width))
        self.readout = nn.Linear(width, cfg.d_z)
        self.predictor = Predictor(cfg)
        if cfg.positional_embedding:
            self.pos_embedding = nn.Parameter(
                torch.zeros(cfg.max_seq_len, width)
            )
        else:
            self.pos_embedding = None
        _init_parameters(self)
        nn.init.normal_(self.agg_token, std=0.02)
        self.target_encoder = copy.deepcopy(self.encoder)
        for p in self.target_encoder.parameters():
            p.requires_grad_(False)
        self.register_buffer("step", torch.zeros((), dtype=torch.long))

    # -- components ---------------------------------------------------

    def encode_views(self, views: torch.Tensor) -> torch.Tensor:
        """(B, M, C, H, W) or (B, C, H, W) -> per-view latents of width d_z."""
        single = views.dim() == 4
        if single:
            views = views[:, None]
        b, m = views.shape[:2]
        if tuple(views.shape[2:]) != tuple(self.cfg.encoder_spec.image_shape):
            raise ConfigurationError(
                f"view shape {tuple(views.shape[2:])} does not match encoder "
                f"spec {self.cfg.encoder_spec.image_shape}"
            )
        z = self.encoder(views.reshape(b * m, *views.shape[2:]))
        z = z.reshape(b, m, self.cfg.d_z)
        return z[:, 0] if single else z

    def embed_action(self, raw: torch.Tensor) -> torch.Tensor:
        if raw.shape[-1] != self.cfg.action_dim:
            raise ConfigurationError(
                f"raw action dim {raw.shape[-1]} != {self.cfg.action_dim}"
            )
        return self.action_embedder(raw)

    def aggregate(self, z_seq: torch.Tensor, a_emb_seq: torch.Tensor | None) -> torch.Tensor:
        """Aggregate M per-view latents with their M-1 action embeddings.

        Token layout: [AGG], (z_1 || a_1), ..., (z_{M-1} || a_{M-1}),
        (z_M || 0). The final view's action slot is zero-padded: the next
        action is withheld for the predictor.
        """
        b, m, _ = z_seq.shape
        if a_emb_seq is None:
            a_emb_seq = z_seq.new_zeros(b, 0, self.cfg.d_a)
        if a_emb_seq.shape[1] != m - 1:
            raise SequenceAssemblyError(
                f"{a_emb_seq.shape[1]} action embeddings for {m} views; "
                f"expected {m - 1}"
            )
        a_full = torch.cat(
            [a_emb_seq, a_emb_seq.new_zeros(b, 1, self.cfg.d_a)], dim=1
        )
        tokens = torch.cat([z_seq, a_full], dim=-1)
        agg = self.agg_token[None, None, :].expand(b, 1, -1)
        tokens = torch.cat([agg, tokens], dim=1)
        if self.pos_embedding is not None:
            if tokens.shape[1] > self.pos_embedding.shape[0]:
                raise SequenceAssemblyError("sequence longer than max_seq_len")
            tokens = tokens + self.pos_embedding[None, : tokens.shape[1]]
        out = self.aggregator(tokens)
        return self.readout(out[:, 0])

    def predict_next(self, z_agg: torch.Tensor, a_m_emb: torch.Tensor) -> torch.Tensor:
        return self.predictor(torch.cat([z_agg, a_m_emb], dim=-1))

    @torch.no_grad()
    def target_encode(self, views: torch.Tensor) -> torch.Tensor:
        single = views.dim() == 4
        if single:
            views = views[:, None]
        b, m = views.shape[:2]
        z = self.target_encoder(views.reshape(b * m, *views.shape[2:]))
        z = z.reshape(b, m, self.cfg.d_z)
        return z[:, 0] if single else z

    # -- training ------------------------------------------------------

    def training_loss(
        self,
        views: torch.Tensor,
        raw_actions: torch.Tensor,
        no_transformer_cond: bool = False,
        no_predictor_cond: bool = False,
        tie_target: bool = False,
    ) -> tuple[torch.Tensor, LossOutput]:
        """Full pipeline on a batch of episodes.

        views: (B, M+1, C, H, W); raw_actions: (B, M, action_dim).
        tie_target uses the online encoder with gradients for the target
        (the deliberately broken, collapse-prone configuration).
        """
        m = raw_actions.shape[1]
        if views.shape[1] != m + 1:
            raise SequenceAssemblyError(
                f"{views.shape[1]} views with {m} actions"
            )
        z = self.encode_views(views[:, :m])
        a_emb = self.embed_action(raw_actions)
        a_for_agg = a_emb[:, : m - 1]
        if no_transformer_cond:
            a_for_agg = torch.zeros_like(a_for_agg)
        z_agg = self.aggregate(z, a_for_agg)
        a_last = a_emb[:, m - 1]
        if no_predictor_cond:
            a_last = torch.zeros_like(a_last)
        z_pred = self.predict_next(z_agg, a_last)
        if tie_target:
            z_tgt = self.encode_views(views[:, m])
        else:
            z_tgt = self.target_encode(views[:, m])
        return seqjepa_loss(z_pred, z_tgt)

    @torch.no_grad()
    def ema_update(self, step: int | None = None) -> float:
        """Move target parameters toward the online encoder; returns tau."""
        k = int(self.step) if step is None else step
        tau = ema_tau(k, self.cfg.total_steps, self.cfg.ema_tau_base)
        for p_t, p_o in zip(
            self.target_encoder.parameters(), self.encoder.parameters()
        ):
            p_t.mul_(tau).add_(p_o, alpha=1.0 - tau)
        for b_t, b_o in zip(
            self.target_encoder.buffers(), self.encoder.buffers()
        ):
            b_t.copy_(b_o)
        return tau

    def online_parameters(self):
        """Everything trained by the optimizer (target excluded)."""
        for name, p in self.named_parameters():
            if not name.startswith("target_encoder."):
                yield name, p
