"""Frozen-representation evaluation battery.

Linear classification probes, relative-action regression R^2, retrieval
metrics (MRR, Hit@k) for the predictor, path integration over action
sequences, and the (M_tr, M_val, ablation, d_a) experiment matrix.
All evaluation is read-only: no model parameter ever changes here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .episodes import Episode, batch_actions, batch_views
from .model import SeqJEPA


@dataclass
class ProbeConfig:
    epochs: int = 200
    mlp_epochs: int = 200
    batch_size: int = 256
    lr: float = 1e-2
    test_fraction: float = 0.25
    seed: int = 0


@dataclass
class MetricRecord:
    metric: str  # top1 | r2 | mrr | hit1 | hit5 | path_r2
    value: float
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"metric": self.metric, "value": self.value,
                           "provenance": self.provenance})


@dataclass
class R2Result:
    r2: float
    per_component: list[float]
    excluded_components: list[int]


@dataclass
class RetrievalResult:
    mrr: float
    hit1: float
    hit5: float
    similarities: np.ndarray  # (N, n_candidates); true candidate at column 0
    ranks: np.ndarray


# -- representation extraction ------------------------------------------


@torch.no_grad()
def encoder_features(model: SeqJEPA, episodes: Sequence[Episode]) -> np.ndarray:
    """Frozen encoder latents of each episode's first view."""
    model.eval()
    views = torch.from_numpy(batch_views(episodes))[:, 0]
    return model.encode_views(views).numpy()


@torch.no_grad()
def aggregate_features(
    model: SeqJEPA,
    episodes: Sequence[Episode],
    M_val: int,
    no_transformer_cond: bool = False,
) -> np.ndarray:
    """Aggregate latents over the first M_val views and their actions."""
    model.eval()
    if any(ep.M < M_val - 1 for ep in episodes):
        raise ValueError(f"episodes too short for M_val={M_val}")
    views = torch.from_numpy(batch_views(episodes))[:, :M_val]
    z = model.encode_views(views)
    if M_val > 1:
        acts = torch.from_numpy(batch_actions(episodes))[:, : M_val - 1]
        a_emb = model.embed_action(acts)
        if no_transformer_cond:
            a_emb = torch.zeros_like(a_emb)
    else:
        a_emb = None
    return model.aggregate(z, a_emb).numpy()


@torch.no_grad()
def action_pair_features(
    model: SeqJEPA, episodes: Sequence[Episode]
) -> tuple[np.ndarray, np.ndarray]:
    """Concatenated encoder latents of consecutive view pairs, with the
    relative action between them as the regression target."""
    model.eval()
    views = torch.from_numpy(batch_views(episodes))[:, :2]
    z = model.encode_views(views)
    feats = torch.cat([z[:, 0], z[:, 1]], dim=-1).numpy()
    targets = np.stack([ep.actions[0].values for ep in episodes])
    return feats, targets.astype(np.float32)


def class_labels(episodes: Sequence[Episode]) -> np.ndarray:
    return np.array([ep.class_id for ep in episodes], dtype=np.int64)


# -- heads ----------------------------------------------------------------


def _split(n: int, cfg: ProbeConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    n_test = max(1, int(round(n * cfg.test_fraction)))
    return perm[n_test:], perm[:n_test]


def _standardize(x: torch.Tensor, tr: np.ndarray) -> torch.Tensor:
    """Whiten per feature with statistics fit on the training split only."""
    mu = x[tr].mean(dim=0, keepdim=True)
    sd = x[tr].std(dim=0, keepdim=True).clamp_min(1e-6)
    return (x - mu) / sd


def _train_head(
    head: nn.Module,
    x: torch.Tensor,
    y: torch.Tensor,
    loss_fn,
    epochs: int,
    cfg: ProbeConfig,
) -> None:
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(head.parameters(), lr=cfg.lr)
    n = x.shape[0]
    gen = np.random.default_rng(cfg.seed + 1)
    for _ in range(epochs):
        perm = torch.from_numpy(gen.permutation(n))
        for i in range(0, n, cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            opt.zero_grad()
            loss = loss_fn(head(x[idx]), y[idx])
            loss.backward()
            opt.step()


def linear_probe(features: np.ndarray, labels: np.ndarray, cfg: ProbeConfig | None = None) -> float:
    """Softmax-linear classifier on frozen features; held-out top-1."""
    cfg = cfg or ProbeConfig()
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("linear probe needs at least 2 classes")
    remap = {c: i for i, c in enumerate(classes)}
    y = np.array([remap[c] for c in labels], dtype=np.int64)
    tr, te = _split(len(y), cfg)
    x = torch.from_numpy(np.asarray(features, dtype=np.float32))
    x = _standardize(x, tr)
    yt = torch.from_numpy(y)
    torch.manual_seed(cfg.seed)
    head = nn.Linear(x.shape[1], len(classes))
    _train_head(head, x[tr], yt[tr], nn.functional.cross_entropy,
                cfg.epochs, cfg)
    with torch.no_grad():
        pred = head(x[te]).argmax(dim=-1)
    return float((pred == yt[te]).float().mean())


def r2_score(y_true: np.ndarray, y_pred: np.ndarray) -> R2Result:
    """Uniform average of per-component R^2; constant components excluded."""
    y_true = np.atleast_2d(np.asarray(y_true, dtype=np.float64).T).T
    y_pred = np.atleast_2d(np.asarray(y_pred, dtype=np.float64).T).T
    per, excluded = [], []
    for j in range(y_true.shape[1]):
        ss_tot = float(((y_true[:, j] - y_true[:, j].mean()) ** 2).sum())
        if ss_tot == 0.0:
            excluded.append(j)
            continue
        ss_res = float(((y_true[:, j] - y_pred[:, j]) ** 2).sum())
        per.append(1.0 - ss_res / ss_tot)
    if not per:
        raise ValueError("every target component has zero variance")
    return R2Result(float(np.mean(per)), per, excluded)


def _make_regressor(d_in: int, d_out: int, head: str, seed: int) -> nn.Module:
    torch.manual_seed(seed)
    if head == "linear":
        return nn.Linear(d_in, d_out)
    if head == "mlp_1024":
        return nn.Sequential(
            nn.Linear(d_in, 1024), nn.ReLU(), nn.Linear(1024, d_out)
        )
    raise ValueError(f"unknown regression head {head!r}")


def regression_head_for(kind: str) -> str:
    """Per-kind evaluation head: MLP for rotation/jitter/crop, else linear."""
    parts = kind.split("+")
    if any(p in ("rotation_quat", "jitter_params", "crop_params") for p in parts):
        return "mlp_1024"
    return "linear"


def regression_r2(
    features: np.ndarray,
    targets: np.ndarray,
    head: str = "linear",
    cfg: ProbeConfig | None = None,
) -> R2Result:
    cfg = cfg or ProbeConfig()
    x = torch.from_numpy(np.asarray(features, dtype=np.float32))
    y = torch.from_numpy(np.atleast_2d(np.asarray(targets, dtype=np.float32).T).T)
    tr, te = _split(x.shape[0], cfg)
    reg = _make_regressor(x.shape[1], y.shape[1], head, cfg.seed)
    epochs = cfg.mlp_epochs if head == "mlp_1024" else cfg.epochs
    _train_head(reg, x[tr], y[tr], nn.functional.mse_loss, epochs, cfg)
    with torch.no_grad():
        pred = reg(x[te]).numpy()
    return r2_score(y[te].numpy(), pred)


# -- retrieval -------------------------------------------------------------


@torch.no_grad()
def retrieval_metrics(
    model: SeqJEPA,
    world,
    episodes: Sequence[Episode],
    rng: np.random.Generator,
    n_candidates: int = 20,
    oracle_predictor: bool = False,
    random_predictor: bool = False,
) -> RetrievalResult:
    """Rank the true next view among same-source distractors by cosine.

    For each episode the predictor produces z_hat from the first M views;
    the candidate pool is the target encoding of the true view M+1 plus
    n_candidates - 1 freshly transformed views of the same source. Ties
    break by candidate index, so the metrics are deterministic.
    """
    if n_candidates < 6:
        raise ValueError("need at least 6 candidates for Hit@5")
    if not hasattr(world, "resample_view"):
        raise ValueError(
            "retrieval needs a world that can resample distractor views"
        )
    model.eval()
    sims = np.zeros((len(episodes), n_candidates))
    for i, ep in enumerate(episodes):
        m = ep.M
        views = torch.from_numpy(ep.views[None, ...].astype(np.float32))
        z = model.encode_views(views[:, :m])
        acts = torch.from_numpy(batch_actions([ep]))
        a_emb = model.embed_action(acts)
        z_agg = model.aggregate(z, a_emb[:, : m - 1])
        z_hat = model.predict_next(z_agg, a_emb[:, m - 1])
        cands = [ep.views[m]]
        for _ in range(n_candidates - 1):
            _, img = world.resample_view(ep.latents[m], rng)
            cands.append(img)
        cand_t = torch.from_numpy(np.stack(cands).astype(np.float32))
        z_c = model.target_encode(cand_t)
        if oracle_predictor:
            z_hat = z_c[:1]
        if random_predictor:
            z_hat = torch.from_numpy(
                rng.standard_normal(model.cfg.d_z).astype(np.float32)
            )[None]
        p = z_hat / z_hat.norm(dim=-1, keepdim=True)
        c = z_c / z_c.norm(dim=-1, keepdim=True)
        sims[i] = (c @ p.T).squeeze(-1).numpy()
    ranks = rank_of_true(sims)
    return RetrievalResult(
        mrr=float(np.mean(1.0 / ranks)),
        hit1=float(np.mean(ranks <= 1)),
        hit5=float(np.mean(ranks <= 5)),
        similarities=sims,
        ranks=ranks,
    )


def rank_of_true(similarities: np.ndarray) -> np.ndarray:
    """1-based rank of candidate 0 under descending similarity, ties by index."""
    ranks = np.empty(similarities.shape[0], dtype=np.int64)
    for i, row in enumerate(similarities):
        # stable sort on index; true candidate (index 0) wins exact ties
        order = np.argsort(-row, kind="stable")
        ranks[i] = int(np.where(order == 0)[0][0]) + 1
    return ranks


# -- path integration -------------------------------------------------------


@torch.no_grad()
def _path_features(
    model: SeqJEPA,
    episodes: Sequence[Episode],
    ablate: str,
) -> tuple[np.ndarray, np.ndarray]:
    model.eval()
    views = torch.from_numpy(batch_views(episodes))
    m = views.shape[1] - 1
    z = model.encode_views(views[:, :m])
    acts = torch.from_numpy(batch_actions(episodes))
    a_emb = model.embed_action(acts)
    if ablate == "actions":
        a_emb = torch.zeros_like(a_emb)
    if ablate == "vision":
        z = torch.zeros_like(z)
    z_agg = model.aggregate(z, a_emb[:, : m - 1] if m > 1 else None)
    feats = torch.cat([z_agg, a_emb[:, m - 1]], dim=-1).numpy()
    targets = np.stack([ep.cumulative_action.values for ep in episodes])
    return feats, targets.astype(np.float32)


def path_integration(
    model: SeqJEPA,
    episodes: Sequence[Episode],
    kind: str,
    ablate: str = "none",
    cfg: ProbeConfig | None = None,
) -> R2Result:
    """Regress the cumulative first-to-last action from (z_agg, a_M)."""
    if ablate not in ("none", "actions", "vision"):
        raise ValueError(f"unknown ablation {ablate!r}")
    if episodes[0].cumulative_action.kind != kind:
        raise ValueError(
            f"episodes carry {episodes[0].cumulative_action.kind!r} actions, "
            f"not {kind!r}"
        )
    feats, targets = _path_features(model, episodes, ablate)
    return regression_r2(feats, targets, regression_head_for(kind), cfg)


# -- experiment matrix ------------------------------------------------------


@dataclass
class MatrixSpec:
    M_tr: list[int]
    M_val: list[int]
    ablations: list[str] = field(default_factory=lambda: ["conditioned"])
    d_a: list[int] = field(default_factory=list)  # empty: model default only
    seeds: list[int] = field(default_factory=lambda: [0])
    eval_episodes: int = 512


ABLATION_FLAGS = {
    "conditioned": (False, False),
    "no_transformer_cond": (True, False),
    "no_predictor_cond": (False, True),
    "none": (True, True),
}


def run_matrix(
    spec: MatrixSpec,
    world_factory,
    model_cfg_factory,
    train_cfg_factory,
    probe_cfg: ProbeConfig | None = None,
) -> list[MetricRecord]:
    """Train one model per (M_tr, ablation, d_a, seed) cell and evaluate
    probes at every M_val. Factories take keyword arguments
    (M_tr/ablation/d_a/seed as applicable) and return fresh objects."""
    from .training import train

    probe_cfg = probe_cfg or ProbeConfig()
    d_a_values: list[int | None] = list(spec.d_a) or [None]
    records: list[MetricRecord] = []
    for seed in spec.seeds:
        for ablation in spec.ablations:
            no_tc, no_pc = ABLATION_FLAGS[ablation]
            for d_a in d_a_values:
                for m_tr in spec.M_tr:
                    world = world_factory()
                    model_cfg = model_cfg_factory(d_a=d_a)
                    train_cfg = train_cfg_factory(M_tr=m_tr, seed=seed)
                    train_cfg.ablation.no_transformer_cond = no_tc
                    train_cfg.ablation.no_predictor_cond = no_pc
                    result = train(world, model_cfg, train_cfg)
                    eval_rng = np.random.default_rng(seed + 7777)
                    max_m = max(spec.M_val)
                    episodes = [
                        world.sample_episode(eval_rng, max(max_m, 2))
                        for _ in range(spec.eval_episodes)
                    ]
                    prov_base = {
                        "config_hash": result.config_hash,
                        "M_tr": m_tr,
                        "ablation": ablation,
                        "d_a": d_a or model_cfg.d_a,
                        "seed": seed,
                    }
                    feats, targets = action_pair_features(result.model, episodes)
                    r2 = regression_r2(
                        feats, targets,
                        regression_head_for(world.conditioning_kind), probe_cfg,
                    )
                    records.append(MetricRecord("r2", r2.r2, dict(prov_base)))
                    labels = class_labels(episodes)
                    for m_val in spec.M_val:
                        agg = aggregate_features(
                            result.model, episodes, m_val,
                            no_transformer_cond=no_tc,
                        )
                        top1 = linear_probe(agg, labels, probe_cfg)
                        records.append(
                            MetricRecord(
                                "top1", top1, {**prov_base, "M_val": m_val}
                            )
                        )
    return records


def matrix_csv(records: list[MetricRecord], metric: str) -> str:
    """CSV grid of a matrix metric: rows M_tr, columns M_val (mean over seeds)."""
    cells: dict[tuple[int, int], list[float]] = {}
    for r in records:
        if r.metric != metric or "M_val" not in r.provenance:
            continue
        key = (r.provenance["M_tr"], r.provenance["M_val"])
        cells.setdefault(key, []).append(r.value)
    if not cells:
        raise ValueError(f"no matrix records for metric {metric!r}")
    rows = sorted({k[0] for k in cells})
    cols = sorted({k[1] for k in cells})
    lines = ["M_tr\\M_val," + ",".join(str(c) for c in cols)]
    for r_ in rows:
        vals = [
            f"{np.mean(cells[(r_, c)]):.6f}" if (r_, c) in cells else ""
            for c in cols
        ]
        lines.append(f"{r_}," + ",".join(vals))
    return "\n".join(lines) + "\n"
