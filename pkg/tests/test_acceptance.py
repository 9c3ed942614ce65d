"""End-to-end acceptance battery.

Ten numbered checks: fast oracle suites (loss/gradients, action codecs,
sampler statistics, metric arithmetic, infrastructure) plus desk-scale
trained-model trends (action conditioning, ablation ordering, path
integration, inference-length scaling, collapse control). Each test
prints a single PASS/FAIL line.

The trend checks train real models and dominate the runtime. Set
SEQJEPA_TEST_CACHE to a directory to reuse trained weights across
invocations while iterating; CI should leave it unset.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from seqjepa import evaluation as ev
from seqjepa import checkpoint as ckpt
from seqjepa.actions import compose_actions
from seqjepa.model import EncoderSpec, ModelConfig, SeqJEPA, seqjepa_loss
from seqjepa.quat import from_z_angle, qconj, qmult, qnormalize, to_matrix
from seqjepa.saccades import (
    SaccadeWorld,
    SaliencyMap,
    apply_ior,
    saliency_sample_fixation,
)
from seqjepa.sprites import SpriteWorld
from seqjepa.training import (
    AblationFlags,
    TrainConfig,
    build_model,
    train,
)

from test_gradients import build_toy_model, check_gradients, loss_fn

# desk-scale run shape shared by every trained-model check
ROT_STEPS = 1500
SAC_STEPS = 1500
COLLAPSE_STEPS = 1000
SEEDS = (0, 1, 2)
ABLATIONS = {
    "conditioned": AblationFlags(False, False),
    "no_transformer_cond": AblationFlags(True, False),
    "no_predictor_cond": AblationFlags(False, True),
    "none": AblationFlags(True, True),
}


def report(num: int, name: str, ok: bool, detail: str = "") -> None:
    line = f"[{num}/10] {name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f"  ({detail})"
    print(line, flush=True)
    assert ok, line


def _model_config(world, steps: int) -> ModelConfig:
    return ModelConfig(
        action_dim=world.action_dim,
        total_steps=steps,
        d_z=96,
        d_a=32,
        encoder_spec=EncoderSpec(
            kind="conv", image_shape=world.image_shape,
            conv_channels=(12, 24, 48, 96),
        ),
        predictor_hidden=256,
    )


def _train_run(world, steps: int, seed: int, ablation: AblationFlags,
               M_tr: int = 3, tie_target: bool = False, tag: str = ""):
    """Train one run, optionally memoized on disk for local iteration."""
    mc = _model_config(world, steps)
    tc = TrainConfig(
        total_steps=steps, batch_size=128, M_tr=M_tr, warmup_steps=100,
        seed=seed, episode_pool=2048, ablation=ablation,
        tie_target=tie_target,
    )
    cache_dir = os.environ.get("SEQJEPA_TEST_CACHE")
    cache = Path(cache_dir) / f"{tag}.pt" if cache_dir and tag else None
    if cache is not None and cache.exists():
        blob = torch.load(cache, weights_only=False)
        model = build_model(world, mc, seed)
        model.load_state_dict(blob["state"])
        return model, blob["collapse"], blob["seconds"]
    t0 = time.monotonic()
    res = train(world, mc, tc)
    seconds = time.monotonic() - t0
    collapse = [r.collapse_std for r in res.records]
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"state": res.model.state_dict(),
                    "collapse": collapse, "seconds": seconds}, cache)
    return res.model, collapse, seconds


@pytest.fixture(scope="session")
def rotation_world():
    return SpriteWorld("rotation_quat", resolution=32)


@pytest.fixture(scope="session")
def rotation_episodes(rotation_world):
    rng = np.random.default_rng(424242)
    return [rotation_world.sample_episode(rng, 5) for _ in range(1024)]


@pytest.fixture(scope="session")
def rotation_runs(rotation_world):
    """All (ablation, seed) training runs shared by the trend checks."""
    runs = {}
    for name, flags in ABLATIONS.items():
        for seed in SEEDS:
            runs[(name, seed)] = _train_run(
                rotation_world, ROT_STEPS, seed, flags,
                tag=f"rot_{name}_s{seed}_n{ROT_STEPS}",
            )
    return runs


@pytest.fixture(scope="session")
def rotation_r2(rotation_runs, rotation_episodes):
    """Held-out action-regression R^2 per (ablation, seed)."""
    eps = rotation_episodes[:512]
    scores = {}
    for key, (model, _, _) in rotation_runs.items():
        feats, targets = ev.action_pair_features(model, eps)
        scores[key] = ev.regression_r2(feats, targets, "mlp_1024").r2
    return scores


# -- 1: loss and gradients ---------------------------------------------------


def test_loss_and_gradient_suite():
    t0 = time.monotonic()
    g = torch.Generator().manual_seed(0)
    p = torch.randn(64, 16, generator=g, dtype=torch.float64)
    # bounds: 1 - cosine lies in [0, 2]; 0 for identical, 2 for opposite
    assert seqjepa_loss(p, p.clone())[0].item() == pytest.approx(0.0, abs=1e-12)
    assert seqjepa_loss(p, -p)[0].item() == pytest.approx(2.0, abs=1e-12)
    t = torch.randn(64, 16, generator=g, dtype=torch.float64)
    base = seqjepa_loss(p, t)[0].item()
    assert 0.0 <= base <= 2.0
    # scale invariance of the cosine objective
    assert seqjepa_loss(3.7 * p, 0.2 * t)[0].item() == pytest.approx(base, abs=1e-10)

    # stop-gradient: target-branch parameters receive no gradient
    model = build_toy_model()
    views = torch.rand(2, 4, 1, 3, 3, generator=g, dtype=torch.float64)
    acts = torch.randn(2, 3, 3, generator=g, dtype=torch.float64)
    loss, _ = model.training_loss(views, acts)
    loss.backward()
    target_grads = [p.grad for p in model.target_encoder.parameters()]
    assert all(gr is None for gr in target_grads)
    model.zero_grad()

    worst = check_gradients(model, lambda: loss_fn(model, views, acts),
                            max_coords=8)
    elapsed = time.monotonic() - t0
    report(1, "loss and gradient suite", worst <= 1e-3 and elapsed < 60,
           f"worst rel err {worst:.2e}, {elapsed:.1f}s")


# -- 2: action codec oracle --------------------------------------------------


def test_action_codec_oracle():
    t0 = time.monotonic()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        qa = qnormalize(rng.standard_normal(4))
        qb = qnormalize(rng.standard_normal(4))
        worst = max(worst, np.abs(
            to_matrix(qmult(qa, qb)) - to_matrix(qa) @ to_matrix(qb)
        ).max())
        # relative rotation against the matrix oracle
        rel = qmult(qb, qconj(qa))
        worst = max(worst, np.abs(
            to_matrix(rel) - to_matrix(qb) @ to_matrix(qa).T
        ).max())
    codec_ok = worst <= 1e-6

    world = SpriteWorld("rotation_quat", resolution=16)
    consistent = True
    for i in range(1000):
        ep = world.sample_episode(np.random.default_rng(10_000 + i), 3)
        cum = compose_actions(ep.actions)
        from seqjepa.actions import relative_action
        direct = relative_action(ep.latents[0], ep.latents[-1], "rotation_quat")
        merr = np.abs(
            to_matrix(cum.values) - to_matrix(direct.values)
        ).max()
        consistent = consistent and merr <= 1e-6
    elapsed = time.monotonic() - t0
    report(2, "action codec oracle", codec_ok and consistent and elapsed < 60,
           f"worst {worst:.2e}, {elapsed:.1f}s")


# -- 3: sampler statistics ---------------------------------------------------


def test_sampler_statistics():
    from scipy.stats import chisquare

    rng = np.random.default_rng(3)
    # chi-squared uniformity over 1e5 draws on an 8x8 grid
    sal = SaliencyMap(np.full((8, 8), 1.0 / 64), normalized=True)
    counts = np.zeros(64)
    for _ in range(100_000):
        x, y = saliency_sample_fixation(sal, rng)
        counts[int(y) * 8 + int(x)] += 1
    p_value = chisquare(counts).pvalue

    # inhibition of return: no later fixation inside a prior disc
    world = SaccadeWorld()
    radius = world.ior_radius
    violations = 0
    for i in range(1000):
        ep = world.sample_episode(np.random.default_rng(30_000 + i), 3)
        fix = [(lat.cx, lat.cy) for lat in ep.latents]
        for j in range(1, len(fix)):
            for k in range(j):
                d = np.hypot(fix[j][0] - fix[k][0], fix[j][1] - fix[k][1])
                if d <= radius:
                    violations += 1

    # masked-disc cell counts match brute-force rasterization exactly
    H = W = 96
    base = SaliencyMap(np.full((H, W), 1.0 / (H * W)), normalized=True)
    fixations = [(20.0, 30.0), (70.0, 50.0)]
    masked = apply_ior(base, fixations, 16.0)
    yy, xx = np.mgrid[0:H, 0:W]
    brute = np.zeros((H, W), dtype=bool)
    for fx, fy in fixations:
        brute |= (yy - fy) ** 2 + (xx - fx) ** 2 <= 16.0**2
    exact = int((masked.grid == 0).sum()) == int(brute.sum())

    report(3, "sampler statistics",
           p_value > 0.01 and violations == 0 and exact,
           f"chi2 p={p_value:.3f}, IoR violations={violations}")


# -- 4: action conditioning improves equivariance ----------------------------


def test_action_conditioning_trend(rotation_runs, rotation_r2):
    max_seconds = max(rotation_runs[("conditioned", s)][2] for s in SEEDS)
    cond = float(np.mean([rotation_r2[("conditioned", s)] for s in SEEDS]))
    none = float(np.mean([rotation_r2[("none", s)] for s in SEEDS]))
    gap = cond - none
    report(4, "action conditioning trend",
           gap >= 0.2 and max_seconds <= 15 * 60,
           f"conditioned {cond:.3f} vs ablated {none:.3f}, "
           f"gap {gap:.3f}, slowest run {max_seconds:.0f}s")


# -- 5: ablation ordering ----------------------------------------------------


def test_ablation_ordering(rotation_r2):
    order = ["conditioned", "no_transformer_cond", "no_predictor_cond", "none"]
    means = [float(np.mean([rotation_r2[(n, s)] for s in SEEDS]))
             for n in order]
    inversions = sum(1 for a, b in zip(means, means[1:]) if a < b)
    detail = ", ".join(f"{n}={m:.3f}" for n, m in zip(order, means))
    report(5, "ablation ordering", inversions <= 1, detail)


# -- 6: path integration on the saccade world --------------------------------


@pytest.fixture(scope="session")
def saccade_run():
    world = SaccadeWorld()
    model, collapse, seconds = _train_run(
        world, SAC_STEPS, 0, AblationFlags(False, False), M_tr=4,
        tag=f"sac_s0_n{SAC_STEPS}",
    )
    return world, model


def test_path_integration(saccade_run):
    world, model = saccade_run
    r2 = {}
    for M in (2, 4, 6):
        eps = []
        i = 0
        while len(eps) < 512:
            try:
                eps.append(
                    world.sample_episode(np.random.default_rng(60_000 + i), M)
                )
            except Exception:
                pass
            i += 1
        for ablate in ("none", "actions", "vision"):
            r2[(M, ablate)] = ev.path_integration(
                model, eps, "saccade", ablate=ablate
            ).r2
    full = [r2[(M, "none")] for M in (2, 4, 6)]
    drops_ok = all(b <= a + 0.05 for a, b in zip(full, full[1:]))
    actions_ok = all(r2[(M, "actions")] <= 0.1 for M in (2, 4, 6))
    vision_ok = abs(r2[(2, "vision")] - r2[(2, "none")]) <= 0.15
    detail = (f"full R2 {full[0]:.3f}/{full[1]:.3f}/{full[2]:.3f}, "
              f"actions-ablated max {max(r2[(M, 'actions')] for M in (2, 4, 6)):.3f}, "
              f"vision-ablated at M=2 {r2[(2, 'vision')]:.3f}")
    report(6, "path integration",
           full[0] >= 0.7 and drops_ok and actions_ok and vision_ok, detail)


# -- 7: longer inference context improves classification ---------------------


def test_inference_length_scaling(rotation_runs, rotation_episodes):
    labels = ev.class_labels(rotation_episodes)
    gaps = []
    for seed in SEEDS:
        model = rotation_runs[("conditioned", seed)][0]
        acc = {}
        for M_val in (1, 5):
            agg = ev.aggregate_features(model, rotation_episodes, M_val)
            acc[M_val] = ev.linear_probe(agg, labels)
        gaps.append(acc[5] - acc[1])
    mean_gap = float(np.mean(gaps))
    detail = "gaps " + ", ".join(f"{g:+.3f}" for g in gaps)
    report(7, "inference-length scaling", mean_gap >= 0.03,
           f"{detail}, mean {mean_gap:+.3f}")


# -- 8: collapse control ------------------------------------------------------


def _collapse_run(tie_target: bool) -> list:
    """Compact paired run: the collapse diagnostic needs speed, not scale."""
    world = SpriteWorld("rotation_quat", resolution=24)
    mc = ModelConfig(
        action_dim=world.action_dim, total_steps=COLLAPSE_STEPS,
        d_z=32, d_a=16,
        encoder_spec=EncoderSpec(kind="conv", image_shape=world.image_shape,
                                 conv_channels=(8, 16, 32)),
        predictor_hidden=128,
    )
    tc = TrainConfig(total_steps=COLLAPSE_STEPS, batch_size=64, M_tr=2,
                     warmup_steps=100, seed=0, episode_pool=1024,
                     tie_target=tie_target)
    res = train(world, mc, tc)
    return [r.collapse_std for r in res.records]


def test_collapse_control():
    t0 = time.monotonic()
    healthy = _collapse_run(tie_target=False)
    broken = _collapse_run(tie_target=True)
    elapsed = time.monotonic() - t0
    healthy_ok = min(healthy) >= 0.05
    broken_ok = min(broken) < 0.01
    report(8, "collapse control",
           healthy_ok and broken_ok and elapsed < 300,
           f"healthy min {min(healthy):.3f}, broken min {min(broken):.4f}, "
           f"{elapsed:.0f}s")


# -- 9: metric oracles ---------------------------------------------------------


def test_metric_oracles():
    # exact R^2 hand case
    r2 = ev.r2_score(np.array([0.0, 0.0, 2.0, 2.0]),
                     np.array([0.0, 1.0, 1.0, 2.0]))
    hand_ok = r2.r2 == 0.5

    # retrieval on a tiny model; recompute MRR/Hit@k by brute force
    world = SpriteWorld("rotation_quat", resolution=16)
    mc = ModelConfig(
        action_dim=4, total_steps=10, d_z=16, d_a=8,
        encoder_spec=EncoderSpec(kind="conv", image_shape=(3, 16, 16),
                                 conv_channels=(4, 8)),
        aggregator_layers=1, aggregator_heads=2, predictor_hidden=32,
    )
    torch.manual_seed(9)
    model = SeqJEPA(mc)
    rng = np.random.default_rng(9)
    eps = [world.sample_episode(rng, 2) for _ in range(64)]
    res = ev.retrieval_metrics(model, world, eps, np.random.default_rng(10))
    ranks = []
    for row in res.similarities:
        rank = 1 + sum(
            1 for j in range(1, len(row)) if row[j] > row[0]
        )
        ranks.append(rank)
    ranks = np.array(ranks)
    brute_ok = (
        np.array_equal(ranks, res.ranks)
        and res.mrr == float(np.mean(1.0 / ranks))
        and res.hit1 == float(np.mean(ranks <= 1))
        and res.hit5 == float(np.mean(ranks <= 5))
    )

    # random predictor matches the closed-form expectation H_20 / 20
    eps_r = [world.sample_episode(rng, 2) for _ in range(400)]
    rand = ev.retrieval_metrics(
        model, world, eps_r, np.random.default_rng(11), random_predictor=True
    )
    expect = sum(1.0 / k for k in range(1, 21)) / 20.0
    rand_ok = abs(rand.mrr - expect) <= 0.02

    report(9, "metric oracles", hand_ok and brute_ok and rand_ok,
           f"random MRR {rand.mrr:.4f} vs {expect:.4f}")


# -- 10: infrastructure --------------------------------------------------------


def test_infrastructure(tmp_path):
    t0 = time.monotonic()
    world = SpriteWorld("rotation_quat", resolution=16)
    mc = ModelConfig(
        action_dim=4, total_steps=12, d_z=16, d_a=8,
        encoder_spec=EncoderSpec(kind="conv", image_shape=(3, 16, 16),
                                 conv_channels=(4, 8)),
        aggregator_layers=1, aggregator_heads=2, predictor_hidden=32,
    )
    tc = TrainConfig(total_steps=12, batch_size=8, M_tr=2, warmup_steps=2,
                     seed=5, checkpoint_interval=6)

    # checkpoint round-trip is bit-exact
    full = train(world, mc, tc, out_dir=tmp_path / "full")
    path1 = full.checkpoint_path
    manifest, arrays = ckpt.load_checkpoint(path1)
    model2 = build_model(world, mc, tc.seed)
    ckpt.restore_model(model2, manifest, arrays)
    ckpt.save_checkpoint(tmp_path / "resaved.sjck", model2, None,
                         **{k: manifest[k] for k in
                            ("step", "tau", "seed", "config_hash")})
    # the resave has no optimizer arrays; compare model arrays instead
    _, arrays2 = ckpt.load_checkpoint(tmp_path / "resaved.sjck")
    model_keys = [k for k in arrays if not k.startswith("opt.")]
    roundtrip_ok = all(
        np.array_equal(arrays[k], arrays2[k]) for k in model_keys
    ) and set(model_keys) == set(arrays2)

    # split-run resume equals the uninterrupted run
    half = train(world, mc, tc, out_dir=tmp_path / "half")
    mid = tmp_path / "half" / "ckpt_0000006.sjck"
    resumed = train(world, mc, tc, out_dir=tmp_path / "resumed",
                    resume_from=mid)
    b1 = {n: p.detach().numpy().copy()
          for n, p in full.model.named_parameters()}
    b2 = {n: p.detach().numpy().copy()
          for n, p in resumed.model.named_parameters()}
    resume_ok = all(np.array_equal(b1[n], b2[n]) for n in b1)

    # identical seeds reproduce identical parameters
    again = train(world, mc, tc)
    b3 = {n: p.detach().numpy().copy()
          for n, p in again.model.named_parameters()}
    seed_ok = all(np.array_equal(b1[n], b3[n]) for n in b1)

    elapsed = time.monotonic() - t0
    report(10, "infrastructure",
           roundtrip_ok and resume_ok and seed_ok and elapsed < 30 * 60,
           f"{elapsed:.0f}s")
