"""Finite-difference gradient checks on the full training pipeline.

Central differences in float64 on a toy-width model; relative error of the
autograd gradient must stay within 1e-3 on every probed coordinate.
"""

import numpy as np
import pytest
import torch

from seqjepa.model import EncoderSpec, ModelConfig, SeqJEPA, seqjepa_loss

EPS = 1e-4
REL_TOL = 1e-3


def build_toy_model():
    torch.manual_seed(0)
    cfg = ModelConfig(
        action_dim=3,
        total_steps=10,
        d_z=6,
        d_a=4,
        encoder_spec=EncoderSpec(kind="mlp", image_shape=(1, 3, 3), mlp_hidden=(8,)),
        aggregator_layers=1,
        aggregator_heads=2,
        predictor_hidden=10,
    )
    return SeqJEPA(cfg).double()


def loss_fn(model, views, acts, **kw):
    loss, _ = model.training_loss(views, acts, **kw)
    return loss


def check_gradients(model, compute_loss, max_coords=40, seed=0):
    loss = compute_loss()
    model.zero_grad()
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in model.online_parameters():
        grad = p.grad
        if grad is None:
            continue
        flat = p.data.view(-1)
        gflat = grad.view(-1)
        n = flat.numel()
        coords = rng.choice(n, size=min(max_coords, n), replace=False)
        for c in coords:
            orig = flat[c].item()
            flat[c] = orig + EPS
            up = compute_loss().item()
            flat[c] = orig - EPS
            down = compute_loss().item()
            flat[c] = orig
            fd = (up - down) / (2 * EPS)
            ag = gflat[c].item()
            denom = max(abs(fd), abs(ag), 1e-8)
            rel = abs(fd - ag) / denom
            worst = max(worst, rel)
            assert rel <= REL_TOL, f"{name}[{c}]: fd={fd} autograd={ag} rel={rel}"
    return worst


def test_training_loss_gradients_match_finite_differences():
    model = build_toy_model()
    g = torch.Generator().manual_seed(1)
    views = torch.rand(2, 4, 1, 3, 3, generator=g, dtype=torch.float64)
    acts = torch.randn(2, 3, 3, generator=g, dtype=torch.float64)
    check_gradients(model, lambda: loss_fn(model, views, acts), max_coords=8)


def test_gradients_under_ablations():
    model = build_toy_model()
    g = torch.Generator().manual_seed(2)
    views = torch.rand(2, 3, 1, 3, 3, generator=g, dtype=torch.float64)
    acts = torch.randn(2, 2, 3, generator=g, dtype=torch.float64)
    check_gradients(
        model,
        lambda: loss_fn(model, views, acts, no_transformer_cond=True),
        max_coords=5,
        seed=1,
    )
    check_gradients(
        model,
        lambda: loss_fn(model, views, acts, no_predictor_cond=True),
        max_coords=5,
        seed=2,
    )


def test_gradients_with_tied_target():
    model = build_toy_model()
    g = torch.Generator().manual_seed(3)
    views = torch.rand(2, 3, 1, 3, 3, generator=g, dtype=torch.float64)
    acts = torch.randn(2, 2, 3, generator=g, dtype=torch.float64)
    check_gradients(
        model,
        lambda: loss_fn(model, views, acts, tie_target=True),
        max_coords=5,
        seed=3,
    )


def test_cosine_loss_gradient_closed_form():
    """For fixed target t, d/dp [1 - cos(p, t)] has the closed form
    -(t_hat - cos * p_hat) / |p|."""
    g = torch.Generator().manual_seed(4)
    p = torch.randn(5, 7, generator=g, dtype=torch.float64, requires_grad=True)
    t = torch.randn(5, 7, generator=g, dtype=torch.float64)
    loss, _ = seqjepa_loss(p, t)
    loss.backward()
    with torch.no_grad():
        ph = p / p.norm(dim=-1, keepdim=True)
        th = t / t.norm(dim=-1, keepdim=True)
        cos = (ph * th).sum(-1, keepdim=True)
        expected = -(th - cos * ph) / p.norm(dim=-1, keepdim=True) / p.shape[0]
    assert torch.allclose(p.grad, expected, atol=1e-10)
