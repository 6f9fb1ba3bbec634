"""Mask downsampling, blended noise targets, and subset machinery."""

import itertools
import math

import numpy as np
import pytest
import torch

from objimplant.masked_loss import (
    MaskVanishedError,
    choose_subset,
    denoising_loss,
    latent_mask,
    mask_latent,
    masked_eps_target,
    object_masked_loss,
    object_subsets,
)
from objimplant.util import seeded_rng

from conftest import rand_latent


# -- latent mask downsampling ------------------------------------------------


def test_all_ones_mask_downsamples_to_all_ones():
    out = latent_mask(np.ones((64, 64)), (8, 8))
    assert torch.equal(out, torch.ones(8, 8, dtype=torch.float64))


def test_top_half_mask_downsamples_to_top_half():
    mask = np.zeros((64, 64))
    mask[:32] = 1.0
    out = latent_mask(mask, (8, 8))
    expected = torch.zeros(8, 8, dtype=torch.float64)
    expected[:4] = 1.0
    assert torch.equal(out, expected)


def test_random_blob_matches_area_fraction_oracle():
    rng = seeded_rng(41, "blob")
    mask = (rng.random((64, 64)) < 0.5).astype(np.float64)
    out = latent_mask(mask, (8, 8))
    oracle = torch.zeros(8, 8, dtype=torch.float64)
    for i in range(8):
        for j in range(8):
            cell = mask[i * 8 : (i + 1) * 8, j * 8 : (j + 1) * 8]
            oracle[i, j] = 1.0 if cell.mean() >= 0.5 else 0.0
    assert torch.equal(out, oracle)


def test_vanishing_mask_raises():
    mask = np.zeros((64, 64))
    mask[0, 0] = 1.0  # a single pixel covers 1/64 of its cell
    with pytest.raises(MaskVanishedError):
        latent_mask(mask, (8, 8))


def test_non_binary_mask_rejected():
    with pytest.raises(ValueError):
        latent_mask(np.full((64, 64), 0.5), (8, 8))


# -- blended noise target ------------------------------------------------


def test_target_all_ones_mask_is_true_noise():
    rng = seeded_rng(42, "target")
    eps, pred = rand_latent(rng, 4, 8, 8), rand_latent(rng, 4, 8, 8)
    out = masked_eps_target(eps, pred, torch.ones(8, 8, dtype=torch.float64))
    assert torch.equal(out, eps)


def test_target_all_zeros_mask_is_prediction():
    rng = seeded_rng(43, "target")
    eps, pred = rand_latent(rng, 4, 8, 8), rand_latent(rng, 4, 8, 8)
    out = masked_eps_target(eps, pred, torch.zeros(8, 8, dtype=torch.float64))
    assert torch.equal(out, pred)


def test_target_matches_elementwise_oracle():
    rng = seeded_rng(44, "target")
    eps, pred = rand_latent(rng, 2, 4, 4), rand_latent(rng, 2, 4, 4)
    mask = torch.from_numpy((rng.random((4, 4)) < 0.5).astype(np.float64))
    out = masked_eps_target(eps, pred, mask)
    oracle = torch.empty_like(eps)
    for c in range(2):
        for i in range(4):
            for j in range(4):
                m = float(mask[i, j])
                oracle[c, i, j] = eps[c, i, j] if m == 1.0 else pred[c, i, j]
    assert float((out - oracle).abs().max()) < 1e-7


def test_target_detaches_prediction_outside_mask():
    rng = seeded_rng(45, "target")
    eps = rand_latent(rng, 1, 2, 2)
    pred = rand_latent(rng, 1, 2, 2).requires_grad_(True)
    mask = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    loss = ((masked_eps_target(eps, pred, mask) - pred) ** 2).mean()
    loss.backward()
    # off-mask cells contribute pred.detach() - pred: zero value, zero grad
    assert float(pred.grad[0, 0, 1]) == 0.0
    assert float(pred.grad[0, 1, 0]) == 0.0
    assert float(pred.grad[0, 0, 0]) != 0.0


# -- masked loss ------------------------------------------------


def test_masked_loss_zero_mask_is_exact_zero():
    rng = seeded_rng(46, "loss")
    eps, pred = rand_latent(rng, 4, 8, 8), rand_latent(rng, 4, 8, 8)
    loss = object_masked_loss(eps, pred, torch.zeros(8, 8, dtype=torch.float64))
    assert float(loss) == 0.0


def test_masked_loss_full_mask_collapses_to_plain_loss():
    rng = seeded_rng(47, "loss")
    eps, pred = rand_latent(rng, 4, 8, 8), rand_latent(rng, 4, 8, 8)
    full = object_masked_loss(eps, pred, torch.ones(8, 8, dtype=torch.float64))
    plain = denoising_loss(eps, pred)
    assert float(full) == float(plain)


def test_masked_loss_matches_masked_mse_oracle():
    rng = seeded_rng(48, "loss")
    for trial in range(100):
        eps = rand_latent(rng, 4, 8, 8)
        pred = rand_latent(rng, 4, 8, 8)
        mask = torch.from_numpy((rng.random((8, 8)) < rng.random()).astype(np.float64))
        loss = float(object_masked_loss(eps, pred, mask))
        m = mask.expand_as(eps)
        oracle = float((m * (eps - pred) ** 2).sum() / eps.numel())
        assert abs(loss - oracle) < 1e-6, f"trial {trial}: {loss} vs {oracle}"


def test_masked_loss_non_negative_and_finite():
    rng = seeded_rng(49, "loss")
    for _ in range(50):
        eps = rand_latent(rng, 4, 8, 8) * float(rng.random() * 10)
        pred = rand_latent(rng, 4, 8, 8) * float(rng.random() * 10)
        mask = torch.from_numpy((rng.random((8, 8)) < 0.5).astype(np.float64))
        loss = float(object_masked_loss(eps, pred, mask))
        assert loss >= 0.0 and math.isfinite(loss)


def test_gradient_locality_with_linear_denoiser():
    """With pred = W*z elementwise, masked-term gradients w.r.t. W vanish
    exactly at positions outside the mask."""
    rng = seeded_rng(50, "local")
    z = rand_latent(rng, 1, 4, 4)
    eps = rand_latent(rng, 1, 4, 4)
    mask = torch.from_numpy((rng.random((4, 4)) < 0.5).astype(np.float64))
    weight = rand_latent(rng, 1, 4, 4).requires_grad_(True)
    pred = weight * z  # elementwise linear test denoiser
    loss = object_masked_loss(eps, pred, mask)
    loss.backward()
    grad = weight.grad[0]
    off = grad[mask == 0.0]
    on = grad[mask == 1.0]
    assert torch.equal(off, torch.zeros_like(off))
    assert float(on.abs().sum()) > 0.0


# -- subsets ------------------------------------------------


def test_two_objects_k2_single_subset():
    assert object_subsets(2, 2) == [(0, 1)]


def test_three_objects_k2_universe():
    assert object_subsets(3, 2) == [(0, 1), (0, 2), (1, 2)]


def test_subset_size_clamped_to_object_count():
    assert object_subsets(2, 5) == [(0, 1)]


def test_four_objects_k2_counts_in_confidence_band():
    subsets = object_subsets(4, 2)
    assert len(subsets) == 6
    rng = seeded_rng(51, "subset")
    counts = {s: 0 for s in subsets}
    for _ in range(6000):
        counts[choose_subset(subsets, rng)] += 1
    for subset, count in counts.items():
        assert 850 <= count <= 1150, f"{subset}: {count}"


def test_combination_completeness_up_to_r5():
    for r in range(2, 6):
        for k in range(1, r + 1):
            subsets = object_subsets(r, k)
            rng = seeded_rng(52, "complete", r, k)
            seen = set()
            for _ in range(len(subsets) * 200):
                seen.add(choose_subset(subsets, rng))
            assert seen == set(subsets), f"r={r} k={k}: missing {set(subsets) - seen}"


def test_roundrobin_cycles_deterministically():
    subsets = object_subsets(3, 2)
    rng = seeded_rng(53, "unused")
    picks = [choose_subset(subsets, rng, step=s, strategy="roundrobin") for s in range(6)]
    assert picks == subsets + subsets


def test_lexicographic_enumeration_matches_itertools():
    for r, k in [(3, 2), (4, 2), (5, 3)]:
        assert object_subsets(r, k) == list(itertools.combinations(range(r), k))


def test_mask_latent_zeroes_outside():
    rng = seeded_rng(54, "ml")
    z = rand_latent(rng, 4, 8, 8)
    mask = torch.zeros(8, 8, dtype=torch.float64)
    mask[2:5, 3:6] = 1.0
    out = mask_latent(z, mask)
    assert torch.equal(out[:, 2:5, 3:6], z[:, 2:5, 3:6])
    outside = out.clone()
    outside[:, 2:5, 3:6] = 0.0
    assert float(outside.abs().sum()) == 0.0
