"""Masked denoising objectives for object-specific fine-tuning.

The per-object term noises a masked latent and scores the prediction
only inside the object mask: outside the mask the target is the model's
own detached prediction, which contributes exactly zero to both the
value and the gradient.  The global term is the plain denoising loss on
the full latent.  With several objects in one image, each step trains a
subset of the objects plus the global term.
"""

from __future__ import annotations

from itertools import combinations
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .util import DTYPE, as_tensor


class MaskVanishedError(ValueError):
    """Pixel mask has no surviving cell at latent resolution."""


def validate_binary(mask: torch.Tensor, what: str = "mask") -> torch.Tensor:
    if not bool(((mask == 0.0) | (mask == 1.0)).all()):
        raise ValueError(f"{what} values must be exactly 0 or 1")
    return mask


def latent_mask(pixel_mask, latent_hw: tuple[int, int]) -> torch.Tensor:
    """Average-pool a pixel mask to latent resolution, then re-binarize.

    A latent cell is kept when at least half its pixel footprint is
    object.  An empty result means the object is too small to exist at
    latent scale, which the masked loss cannot recover from.
    """
    m = validate_binary(as_tensor(pixel_mask), "pixel mask")
    if m.ndim != 2:
        raise ValueError(f"expected a 2D pixel mask, got shape {tuple(m.shape)}")
    pooled = F.adaptive_avg_pool2d(m[None, None], latent_hw)[0, 0]
    binary = (pooled >= 0.5).to(DTYPE)
    if float(binary.sum()) == 0.0:
        raise MaskVanishedError(
            f"mask covering {int(m.sum())} pixels vanishes at latent resolution {latent_hw}"
        )
    return binary


def _broadcast(mask: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    if mask.shape != like.shape[-2:]:
        raise ValueError(f"mask shape {tuple(mask.shape)} != latent spatial shape {tuple(like.shape[-2:])}")
    return mask.expand_as(like)


def mask_latent(z0: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Zero the latent outside the object before the forward process."""
    return z0 * _broadcast(validate_binary(mask), z0)


def masked_eps_target(eps: torch.Tensor, eps_pred: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """True noise inside the mask, the model's own detached prediction outside."""
    if eps.shape != eps_pred.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != prediction shape {tuple(eps_pred.shape)}")
    m = _broadcast(validate_binary(mask), eps)
    return eps * m + eps_pred.detach() * (1.0 - m)


def denoising_loss(eps: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    """Plain epsilon-prediction MSE (the global, unmasked term)."""
    if eps.shape != eps_pred.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != prediction shape {tuple(eps_pred.shape)}")
    return ((eps - eps_pred) ** 2).mean()


def object_masked_loss(eps: torch.Tensor, eps_pred: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """MSE against the mask-composited target.

    Off-mask residuals are pred - detach(pred): zero in value and in
    gradient, so only the object region trains while the mean keeps the
    full-tensor normalization.
    """
    return denoising_loss(masked_eps_target(eps, eps_pred, mask), eps_pred)


def object_subsets(n_objects: int, subset_size: int) -> list[tuple[int, ...]]:
    """All size-min(k, r) object index subsets in lexicographic order."""
    if n_objects < 1:
        raise ValueError("need at least one object")
    if subset_size < 1:
        raise ValueError("subset size must be >= 1")
    return list(combinations(range(n_objects), min(subset_size, n_objects)))


def choose_subset(
    subsets: Sequence[tuple[int, ...]],
    rng: np.random.Generator,
    step: int | None = None,
    strategy: str = "uniform",
) -> tuple[int, ...]:
    """Pick the subset to train this step.

    ``uniform`` draws one index from the generator; ``roundrobin``
    cycles deterministically by step and touches no randomness.
    """
    if not subsets:
        raise ValueError("no subsets to choose from")
    if strategy == "uniform":
        return subsets[int(rng.integers(len(subsets)))]
    if strategy == "roundrobin":
        if step is None:
            raise ValueError("roundrobin selection needs the step index")
        return subsets[step % len(subsets)]
    raise ValueError(f"unknown subset strategy {strategy!r}")
