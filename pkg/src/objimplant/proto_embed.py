"""Prototype-based initialization of identifier prompt embeddings.

Before any denoiser fine-tuning, the learnable identifier rows are fit
so that the pooled embedding of ``"a photo of [id]"`` aligns with a
fused multimodal prototype of the object: the mean of the normalized
image embedding, masked-image embedding, and class-prompt embedding.
This gives the fine-tuning stage a warm start that already points at
the object instead of at random noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .encoders import MultimodalEncoders, apply_mask_to_image, tokenize
from .util import DTYPE, strict_cosine

PROMPT_TEMPLATE = "a photo of {identifier}"


def _unit(v: torch.Tensor) -> torch.Tensor:
    n = torch.linalg.vector_norm(v)
    if float(n) == 0.0:
        raise ValueError("cannot normalize a zero embedding")
    return v / n


def fuse_prototype(
    image_embedding: torch.Tensor,
    masked_image_embedding: torch.Tensor,
    class_prompt_embedding: torch.Tensor,
) -> torch.Tensor:
    """Mean of the three L2-normalized views of the object."""
    parts = (image_embedding, masked_image_embedding, class_prompt_embedding)
    return torch.stack([_unit(p) for p in parts]).mean(dim=0)


def prototype_target(
    encoders: MultimodalEncoders,
    image: np.ndarray,
    mask: np.ndarray,
    class_name: str,
) -> torch.Tensor:
    """Fused prototype for one object; constant w.r.t. the identifier rows."""
    full = encoders.image.encode(image)
    masked = encoders.image.encode(apply_mask_to_image(image, mask))
    class_prompt = PROMPT_TEMPLATE.format(identifier=class_name)
    class_emb = encoders.text.encode(tokenize(class_prompt, encoders.vocabulary)).pooled
    return fuse_prototype(full, masked, class_emb).detach()


def seed_identifier_rows(
    encoders: MultimodalEncoders,
    class_name: str,
    n_vectors: int,
    rng: np.random.Generator,
    noise_std: float = 0.01,
) -> torch.Tensor:
    """Class-token rows tiled to ``n_vectors`` plus small seeded noise."""
    vocab = encoders.vocabulary
    class_indices = tokenize(class_name, vocab)
    base = encoders.text.embedding[class_indices].mean(dim=0)
    rows = base.detach().clone().unsqueeze(0).repeat(n_vectors, 1)
    rows = rows + torch.from_numpy(rng.normal(0.0, noise_std, size=tuple(rows.shape))).to(DTYPE)
    return rows


def prompt_alignment_loss(
    encoders: MultimodalEncoders,
    identifier: str,
    rows: torch.Tensor,
    target: torch.Tensor,
) -> torch.Tensor:
    """1 - cos(pooled identifier prompt, fused prototype)."""
    vocab = encoders.vocabulary
    indices = tokenize(PROMPT_TEMPLATE.format(identifier=identifier), vocab)
    group = vocab.identifier_groups[identifier]
    override = {idx: rows[k] for k, idx in enumerate(group)}
    pooled = encoders.text.encode(indices, rows_override=override).pooled
    return 1.0 - strict_cosine(pooled, target)


@dataclass
class PrototypeFitResult:
    rows: torch.Tensor  # (n_vectors, dim), detached best-so-far
    loss: float  # loss at the returned rows
    steps: int  # optimizer steps actually taken
    history: list[float]  # loss after each step


def fit_prompt_embedding(
    encoders: MultimodalEncoders,
    identifier: str,
    image: np.ndarray,
    mask: np.ndarray,
    class_name: str,
    rng: np.random.Generator,
    max_steps: int = 500,
    lr: float = 1e-2,
    tol: float = 1e-3,
    patience: int = 50,
) -> PrototypeFitResult:
    """Adam fit of the identifier rows against the fused prototype.

    Stops early once ``patience`` consecutive steps fail to improve the
    best loss by more than ``tol``; always returns the best rows seen,
    not the last iterate.
    """
    vocab = encoders.vocabulary
    if identifier not in vocab.identifier_groups:
        raise ValueError(f"identifier {identifier!r} is not reserved in the vocabulary")
    n_vectors = len(vocab.identifier_groups[identifier])
    target = prototype_target(encoders, image, mask, class_name)
    rows = seed_identifier_rows(encoders, class_name, n_vectors, rng).requires_grad_(True)
    optimizer = torch.optim.Adam([rows], lr=lr)

    with torch.no_grad():
        best_loss = float(prompt_alignment_loss(encoders, identifier, rows, target))
    best_rows = rows.detach().clone()
    history: list[float] = []
    stale = 0
    steps = 0
    for _ in range(max_steps):
        optimizer.zero_grad()
        loss = prompt_alignment_loss(encoders, identifier, rows, target)
        loss.backward()
        optimizer.step()
        steps += 1
        with torch.no_grad():
            value = float(prompt_alignment_loss(encoders, identifier, rows, target))
        history.append(value)
        if value < best_loss - tol:
            best_loss = value
            best_rows = rows.detach().clone()
            stale = 0
        else:
            if value < best_loss:
                best_loss = value
                best_rows = rows.detach().clone()
            stale += 1
        if stale >= patience:
            break
    return PrototypeFitResult(rows=best_rows, loss=best_loss, steps=steps, history=history)
