"""Class-characterizing regularization for identifier embeddings.

During fine-tuning the identifier rows drift toward the training image;
this term pulls the identifier prompt back toward its class prompt so
the learned token keeps class-level semantics (and with it the prior's
ability to compose the object into new scenes).
"""

from __future__ import annotations

import numpy as np
import torch

from .encoders import ToyTextEncoder, tokenize
from .proto_embed import PROMPT_TEMPLATE
from .util import strict_cosine


def class_gate(rng: np.random.Generator, p: float) -> bool:
    """One Bernoulli(p) draw; the caller shares it across all objects in a step."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"gate probability must be in [0, 1], got {p}")
    return bool(rng.random() < p)


def class_alignment_loss(
    text_encoder: ToyTextEncoder,
    identifier: str,
    rows: torch.Tensor,
    class_name: str,
    alpha: float = 1.0,
) -> torch.Tensor:
    """1 - alpha * cos(identifier prompt, class prompt).

    The class prompt embedding is detached: the gradient moves only the
    identifier rows, never the (frozen) class representation.
    """
    vocab = text_encoder.vocabulary
    id_indices = tokenize(PROMPT_TEMPLATE.format(identifier=identifier), vocab)
    group = vocab.identifier_groups[identifier]
    override = {idx: rows[k] for k, idx in enumerate(group)}
    id_pooled = text_encoder.encode(id_indices, rows_override=override).pooled

    class_indices = tokenize(PROMPT_TEMPLATE.format(identifier=class_name), vocab)
    class_pooled = text_encoder.encode(class_indices).pooled.detach()
    return 1.0 - alpha * strict_cosine(id_pooled, class_pooled)


def gated_class_loss(
    text_encoder: ToyTextEncoder,
    identifier: str,
    rows: torch.Tensor,
    class_name: str,
    gate: bool,
    alpha: float = 1.0,
) -> torch.Tensor:
    """Apply the regularizer only on gated steps; otherwise an exact zero."""
    if not gate:
        return torch.zeros((), dtype=rows.dtype)
    return class_alignment_loss(text_encoder, identifier, rows, class_name, alpha)
