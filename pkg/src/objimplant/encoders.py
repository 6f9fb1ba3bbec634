"""Tokenization and the toy image/text encoder pair.

Both encoders live in one shared multimodal embedding space.  They are
deliberately small: a frozen embedding table plus one self-attention
layer for text, a strided conv stack for images.  The only learnable
rows are the reserved identifier tokens, which the rest of the pipeline
optimizes; everything else is seeded-random and immutable, so encoder
outputs are bitwise reproducible.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .util import DTYPE, as_tensor, normal_tensor, require_finite

UNK_TOKEN = "<unk>"

# user-facing identifiers look like "[v*]"; sibling rows of a multi-vector
# identifier are reserved under "[v*]#1", "[v*]#2", ...
IDENTIFIER_PATTERN = re.compile(r"^\[[A-Za-z0-9_\-]+\*\]$")
_SIBLING_PATTERN = re.compile(r"^(\[[A-Za-z0-9_\-]+\*\])#(\d+)$")


class UnknownIdentifierError(ValueError):
    """Prompt used an identifier token the vocabulary has not reserved."""

    def __init__(self, token: str):
        super().__init__(f"unknown identifier token {token!r}: not reserved in the vocabulary")
        self.token = token


def looks_like_identifier(token: str) -> bool:
    return IDENTIFIER_PATTERN.match(token) is not None or _SIBLING_PATTERN.match(token) is not None


@dataclass
class Vocabulary:
    """Ordered token list with reserved identifier groups.

    Base word indices are stable; identifiers reserved later are appended,
    so reserving new objects never shifts existing indices.  A multi-vector
    identifier owns ``n_vectors`` consecutive reserved rows.
    """

    tokens: list[str]
    embedding_dim: int
    identifier_groups: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.embedding_dim <= 0:
            raise ValueError("embedding_dim must be positive")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        self.base_size = len(self.tokens)

    @classmethod
    def build(cls, words: Sequence[str], embedding_dim: int) -> "Vocabulary":
        tokens = [UNK_TOKEN]
        for w in words:
            if w not in tokens:
                tokens.append(w)
        return cls(tokens=tokens, embedding_dim=embedding_dim)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def identifier_tokens(self) -> set[str]:
        return {self.tokens[i] for group in self.identifier_groups.values() for i in group}

    @property
    def unk_index(self) -> int:
        return self._index[UNK_TOKEN]

    def reserve_identifier(self, name: str, n_vectors: int = 1) -> list[int]:
        """Reserve ``n_vectors`` learnable rows for one identifier.

        Re-reserving the same name with the same width is a no-op and
        returns the existing indices.
        """
        if IDENTIFIER_PATTERN.match(name) is None:
            raise ValueError(f"identifier {name!r} must look like '[name*]'")
        if n_vectors < 1:
            raise ValueError("n_vectors must be >= 1")
        if name in self.identifier_groups:
            existing = self.identifier_groups[name]
            if len(existing) != n_vectors:
                raise ValueError(
                    f"identifier {name!r} already reserved with {len(existing)} vectors, requested {n_vectors}"
                )
            return list(existing)
        members = [name] + [f"{name}#{k}" for k in range(1, n_vectors)]
        indices = []
        for tok in members:
            if tok in self._index:
                raise ValueError(f"token {tok!r} already present in vocabulary")
            self._index[tok] = len(self.tokens)
            self.tokens.append(tok)
            indices.append(self._index[tok])
        self.identifier_groups[name] = indices
        return indices

    def token_index(self, token: str) -> int:
        return self._index[token]

    def is_reserved_index(self, index: int) -> bool:
        return index >= self.base_size

    def save(self, path) -> None:
        """Plain-text persistence, one token per line."""
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, embedding_dim: int) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        base, reserved = [], []
        for tok in lines:
            (reserved if looks_like_identifier(tok) else base).append(tok)
        vocab = cls(tokens=base, embedding_dim=embedding_dim)
        # reserved lines are ordered primary-then-siblings per group
        for tok in reserved:
            if IDENTIFIER_PATTERN.match(tok):
                vocab.identifier_groups[tok] = []
                current = tok
            else:
                current = _SIBLING_PATTERN.match(tok).group(1)
            vocab._index[tok] = len(vocab.tokens)
            vocab.tokens.append(tok)
            vocab.identifier_groups[current].append(vocab._index[tok])
        return vocab


def tokenize(prompt: str, vocabulary: Vocabulary) -> list[int]:
    """Whitespace tokenization; identifiers expand to their reserved rows.

    Unknown ordinary words map to ``<unk>``; unknown identifier-looking
    tokens raise :class:`UnknownIdentifierError` naming the offender.
    """
    indices: list[int] = []
    for word in prompt.split():
        if word in vocabulary.identifier_groups:
            indices.extend(vocabulary.identifier_groups[word])
        elif looks_like_identifier(word):
            raise UnknownIdentifierError(word)
        elif word in vocabulary._index:
            indices.append(vocabulary.token_index(word))
        else:
            indices.append(vocabulary.unk_index)
    return indices


def detokenize(indices: Sequence[int], vocabulary: Vocabulary) -> str:
    """Inverse of :func:`tokenize` for in-vocabulary prompts.

    Sibling rows of a multi-vector identifier collapse back onto the
    user-facing name, so tokenize/detokenize round-trips.
    """
    words = []
    for idx in indices:
        if idx < 0 or idx >= vocabulary.size:
            raise IndexError(f"token index {idx} out of range for vocabulary of size {vocabulary.size}")
        tok = vocabulary.tokens[idx]
        m = _SIBLING_PATTERN.match(tok)
        if m is not None:
            continue  # folded into the primary identifier token
        words.append(tok)
    return " ".join(words)


@dataclass
class TextEmbedding:
    """Per-token sequence plus its pooled (mean) vector."""

    sequence: torch.Tensor  # (n_tokens, dim)
    pooled: torch.Tensor  # (dim,)

    def __post_init__(self):
        require_finite(self.sequence, "text embedding sequence")
        require_finite(self.pooled, "pooled text embedding")


class ToyTextEncoder(nn.Module):
    """Embedding table + single-head self-attention + mean pool.

    The attention stack gives the map from identifier rows to the pooled
    vector enough nonlinearity that embedding optimization has to run by
    gradient descent.  All weights are frozen; identifier rows come in
    through ``rows_override`` as external learnable tensors.
    """

    MAX_LEN = 64

    def __init__(self, vocabulary: Vocabulary, rng: np.random.Generator, n_layers: int = 1):
        super().__init__()
        if n_layers < 1:
            raise ValueError("need at least one attention layer")
        self.vocabulary = vocabulary
        dim = vocabulary.embedding_dim
        self.dim = dim
        self.embedding = nn.Parameter(normal_tensor(rng, vocabulary.base_size, dim), requires_grad=False)
        self.layers = nn.ModuleList()
        for _ in range(n_layers):
            layer = nn.ModuleDict(
                {
                    "q": nn.Linear(dim, dim, bias=False),
                    "k": nn.Linear(dim, dim, bias=False),
                    "v": nn.Linear(dim, dim, bias=False),
                    "o": nn.Linear(dim, dim, bias=False),
                }
            )
            for proj in layer.values():
                proj.weight = nn.Parameter(normal_tensor(rng, dim, dim, std=dim**-0.5), requires_grad=False)
            self.layers.append(layer)
        pos = np.zeros((self.MAX_LEN, dim))
        position = np.arange(self.MAX_LEN)[:, None]
        div = np.exp(np.arange(0, dim, 2) * (-np.log(10000.0) / dim))
        pos[:, 0::2] = np.sin(position * div)
        pos[:, 1::2] = np.cos(position * div)
        self.register_buffer("positional", torch.from_numpy(pos).to(DTYPE))

    def embed_indices(
        self, indices: Sequence[int], rows_override: Mapping[int, torch.Tensor] | None = None
    ) -> torch.Tensor:
        rows = []
        for idx in indices:
            idx = int(idx)
            if idx < 0 or idx >= self.vocabulary.size:
                raise IndexError(f"token index {idx} out of range for vocabulary of size {self.vocabulary.size}")
            if rows_override is not None and idx in rows_override:
                rows.append(rows_override[idx])
            elif self.vocabulary.is_reserved_index(idx):
                raise ValueError(
                    f"reserved identifier row {self.vocabulary.tokens[idx]!r} has no bound embedding; "
                    "pass it via rows_override"
                )
            else:
                rows.append(self.embedding[idx])
        return torch.stack(rows)

    def encode(
        self, indices: Sequence[int], rows_override: Mapping[int, torch.Tensor] | None = None
    ) -> TextEmbedding:
        if len(indices) == 0:
            raise ValueError("cannot encode an empty token sequence")
        if len(indices) > self.MAX_LEN:
            raise ValueError(f"sequence of {len(indices)} tokens exceeds max length {self.MAX_LEN}")
        h = self.embed_indices(indices, rows_override) + self.positional[: len(indices)]
        for layer in self.layers:
            q, k, v = layer["q"](h), layer["k"](h), layer["v"](h)
            attn = torch.softmax(q @ k.T / self.dim**0.5, dim=-1)
            h = h + layer["o"](attn @ v)
        return TextEmbedding(sequence=h, pooled=h.mean(dim=0))


def encode_text(
    encoder: ToyTextEncoder,
    indices: Sequence[int],
    rows_override: Mapping[int, torch.Tensor] | None = None,
) -> TextEmbedding:
    return encoder.encode(indices, rows_override)


class ToyImageEncoder(nn.Module):
    """Strided conv stack mapping an RGB image to one embedding vector."""

    INPUT_SIZE = 64

    def __init__(self, embedding_dim: int, rng: np.random.Generator):
        super().__init__()
        self.embedding_dim = embedding_dim
        channels = [(3, 8), (8, 16), (16, 32)]
        self.convs = nn.ModuleList()
        for c_in, c_out in channels:
            conv = nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1)
            fan_in = c_in * 9
            conv.weight = nn.Parameter(normal_tensor(rng, c_out, c_in, 3, 3, std=fan_in**-0.5), requires_grad=False)
            conv.bias = nn.Parameter(torch.zeros(c_out, dtype=DTYPE), requires_grad=False)
            self.convs.append(conv)
        self.head = nn.Linear(32, embedding_dim, bias=False)
        self.head.weight = nn.Parameter(normal_tensor(rng, embedding_dim, 32, std=32**-0.5), requires_grad=False)

    def _validate(self, image) -> torch.Tensor:
        arr = as_tensor(image)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected an (H, W, 3) image, got shape {tuple(arr.shape)}")
        if arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError("empty image")
        require_finite(arr, "image")
        if float(arr.min()) < 0.0 or float(arr.max()) > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        return arr

    def encode(self, image) -> torch.Tensor:
        arr = self._validate(image)
        x = arr.permute(2, 0, 1).unsqueeze(0)
        if x.shape[-2:] != (self.INPUT_SIZE, self.INPUT_SIZE):
            x = F.interpolate(x, size=(self.INPUT_SIZE, self.INPUT_SIZE), mode="bilinear", align_corners=False)
        for conv in self.convs:
            x = torch.tanh(conv(x))
        pooled = x.mean(dim=(2, 3))
        return self.head(pooled).squeeze(0)


def encode_image(encoder: ToyImageEncoder, image) -> torch.Tensor:
    return encoder.encode(image)


def apply_mask_to_image(image, mask, fill: float = 0.0):
    """Keep pixels where ``mask == 1``; replace the rest with ``fill``.

    Black fill is the conventional masked-image input for the image
    encoder.  Accepts and returns numpy arrays.
    """
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if image.ndim != 3 or mask.ndim != 2 or image.shape[:2] != mask.shape:
        raise ValueError(f"mask shape {mask.shape} does not match image spatial shape {image.shape[:2]}")
    if not np.isin(mask, (0.0, 1.0)).all():
        raise ValueError("mask values must be exactly 0 or 1")
    return image * mask[:, :, None] + fill * (1.0 - mask[:, :, None])


class MultimodalEncoders:
    """The encoder pair; construction asserts the shared-space contract."""

    def __init__(self, text: ToyTextEncoder, image: ToyImageEncoder):
        if text.dim != image.embedding_dim:
            raise ValueError(
                f"text dim {text.dim} != image dim {image.embedding_dim}: encoders must share one space"
            )
        self.text = text
        self.image = image
        self.embedding_dim = text.dim

    @property
    def vocabulary(self) -> Vocabulary:
        return self.text.vocabulary


def build_encoders(vocabulary: Vocabulary, rng: np.random.Generator, n_layers: int = 1) -> MultimodalEncoders:
    text = ToyTextEncoder(vocabulary, rng, n_layers=n_layers)
    image = ToyImageEncoder(vocabulary.embedding_dim, rng)
    return MultimodalEncoders(text, image)


def load_image(path) -> np.ndarray:
    """8-bit RGB file to float64 (H, W, 3) in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def load_mask(path) -> np.ndarray:
    """8-bit grayscale file binarized at threshold 127 (>127 becomes 1)."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.float64)
    return (arr > 127).astype(np.float64)


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8)).save(path)


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) * 255.0).astype(np.uint8), mode="L").save(path)
