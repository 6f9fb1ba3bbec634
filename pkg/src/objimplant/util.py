"""Shared numerics, seeding, and hashing helpers.

All stochastic draws in the package come from numpy Generators created by
:func:`seeded_rng`, so every pipeline stage is reproducible from integer
seeds and generator state can be persisted to checkpoints as plain JSON.
torch is used purely deterministically.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any

import numpy as np
import torch

DTYPE = torch.float64


def _entropy_int(part: Any) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"seed parts must be non-negative, got {part}")
        return int(part)
    if isinstance(part, str):
        digest = hashlib.sha256(part.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"unsupported seed part {part!r}")


def seeded_rng(*parts: Any) -> np.random.Generator:
    """Deterministic generator keyed by a sequence of ints/labels.

    ``seeded_rng(seed, "eps")`` and ``seeded_rng(seed, "gate")`` yield
    independent streams that are stable across runs and platforms.
    """
    if not parts:
        raise ValueError("seeded_rng needs at least one seed part")
    entropy = [_entropy_int(p) for p in parts]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a generator's state."""
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def normal_tensor(rng: np.random.Generator, *shape: int, std: float = 1.0) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal(shape) * std).to(DTYPE)


def uniform_tensor(rng: np.random.Generator, *shape: int, low: float = 0.0, high: float = 1.0) -> torch.Tensor:
    return torch.from_numpy(rng.uniform(low, high, shape)).to(DTYPE)


def as_tensor(array) -> torch.Tensor:
    """Copy array-like data into a float64 tensor."""
    if isinstance(array, torch.Tensor):
        return array.detach().clone().to(DTYPE)
    return torch.as_tensor(np.asarray(array), dtype=DTYPE)


def strict_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity that refuses zero-norm inputs instead of clamping."""
    na = torch.linalg.vector_norm(a)
    nb = torch.linalg.vector_norm(b)
    if float(na.detach()) == 0.0 or float(nb.detach()) == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm vector")
    return (a * b).sum() / (na * nb)


def canonical_json(obj: Any) -> str:
    """Deterministic JSON encoding (sorted keys, compact separators)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def dict_hash(obj: Any) -> str:
    return sha256_hex(canonical_json(obj).encode("utf-8"))


def tensor_bytes(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy()).tobytes()


def weights_hash(named_tensors) -> str:
    """Order-independent digest over ``(name, tensor)`` pairs.

    Used to assert that frozen weights stay untouched across a run.
    """
    h = hashlib.sha256()
    for name, tensor in sorted(named_tensors, key=lambda kv: kv[0]):
        h.update(name.encode("utf-8"))
        h.update(tensor_bytes(tensor))
    return h.hexdigest()


def require_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise ValueError(f"{what} contains non-finite values")
    return t
