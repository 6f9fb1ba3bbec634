"""Low-rank adapters for frozen linear layers.

Fine-tuning never touches base weights: each targeted projection gets a
rank-r bypass ``scale * B @ (A @ x)`` whose B factor starts at zero, so
a freshly injected adapter is an exact identity and training moves only
the A/B factors.
"""

from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np
import torch
import torch.nn as nn

from .util import DTYPE, normal_tensor


class LoRAAdapter(nn.Module):
    def __init__(self, d_in: int, d_out: int, rank: int, scale: float, rng: np.random.Generator):
        super().__init__()
        if rank < 1:
            raise ValueError("rank must be >= 1")
        if rank > min(d_in, d_out):
            raise ValueError(f"rank {rank} exceeds min(d_in, d_out) = {min(d_in, d_out)}")
        self.rank = rank
        self.scale = float(scale)
        self.A = nn.Parameter(normal_tensor(rng, rank, d_in, std=0.02))
        self.B = nn.Parameter(torch.zeros(d_out, rank, dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.scale * ((x @ self.A.T) @ self.B.T)

    def delta_weight(self) -> torch.Tensor:
        """The dense weight increment this adapter represents."""
        return self.scale * (self.B @ self.A)


class LoRALinear(nn.Module):
    """Frozen base linear plus a trainable low-rank bypass."""

    def __init__(self, base: nn.Linear, rank: int, scale: float, rng: np.random.Generator):
        super().__init__()
        base.weight.requires_grad_(False)
        if base.bias is not None:
            base.bias.requires_grad_(False)
        self.base = base
        self.adapter = LoRAAdapter(base.in_features, base.out_features, rank, scale, rng)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.adapter(x)


def _resolve_parent(model: nn.Module, path: str) -> tuple[nn.Module, str]:
    if "." in path:
        parent_path, attr = path.rsplit(".", 1)
        return model.get_submodule(parent_path), attr
    return model, path


def inject_adapters(
    model: nn.Module,
    target_paths: Iterable[str],
    rank: int,
    scale: float,
    rng: np.random.Generator,
) -> dict[str, LoRALinear]:
    """Wrap each dotted-path linear in ``model`` with a LoRA bypass.

    Paths are consumed in sorted order so adapter initialization draws
    from the generator in a reproducible sequence.
    """
    wrapped: dict[str, LoRALinear] = {}
    for path in sorted(target_paths):
        target = model.get_submodule(path)
        if isinstance(target, LoRALinear):
            raise ValueError(f"target {path!r} already has an adapter")
        if not isinstance(target, nn.Linear):
            raise TypeError(f"target {path!r} is {type(target).__name__}, expected nn.Linear")
        parent, attr = _resolve_parent(model, path)
        layer = LoRALinear(target, rank, scale, rng)
        setattr(parent, attr, layer)
        wrapped[path] = layer
    return wrapped


def adapter_parameters(adapters: Mapping[str, LoRALinear]) -> list[nn.Parameter]:
    params: list[nn.Parameter] = []
    for path in sorted(adapters):
        params.extend([adapters[path].adapter.A, adapters[path].adapter.B])
    return params


def adapter_state(adapters: Mapping[str, LoRALinear]) -> dict[str, torch.Tensor]:
    """Flat name -> tensor map using 'lora/<target>/A' and '.../B' keys."""
    state: dict[str, torch.Tensor] = {}
    for path in sorted(adapters):
        state[f"lora/{path}/A"] = adapters[path].adapter.A.detach().clone()
        state[f"lora/{path}/B"] = adapters[path].adapter.B.detach().clone()
    return state


def load_adapter_state(adapters: Mapping[str, LoRALinear], state: Mapping[str, torch.Tensor]) -> None:
    for path in sorted(adapters):
        for factor in ("A", "B"):
            key = f"lora/{path}/{factor}"
            if key not in state:
                raise KeyError(f"adapter state missing entry {key!r}")
            param = getattr(adapters[path].adapter, factor)
            value = state[key]
            if tuple(value.shape) != tuple(param.shape):
                raise ValueError(f"entry {key!r} has shape {tuple(value.shape)}, expected {tuple(param.shape)}")
            with torch.no_grad():
                param.copy_(value)
