"""Anatomy of the object-masked denoising loss and the subset scheduler.

Shows the two degenerate mask cases, the effect of a partial mask, how
multi-object scenes decompose into k-sized subsets, and the Bernoulli
gate that decides when the class-alignment term fires.
"""

import numpy as np
import torch

from objimplant import (
    add_noise,
    choose_subset,
    class_gate,
    denoising_loss,
    latent_mask,
    mask_latent,
    object_masked_loss,
    object_subsets,
    pretrain_backend,
    seeded_rng,
)
from objimplant.shapes import sample_shape
from objimplant.util import normal_tensor


def main() -> None:
    backend = pretrain_backend()
    scene = sample_shape(seeded_rng(17, "demo-mask"))
    z0 = backend.image_to_latent(scene.image)
    m = latent_mask(scene.mask, backend.latent_hw)
    print(f"latent mask keeps {float(m.mean()):.1%} of the {tuple(m.shape)} grid")

    rng = seeded_rng(17, "demo-noise")
    t = 40
    eps = normal_tensor(rng, *z0.shape)
    ctx = backend.encode_prompt(f"a photo of {scene.class_name}").sequence

    def predict(z: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return backend.denoiser(z[None], torch.tensor([t]), ctx[None])[0]

    pred = predict(add_noise(backend.schedule, mask_latent(z0, m), t, eps))
    print(f"object-masked loss at t={t}: {float(object_masked_loss(eps, pred, m)):.4f}")

    ones = torch.ones_like(m)
    pred_full = predict(add_noise(backend.schedule, z0, t, eps))
    plain = float(denoising_loss(eps, pred_full))
    collapsed = float(object_masked_loss(eps, pred_full, ones))
    print(f"all-ones mask reproduces the plain loss: {collapsed:.6f} == {plain:.6f}")
    print(f"all-zeros mask contributes nothing: {float(object_masked_loss(eps, pred, torch.zeros_like(m)))}")

    # four objects trained two at a time gives C(4,2) = 6 subsets
    subsets = object_subsets(4, 2)
    print(f"subsets for r=4, k=2: {subsets}")
    counts = {s: 0 for s in subsets}
    draw = seeded_rng(17, "demo-subset")
    for _ in range(6000):
        counts[choose_subset(subsets, draw)] += 1
    print(f"draw counts over 6000 steps: {sorted(counts.values())}")

    gate_rng = seeded_rng(17, "demo-gate")
    rate = np.mean([class_gate(gate_rng, 0.5) for _ in range(10_000)])
    print(f"gate rate at p=0.5 over 10k draws: {rate:.4f}")


if __name__ == "__main__":
    main()
