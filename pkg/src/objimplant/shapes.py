"""Procedural colored-shape images.

The toy backend is pretrained on this family, and tests/demos draw their
reference objects from it.  Rendering is pure numpy, hard-edged (no
anti-aliasing) so object masks are exactly binary, and fully determined
by the generator passed in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLASSES = ("circle", "square", "triangle")

IMAGE_SIZE = 64

# named anchor colors; samples jitter around these so the denoiser must
# actually read color words out of the prompt to hit the right hue
PALETTE = {
    "red": (0.80, 0.15, 0.15),
    "green": (0.15, 0.70, 0.20),
    "blue": (0.15, 0.25, 0.80),
    "yellow": (0.85, 0.80, 0.15),
    "purple": (0.55, 0.20, 0.70),
    "cyan": (0.15, 0.75, 0.75),
    "orange": (0.85, 0.50, 0.15),
    "gray": (0.50, 0.50, 0.50),
}

COLOR_NAMES = tuple(PALETTE)


@dataclass
class ShapeSample:
    image: np.ndarray  # (H, W, 3) float64 in [0, 1]
    mask: np.ndarray  # (H, W) float64 in {0, 1}
    class_name: str
    color_name: str | None = None
    background_name: str | None = None


def _grid(size: int):
    ys, xs = np.mgrid[0:size, 0:size]
    return xs.astype(np.float64), ys.astype(np.float64)


def shape_mask(class_name: str, size: int, cx: float, cy: float, radius: float) -> np.ndarray:
    xs, ys = _grid(size)
    if class_name == "circle":
        inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= radius**2
    elif class_name == "square":
        inside = (np.abs(xs - cx) <= radius) & (np.abs(ys - cy) <= radius)
    elif class_name == "triangle":
        # upward triangle inscribed in the radius box
        top, bottom = cy - radius, cy + radius
        frac = np.clip((ys - top) / (bottom - top), 0.0, 1.0)
        inside = (ys >= top) & (ys <= bottom) & (np.abs(xs - cx) <= frac * radius)
    else:
        raise ValueError(f"unknown shape class {class_name!r}")
    return inside.astype(np.float64)


def palette_color(rng: np.random.Generator, name: str) -> np.ndarray:
    anchor = np.asarray(PALETTE[name], dtype=np.float64)
    return np.clip(anchor + rng.uniform(-0.05, 0.05, 3), 0.02, 0.98)


def _color_pair(rng: np.random.Generator) -> tuple[str, str]:
    fg, bg = rng.choice(len(COLOR_NAMES), size=2, replace=False)
    return COLOR_NAMES[int(fg)], COLOR_NAMES[int(bg)]


def render_shape(class_name: str, *, size: int = IMAGE_SIZE, background, color, cx: float, cy: float, radius: float, color_name: str | None = None, background_name: str | None = None) -> ShapeSample:
    mask = shape_mask(class_name, size, cx, cy, radius)
    image = np.empty((size, size, 3), dtype=np.float64)
    image[:] = np.asarray(background, dtype=np.float64)
    image[mask == 1.0] = np.asarray(color, dtype=np.float64)
    return ShapeSample(image=image, mask=mask, class_name=class_name, color_name=color_name, background_name=background_name)


def sample_shape(rng: np.random.Generator, *, size: int = IMAGE_SIZE, classes=CLASSES) -> ShapeSample:
    class_name = classes[int(rng.integers(len(classes)))]
    fg_name, bg_name = _color_pair(rng)
    cx = size / 2 + float(rng.uniform(-6, 6))
    cy = size / 2 + float(rng.uniform(-6, 6))
    radius = float(rng.uniform(10, 22))
    return render_shape(
        class_name,
        size=size,
        background=palette_color(rng, bg_name),
        color=palette_color(rng, fg_name),
        cx=cx,
        cy=cy,
        radius=radius,
        color_name=fg_name,
        background_name=bg_name,
    )


def sample_batch(rng: np.random.Generator, n: int, *, size: int = IMAGE_SIZE, classes=CLASSES) -> list[ShapeSample]:
    return [sample_shape(rng, size=size, classes=classes) for _ in range(n)]


def sample_scene(rng: np.random.Generator, n_objects: int, *, size: int = IMAGE_SIZE, classes=CLASSES) -> tuple[np.ndarray, list[np.ndarray], list[str]]:
    """One image containing ``n_objects`` non-overlapping shapes.

    Returns ``(image, per-object masks, class names)``; the per-object
    masks are disjoint, which multi-object fine-tuning expects.
    """
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    bg_name = COLOR_NAMES[int(rng.integers(len(COLOR_NAMES)))]
    image = np.empty((size, size, 3), dtype=np.float64)
    image[:] = palette_color(rng, bg_name)
    masks: list[np.ndarray] = []
    names: list[str] = []
    occupied = np.zeros((size, size), dtype=np.float64)
    for _ in range(n_objects):
        for _attempt in range(200):
            class_name = classes[int(rng.integers(len(classes)))]
            radius = float(rng.uniform(7, 12))
            cx = float(rng.uniform(radius + 2, size - radius - 2))
            cy = float(rng.uniform(radius + 2, size - radius - 2))
            mask = shape_mask(class_name, size, cx, cy, radius)
            if (mask * occupied).sum() == 0:
                break
        else:
            raise RuntimeError("could not place non-overlapping shapes")
        while True:
            fg_name = COLOR_NAMES[int(rng.integers(len(COLOR_NAMES)))]
            if fg_name != bg_name:
                break
        image[mask == 1.0] = palette_color(rng, fg_name)
        occupied = np.maximum(occupied, mask)
        masks.append(mask)
        names.append(class_name)
    return image, masks, names
