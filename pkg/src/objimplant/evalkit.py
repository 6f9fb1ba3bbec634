"""Alignment metrics and kernel distance for generated image sets.

Image alignment (IA) scores identity preservation against the source
image; text alignment (TA) scores prompt faithfulness in the shared
embedding space; KID is the unbiased squared MMD with a cubic
polynomial kernel over image features.  Feature extraction is pluggable
by name so a heavier backbone can replace the toy encoder.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .encoders import ToyImageEncoder
from .util import strict_cosine

FeatureExtractor = Callable[[Sequence[np.ndarray]], np.ndarray]

_EXTRACTORS: dict[str, FeatureExtractor] = {}


def register_extractor(name: str, extractor: FeatureExtractor) -> None:
    _EXTRACTORS[name] = extractor


def get_extractor(name: str) -> FeatureExtractor:
    if name not in _EXTRACTORS:
        known = ", ".join(sorted(_EXTRACTORS)) or "(none registered)"
        raise KeyError(f"unknown feature extractor {name!r}; registered: {known}")
    return _EXTRACTORS[name]


def make_toy_extractor(encoder: ToyImageEncoder) -> FeatureExtractor:
    def extract(images: Sequence[np.ndarray]) -> np.ndarray:
        with torch.no_grad():
            return np.stack([encoder.encode(im).numpy() for im in images])

    return extract


@dataclass
class MetricReport:
    ia: float  # mean image-image cosine, in [-1, 1]
    ta: float  # mean prompt-image cosine, in [-1, 1]
    kid: float  # unbiased MMD^2 estimate, may be slightly negative
    n_images: int
    n_prompts: int

    def to_dict(self) -> dict:
        return asdict(self)

    def csv(self) -> str:
        return "IA,TA,KID\n" + f"{self.ia:.10g},{self.ta:.10g},{self.kid:.10g}\n"


def image_alignment(generated: Sequence[np.ndarray], reference: np.ndarray, encoder: ToyImageEncoder) -> float:
    """Mean cosine between each generated image and the reference."""
    if len(generated) == 0:
        raise ValueError("image alignment needs at least one generated image")
    with torch.no_grad():
        ref = encoder.encode(reference)
        scores = [float(strict_cosine(encoder.encode(img), ref)) for img in generated]
    return float(np.mean(scores))


def text_alignment(
    generated: Sequence[np.ndarray],
    prompt_embeddings: Sequence[torch.Tensor],
    encoder: ToyImageEncoder,
) -> float:
    """Mean cosine between image embeddings and matched pooled prompt embeddings."""
    if len(generated) != len(prompt_embeddings):
        raise ValueError(f"{len(generated)} images but {len(prompt_embeddings)} prompt embeddings")
    if len(generated) == 0:
        raise ValueError("text alignment needs at least one pair")
    with torch.no_grad():
        scores = [
            float(strict_cosine(encoder.encode(img), pooled.detach()))
            for img, pooled in zip(generated, prompt_embeddings)
        ]
    return float(np.mean(scores))


def polynomial_kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """k(x, y) = (x.y / d + 1)^3 between all row pairs."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature matrices must be 2D with equal width, got {a.shape} and {b.shape}")
    d = a.shape[1]
    return (a @ b.T / d + 1.0) ** 3


def kid(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Unbiased squared MMD with the cubic polynomial kernel.

    Equal sample counts use the paired U-statistic, which is exactly
    zero when both sides are the same set; unequal counts fall back to
    the three-term unbiased form.  Symmetric in its arguments.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    n, m = a.shape[0], b.shape[0]
    if n < 2 or m < 2:
        raise ValueError(f"KID needs at least 2 samples per side, got {n} and {m}")
    k_aa = polynomial_kernel(a, a)
    k_bb = polynomial_kernel(b, b)
    k_ab = polynomial_kernel(a, b)
    sum_aa = float(k_aa.sum() - np.trace(k_aa))
    sum_bb = float(k_bb.sum() - np.trace(k_bb))
    if n == m:
        sum_cross = float(k_ab.sum() - np.trace(k_ab))
        return (sum_aa + sum_bb - 2.0 * sum_cross) / (n * (n - 1))
    return sum_aa / (n * (n - 1)) + sum_bb / (m * (m - 1)) - 2.0 * float(k_ab.mean())


def kid_subset_averaged(
    features_a: np.ndarray,
    features_b: np.ndarray,
    subset_size: int,
    n_subsets: int,
    rng: np.random.Generator,
) -> float:
    """Mean of KID over random equal-size subsets of both sides."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if subset_size < 2:
        raise ValueError("subset_size must be >= 2")
    if subset_size > min(a.shape[0], b.shape[0]):
        raise ValueError(f"subset_size {subset_size} exceeds the smaller sample count")
    if n_subsets < 1:
        raise ValueError("n_subsets must be >= 1")
    estimates = []
    for _ in range(n_subsets):
        ia = rng.choice(a.shape[0], size=subset_size, replace=False)
        ib = rng.choice(b.shape[0], size=subset_size, replace=False)
        estimates.append(kid(a[ia], b[ib]))
    return float(np.mean(estimates))


def write_report(out_dir, report: MetricReport, diagnostics: dict | None = None) -> None:
    """Persist the report as a structured record plus the CSV row."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    if diagnostics is not None:
        payload["diagnostics"] = diagnostics
    (out_dir / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out_dir / "report.csv").write_text(report.csv(), encoding="utf-8")
