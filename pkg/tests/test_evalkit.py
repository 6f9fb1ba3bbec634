"""IA/TA metrics and the unbiased KID estimator."""

import itertools

import numpy as np
import pytest
import torch

from objimplant.evalkit import (
    MetricReport,
    get_extractor,
    image_alignment,
    kid,
    kid_subset_averaged,
    make_toy_extractor,
    polynomial_kernel,
    register_extractor,
    text_alignment,
    write_report,
)
from objimplant.util import seeded_rng, strict_cosine


def features(rng, n, d=8, mean=0.0):
    return rng.standard_normal((n, d)) + mean


# -- image / text alignment ------------------------------------------------


def test_ia_of_reference_against_itself_is_one(backend):
    rng = seeded_rng(121, "img")
    ref = rng.random((64, 64, 3))
    assert image_alignment([ref], ref, backend.encoders.image) == pytest.approx(1.0, abs=1e-12)


def test_ia_matches_hand_computed_cosine(backend):
    rng = seeded_rng(122, "img")
    a, b = rng.random((64, 64, 3)), rng.random((64, 64, 3))
    encoder = backend.encoders.image
    with torch.no_grad():
        va, vb = encoder.encode(a).numpy(), encoder.encode(b).numpy()
    oracle = float(va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb)))
    assert abs(image_alignment([a], b, encoder) - oracle) < 1e-6


def test_ia_bounded(backend):
    rng = seeded_rng(123, "img")
    ref = rng.random((64, 64, 3))
    gens = [rng.random((64, 64, 3)) for _ in range(5)]
    value = image_alignment(gens, ref, backend.encoders.image)
    assert -1.0 <= value <= 1.0


def test_ta_constructed_shared_embedding_is_one(backend):
    """When the pooled prompt embedding IS the image embedding, TA == 1."""
    rng = seeded_rng(124, "img")
    image = rng.random((64, 64, 3))
    encoder = backend.encoders.image
    with torch.no_grad():
        shared = encoder.encode(image)
    assert text_alignment([image], [shared], encoder) == pytest.approx(1.0, abs=1e-12)


def test_ta_batch_equals_mean_of_singles(backend):
    rng = seeded_rng(125, "img")
    encoder = backend.encoders.image
    images = [rng.random((64, 64, 3)) for _ in range(3)]
    pooled = [torch.from_numpy(rng.standard_normal(backend.encoders.embedding_dim)) for _ in range(3)]
    batch = text_alignment(images, pooled, encoder)
    singles = [text_alignment([img], [p], encoder) for img, p in zip(images, pooled)]
    assert abs(batch - float(np.mean(singles))) < 1e-7


def test_ta_length_mismatch_rejected(backend):
    rng = seeded_rng(126, "img")
    with pytest.raises(ValueError):
        text_alignment([rng.random((64, 64, 3))], [], backend.encoders.image)


# -- KID ------------------------------------------------


def test_kid_identical_sets_exactly_zero():
    rng = seeded_rng(127, "kid")
    a = features(rng, 20)
    assert kid(a, a.copy()) == 0.0


def test_kid_symmetry():
    rng = seeded_rng(128, "kid")
    a, b = features(rng, 12), features(rng, 12)
    assert abs(kid(a, b) - kid(b, a)) < 1e-10


def test_kid_same_distribution_near_zero_large_n():
    rng = seeded_rng(129, "kid")
    values = [kid(features(rng, 100), features(rng, 100)) for _ in range(20)]
    assert abs(float(np.mean(values))) <= 1e-2
    # the estimator is unbiased: the signed mean is far below the spread
    assert abs(float(np.mean(values))) < 2 * float(np.std(values))


def test_kid_unbiasedness_within_three_standard_errors():
    rng = seeded_rng(130, "kid")
    values = np.array([kid(features(rng, 100), features(rng, 100)) for _ in range(50)])
    se = values.std(ddof=1) / np.sqrt(len(values))
    assert abs(values.mean()) <= 3 * se


def test_kid_brute_force_expansion_n5():
    """Hand-expanded paired U-statistic for n=m=5 to 1e-10."""
    rng = seeded_rng(131, "kid")
    a, b = features(rng, 5), features(rng, 5)
    d = a.shape[1]

    def k(x, y):
        return (float(x @ y) / d + 1.0) ** 3

    n = 5
    total = 0.0
    for i, j in itertools.permutations(range(n), 2):
        total += k(a[i], a[j]) + k(b[i], b[j]) - 2.0 * k(a[i], b[j])
    oracle = total / (n * (n - 1))
    assert abs(kid(a, b) - oracle) < 1e-10


def test_kid_separated_gaussians_large():
    rng = seeded_rng(132, "kid")
    a = features(rng, 200, d=8, mean=0.0)
    b = features(rng, 200, d=8, mean=3.0)
    assert kid(a, b) > 0.5


def test_kid_unequal_counts_unbiased_form():
    rng = seeded_rng(133, "kid")
    a, b = features(rng, 30), features(rng, 50)
    d = a.shape[1]
    k_aa = (a @ a.T / d + 1.0) ** 3
    k_bb = (b @ b.T / d + 1.0) ** 3
    k_ab = (a @ b.T / d + 1.0) ** 3
    oracle = (
        (k_aa.sum() - np.trace(k_aa)) / (30 * 29)
        + (k_bb.sum() - np.trace(k_bb)) / (50 * 49)
        - 2.0 * k_ab.mean()
    )
    assert abs(kid(a, b) - oracle) < 1e-10


def test_kid_requires_two_samples():
    rng = seeded_rng(134, "kid")
    with pytest.raises(ValueError):
        kid(features(rng, 1), features(rng, 5))


def test_kid_subset_averaged_close_to_full_estimate():
    rng = seeded_rng(135, "kid")
    a = features(rng, 80, mean=0.0)
    b = features(rng, 80, mean=1.0)
    full = kid(a, b)
    sub = kid_subset_averaged(a, b, subset_size=40, n_subsets=50, rng=seeded_rng(135, "sub"))
    assert abs(full - sub) < 0.5 * max(abs(full), 1.0)
    assert full > 0.0 and sub > 0.0


def test_polynomial_kernel_formula():
    a = np.array([[1.0, 0.0], [0.0, 2.0]])
    b = np.array([[1.0, 1.0]])
    out = polynomial_kernel(a, b)
    np.testing.assert_allclose(out, np.array([[(0.5 + 1) ** 3], [(1.0 + 1) ** 3]]), atol=1e-12)


# -- report plumbing ------------------------------------------------


def test_report_csv_columns_exact(tmp_path):
    report = MetricReport(ia=0.5, ta=0.25, kid=0.125, n_images=4, n_prompts=2)
    write_report(tmp_path, report)
    csv = (tmp_path / "report.csv").read_text(encoding="utf-8")
    header, row = csv.strip().splitlines()
    assert header == "IA,TA,KID"
    assert row == "0.5,0.25,0.125"
    payload = (tmp_path / "report.json").read_text(encoding="utf-8")
    assert '"n_images": 4' in payload


def test_extractor_registry(backend):
    extractor = make_toy_extractor(backend.encoders.image)
    register_extractor("test-toy", extractor)
    assert get_extractor("test-toy") is extractor
    with pytest.raises(KeyError):
        get_extractor("missing-extractor")
    rng = seeded_rng(136, "img")
    feats = extractor([rng.random((64, 64, 3)) for _ in range(3)])
    assert feats.shape == (3, backend.encoders.embedding_dim)
