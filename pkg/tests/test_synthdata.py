"""Scene synthesis: determinism, geometric validity, frequency control."""

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from detlab.data import (
    SceneSpec,
    build_catalog,
    check_annotation_validity,
    generate_classification_set,
    generate_detection_set,
    load_dataset,
    save_dataset,
)
from detlab.errors import ConfigurationError


def test_same_spec_seed_identical_manifests(tmp_path):
    spec = SceneSpec(canvas=(48, 64), n_classes=8, seed=4)
    a = generate_detection_set(spec, 12)
    b = generate_detection_set(spec, 12)
    save_dataset(a, tmp_path / "a")
    save_dataset(b, tmp_path / "b")
    for name in ("manifest.json", "index.json", "images.bin", "masks.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_different_seed_differs():
    a = generate_detection_set(SceneSpec(seed=1), 4)
    b = generate_detection_set(SceneSpec(seed=2), 4)
    assert any(
        not np.array_equal(sa.image, sb.image) for sa, sb in zip(a.samples, b.samples)
    )


def test_geometric_validity_of_every_annotation():
    ds = generate_detection_set(SceneSpec(canvas=(64, 64), n_classes=12, seed=9, occlusion_allowed=True), 40)
    for s in ds.samples:
        check_annotation_validity(s, ds.canvas)


def test_images_are_unit_range_float32():
    ds = generate_detection_set(SceneSpec(seed=3), 5)
    for s in ds.samples:
        assert s.image.dtype == np.float32
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0


def test_no_occlusion_mode_keeps_masks_disjoint():
    ds = generate_detection_set(SceneSpec(seed=5, occlusion_allowed=False, objects_per_image=(2, 4)), 15)
    from detlab.data.scenes import full_mask

    for s in ds.samples:
        acc = np.zeros(ds.canvas, dtype=int)
        for a in s.annotations:
            acc += full_mask(a, ds.canvas).astype(int)
        assert acc.max() <= 1


def test_uniform_frequency_within_3_sigma():
    spec = SceneSpec(n_classes=6, seed=11, frequency="uniform", objects_per_image=(3, 6))
    ds = generate_detection_set(spec, 300)
    counts = np.array(list(ds.class_annotation_counts().values()), dtype=float)
    n = counts.sum()
    p = 1.0 / 6
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma), counts


def test_power_law_counts_monotone_and_negatively_correlated():
    spec = SceneSpec(n_classes=26, seed=12, frequency="power_law", power_law_exponent=1.5,
                     objects_per_image=(3, 6))
    ds = generate_detection_set(spec, 400)
    counts = np.array([ds.class_annotation_counts()[c] for c in range(26)], dtype=float)
    expected = spec.class_probs() * counts.sum()
    assert np.all(np.diff(expected) <= 0)
    # empirical rank correlation with class index is negative
    ranks = np.argsort(np.argsort(-counts))
    corr = np.corrcoef(np.arange(26), ranks)[0, 1]
    assert corr > 0.8  # low class index -> high count rank
    corr_counts = np.corrcoef(np.arange(26), counts)[0, 1]
    assert corr_counts < 0


def test_power_law_exponent_recovered_by_mle():
    target = 1.5
    spec = SceneSpec(n_classes=26, seed=13, frequency="power_law", power_law_exponent=target,
                     objects_per_image=(3, 6))
    ds = generate_detection_set(spec, 2500)  # ~10k annotations
    counts = np.array([ds.class_annotation_counts()[c] for c in range(26)], dtype=float)
    ranks = np.arange(1, 27, dtype=float)

    def nll(gamma):
        logz = np.log(np.sum(ranks**-gamma))
        return gamma * np.sum(counts * np.log(ranks)) + counts.sum() * logz

    fit = minimize_scalar(nll, bounds=(0.2, 4.0), method="bounded").x
    assert abs(fit - target) <= 0.2, fit


def test_classification_scale_defaults():
    small = generate_classification_set("small", seed=2, n_images=30)
    large = generate_classification_set("large_diverse", seed=2, n_images=30)
    assert small.n_classes == 10 and large.n_classes == 40
    from detlab.data.scenes import CLASSIFY_SCALES

    assert CLASSIFY_SCALES["small"] == {"n_classes": 10, "n_images": 2000, "appearance": "narrow"}
    assert CLASSIFY_SCALES["large_diverse"] == {"n_classes": 40, "n_images": 10000, "appearance": "wide"}


def test_classification_labels_match_generator_class():
    ds = generate_classification_set("small", seed=7, n_images=40)
    for s in ds.samples:
        assert 0 <= s.label < 10
        assert s.annotations == []
    counts = ds.class_annotation_counts()
    assert sum(counts.values()) == 40


def test_disjoint_streams_no_duplicate_images():
    small = generate_classification_set("small", seed=21, n_images=50)
    large = generate_classification_set("large_diverse", seed=21, n_images=50)
    small_hashes = {s.image.tobytes() for s in small.samples}
    large_hashes = {s.image.tobytes() for s in large.samples}
    assert not (small_hashes & large_hashes)


def test_catalog_prefix_sharing_and_wideness():
    small = build_catalog(10, appearance="narrow")
    large = build_catalog(40, appearance="wide")
    for s, l in zip(small, large):
        assert s.family == l.family and s.class_id == l.class_id
    assert all(l.rotation_jitter > s.rotation_jitter for s, l in zip(small, large))
    assert len({c.family for c in large}) == 10


def test_catalog_rejects_tiny():
    with pytest.raises(ConfigurationError):
        build_catalog(1)


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        SceneSpec(n_classes=1).validate()
    with pytest.raises(ConfigurationError):
        SceneSpec(frequency="zipf").validate()
    with pytest.raises(ConfigurationError):
        SceneSpec(frequency="power_law", power_law_exponent=0.0).validate()
    with pytest.raises(ConfigurationError):
        SceneSpec(objects_per_image=(3, 2)).validate()


def test_save_load_roundtrip_preserves_everything(tmp_path):
    ds = generate_detection_set(SceneSpec(seed=6, n_classes=5), 8)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.dataset_id == ds.dataset_id
    assert back.canvas == ds.canvas
    for a, b in zip(ds.samples, back.samples):
        assert np.array_equal(a.image, b.image)
        assert len(a.annotations) == len(b.annotations)
        for x, y in zip(a.annotations, b.annotations):
            assert x.bbox == y.bbox and x.class_id == y.class_id
            assert np.array_equal(x.mask, y.mask)
