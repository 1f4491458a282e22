import struct

import numpy as np
import pytest

from cmap_lab.classifier import ClfConfig, accuracy, train_clf
from cmap_lab.data import (Dataset, IdxCountMismatchError, IdxMagicError, IdxTruncatedError, SyntheticSpec,
                           gen_gaussian, gen_shape_images, generate, load_dataset, load_idx, quantize_255,
                           save_dataset, save_idx, train_test_split)
from cmap_lab.numerics import NumericsError


def test_gaussian_degenerate_sigma_at_means():
    ds = gen_gaussian(SyntheticSpec("gaussian-mixture", dim=2, num_classes=2, means=[[0, 0], [3, -1]],
                                    sigma_x=1e-12, count=50))
    means = np.array([[0, 0], [3, -1]])
    assert np.allclose(ds.samples, means[ds.labels], atol=1e-10)


def test_gaussian_variance_concentrates():
    ds = gen_gaussian(SyntheticSpec("isotropic-gaussian", dim=3, count=10 ** 5))
    assert np.all(np.abs(ds.samples.var(axis=0) - 1.0) < 0.05)


def test_two_component_counts_binomial_bound():
    ds = gen_gaussian(SyntheticSpec("gaussian-mixture", dim=2, num_classes=2, means=[[0, 0], [5, 5]],
                                    count=10 ** 4))
    counts = np.bincount(ds.labels, minlength=2)
    assert np.all(np.abs(counts - 5000) < 4 * np.sqrt(10 ** 4 * 0.25))


def test_gaussian_spec_validation():
    with pytest.raises(NumericsError):
        gen_gaussian(SyntheticSpec("gaussian-mixture", dim=2, num_classes=2, means=[[0, 0]]))
    with pytest.raises(NumericsError):
        gen_gaussian(SyntheticSpec("isotropic-gaussian", sigma_x=0.0))


def test_shape_images_range_and_determinism():
    a = gen_shape_images(SyntheticSpec(count=200, seed=5))
    b = gen_shape_images(SyntheticSpec(count=200, seed=5))
    assert a.samples.shape == (200, 16, 16)
    assert np.array_equal(a.samples, b.samples) and np.array_equal(a.labels, b.labels)
    assert a.samples.min() >= 0.0 and a.samples.max() <= 1.0


def test_noise_free_images_are_two_level():
    ds = gen_shape_images(SyntheticSpec(count=30, noise_amplitude=0.0))
    # each image is exactly background plus one foreground level
    assert all(len(np.unique(img)) == 2 for img in ds.samples)


def test_shape_spec_validation():
    with pytest.raises(NumericsError):
        gen_shape_images(SyntheticSpec(image_size=6))
    with pytest.raises(NumericsError):
        gen_shape_images(SyntheticSpec(num_classes=5))


def test_default_shapes_classifier_accuracy():
    tr, te = train_test_split(generate(SyntheticSpec()), 4000)
    params, report = train_clf(tr, ClfConfig(), te)
    assert report["test_acc"] >= 0.95
    assert accuracy(params, te) == report["test_acc"]


def test_split_disjoint_and_exhaustive():
    ds = generate(SyntheticSpec(count=100))
    tr, te = train_test_split(ds, 70)
    assert len(tr) + len(te) == 100
    assert np.array_equal(np.concatenate([tr.samples, te.samples]), ds.samples)
    with pytest.raises(NumericsError):
        train_test_split(ds, 100)


def test_dataset_invariants():
    with pytest.raises(NumericsError):
        Dataset("image", np.full((2, 4, 4), 1.5), [0, 1], (0.0, 1.0))
    with pytest.raises(NumericsError):
        Dataset("image", np.zeros((2, 4, 4)), [0], (0.0, 1.0))


def test_idx_round_trip(tmp_path):
    ds = quantize_255(generate(SyntheticSpec(count=20)))
    save_idx(ds, tmp_path / "img", tmp_path / "lab")
    back = load_idx(tmp_path / "img", tmp_path / "lab")
    assert np.array_equal(back.samples, ds.samples) and np.array_equal(back.labels, ds.labels)


def test_idx_all_zero_images(tmp_path):
    (tmp_path / "img").write_bytes(struct.pack(">IIII", 0x803, 4, 3, 3) + bytes(36))
    (tmp_path / "lab").write_bytes(struct.pack(">II", 0x801, 4) + bytes([0, 1, 0, 1]))
    ds = load_idx(tmp_path / "img", tmp_path / "lab")
    assert ds.samples.shape == (4, 3, 3) and np.all(ds.samples == 0.0)


def test_idx_errors_name_offsets(tmp_path):
    (tmp_path / "img").write_bytes(struct.pack(">IIII", 0x803, 4, 3, 3) + bytes(36))
    (tmp_path / "lab").write_bytes(struct.pack(">II", 0x801, 3) + bytes(3))
    with pytest.raises(IdxCountMismatchError, match="byte offset"):
        load_idx(tmp_path / "img", tmp_path / "lab")
    (tmp_path / "bad").write_bytes(struct.pack(">II", 0x999, 3) + bytes(3))
    with pytest.raises(IdxMagicError) as err:
        load_idx(tmp_path / "img", tmp_path / "bad")
    assert err.value.offset == 0
    (tmp_path / "short").write_bytes(struct.pack(">IIII", 0x803, 4, 3, 3) + bytes(10))
    with pytest.raises(IdxTruncatedError):
        load_idx(tmp_path / "short", tmp_path / "lab")


def test_snapshot_round_trip(tmp_path):
    ds = generate(SyntheticSpec(count=25))
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert np.array_equal(back.samples, ds.samples) and back.value_range == ds.value_range
    assert back.num_classes == ds.num_classes
