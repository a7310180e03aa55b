import numpy as np
import pytest

from sphereloss.datagen import (
    PairProtocol,
    SphereDatasetSpec,
    class_centers,
    gen_glyph_images,
    gen_pair_protocol,
    gen_sphere_dataset,
    glyph_templates,
    read_dataset_csv,
    write_dataset_csv,
)
from sphereloss.exceptions import ConfigInvalid, InsufficientSamples


def test_zero_noise_samples_are_centers():
    spec = SphereDatasetSpec(classes=5, dim=4, samples_per_class=3, noise_sigma=0.0, seed=1)
    X, y = gen_sphere_dataset(spec)
    np.testing.assert_array_equal(X, class_centers(spec)[y])


def test_sphere_dataset_deterministic_unit_and_clustered():
    spec = SphereDatasetSpec(classes=50, dim=8, samples_per_class=10, noise_sigma=0.1, seed=4)
    X, y = gen_sphere_dataset(spec)
    X2, y2 = gen_sphere_dataset(spec)
    assert np.array_equal(X, X2) and np.array_equal(y, y2)
    assert np.max(np.abs(np.linalg.norm(X, axis=1) - 1)) < 1e-6
    # brute force over all pairs
    ang = np.arccos(np.clip(X @ X.T, -1, 1))
    same = y[:, None] == y[None, :]
    off = ~np.eye(len(y), dtype=bool)
    assert ang[same & off].mean() < ang[~same].mean()
    held, _ = gen_sphere_dataset(spec, stream="heldout")
    assert not np.array_equal(held, X)


def test_centers_respect_minimum_separation():
    C = class_centers(SphereDatasetSpec(classes=200, dim=3, seed=2))
    ang = np.arccos(np.clip(C @ C.T, -1, 1))
    assert ang[~np.eye(200, dtype=bool)].min() >= 0.1


def test_spec_validation():
    with pytest.raises(ConfigInvalid):
        SphereDatasetSpec(classes=1)
    with pytest.raises(ConfigInvalid):
        SphereDatasetSpec(dim=1)
    with pytest.raises(ConfigInvalid):
        SphereDatasetSpec(noise_sigma=-0.1)


def test_dataset_csv_roundtrip(tmp_path):
    X, y = gen_sphere_dataset(SphereDatasetSpec(classes=3, dim=4, samples_per_class=2, seed=0))
    p = write_dataset_csv(tmp_path / "d.csv", X, y)
    assert p.read_text().splitlines()[0] == "label,f0,f1,f2,f3"
    X2, y2 = read_dataset_csv(p)
    assert np.array_equal(X, X2) and np.array_equal(y, y2)


def test_pair_protocol_examples(tmp_path):
    labels = np.repeat(np.arange(10), 5)
    p = gen_pair_protocol(labels, 10, 10, 10, seed=3)
    assert len(p) == 20
    assert np.bincount(p.fold).tolist() == [2] * 10
    for k in range(10):
        assert set(p.same[p.fold == k].tolist()) == {True, False}
    assert np.all((labels[p.idx_a] == labels[p.idx_b]) == p.same)
    keys = {(min(a, b), max(a, b)) for a, b in zip(p.idx_a, p.idx_b)}
    assert len(keys) == 20 and all(a != b for a, b in keys)

    one = gen_pair_protocol(labels, 7, 9, 1, seed=3)
    assert set(one.fold.tolist()) == {0} and len(one) == 16

    q = PairProtocol.read_csv(p.write_csv(tmp_path / "p.csv"))
    assert q.rows() == p.rows()
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "fold,idx_a,idx_b,same"


def test_pair_protocol_errors():
    labels = np.array([0, 0, 1, 1])
    with pytest.raises(InsufficientSamples):
        gen_pair_protocol(labels, 3, 1, 1, seed=0)
    with pytest.raises(InsufficientSamples):
        gen_pair_protocol(labels, 1, 5, 1, seed=0)
    with pytest.raises(ConfigInvalid):
        gen_pair_protocol(labels, 1, 1, 2, seed=0)


def test_glyph_images():
    X, y = gen_glyph_images(6, 28, 4, 0.0, seed=5)
    assert X.shape == (24, 1, 28, 28)
    for c in range(6):
        assert np.all(X[y == c] == X[y == c][0])
    noisy, _ = gen_glyph_images(6, 56, 3, 0.8, seed=5)
    assert noisy.min() >= 0 and noisy.max() <= 1
    # nearest-template classification, brute force over templates
    T = glyph_templates(6, 28, seed=5).reshape(6, -1)
    d = ((X.reshape(24, 1, -1) - T[None]) ** 2).sum(axis=2)
    assert np.array_equal(d.argmin(axis=1), y)
    with pytest.raises(ConfigInvalid):
        gen_glyph_images(2, 32, 1, 0.1, seed=0)
