import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from graphfit.data import (NOISE_PRESETS, AugmentationSpec, ShapeRecord, add_gaussian_noise,
                           add_uniform_outliers, apply_augmentation, density_gradient, density_mask,
                           density_striped, load_shape, load_shape_list, read_normals, read_pidx, read_xyz,
                           sample_training_patches, save_shape, striped_keep_probability, synth_shape,
                           write_normals, write_pidx, write_xyz)
from graphfit.errors import BoundsError, ConfigurationError, ParseError, SizeError
from graphfit.geometry import PointCloud


def _line_cloud(n):
    x = np.linspace(0.0, 1.0, n)
    return PointCloud(np.column_stack([x, np.zeros(n), np.zeros(n)]))


# --------------------------------------------------------------------- I/O


def test_read_xyz_example(tmp_path):
    path = tmp_path / "a.xyz"
    path.write_text("0.5 -1.25 3.0\n\n1 2 3\n")
    np.testing.assert_array_equal(read_xyz(path), [[0.5, -1.25, 3.0], [1, 2, 3]])


def test_round_trip_exact(tmp_path, rng):
    pts = rng.normal(size=(50, 3)) * 10.0 ** rng.integers(-8, 8, (50, 3))
    nrm = rng.normal(size=(50, 3))
    write_xyz(tmp_path / "a.xyz", pts)
    write_normals(tmp_path / "a.normals", nrm)
    write_pidx(tmp_path / "a.pidx", [3, 0, 49])
    assert np.array_equal(read_xyz(tmp_path / "a.xyz"), pts)
    assert np.array_equal(read_normals(tmp_path / "a.normals"), nrm)
    np.testing.assert_array_equal(read_pidx(tmp_path / "a.pidx", 50), [3, 0, 49])


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.just(3)),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_round_trip_property(tmp_path_factory, pts):
    path = tmp_path_factory.mktemp("rt") / "p.xyz"
    write_xyz(path, pts)
    assert np.array_equal(read_xyz(path), pts)


@pytest.mark.parametrize("text, line", [("1 2 3\n1 2\n", 2), ("1 2 3\n4 x 6\n", 2), ("nan 0 0\n", 1),
                                        ("0 inf 0\n", 1), ("1 2 3 4\n", 1)])
def test_parse_errors_carry_line_numbers(tmp_path, text, line):
    path = tmp_path / "bad.xyz"
    path.write_text(text)
    with pytest.raises(ParseError) as info:
        read_xyz(path)
    assert info.value.line == line
    assert f":{line}" in str(info.value) or f"line {line}" in str(info.value)


def test_pidx_bounds(tmp_path):
    path = tmp_path / "a.pidx"
    path.write_text("0\n5\n")
    with pytest.raises(BoundsError):
        read_pidx(path, 5)
    path.write_text("-1\n")
    with pytest.raises(BoundsError):
        read_pidx(path)
    path.write_text("1.5\n")
    with pytest.raises(ParseError):
        read_pidx(path)


def test_shape_list_round_trip(tmp_path):
    shape = synth_shape("sphere", 40, seed=3, name="ball")
    shape.query_indices = np.array([1, 7])
    save_shape(tmp_path, shape)
    (tmp_path / "list.txt").write_text("# comment\nball\n\n")
    [loaded] = load_shape_list(tmp_path / "list.txt")
    assert loaded.name == "ball"
    assert np.array_equal(loaded.cloud.points, shape.cloud.points)
    assert np.array_equal(loaded.cloud.normals, shape.cloud.normals)
    np.testing.assert_array_equal(loaded.query_indices, [1, 7])
    with pytest.raises(ConfigurationError):
        load_shape(tmp_path, "missing")


def test_shape_record_count_mismatch():
    cloud = PointCloud(np.zeros((3, 3)))
    object.__setattr__(cloud, "normals", np.zeros((2, 3)))
    with pytest.raises(SizeError):
        ShapeRecord("x", cloud)


# ------------------------------------------------------------ augmentation


def test_noise_presets():
    assert NOISE_PRESETS == {"low": 0.00125, "medium": 0.006, "high": 0.012}


def test_zero_noise_identity(rng):
    cloud = PointCloud(rng.normal(size=(20, 3)), rng.normal(size=(20, 3)))
    out = add_gaussian_noise(cloud, 0.0, seed=1)
    assert np.array_equal(out.points, cloud.points) and np.array_equal(out.normals, cloud.normals)
    with pytest.raises(ValueError):
        add_gaussian_noise(cloud, -0.1)


def test_noise_sample_std():
    cloud = synth_shape("plane", 100_000, seed=0).cloud
    sigma = 0.006 * cloud.bbox_diagonal
    out = add_gaussian_noise(cloud, 0.006, seed=4)
    delta = out.points - cloud.points
    assert np.all(np.abs(delta.std(axis=0) / sigma - 1.0) <= 0.02)
    assert np.abs(delta.mean(axis=0)).max() <= 0.02 * sigma
    assert np.array_equal(out.normals, cloud.normals)


def test_noise_deterministic(rng):
    cloud = PointCloud(rng.normal(size=(30, 3)))
    assert np.array_equal(add_gaussian_noise(cloud, 0.01, 5).points, add_gaussian_noise(cloud, 0.01, 5).points)


def test_gradient_density_ratio():
    cloud = _line_cloud(2_000_000)
    kept = density_gradient(cloud, seed=0).points[:, 0]
    width = 0.005
    near = np.count_nonzero(kept < width)
    far = np.count_nonzero(kept > 1 - width)
    # expected ratio of the bin-averaged keep probabilities
    expected = (1 - 0.9 * width / 2) / (0.1 + 0.9 * width / 2)
    assert near / far == pytest.approx(expected, rel=0.1)
    assert 9.0 <= near / far <= 11.0


def test_striped_band_boundaries():
    # bands of width 1/8; odd bands are thinned
    x = np.array([0.0, 0.124, 0.126, 0.249, 0.251, 0.5, 0.76, 0.874, 0.876, 1.0])
    pts = np.column_stack([x, np.zeros_like(x), np.zeros_like(x)])
    np.testing.assert_array_equal(striped_keep_probability(pts),
                                  [1, 1, 0.15, 0.15, 1, 1, 1, 1, 0.15, 0.15])


def test_striped_retention():
    cloud = _line_cloud(400_000)
    kept = density_striped(cloud, seed=1).points[:, 0]
    band = np.minimum((kept * 8).astype(int), 7)
    counts = np.bincount(band, minlength=8) / 50_000
    np.testing.assert_allclose(counts[::2], 1.0)
    np.testing.assert_allclose(counts[1::2], 0.15, atol=0.01)


def test_density_keeps_order_and_normals(rng):
    pts = rng.uniform(0, 1, (500, 3))
    nrm = rng.normal(size=(500, 3))
    cloud = PointCloud(pts, nrm)
    mask = density_mask(cloud, "striped", 3)
    out = density_striped(cloud, 3)
    assert np.array_equal(out.points, pts[mask]) and np.array_equal(out.normals, nrm[mask])
    assert np.array_equal(density_gradient(cloud, 9).points, density_gradient(cloud, 9).points)
    with pytest.raises(SizeError):
        density_mask(PointCloud(np.zeros((0, 3))), "gradient")


def test_apply_augmentation(rng):
    cloud = PointCloud(rng.uniform(0, 1, (300, 3)), rng.normal(size=(300, 3)))
    out, idx = apply_augmentation(cloud, AugmentationSpec(0.01, "gradient", seed=2))
    assert len(out) == len(idx) < 300
    assert np.array_equal(out.normals, cloud.normals[idx])
    with pytest.raises(ValueError):
        AugmentationSpec(-0.1)
    with pytest.raises(ValueError):
        AugmentationSpec(density_mode="holes")


def test_outliers_respect_protection(rng):
    cloud = PointCloud(rng.normal(size=(100, 3)))
    protect = np.arange(10)
    out, chosen = add_uniform_outliers(cloud, 0.2, seed=1, protect=protect)
    assert len(chosen) == 20 and not np.intersect1d(chosen, protect).size
    untouched = np.setdiff1d(np.arange(100), chosen)
    assert np.array_equal(out.points[untouched], cloud.points[untouched])
    lo, hi = cloud.points.min(0), cloud.points.max(0)
    assert np.all((out.points[chosen] >= lo) & (out.points[chosen] <= hi))


# --------------------------------------------------------------- sampling


def test_sampling_counts_and_determinism():
    shapes = [synth_shape("plane", 2000, seed=i) for i in range(32)]
    samples = sample_training_patches(shapes, 1024, seed=7)
    assert len(samples) == 32 * 1024
    assert samples == sample_training_patches(shapes, 1024, seed=7)
    assert samples != sample_training_patches(shapes, 1024, seed=8)
    first = [s.query_index for s in samples if s.shape_index == 0]
    assert len(set(first)) == 1024  # without replacement


def test_sampling_with_replacement_fallback():
    shape = synth_shape("plane", 10, seed=0)
    samples = sample_training_patches([shape], 25, seed=0)
    assert len(samples) == 25 and {s.query_index for s in samples} <= set(range(10))


def test_sampling_uses_query_indices():
    shape = synth_shape("plane", 100, seed=0)
    shape.query_indices = np.array([5, 6])
    assert {s.query_index for s in sample_training_patches([shape], 10, seed=0)} == {5, 6}
    with pytest.raises(ValueError):
        sample_training_patches([shape], 0, seed=0)


# ------------------------------------------------------------- synthetic


def test_synth_plane():
    s = synth_shape("plane", 200, seed=1)
    assert np.all(s.cloud.points[:, 2] == 0) and np.all(s.cloud.normals == [0, 0, 1])


def test_synth_sphere():
    s = synth_shape("sphere", 200, {"radius": 2.5}, seed=1)
    np.testing.assert_allclose(s.cloud.normals, s.cloud.points / 2.5, atol=1e-15)


def test_synth_quadric():
    s = synth_shape("quadric", 300, {"a": 0.3, "b": -0.7}, seed=2)
    p, n = s.cloud.points, s.cloud.normals
    np.testing.assert_allclose(p[:, 2], 0.3 * p[:, 0] ** 2 - 0.7 * p[:, 1] ** 2, atol=1e-15)
    g = np.column_stack([-0.6 * p[:, 0], 1.4 * p[:, 1], np.ones(300)])
    np.testing.assert_allclose(n, g / np.linalg.norm(g, axis=1, keepdims=True), atol=1e-15)


def test_synth_cube():
    s = synth_shape("cube", 300, {"size": 0.5}, seed=3)
    p, n = s.cloud.points, s.cloud.normals
    np.testing.assert_allclose(np.abs(p).max(axis=1), 0.5)
    np.testing.assert_allclose((p * n).sum(1), 0.5)


@pytest.mark.parametrize("kind, params", [("sphere", {"radius": 0}), ("plane", {"size": -1}),
                                          ("cube", {"size": 0}), ("torus", {})])
def test_synth_invalid(kind, params):
    with pytest.raises(ValueError):
        synth_shape(kind, 10, params)


def test_synth_unit_normals_and_determinism():
    for kind in ("plane", "sphere", "quadric", "cube"):
        a, b = synth_shape(kind, 100, seed=4), synth_shape(kind, 100, seed=4)
        assert np.array_equal(a.cloud.points, b.cloud.points)
        np.testing.assert_allclose(np.linalg.norm(a.cloud.normals, axis=1), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        synth_shape("plane", 0)
