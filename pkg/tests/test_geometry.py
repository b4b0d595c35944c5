import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphfit.errors import DegeneracyError, SizeError
from graphfit.geometry import (JetOrder, LocalFrame, Patch, PointCloud, build_vandermonde,
                               classical_jet_normal, extract_patch, jet_normal, neighbor_normals,
                               pca_normal, solve_weighted_jet, vandermonde_partials)

from oracles import (brute_knn, monomial_row, mp_normal_equations, random_rotation,
                     weighted_descent_minimizer)

CUBE = np.array([[x, y, z] for x in (0.0, 1.0) for y in (0.0, 1.0) for z in (0.0, 1.0)])


def _plane_points(rng, count=100, normal=(0.0, 0.0, 1.0)):
    normal = np.asarray(normal, dtype=float)
    normal /= np.linalg.norm(normal)
    basis = np.linalg.svd(normal[None])[2][1:]
    uv = rng.uniform(-1, 1, (count, 2))
    return uv @ basis


def _angle_deg(a, b):
    return np.degrees(np.arccos(np.clip(abs(np.dot(a, b)), 0, 1)))


# ----------------------------------------------------------------- point cloud


def test_bbox_diagonal():
    assert PointCloud(CUBE).bbox_diagonal == pytest.approx(np.sqrt(3.0))


def test_normals_count_must_match():
    with pytest.raises(SizeError):
        PointCloud(CUBE, np.zeros((3, 3)))


# ------------------------------------------------------------------ patches


@pytest.mark.parametrize("corner", range(8))
def test_cube_corner_patch_matches_brute_force(corner):
    patch = extract_patch(PointCloud(CUBE), corner, 4)
    assert list(patch.source_indices) == brute_knn(CUBE, corner, 4)
    np.testing.assert_allclose(patch.local_points[0], 0.0, atol=1e-15)


def test_full_neighbourhood_is_a_permutation(rng):
    pts = rng.normal(size=(30, 3))
    patch = extract_patch(PointCloud(pts), 5, 30)
    assert sorted(patch.source_indices) == list(range(30))


def test_patch_invariants(rng):
    pts = rng.normal(size=(200, 3))
    patch = extract_patch(PointCloud(pts), 17, 40)
    assert patch.query_index == 17
    np.testing.assert_allclose(patch.local_points[0], 0.0, atol=1e-15)
    assert np.linalg.norm(patch.local_points, axis=1).max() == pytest.approx(1.0, abs=1e-9)
    rot = patch.frame.rotation
    np.testing.assert_allclose(rot @ rot.T, np.eye(3), atol=1e-9)
    assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(patch.frame.to_world(patch.local_points), pts[patch.source_indices], atol=1e-12)


def test_plane_patch_frame_maps_normal_to_z(rng):
    normal = np.array([0.3, -0.5, 0.8])
    normal /= np.linalg.norm(normal)
    pts = _plane_points(rng, 300, normal)
    patch = extract_patch(PointCloud(pts), 0, 50)
    # eigen-decomposition oracle on the raw neighbourhood covariance
    raw = pts[patch.source_indices]
    evals, evecs = np.linalg.eigh(np.cov(raw.T))
    assert abs(evecs[:, 0] @ normal) == pytest.approx(1.0, abs=1e-9)
    mapped = patch.frame.rotation @ normal
    np.testing.assert_allclose(np.abs(mapped), [0, 0, 1], atol=1e-9)


def test_ties_broken_by_index():
    pts = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [5, 5, 5]], dtype=float)
    patch = extract_patch(PointCloud(pts), 0, 3)
    assert list(patch.source_indices) == [0, 1, 2]


def test_patch_errors():
    with pytest.raises(SizeError):
        extract_patch(PointCloud(CUBE), 0, 9)
    with pytest.raises(DegeneracyError):
        extract_patch(PointCloud(np.ones((5, 3))), 0, 3)


# ---------------------------------------------------------------------- PCA


def test_pca_plane_identity(rng):
    patch = Patch.from_local(_plane_points(rng))
    np.testing.assert_allclose(pca_normal(patch), [0, 0, 1], atol=1e-12)


def test_pca_rotated_plane(rng):
    pts = _plane_points(rng)
    rot = random_rotation(rng)
    n = pca_normal(Patch.from_local(pts @ rot.T))
    assert abs(n @ (rot @ [0, 0, 1])) == pytest.approx(1.0, abs=1e-12)


def test_pca_oblique_plane_analytic(rng):
    pts = _plane_points(rng, 100, (1, 1, 1))
    n = pca_normal(extract_patch(PointCloud(pts), 0, 100))
    expected = np.ones(3) / np.sqrt(3)
    assert min(np.abs(n - expected).max(), np.abs(n + expected).max()) <= 1e-9


def test_pca_collinear_raises():
    pts = np.column_stack([np.linspace(0, 1, 10), np.zeros(10), np.zeros(10)])
    with pytest.raises(DegeneracyError):
        pca_normal(Patch.from_local(pts))


# ------------------------------------------------------------- Vandermonde


@pytest.mark.parametrize("n", range(1, 7))
def test_term_count_law(n):
    order = JetOrder(n)
    assert order.term_count == (n + 1) * (n + 2) // 2
    assert build_vandermonde([[0.3, 0.4]], order).shape == (1, order.term_count)


def test_vandermonde_examples():
    np.testing.assert_array_equal(build_vandermonde([[0, 0]], 3), [[1] + [0] * 9])
    np.testing.assert_array_equal(build_vandermonde([[1, 2]], 1), [[1, 1, 2]])
    np.testing.assert_array_equal(build_vandermonde([[2, 3]], 2), [[1, 2, 3, 4, 6, 9]])


def test_vandermonde_matches_plain_rows(rng):
    xy = rng.normal(size=(7, 2))
    expected = [monomial_row(x, y, 4) for x, y in xy]
    np.testing.assert_allclose(build_vandermonde(xy, 4), expected, rtol=1e-14)


def test_vandermonde_partial_examples():
    dx, dy = vandermonde_partials([[0.7, -0.2]], 1)
    np.testing.assert_array_equal(dx, [[0, 1, 0]])
    np.testing.assert_array_equal(dy, [[0, 0, 1]])
    dx, _ = vandermonde_partials([[2, 3]], 2)
    np.testing.assert_array_equal(dx, [[0, 1, 0, 4, 3, 0]])


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        build_vandermonde([[np.nan, 0]], 2)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5)), min_size=1, max_size=5),
       st.integers(1, 5))
def test_partials_match_finite_differences(xy, n):
    xy = np.array(xy)
    dx, dy = vandermonde_partials(xy, n)
    h = 1e-6
    for axis, analytic in ((0, dx), (1, dy)):
        step = np.zeros(2)
        step[axis] = h
        fd = (build_vandermonde(xy + step, n) - build_vandermonde(xy - step, n)) / (2 * h)
        np.testing.assert_allclose(analytic, fd, atol=1e-7, rtol=0)


# ----------------------------------------------------------- weighted jet


def test_flat_plane_gives_zero_beta(rng):
    patch = Patch.from_local(_plane_points(rng, 40))
    for n in (1, 2, 3, 4):
        np.testing.assert_allclose(solve_weighted_jet(patch, n).beta, 0.0, atol=1e-12)


def test_linear_fit_exact(rng):
    xy = rng.uniform(-1, 1, (20, 2))
    pts = np.column_stack([xy, 0.5 * xy[:, 0]])
    np.testing.assert_allclose(solve_weighted_jet(Patch.from_local(pts), 1).beta, [0, 0.5, 0], atol=1e-12)


def test_paraboloid_grid_against_extended_precision():
    gx, gy = np.meshgrid(np.linspace(-1, 1, 6), np.linspace(-1, 1, 10))
    xy = np.column_stack([gx.ravel(), gy.ravel()])
    z = 0.1 * xy[:, 0] ** 2 + 0.2 * xy[:, 1] ** 2
    beta = solve_weighted_jet(Patch.from_local(np.column_stack([xy, z])), 2).beta
    oracle = mp_normal_equations(xy, z, np.ones(60), 2)
    np.testing.assert_allclose(oracle, [0, 0, 0, 0.1, 0, 0.2], atol=1e-14)
    np.testing.assert_allclose(beta, oracle, atol=1e-8)


def test_zero_weight_excludes_outlier(rng):
    xy = rng.uniform(-1, 1, (30, 2))
    z = 0.3 * xy[:, 0] - 0.1 * xy[:, 1] + 0.05 * xy[:, 0] * xy[:, 1] + rng.normal(0, 0.01, 30)
    pts = np.column_stack([xy, z])
    pts[-1, 2] = 5.0
    w = np.ones(30)
    w[-1] = 1e-12
    beta = solve_weighted_jet(Patch.from_local(pts), 2, w, weight_floor=0.0).beta
    excluded = solve_weighted_jet(Patch.from_local(pts[:-1]), 2).beta
    np.testing.assert_allclose(beta, excluded, atol=1e-6)


def test_weight_floor_enforced(rng):
    patch = Patch.from_local(np.column_stack([rng.uniform(-1, 1, (10, 2)), np.zeros(10)]))
    w = np.ones(10)
    w[0] = 1e-6
    with pytest.raises(ValueError):
        solve_weighted_jet(patch, 1, w)
    w[0] = 0.0
    with pytest.raises(ValueError):
        solve_weighted_jet(patch, 1, w, weight_floor=0.0)


def test_too_few_points():
    with pytest.raises(SizeError):
        solve_weighted_jet(Patch.from_local(np.zeros((5, 3))), 2)


def test_offsets_shift_and_clamp(rng):
    xy = rng.uniform(-1, 1, (20, 2))
    pts = np.column_stack([xy, np.zeros(20)])
    off = np.zeros((20, 3))
    off[:, 2] = 0.1
    beta = solve_weighted_jet(Patch.from_local(pts), 1, offsets=off).beta
    np.testing.assert_allclose(beta, [0.1, 0, 0], atol=1e-12)
    off[:, 2] = 3.0  # clamped to 0.25
    beta = solve_weighted_jet(Patch.from_local(pts), 1, offsets=off).beta
    np.testing.assert_allclose(beta, [0.25, 0, 0], atol=1e-12)


def test_ridge_fallback_flags_result():
    # all points on the line y = 0: the y columns of M vanish
    x = np.linspace(-1, 1, 12)
    pts = np.column_stack([x, np.zeros(12), 0.2 * x])
    coeffs = solve_weighted_jet(Patch.from_local(pts), 1)
    assert coeffs.regularized
    assert coeffs.beta[1] == pytest.approx(0.2, abs=1e-6)


def test_oracle_equivalence_sample(rng):
    for n in (1, 2, 3):
        pts = rng.uniform(-1, 1, (50, 3))
        w = rng.uniform(0.05, 1.0, 50)
        beta = solve_weighted_jet(Patch.from_local(pts), n, w).beta
        ref = weighted_descent_minimizer(pts[:, :2], pts[:, 2], w, n)
        assert np.linalg.norm(beta - ref) <= 1e-6 * np.linalg.norm(ref)


@pytest.mark.parametrize("scale", [1e-3, 0.5, 7.0, 1e4])
def test_weight_scaling_invariance(rng, scale):
    pts = rng.uniform(-1, 1, (50, 3))
    w = rng.uniform(0.1, 1.0, 50)
    base = solve_weighted_jet(Patch.from_local(pts), 3, w).beta
    scaled = solve_weighted_jet(Patch.from_local(pts), 3, w * scale).beta
    np.testing.assert_allclose(scaled, base, atol=1e-9)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_floor_weight_close_to_exclusion(rng, n):
    xy = rng.uniform(-1, 1, (50, 2))
    pts = np.column_stack([xy, 0.2 * xy[:, 0] ** 2 - 0.1 * xy[:, 1] + rng.normal(0, 0.01, 50)])
    pts[-1] = [0.3, -0.4, 10.0]  # 10x the unit patch radius
    w = np.ones(50)
    w[-1] = 1e-4
    beta = solve_weighted_jet(Patch.from_local(pts), n, w).beta
    excluded = solve_weighted_jet(Patch.from_local(pts[:-1]), n).beta
    assert np.linalg.norm(beta - excluded) <= 1e-3 * max(np.linalg.norm(excluded), 1.0)


# ------------------------------------------------------------ jet normals


def test_jet_normal_examples(rng):
    frame = LocalFrame.identity()
    np.testing.assert_allclose(jet_normal(np.zeros(6), frame), [0, 0, 1])
    np.testing.assert_allclose(jet_normal(np.array([0, 0.5, 0]), frame), [-0.4472, 0, 0.8944], atol=1e-4)
    rot = random_rotation(rng)
    beta = rng.normal(size=6)
    rotated = jet_normal(beta, LocalFrame(rot, np.zeros(3), 2.0))
    np.testing.assert_allclose(rotated, rot.T @ jet_normal(beta, frame), atol=1e-12)


def test_neighbor_normals_examples(rng):
    pts = rng.uniform(-1, 1, (12, 3))
    pts[0] = 0
    rot = random_rotation(rng)
    patch = Patch.from_local(pts, LocalFrame(rot, np.zeros(3), 1.0))
    flat = neighbor_normals(np.zeros(6), patch, 2)
    np.testing.assert_allclose(flat, np.tile(rot.T @ [0, 0, 1], (12, 1)), atol=1e-12)
    beta = rng.normal(size=10)
    np.testing.assert_allclose(neighbor_normals(beta, patch, 3)[0], jet_normal(beta, patch.frame), atol=1e-12)


def test_neighbor_normals_paraboloid():
    gx, gy = np.meshgrid(np.linspace(-1, 1, 6), np.linspace(-1, 1, 10))
    xy = np.column_stack([gx.ravel(), gy.ravel()])
    z = 0.1 * xy[:, 0] ** 2 + 0.2 * xy[:, 1] ** 2
    pts = np.column_stack([xy, z])
    coeffs = solve_weighted_jet(Patch.from_local(pts), 2)
    probe = Patch.from_local(np.array([[1.0, 0.0, 0.1]]))
    n = neighbor_normals(coeffs, probe)[0]
    expected = np.array([-0.2, 0, 1]) / np.linalg.norm([-0.2, 0, 1])
    np.testing.assert_allclose(n, expected, atol=1e-6)


def test_classical_jet_plane_and_composition(rng):
    normal = np.array([1.0, -2.0, 0.5])
    normal /= np.linalg.norm(normal)
    pts = _plane_points(rng, 200, normal)
    patch = extract_patch(PointCloud(pts), 3, 60)
    n = classical_jet_normal(patch, 3)
    assert abs(n @ normal) == pytest.approx(1.0, abs=1e-12)
    composed = jet_normal(solve_weighted_jet(patch, 3, np.ones(60), np.zeros((60, 3))), patch.frame)
    assert np.array_equal(n, composed)


def test_classical_jet_sphere_cap(rng):
    v = rng.normal(size=(3000, 3))
    pts = v / np.linalg.norm(v, axis=1, keepdims=True)
    query = int(np.argmax(pts[:, 2]))
    patch = extract_patch(PointCloud(pts), query, 60)
    n = classical_jet_normal(patch, 2)
    assert _angle_deg(n, pts[query]) < 0.5


def test_rotation_equivariance_of_baselines(rng):
    pts = rng.normal(size=(300, 3)) * [1.0, 0.8, 0.1]
    pts[:, 2] += 0.3 * pts[:, 0] ** 2
    for _ in range(5):
        rot = random_rotation(rng)
        a = extract_patch(PointCloud(pts), 7, 40)
        b = extract_patch(PointCloud(pts @ rot.T), 7, 40)
        for method in (pca_normal, lambda p: classical_jet_normal(p, 2)):
            na, nb = method(a), method(b)
            assert abs(nb @ (rot @ na)) == pytest.approx(1.0, abs=1e-6)
