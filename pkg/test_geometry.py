# test_geometry.py
import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from errors import AlignmentError, InvalidArgumentError, ProjectionDomainError
from geometry import (Camera, align_points, canonicalize, project, project_batch, rodrigues, rodrigues_batch,
                      rodrigues_jacobian_batch, umeyama_align)


def _random_rotation(rng):
    return Rotation.from_rotvec(rng.normal(size=3)).as_matrix()


def test_rodrigues_zero_is_identity():
    assert np.allclose(rodrigues(np.zeros(3)), np.eye(3))


def test_rodrigues_quarter_turn_about_z():
    R = rodrigues(np.array([0.0, 0.0, np.pi / 2]))
    assert np.allclose(R @ np.array([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)


def test_rodrigues_matches_scipy(rng):
    aa = rng.normal(size=(200, 3)) * 1.5
    aa[:5] *= 1e-10  # near identity
    expected = Rotation.from_rotvec(aa).as_matrix()
    assert np.allclose(rodrigues_batch(aa), expected, atol=1e-10)


def test_rodrigues_is_orthonormal(rng):
    R = rodrigues_batch(rng.normal(size=(50, 3)) * 3.0)
    eye = np.broadcast_to(np.eye(3), R.shape)
    assert np.allclose(R @ np.swapaxes(R, -1, -2), eye, atol=1e-12)
    assert np.allclose(np.linalg.det(R), 1.0)


@pytest.mark.parametrize("bad", [np.zeros(2), np.array([0.0, np.nan, 0.0]), np.array([np.inf, 0.0, 0.0])])
def test_rodrigues_rejects_bad_input(bad):
    with pytest.raises(InvalidArgumentError):
        rodrigues(bad)


def test_canonicalize_wraps_magnitude():
    aa = np.array([0.0, 0.0, 2 * np.pi + 0.25])
    assert np.allclose(canonicalize(aa), [0.0, 0.0, 0.25])
    assert np.allclose(rodrigues(canonicalize(aa)), rodrigues(aa))
    assert np.allclose(canonicalize(np.zeros(3)), 0.0)


@pytest.mark.parametrize("scale", [1e-9, 0.3, 2.0])
def test_rodrigues_jacobian_matches_finite_difference(rng, scale):
    aa = rng.normal(size=(4, 3)) * scale
    J = rodrigues_jacobian_batch(aa)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (rodrigues_batch(aa + e) - rodrigues_batch(aa - e)) / (2 * h)
        assert np.allclose(J[:, k], fd, atol=1e-6)


def test_project_principal_point_and_focal(camera):
    uv = project(np.array([[0.0, 0.0, 0.0], [0.015, 0.0, 0.0]]), camera)
    assert np.allclose(uv[0], [512.0, 512.0])
    # 1.5 cm at 3 m under f = 1000 is 5 px
    assert np.isclose(uv[1, 0] - uv[0, 0], 5.0)


def test_project_behind_camera_raises(camera):
    with pytest.raises(ProjectionDomainError):
        project(np.array([[0.0, 0.0, -3.0]]), camera)
    with pytest.raises(ProjectionDomainError):
        project(np.array([[0.0, 0.0, -4.0]]), camera)


def test_camera_rejects_non_positive_focal():
    with pytest.raises(ValueError):
        Camera(focal_length=0.0, subject_depth=3.0)


def test_umeyama_recovers_similarity(rng):
    src = rng.normal(size=(30, 3))
    R = _random_rotation(rng)
    dst = 1.7 * src @ R.T + np.array([0.3, -1.0, 2.0])
    T = umeyama_align(src, dst)
    assert np.isclose(T.scale, 1.7)
    assert np.allclose(T.rotation, R, atol=1e-10)
    assert np.allclose(align_points(src, dst), dst, atol=1e-10)


def test_umeyama_rigid_keeps_unit_scale(rng):
    src = rng.normal(size=(10, 3))
    T = umeyama_align(src, 2.0 * src, with_scale=False)
    assert T.scale == 1.0
    assert np.isclose(np.linalg.det(T.rotation), 1.0)


def test_umeyama_never_returns_reflection(rng):
    src = rng.normal(size=(12, 3))
    mirrored = src * np.array([1.0, 1.0, -1.0])
    T = umeyama_align(src, mirrored)
    assert np.isclose(np.linalg.det(T.rotation), 1.0)


def test_umeyama_degenerate_inputs():
    with pytest.raises(AlignmentError):
        umeyama_align(np.zeros((2, 3)), np.zeros((2, 3)))
    collinear = np.outer(np.arange(5.0), [1.0, 0.0, 0.0])
    with pytest.raises(AlignmentError):
        umeyama_align(collinear, collinear)
    with pytest.raises(AlignmentError):
        umeyama_align(np.zeros((4, 3)), np.zeros((5, 3)))


def test_rodrigues_half_turn_about_x():
    assert np.allclose(rodrigues(np.array([np.pi, 0.0, 0.0])), np.diag([1.0, -1.0, -1.0]), atol=1e-12)


def test_rotation_preserves_length(rng):
    R = rodrigues(np.array([0.3, -0.2, 0.1]))
    v = rng.normal(size=(100, 3))
    assert np.allclose(np.linalg.norm(v @ R.T, axis=1), np.linalg.norm(v, axis=1), atol=1e-12)


def test_project_optical_axis_and_similar_triangles():
    cam = Camera(focal_length=1000.0, principal_point=(500.0, 500.0), subject_depth=2.0)
    uv = project(np.array([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]]), cam)
    assert np.allclose(uv, [[500.0, 500.0], [550.0, 500.0]])


def test_project_batch_matches_loop(camera, rng):
    pts = rng.normal(size=(12, 3)) * 0.3
    batch = project_batch(pts[None], np.array([camera.focal_length]), np.array([camera.principal_point]),
                          np.array([camera.subject_depth]))[0][0]
    loop = np.stack([project(p[None], camera)[0] for p in pts])
    assert np.allclose(batch, loop)


def test_umeyama_identity(rng):
    src = rng.normal(size=(8, 3))
    T = umeyama_align(src, src)
    assert np.isclose(T.scale, 1.0)
    assert np.allclose(T.rotation, np.eye(3))
    assert np.allclose(T.translation, 0.0, atol=1e-12)


def test_umeyama_rigid_on_scaled_target_leaves_residual(rng):
    src = rng.normal(size=(10, 3))
    aligned = align_points(src, 2.0 * src, with_scale=False)
    assert np.linalg.norm(aligned - 2.0 * src) > 0
