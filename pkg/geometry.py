# geometry.py
"""Rotations, pinhole projection and similarity alignment used by every other module.

World frame is right-handed and y-up. A point's depth is its z coordinate plus
the camera's subject depth.
"""
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from errors import AlignmentError, InvalidArgumentError, ProjectionDomainError

TWO_PI = 2.0 * np.pi
SMALL_ANGLE = 1e-8


class Camera(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    focal_length: float = Field(gt=0)
    principal_point: tuple[float, float] = (512.0, 512.0)
    subject_depth: float = Field(gt=0)


@dataclass(frozen=True)
class SimilarityTransform:
    rotation: np.ndarray
    scale: float
    translation: np.ndarray

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return self.scale * points @ self.rotation.T + self.translation


# --- rotations ---
def skew(v):
    """Cross-product matrix [v]x for one vector or a stack of them."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def canonicalize(aa):
    """Wrap each axis-angle magnitude into [0, 2*pi)."""
    aa = np.array(aa, dtype=float)
    norm = np.linalg.norm(aa, axis=-1, keepdims=True)
    wrapped = np.mod(norm, TWO_PI)
    ratio = np.divide(wrapped, norm, out=np.ones_like(norm), where=norm > 0)
    return aa * ratio


def rodrigues_batch(aa):
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3)."""
    aa = np.asarray(aa, dtype=float)
    theta = np.linalg.norm(aa, axis=-1)[..., None, None]
    K = skew(aa)
    K2 = K @ K
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * K + b * K2


def rodrigues(aa):
    aa = np.asarray(aa, dtype=float)
    if aa.shape != (3,):
        raise InvalidArgumentError(f"axis-angle must have 3 components, got shape {aa.shape}")
    if not np.all(np.isfinite(aa)):
        raise InvalidArgumentError(f"axis-angle has non-finite components: {aa}")
    return rodrigues_batch(aa)


def rodrigues_jacobian_batch(aa, R=None):
    """dR/dv_k for each axis-angle component, shape (..., 3, 3, 3) with k first.

    Closed form: dR/dv_k = (v_k [v]x + [v x (I - R) e_k]x) / |v|^2 * R,
    with the second-order expansion near the identity.
    """
    aa = np.asarray(aa, dtype=float)
    if R is None:
        R = rodrigues_batch(aa)
    sq = np.sum(aa * aa, axis=-1)
    eye = np.eye(3)
    E = skew(eye)  # [e_k]x stacked on the first axis
    Vx = skew(aa)

    # general case
    I_minus_R = eye - R
    cols = np.swapaxes(I_minus_R, -1, -2)  # row k is (I - R) e_k
    cross = np.cross(aa[..., None, :], cols)
    num = aa[..., :, None, None] * Vx[..., None, :, :] + skew(cross)
    safe_sq = np.where(sq > SMALL_ANGLE**2, sq, 1.0)[..., None, None, None]
    general = (num / safe_sq) @ R[..., None, :, :]

    # near identity
    near = E + 0.5 * (E @ Vx[..., None, :, :] + Vx[..., None, :, :] @ E)

    small = (sq < 1e-12)[..., None, None, None]
    return np.where(small, near, general)


# --- camera ---
def project(points3d, cam: Camera):
    """Pinhole projection of world points to pixels."""
    pts = np.asarray(points3d, dtype=float).reshape(-1, 3)
    z = pts[:, 2] + cam.subject_depth
    if np.any(~(z > 0)):
        raise ProjectionDomainError("point at or behind the camera plane")
    cx, cy = cam.principal_point
    u = cam.focal_length * pts[:, 0] / z + cx
    v = cam.focal_length * pts[:, 1] / z + cy
    return np.stack([u, v], axis=-1)


def project_batch(points, focal, principal, depth):
    """Project (B, K, 3) points with per-sample cameras; returns pixels and depths."""
    z = points[..., 2] + depth[:, None]
    if np.any(~(z > 0)):
        raise ProjectionDomainError("point at or behind the camera plane")
    f = focal[:, None]
    uv = np.empty(points.shape[:-1] + (2,))
    uv[..., 0] = f * points[..., 0] / z + principal[:, None, 0]
    uv[..., 1] = f * points[..., 1] / z + principal[:, None, 1]
    return uv, z


def project_batch_backward(points, z, focal, g_uv):
    """Pull a pixel-space gradient back onto the 3D points."""
    f = focal[:, None]
    g = np.empty_like(points)
    g[..., 0] = g_uv[..., 0] * f / z
    g[..., 1] = g_uv[..., 1] * f / z
    g[..., 2] = -(g_uv[..., 0] * f * points[..., 0] + g_uv[..., 1] * f * points[..., 1]) / z**2
    return g


# --- alignment ---
def umeyama_align(source, target, with_scale=True):
    """Least-squares similarity (or rigid) transform mapping source onto target."""
    src = np.asarray(source, dtype=float)
    dst = np.asarray(target, dtype=float)
    if src.ndim != 2 or src.shape[1] != 3 or src.shape != dst.shape:
        raise AlignmentError(f"expected matching N x 3 point sets, got {src.shape} and {dst.shape}")
    if src.shape[0] < 3:
        raise AlignmentError(f"need at least 3 points, got {src.shape[0]}")

    mu_s = src.mean(axis=0)
    mu_t = dst.mean(axis=0)
    src_c = src - mu_s
    dst_c = dst - mu_t

    sv = np.linalg.svd(src_c, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-12 * sv[0]:
        raise AlignmentError("degenerate source: centered points have rank < 2")

    n = src.shape[0]
    cov = dst_c.T @ src_c / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = (U * S) @ Vt

    if with_scale:
        var_s = np.sum(src_c**2) / n
        scale = float(np.sum(D * S) / var_s)
    else:
        scale = 1.0
    t = mu_t - scale * R @ mu_s
    return SimilarityTransform(rotation=R, scale=scale, translation=t)


def align_points(source, target, with_scale=True):
    return umeyama_align(source, target, with_scale).apply(source)
