"""Rotation and rigid-pose primitives on SO(3) and SO(3) x R^3.

Rotations are plain ``(..., 3, 3)`` float arrays and axis-angle vectors are
``(..., 3)`` arrays; every function broadcasts over leading dimensions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHO_TOL = 1e-6
GIMBAL_MARGIN = 1e-3
_NEAR_PI = np.pi - 1e-3


class GeometryError(ValueError):
    """Invalid geometric input (non-finite values, non-rotations)."""


class DegenerateParametrizationError(GeometryError):
    """Euler angles requested too close to gimbal lock."""


def hat(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m):
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def exp_so3(v):
    """Rodrigues' formula: axis-angle vector(s) to rotation matrix."""
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise GeometryError("exp_so3: non-finite axis-angle vector")
    theta = np.linalg.norm(v, axis=-1)[..., None, None]
    K = hat(v)
    small = theta < 1e-6
    t2 = theta * theta
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a * K + b * (K @ K)


def check_rotation(R, tol=ORTHO_TOL, name="R"):
    R = np.asarray(R, dtype=float)
    if R.shape[-2:] != (3, 3):
        raise GeometryError(f"{name}: expected (..., 3, 3) array, got {R.shape}")
    if not np.all(np.isfinite(R)):
        raise GeometryError(f"{name}: non-finite entries")
    err = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max() if R.size else 0.0
    if err > tol:
        raise GeometryError(f"{name}: not orthonormal (max |R^T R - I| = {err:.3g})")
    if R.size and np.any(np.linalg.det(R) <= 0):
        raise GeometryError(f"{name}: determinant is not +1")
    return R


def log_so3(R, check=True):
    """Rotation matrix to canonical axis-angle vector with norm in [0, pi]."""
    R = check_rotation(R) if check else np.asarray(R, dtype=float)
    skew = vee(R - np.swapaxes(R, -1, -2))  # 2 sin(theta) * axis
    tr = np.trace(R, axis1=-2, axis2=-1)
    sin_t = 0.5 * np.linalg.norm(skew, axis=-1)
    cos_t = np.clip(0.5 * (tr - 1.0), -1.0, 1.0)
    theta = np.arctan2(sin_t, cos_t)

    # generic branch: theta / (2 sin theta) * skew
    safe_sin = np.where(sin_t < 1e-12, 1.0, sin_t)
    factor = np.where(theta < 1e-6, 0.5 + theta**2 / 12.0, theta / (2.0 * safe_sin))
    v = factor[..., None] * skew

    near_pi = theta > _NEAR_PI
    if np.any(near_pi):
        # sin(theta) degenerates: recover the axis from the symmetric part
        Rn = R[near_pi]
        tn = theta[near_pi]
        cn = np.cos(tn)
        S = 0.5 * (Rn + np.swapaxes(Rn, -1, -2))
        aat = (S - cn[:, None, None] * np.eye(3)) / (1.0 - cn)[:, None, None]
        diag = np.diagonal(aat, axis1=-2, axis2=-1)
        col = np.argmax(diag, axis=-1)
        idx = np.arange(len(Rn))
        axis = aat[idx, :, col] / np.sqrt(np.maximum(diag[idx, col], 1e-300))[:, None]
        sgn = np.sign(np.einsum("ni,ni->n", axis, skew[near_pi]))
        sgn = np.where(sgn == 0, 1.0, sgn)
        v[near_pi] = (sgn * tn)[:, None] * axis
    return v


def rotation_angle(R):
    return np.linalg.norm(log_so3(R, check=False), axis=-1)


def geodesic_interp(gamma, R):
    """lambda(gamma, R) = Exp(gamma * Log(R)): fraction gamma of the geodesic from I to R."""
    return exp_so3(np.asarray(gamma, dtype=float)[..., None] * log_so3(R))


def geodesic_distance(R1, R2):
    R1 = np.asarray(R1, dtype=float)
    R2 = np.asarray(R2, dtype=float)
    rel = np.swapaxes(R1, -1, -2) @ R2
    return np.linalg.norm(log_so3(rel, check=False), axis=-1)


def project_to_so3(m):
    """Nearest rotation (Frobenius) via SVD; leaves valid rotations untouched."""
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise GeometryError("project_to_so3: non-finite matrix")
    U, _, Vt = np.linalg.svd(m)
    out = U @ Vt
    if np.any(np.linalg.det(out) <= 0):
        raise GeometryError("project_to_so3: matrix is closer to a reflection than to SO(3)")
    return out


def random_rotation(rng, size=None):
    """Haar-uniform rotations via normalized quaternions."""
    shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
    q = rng.standard_normal(shape + (4,))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    return quat_to_matrix(q)


def quat_to_matrix(q):
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


# Euler angles: intrinsic XYZ, R = Rx(a) @ Ry(b) @ Rz(c)


def euler_to_matrix(e):
    e = np.asarray(e, dtype=float)
    a, b, c = e[..., 0], e[..., 1], e[..., 2]
    ca, sa, cb, sb, cc, sc = np.cos(a), np.sin(a), np.cos(b), np.sin(b), np.cos(c), np.sin(c)
    return np.stack(
        [
            np.stack([cb * cc, -cb * sc, sb], -1),
            np.stack([ca * sc + sa * sb * cc, ca * cc - sa * sb * sc, -sa * cb], -1),
            np.stack([sa * sc - ca * sb * cc, sa * cc + ca * sb * sc, ca * cb], -1),
        ],
        -2,
    )


def euler_jacobians(e):
    """Partial derivatives dR/da, dR/db, dR/dc, stacked on a new axis -3."""
    e = np.asarray(e, dtype=float)
    a, b, c = e[..., 0], e[..., 1], e[..., 2]
    ca, sa, cb, sb, cc, sc = np.cos(a), np.sin(a), np.cos(b), np.sin(b), np.cos(c), np.sin(c)
    z = np.zeros_like(a)
    dA = np.stack(
        [
            np.stack([z, z, z], -1),
            np.stack([-sa * sc + ca * sb * cc, -sa * cc - ca * sb * sc, -ca * cb], -1),
            np.stack([ca * sc + sa * sb * cc, ca * cc - sa * sb * sc, -sa * cb], -1),
        ],
        -2,
    )
    dB = np.stack(
        [
            np.stack([-sb * cc, sb * sc, cb], -1),
            np.stack([sa * cb * cc, -sa * cb * sc, sa * sb], -1),
            np.stack([-ca * cb * cc, ca * cb * sc, -ca * sb], -1),
        ],
        -2,
    )
    dC = np.stack(
        [
            np.stack([-cb * sc, -cb * cc, z], -1),
            np.stack([ca * cc - sa * sb * sc, -ca * sc - sa * sb * cc, z], -1),
            np.stack([sa * cc + ca * sb * sc, -sa * sc + ca * sb * cc, z], -1),
        ],
        -2,
    )
    return np.stack([dA, dB, dC], axis=-3)


def matrix_to_euler(R, strict=True):
    """Inverse of :func:`euler_to_matrix`; ``strict`` rejects poses near gimbal lock."""
    R = np.asarray(R, dtype=float)
    sb = np.clip(R[..., 0, 2], -1.0, 1.0)
    b = np.arcsin(sb)
    if strict and np.any(np.abs(b) >= np.pi / 2 - GIMBAL_MARGIN):
        raise DegenerateParametrizationError(
            "Euler XYZ parametrization is degenerate (|pitch| >= pi/2 - 1e-3)"
        )
    a = np.arctan2(-R[..., 1, 2], R[..., 2, 2])
    c = np.arctan2(-R[..., 0, 1], R[..., 0, 0])
    return np.stack([a, b, c], axis=-1)


def near_gimbal_lock(R):
    return np.abs(np.asarray(R)[..., 0, 2]) >= np.sin(np.pi / 2 - GIMBAL_MARGIN)


@dataclass(frozen=True)
class GraspPose:
    """A rigid grasp pose: translation ``t`` (meters or normalized units) and rotation ``R``."""

    t: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise GeometryError("GraspPose: non-finite translation")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "R", check_rotation(np.asarray(self.R, dtype=float).reshape(3, 3)))

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), np.eye(3))

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T


@dataclass(frozen=True)
class GripperJointConfig:
    """Three prismatic (``p``) and three revolute (``e``, Euler XYZ) joint values."""

    p: np.ndarray
    e: np.ndarray


def pose_from_joints(q):
    if isinstance(q, GripperJointConfig):
        return GraspPose(q.p, euler_to_matrix(q.e))
    q = np.asarray(q, dtype=float)
    return q[..., :3].copy(), euler_to_matrix(q[..., 3:])


def joints_from_pose(G, strict=True):
    """GraspPose -> GripperJointConfig, or (t, R) arrays -> ``(..., 6)`` joint array."""
    if isinstance(G, GraspPose):
        return GripperJointConfig(G.t.copy(), matrix_to_euler(G.R, strict=strict))
    t, R = G
    return np.concatenate([np.asarray(t, dtype=float), matrix_to_euler(R, strict=strict)], axis=-1)


def transform_points(t, R, x):
    """Apply poses (t, R) with shapes (..., 3), (..., 3, 3) to local points x of shape (k, 3)."""
    return np.einsum("...ij,kj->...ki", R, x) + np.asarray(t)[..., None, :]
