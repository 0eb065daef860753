"""Sphere-based gripper/point-cloud collision cost and cost-guided mean shifting.

Gripper frame: ``x`` is the closing axis, ``z`` the approach direction and the
origin sits midway between the fingers.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import euler_jacobians, euler_to_matrix, matrix_to_euler, near_gimbal_lock, transform_points

DEFAULT_CLOUD_RADIUS = 0.004
FD_STEP = 1e-6


class GimbalFallbackWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SphereSet:
    centers: np.ndarray
    radii: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float).reshape(-1, 3)
        r = np.broadcast_to(np.asarray(self.radii, dtype=float), (len(c),)).copy()
        if np.any(r <= 0) or not np.all(np.isfinite(c)):
            raise ValueError("SphereSet needs positive radii and finite centers")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "radii", r)

    def __len__(self):
        return len(self.radii)


@dataclass(frozen=True)
class GripperModel:
    names: tuple
    centers: np.ndarray
    radii: np.ndarray
    opening: float = 0.08

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float).reshape(-1, 3)
        if len(c) < 6:
            raise ValueError("gripper model needs at least 6 spheres")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "radii", np.asarray(self.radii, dtype=float).reshape(-1))

    @classmethod
    def parallel_jaw(cls, opening=0.08, finger_radius=0.012, finger_length=0.05, palm_radius=0.02):
        """Palm bar of two spheres plus three spheres along each finger."""
        fx = opening / 2 + finger_radius
        zs = np.linspace(-finger_length / 2, finger_length / 2, 3)
        palm_z = zs[0] - finger_radius - palm_radius
        names, centers, radii = [], [], []
        for side, sx in (("left", -fx), ("right", fx)):
            for j, z in enumerate(zs):
                names.append(f"{side}_finger_{j}")
                centers.append((sx, 0.0, z))
                radii.append(finger_radius)
        for side, sx in (("left", -0.03), ("right", 0.03)):
            names.append(f"palm_{side}")
            centers.append((sx, 0.0, palm_z))
            radii.append(palm_radius)
        return cls(tuple(names), np.array(centers), np.array(radii), opening)

    def to_text(self):
        lines = [f"# opening {float(self.opening)!r}", "# name x y z radius"]
        for n, c, r in zip(self.names, self.centers, self.radii):
            vals = " ".join(repr(float(v)) for v in (*c, r))
            lines.append(f"{n} {vals}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        names, centers, radii = [], [], []
        opening = 0.08
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if line.startswith("# opening"):
                opening = float(line.split()[2])
                continue
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ValueError(f"gripper file line {lineno}: expected 'name x y z radius'")
            names.append(parts[0])
            centers.append([float(x) for x in parts[1:4]])
            radii.append(float(parts[4]))
        return cls(tuple(names), np.array(centers), np.array(radii), opening)

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text())


def gripper_spheres(t, R, model):
    centers = transform_points(np.asarray(t, dtype=float), np.asarray(R, dtype=float), model.centers)
    if centers.ndim == 2:
        return SphereSet(centers, model.radii)
    return centers


def cloud_spheres(points, r=DEFAULT_CLOUD_RADIUS):
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("cloud_spheres: empty point cloud")
    return SphereSet(points, np.full(len(points), float(r)))


def _pair_terms(x, model, obj, margin):
    """Penetration depths (..., m, j) and separation vectors for gripper centers x (..., m, 3)."""
    d = x[..., :, None, :] - obj.centers
    dist = np.linalg.norm(d, axis=-1)
    depth = -dist + model.radii[:, None] + obj.radii + margin
    return depth, d, dist


def collision_cost(t, R, model, obj, margin=0.0):
    """Sum over gripper/object sphere pairs of ReLU(r_m + r_j + margin - distance)."""
    x = transform_points(np.asarray(t, dtype=float), np.asarray(R, dtype=float), model.centers)
    depth, _, _ = _pair_terms(x, model, obj, margin)
    return np.maximum(depth, 0.0).sum(axis=(-1, -2))


def _cost_from_joints(q, model, obj, margin):
    q = np.asarray(q, dtype=float)
    return collision_cost(q[..., :3], euler_to_matrix(q[..., 3:]), model, obj, margin)


def collision_cost_grad(q, model, obj, margin=0.0):
    """Descent direction -dC/dq for joints q = (p, euler XYZ); ReLU subgradient 0 at the kink."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    R = euler_to_matrix(q[:, 3:])
    x = transform_points(q[:, :3], R, model.centers)
    depth, d, dist = _pair_terms(x, model, obj, margin)
    active = depth > 0
    safe = np.where(dist > 0, dist, 1.0)
    dC_dx = -np.einsum("nmj,nmjk->nmk", active / safe, d)
    grad = np.empty_like(q)
    grad[:, :3] = dC_dx.sum(1)
    dR = euler_jacobians(q[:, 3:])  # (n, 3, 3, 3)
    grad[:, 3:] = np.einsum("nmk,nakl,ml->na", dC_dx, dR, model.centers)

    lock = near_gimbal_lock(R)
    if np.any(lock):
        warnings.warn("collision gradient near gimbal lock; using finite differences", GimbalFallbackWarning, stacklevel=2)
        for i in np.flatnonzero(lock):
            grad[i] = _fd_grad(q[i], model, obj, margin)
    return -grad


def _fd_grad(q, model, obj, margin, h=FD_STEP):
    g = np.empty(6)
    for a in range(6):
        dq = np.zeros(6)
        dq[a] = h
        g[a] = (_cost_from_joints(q + dq, model, obj, margin) - _cost_from_joints(q - dq, model, obj, margin)) / (2 * h)
    return g


@dataclass
class GuidanceConfig:
    lam: float = 1e-7
    delta_p: float = 0.03
    delta_r: float = math.radians(5.0)
    K: int = 3
    M: int = 2
    margin: float = 0.0
    cloud_radius: float = DEFAULT_CLOUD_RADIUS
    sigma_floor: float = 1e-4
    enabled: bool = False
    gripper_file: str = ""

    def __post_init__(self):
        if self.delta_p <= 0 or self.delta_r <= 0:
            raise ValueError("delta_p and delta_r must be positive")
        if self.K < 0 or self.M < 0:
            raise ValueError("K and M must be >= 0")
        if self.margin < 0 or self.cloud_radius <= 0 or self.lam < 0:
            raise ValueError("margin >= 0, cloud_radius > 0 and lam >= 0 required")


@dataclass
class GuidanceTrace:
    """Per-iteration step norms, kept for in-loop clipping audits."""

    dp: list = field(default_factory=list)
    de: list = field(default_factory=list)


def apply_guidance(t, R, sigma, config, model, obj, trace=None):
    """Shift posterior means (world frame) M times along the clipped, noise-scaled cost descent."""
    t = np.atleast_2d(np.asarray(t, dtype=float))
    R = np.asarray(R, dtype=float).reshape(-1, 3, 3)
    if config.M == 0:
        return t, R
    step_size = config.lam / max(float(sigma), config.sigma_floor)
    q = np.concatenate([t, matrix_to_euler(R, strict=False)], axis=1)
    moved = np.zeros(len(q), dtype=bool)
    for _ in range(config.M):
        g = collision_cost_grad(q, model, obj, config.margin)
        step = step_size * g
        dp = np.linalg.norm(step[:, :3], axis=1)
        de = np.linalg.norm(step[:, 3:], axis=1)
        with np.errstate(divide="ignore"):
            scale = np.minimum(1.0, np.minimum(config.delta_p / dp, config.delta_r / de))
        step *= scale[:, None]
        dp_c = np.linalg.norm(step[:, :3], axis=1)
        de_c = np.linalg.norm(step[:, 3:], axis=1)
        assert np.all(dp_c <= config.delta_p * (1 + 1e-9)), "translation clip violated"
        assert np.all(de_c <= config.delta_r * (1 + 1e-9)), "rotation clip violated"
        if trace is not None:
            trace.dp.append(dp_c)
            trace.de.append(de_c)
        q = q + step
        moved |= np.any(step != 0, axis=1)
    # untouched poses keep their exact rotation (no Euler round-trip noise)
    R_out = np.where(moved[:, None, None], euler_to_matrix(q[:, 3:]), R)
    t_out = np.where(moved[:, None], q[:, :3], t)
    return t_out, R_out


def make_guide(center, scale, config, model, obj, trace=None):
    """Wrap :func:`apply_guidance` for samplers that work in normalized translation units."""
    center = np.asarray(center, dtype=float)

    def guide(t_norm, R, sigma):
        t_w, R_new = apply_guidance(t_norm * scale + center, R, sigma, config, model, obj, trace)
        return (t_w - center) / scale, R_new

    return guide
