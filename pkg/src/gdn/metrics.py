"""Grasp-set evaluation: pose distance, EMD, collision rate and oracle success rate."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import geodesic_distance
from .guidance import collision_cost
from .scene import LABEL_CLEARANCE, success_oracle

EVAL_COLUMNS = ("scene_id", "method", "success_rate", "emd", "collision_rate", "wall_time_ms")


@dataclass
class GraspSetDistanceConfig:
    rotation_weight: float = 0.1  # meters per radian (normalized units in practice)

    def __post_init__(self):
        if not self.rotation_weight >= 0:
            raise ValueError("rotation_weight must be >= 0")


def pose_distance(t1, R1, t2, R2, w=0.1):
    t1, t2 = np.asarray(t1, dtype=float), np.asarray(t2, dtype=float)
    return np.linalg.norm(t1 - t2, axis=-1) + w * geodesic_distance(R1, R2)


def pairwise_pose_distance(tA, RA, tB, RB, w=0.1):
    """(len(A), len(B)) matrix of pose distances."""
    tA, tB = np.asarray(tA, dtype=float), np.asarray(tB, dtype=float)
    dt = np.linalg.norm(tA[:, None] - tB[None], axis=-1)
    # relative rotation RA^T RB per pair; atan2(sin, cos) stays exact near 0 where arccos does not
    M = np.einsum("aji,bjk->abik", RA, RB)
    cos = (np.trace(M, axis1=-2, axis2=-1) - 1.0) / 2.0
    skew = np.stack([M[..., 2, 1] - M[..., 1, 2], M[..., 0, 2] - M[..., 2, 0], M[..., 1, 0] - M[..., 0, 1]], -1)
    ang = np.arctan2(0.5 * np.linalg.norm(skew, axis=-1), cos)
    return dt + w * ang


def _check_set(t, name):
    if len(t) == 0:
        raise ValueError(f"emd: {name} is empty")


def emd(tA, RA, tB, RB, w=0.1, seed=0):
    """Mean matched pose distance under the optimal one-to-one assignment.

    The larger set is subsampled uniformly (seeded) down to the smaller size.
    """
    _check_set(tA, "first set")
    _check_set(tB, "second set")
    tA, tB = np.asarray(tA, dtype=float), np.asarray(tB, dtype=float)
    RA, RB = np.asarray(RA, dtype=float), np.asarray(RB, dtype=float)
    n = min(len(tA), len(tB))
    rng = np.random.default_rng(seed)
    if len(tA) > n:
        idx = np.sort(rng.choice(len(tA), n, replace=False))
        tA, RA = tA[idx], RA[idx]
    if len(tB) > n:
        idx = np.sort(rng.choice(len(tB), n, replace=False))
        tB, RB = tB[idx], RB[idx]
    cost = pairwise_pose_distance(tA, RA, tB, RB, w)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def grasp_spread(t, R, w=0.1):
    """Mean pairwise pose distance within one set (0 for a single grasp)."""
    n = len(t)
    if n < 2:
        return 0.0
    d = pairwise_pose_distance(t, R, t, R, w)
    return float(d.sum() / (n * (n - 1)))


def collision_rate(t, R, obj_spheres, gripper, margin=0.0):
    t = np.atleast_2d(np.asarray(t, dtype=float))
    if len(t) == 0:
        raise ValueError("collision_rate: no grasps")
    cost = collision_cost(t, np.asarray(R, dtype=float).reshape(-1, 3, 3), gripper, obj_spheres, margin)
    return float(np.mean(cost > 0))


def success_rate(t, R, obj, gripper_opening=0.08, gripper=None, clearance=LABEL_CLEARANCE):
    """Fraction of world-frame grasps accepted by the analytic oracle."""
    t = np.atleast_2d(np.asarray(t, dtype=float))
    if len(t) == 0:
        raise ValueError("success_rate: no grasps")
    return float(np.mean(success_oracle(obj, t, R, gripper_opening, gripper, clearance)))


@dataclass
class EvalRow:
    scene_id: str
    method: str
    success_rate: float
    emd: float
    collision_rate: float
    wall_time_ms: float

    def as_dict(self):
        return asdict(self)
