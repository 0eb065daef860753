"""Per-scene sampling + scoring shared by the CLI studies and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .diffusion import SamplerConfig, sample
from .guidance import GuidanceConfig, GripperModel, cloud_spheres, make_guide
from .metrics import collision_rate, emd, grasp_spread, success_rate
from .scene import denormalize


@dataclass
class SceneResult:
    success_rate: float
    emd: float
    collision_rate: float
    spread: float
    wall_time_ms: float
    t: np.ndarray  # world frame
    R: np.ndarray


def sample_scene(denoiser, scene, schedule, sampler: SamplerConfig, n, seed, guidance: GuidanceConfig | None = None,
                 gripper=None, trace=None):
    """Draw ``n`` grasps for one scene; returns normalized translations, rotations and wall time (ms)."""
    gripper = gripper or GripperModel.parallel_jaw()
    guide = None
    refine = 0
    if guidance is not None and guidance.enabled and guidance.M > 0:
        spheres = cloud_spheres(scene.world_cloud(), guidance.cloud_radius)
        guide = make_guide(scene.center, scene.scale, guidance, gripper, spheres, trace)
        refine = guidance.K
    eps_fn = denoiser.eps_fn(scene.cloud)
    start = time.perf_counter()
    t, R = sample(eps_fn, n, sampler, schedule, seed, guide, refine)
    return t, R, 1e3 * (time.perf_counter() - start)


def score_samples(scene, t_norm, R, gt, w=0.1, gripper=None, cloud_radius=0.004, seed=0):
    """Oracle success, EMD to ``gt`` (normalized frame), collision rate against the scene cloud and spread."""
    gripper = gripper or GripperModel.parallel_jaw()
    t_w = denormalize(t_norm, scene.center, scene.scale)
    spheres = cloud_spheres(scene.world_cloud(), cloud_radius)
    return (
        success_rate(t_w, R, scene.object, gripper.opening, gripper),
        emd(t_norm, R, gt[0], gt[1], w, seed),
        collision_rate(t_w, R, spheres, gripper),
        grasp_spread(t_norm, R, w),
    )


def evaluate_scene(denoiser, scene, schedule, sampler, n, seed, gt, w=0.1, guidance=None, gripper=None,
                   trace=None):
    gripper = gripper or GripperModel.parallel_jaw()
    t, R, ms = sample_scene(denoiser, scene, schedule, sampler, n, seed, guidance, gripper, trace)
    radius = guidance.cloud_radius if guidance is not None else 0.004
    sr, d, cr, spread = score_samples(scene, t, R, gt, w, gripper, radius, seed)
    return SceneResult(sr, d, cr, spread, ms, denormalize(t, scene.center, scene.scale), R)


def aggregate(results):
    """Mean of each metric over scenes (wall time summed)."""
    return {
        "success_rate": float(np.mean([r.success_rate for r in results])),
        "emd": float(np.mean([r.emd for r in results])),
        "collision_rate": float(np.mean([r.collision_rate for r in results])),
        "spread": float(np.mean([r.spread for r in results])),
        "wall_time_ms": float(np.sum([r.wall_time_ms for r in results])),
    }
