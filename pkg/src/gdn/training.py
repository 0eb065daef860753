"""Noise-regression training on success-labeled grasps."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .diffusion import noise_rotation, noise_translation
from .model import AdamState, adam_step, loss_and_grads_fixed


class NumericError(RuntimeError):
    pass


@dataclass
class TrainState:
    params: dict
    adam: AdamState
    step: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    losses: list = field(default_factory=list)


def positive_pool(scenes):
    """Stacked clouds and, per scene, the success-labeled grasps (failures are not trained on)."""
    clouds = np.stack([s.cloud.astype(float) for s in scenes])
    pos = [s.positives() for s in scenes]
    keep = [i for i, (t, _) in enumerate(pos) if len(t)]
    if not keep:
        raise ValueError("no success-labeled grasps to train on")
    return clouds[keep], [pos[i] for i in keep]


def sample_batch(clouds, pos, schedule, rng, scenes_per_batch=8, grasps_per_scene=16):
    S = min(scenes_per_batch, len(clouds))
    which = rng.choice(len(clouds), S, replace=False)
    ts, Rs = [], []
    for s in which:
        t, R = pos[s]
        idx = rng.integers(len(t), size=grasps_per_scene)
        ts.append(t[idx])
        Rs.append(R[idx])
    t0 = np.concatenate(ts)
    R0 = np.concatenate(Rs)
    B = len(t0)
    k = rng.integers(schedule.N, size=B)
    eps_t = rng.standard_normal((B, 3))
    t_k = noise_translation(t0, k, eps_t, schedule)
    R_k, eps_R = noise_rotation(R0, k, schedule, u=rng.random(B), z=rng.standard_normal((B, 3)))
    scene_idx = np.repeat(np.arange(S), grasps_per_scene)
    return clouds[which], scene_idx, t_k, R_k, k, np.concatenate([eps_t, eps_R], axis=1)


def cosine_lr(lr, lr_final, total_steps):
    """Step-indexed cosine annealing from ``lr`` to ``lr_final`` over ``total_steps``."""
    def f(step):
        frac = min(step / max(total_steps, 1), 1.0)
        return lr_final + 0.5 * (lr - lr_final) * (1.0 + math.cos(math.pi * frac))

    return f


def train(state, config, clouds, pos, schedule, steps, lr, scenes_per_batch=8, grasps_per_scene=16,
          wall_budget_s=0.0, on_step=None):
    """Run ``steps`` Adam updates in place on ``state``; stops early on the wall-clock budget.

    ``lr`` is a float or a callable of the (absolute) step count.
    ``on_step(state, loss)`` is called after every update. A non-finite loss
    raises :class:`NumericError` naming the last finite loss and step.
    """
    start = time.perf_counter()
    for _ in range(steps):
        batch = sample_batch(clouds, pos, schedule, state.rng, scenes_per_batch, grasps_per_scene)
        loss, grads = loss_and_grads_fixed(state.params, config, *batch)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            last = next((x for x in reversed(state.losses) if np.isfinite(x)), None)
            raise NumericError(f"non-finite loss at step {state.step}; last finite loss {last}")
        adam_step(state.params, grads, state.adam, lr(state.step) if callable(lr) else lr)
        state.step += 1
        state.losses.append(loss)
        if on_step is not None:
            on_step(state, loss)
        if wall_budget_s and time.perf_counter() - start > wall_budget_s:
            break
    return state
