"""Forward noising and reverse sampling on SO(3) x R^3.

Index convention follows :mod:`gdn.schedule`: state index ``k`` in ``0..N-1``;
the step from ``k`` to ``k - 1`` uses ``alpha[k]``, ``alpha_bar[k]`` and the
posterior variance ``beta_tilde[k]``. The step out of ``k = 0`` returns the mean.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .geometry import exp_so3, log_so3, project_to_so3
from .igso3 import rotations_from_noise
from .schedule import ddim_indices

REORTHO_EVERY = 10

EpsFn = Callable[[np.ndarray, np.ndarray, int], np.ndarray]
# guide(mean_t, mean_R, sigma) -> (mean_t, mean_R), translations in normalized units
GuideFn = Callable[[np.ndarray, np.ndarray, float], tuple]


@dataclass
class SamplerConfig:
    kind: str = "ddpm"
    steps: int = 10
    temp_alpha: float = 0.75
    rotation_mean_form: str = "lie-eps"
    posterior_variance: str = "beta_tilde"
    clip_denoised: bool = True

    def __post_init__(self):
        if self.kind not in ("ddpm", "ddim"):
            raise ValueError(f"sampler kind must be 'ddpm' or 'ddim', got {self.kind!r}")
        if not 0.0 <= self.temp_alpha <= 1.0:
            raise ValueError("temp_alpha must lie in [0, 1]")
        if self.rotation_mean_form not in ("lie-eps", "r0-reconstruction"):
            raise ValueError(f"unknown rotation_mean_form {self.rotation_mean_form!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def _coef(arr, k):
    return np.asarray(arr)[np.asarray(k)]


def _col(x):
    x = np.asarray(x, dtype=float)
    return x[..., None] if x.ndim else x


def noise_translation(t0, k, eps_noise, schedule):
    ab = _col(_coef(schedule.alpha_bar, k))
    return np.sqrt(ab) * t0 + np.sqrt(1.0 - ab) * eps_noise


def noise_rotation(R0, k, schedule, rng=None, u=None, z=None):
    """Sample R_k = R_noise * lambda(sqrt(abar_k), R0) and the regression target.

    Returns ``(R_k, eps_target)`` with ``eps_target = Log(R_noise) / sqrt(1 - abar_k)``.
    """
    R0 = np.asarray(R0, dtype=float)
    n = R0.shape[0]
    k = np.broadcast_to(np.asarray(k), (n,))
    if u is None:
        u = rng.random(n)
        z = rng.standard_normal((n, 3))
    ab = schedule.alpha_bar[k]
    scale = np.sqrt(1.0 - ab)
    R_noise = rotations_from_noise(scale, u, z)
    R_k = R_noise @ exp_so3(np.sqrt(ab)[:, None] * log_so3(R0, check=False))
    eps_target = log_so3(R_noise, check=False) / scale[:, None]
    return R_k, eps_target


def posterior_mean_translation(t_k, k, eps_pred, schedule):
    a = _col(_coef(schedule.alpha, k))
    ab = _col(_coef(schedule.alpha_bar, k))
    return (t_k - (1.0 - a) / np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(a)


def posterior_mean_translation_clipped(t_k, k, eps_pred, schedule):
    """Same mean written as c0 * t0_hat + ct * t_k with t0_hat clipped to the normalized box.

    Identical to :func:`posterior_mean_translation` whenever the clip is inactive;
    otherwise it stops the 1/sqrt(alpha) factors from compounding over the chain.
    """
    a = _col(_coef(schedule.alpha, k))
    ab = _col(_coef(schedule.alpha_bar, k))
    ab_prev = _col(_coef(schedule.alpha_bar_prev, k))
    c0 = np.sqrt(ab_prev) * (1.0 - a) / (1.0 - ab)
    ct = np.sqrt(a) * (1.0 - ab_prev) / (1.0 - ab)
    return c0 * predict_t0(t_k, k, eps_pred, schedule, clip=True) + ct * t_k


def predict_t0(t_k, k, eps_pred, schedule, clip=False):
    ab = _col(_coef(schedule.alpha_bar, k))
    t0 = (t_k - np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(ab)
    return np.clip(t0, -1.0, 1.0) if clip else t0


def predict_r0(R_k, k, eps_pred, schedule):
    """Invert the forward map: R0 = lambda(1/sqrt(abar), Exp(-sqrt(1-abar) eps) R_k).

    The extrapolated tangent vector is clamped to norm pi so that large
    extrapolation factors at high noise cannot wrap around the group.
    """
    ab = _col(_coef(schedule.alpha_bar, k))
    unnoised = exp_so3(-np.sqrt(1.0 - ab) * eps_pred) @ R_k
    w = log_so3(unnoised, check=False) / np.sqrt(ab)
    norm = np.linalg.norm(w, axis=-1, keepdims=True)
    w = np.where(norm > np.pi, w * (np.pi / np.maximum(norm, 1e-300)), w)
    return exp_so3(w)


def posterior_mean_rotation(R_k, k, eps_pred, schedule, form="lie-eps"):
    a = _col(_coef(schedule.alpha, k))
    ab = _col(_coef(schedule.alpha_bar, k))
    v_k = log_so3(R_k, check=False)
    if form == "lie-eps":
        return exp_so3((v_k - (1.0 - a) / np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(a))
    if form == "r0-reconstruction":
        # Euclidean DDPM posterior mean c0 * x0 + ct * x_k applied to the Lie-algebra
        # coordinates of the reconstructed R0 and of R_k, then mapped back with Exp
        ab_prev = _col(_coef(schedule.alpha_bar_prev, k))
        beta = 1.0 - a
        c0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
        ct = np.sqrt(a) * (1.0 - ab_prev) / (1.0 - ab)
        r0 = predict_r0(R_k, k, eps_pred, schedule)
        return exp_so3(c0 * log_so3(r0, check=False) + ct * v_k)
    raise ValueError(f"unknown rotation mean form {form!r}")


def guidance_sigma(schedule, k, config):
    return config.temp_alpha * schedule.posterior_variance(config.posterior_variance)[k]


def ddpm_step(t, R, k, eps_fn, config, schedule, noise=None, guide=None):
    """One reverse step from index k; ``noise = (z_t, u, z_R)`` supplies base draws."""
    eps = eps_fn(t, R, k)
    mean_t = posterior_mean_translation_clipped if config.clip_denoised else posterior_mean_translation
    mt = mean_t(t, k, eps[:, :3], schedule)
    mR = posterior_mean_rotation(R, k, eps[:, 3:], schedule, config.rotation_mean_form)
    sigma = guidance_sigma(schedule, k, config)
    if guide is not None:
        mt, mR = guide(mt, mR, sigma)
    if k == 0 or config.temp_alpha == 0.0 or noise is None:
        return mt, mR
    z_t, u, z_R = noise
    std = np.sqrt(sigma)
    return mt + std * z_t, mR @ rotations_from_noise(std, u, z_R)


def chain_noise(seed, n_chains, n_draws):
    """Per-chain base noise; chain c always uses the stream seeded by (seed..., c)."""
    seed = list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]
    z_t = np.empty((n_chains, n_draws, 3))
    u = np.empty((n_chains, n_draws))
    z_R = np.empty((n_chains, n_draws, 3))
    for c in range(n_chains):
        rng = np.random.default_rng(seed + [c])
        z_t[c] = rng.standard_normal((n_draws, 3))
        u[c] = rng.random(n_draws)
        z_R[c] = rng.standard_normal((n_draws, 3))
    return z_t, u, z_R


def initial_state(schedule, z_t, u, z_R):
    scale = np.sqrt(1.0 - schedule.alpha_bar[-1])
    return z_t.copy(), rotations_from_noise(scale, u, z_R)


def sample(eps_fn: EpsFn, n_samples, config: SamplerConfig, schedule, seed, guide: Optional[GuideFn] = None, refine_steps=0):
    """Draw ``n_samples`` poses (normalized translations, rotations).

    ``refine_steps`` extra posterior-mean updates at index 0 (no noise) are run
    after the chain when a guide is given.
    """
    N = schedule.N
    if config.kind == "ddpm":
        z_t, u, z_R = chain_noise(seed, n_samples, N + 1)
        t, R = initial_state(schedule, z_t[:, 0], u[:, 0], z_R[:, 0])
        for step, k in enumerate(range(N - 1, -1, -1)):
            noise = (z_t[:, step + 1], u[:, step + 1], z_R[:, step + 1])
            t, R = ddpm_step(t, R, k, eps_fn, config, schedule, noise, guide)
            if (step + 1) % REORTHO_EVERY == 0:
                R = project_to_so3(R)
    else:
        if config.steps > N:
            raise ValueError(f"DDIM steps ({config.steps}) exceed N ({N})")
        z_t, u, z_R = chain_noise(seed, n_samples, 1)
        t, R = initial_state(schedule, z_t[:, 0], u[:, 0], z_R[:, 0])
        t, R = ddim_chain(t, R, eps_fn, config, schedule, guide)
    if guide is not None:
        t, R = zero_index_refinement(t, R, refine_steps, eps_fn, config, schedule, guide)
    return t, project_to_so3(R)


def ddim_chain(t, R, eps_fn, config, schedule, guide=None):
    """Deterministic (eta = 0) DDIM over the quadratic index subsequence."""
    seq = ddim_indices(schedule.N, config.steps)[::-1]
    if seq[0] != schedule.N - 1:
        seq = [schedule.N - 1] + seq
    for j, k in enumerate(seq):
        ab = schedule.alpha_bar[k]
        ab_prev = schedule.alpha_bar[seq[j + 1]] if j + 1 < len(seq) else 1.0
        eps = eps_fn(t, R, k)
        eps_t = eps[:, :3]
        t0 = predict_t0(t, k, eps_t, schedule, clip=config.clip_denoised)
        if config.clip_denoised:
            eps_t = (t - np.sqrt(ab) * t0) / np.sqrt(1.0 - ab)
        t = np.sqrt(ab_prev) * t0 + np.sqrt(1.0 - ab_prev) * eps_t
        r0 = predict_r0(R, k, eps[:, 3:], schedule)
        R = exp_so3(np.sqrt(1.0 - ab_prev) * eps[:, 3:]) @ exp_so3(np.sqrt(ab_prev) * log_so3(r0, check=False))
        if guide is not None:
            sigma = config.temp_alpha * (1.0 - ab_prev)
            t, R = guide(t, R, sigma)
        if (j + 1) % REORTHO_EVERY == 0:
            R = project_to_so3(R)
    return t, R


def zero_index_refinement(t, R, K, eps_fn, config, schedule, guide):
    """K noise-free guided posterior-mean updates evaluated at index 0."""
    sigma = guidance_sigma(schedule, 0, config)
    mean_t = posterior_mean_translation_clipped if config.clip_denoised else posterior_mean_translation
    for _ in range(int(K)):
        eps = eps_fn(t, R, 0)
        t = mean_t(t, 0, eps[:, :3], schedule)
        R = posterior_mean_rotation(R, 0, eps[:, 3:], schedule, config.rotation_mean_form)
        t, R = guide(t, R, sigma)
    return t, R


def sample_grasps(denoiser, cloud, n_samples, config, schedule, seed, guide=None, refine_steps=0):
    return sample(denoiser.eps_fn(cloud), n_samples, config, schedule, seed, guide, refine_steps)
