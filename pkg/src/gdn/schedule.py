"""Noise schedules and DDIM index subsequences.

Arrays are 0-based: entry ``k`` holds the quantities of diffusion step ``k + 1``
so that model time indices run over ``0 .. N-1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COSINE_OFFSET = 0.008
BETA_MIN, BETA_MAX = 1e-5, 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray

    @property
    def N(self):
        return len(self.beta)

    @property
    def alpha_bar_prev(self):
        return np.concatenate([[1.0], self.alpha_bar[:-1]])

    def posterior_variance(self, kind="beta_tilde"):
        if kind == "beta_tilde":
            return self.beta_tilde
        if kind == "beta":
            return self.beta
        raise ValueError(f"unknown posterior variance {kind!r}")

    @classmethod
    def from_betas(cls, beta):
        beta = np.asarray(beta, dtype=float)
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        beta_tilde = (1.0 - prev) / (1.0 - alpha_bar) * beta
        return cls(beta, alpha, alpha_bar, beta_tilde)


def cosine_schedule(N, s=COSINE_OFFSET):
    if int(N) != N or N < 2:
        raise ValueError(f"cosine_schedule needs N >= 2, got {N}")
    N = int(N)
    i = np.arange(N + 1, dtype=float)
    g = np.cos((i / N + s) / (1 + s) * np.pi / 2) ** 2
    abar = g / g[0]
    beta = np.clip(1.0 - abar[1:] / abar[:-1], BETA_MIN, BETA_MAX)
    # rebuild alpha_bar from the clipped betas so the product identity is exact
    return NoiseSchedule.from_betas(beta)


def ddim_indices(N, S):
    """S strictly increasing indices in [0, N-1], quadratically denser near 0."""
    if S < 1 or S > N:
        raise ValueError(f"ddim_indices needs 1 <= S <= N, got S={S}, N={N}")
    if S == 1:
        return [N - 1]
    j = np.arange(S, dtype=float)
    raw = np.round((j / (S - 1)) ** 2 * (N - 1)).astype(int)
    idx = sorted(set(raw.tolist()))
    unused = (k for k in range(N) if k not in set(idx))
    while len(idx) < S:
        idx.append(next(unused))
        idx.sort()
    return idx
