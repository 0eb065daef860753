"""Conditional noise-prediction network with hand-written reverse-mode gradients.

Layout (row-vector convention, ``y = x @ W + b``)::

    cloud (n, 3) -> per-point MLP (Mish) -> max-pool -> linear -> z_p
    c = linear([z_p, sinusoidal(i)])
    z = Mish(linear([vec(R), t]))
    repeat n_r times:  z = z + a * Mish(linear(z)) + b,   (a, b) = linear(c)
    eps = linear(z)  in R^6  (translation noise, rotation tangent noise)
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import GraspPose


@dataclass
class DenoiserConfig:
    d_p: int = 64
    d_i: int = 32
    d_G: int = 128
    n_r: int = 4
    encoder_widths: list = field(default_factory=lambda: [64, 128])

    def __post_init__(self):
        for name in ("d_p", "d_i", "d_G", "n_r"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"DenoiserConfig.{name} must be >= 1")
        if self.d_i % 2:
            raise ValueError("DenoiserConfig.d_i must be even (sin/cos pairs)")
        if not self.encoder_widths or min(self.encoder_widths) < 1:
            raise ValueError("DenoiserConfig.encoder_widths must be a nonempty list of positive ints")


def _tanh_softplus(x):
    # tanh(log(1 + e^x)) = n / (n + 2) with n = e^x (e^x + 2); one exp instead of three transcendentals
    e = np.exp(np.minimum(x, 20.0))
    n = e * (e + 2.0)
    return n / (n + 2.0), e


def mish(x):
    return x * _tanh_softplus(x)[0]


def mish_grad(x):
    return _mish_and_grad(x)[1]


def _mish_and_grad(x):
    tsp, e = _tanh_softplus(x)
    return x * tsp, tsp + x * (1.0 - tsp * tsp) * (e / (1.0 + e))


def _act(x, keep_grad):
    """Mish, plus its derivative when a backward pass will need it."""
    return _mish_and_grad(x) if keep_grad else (mish(x), None)


def sinusoidal_embed(i, d_i):
    if d_i % 2:
        raise ValueError("sinusoidal embedding dimension must be even")
    i = np.asarray(i, dtype=float)
    if np.any(i < 0):
        raise ValueError("time index must be >= 0")
    freqs = 10000.0 ** (-2.0 * np.arange(d_i // 2) / d_i)
    arg = i[..., None] * freqs
    out = np.empty(i.shape + (d_i,))
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


def _linear_init(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out)


def init_params(config, rng):
    """Kaiming-uniform hidden layers, zero output head, zero FiLM biases."""
    p = {}
    widths = [3] + list(config.encoder_widths)
    for j, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        p[f"enc.{j}.W"], p[f"enc.{j}.b"] = _linear_init(rng, a, b)
    p["enc.proj.W"], p["enc.proj.b"] = _linear_init(rng, widths[-1], config.d_p)
    p["ctx.W"], p["ctx.b"] = _linear_init(rng, config.d_p + config.d_i, config.d_p)
    p["in.W"], p["in.b"] = _linear_init(rng, 12, config.d_G)
    for k in range(config.n_r):
        p[f"block{k}.W"], p[f"block{k}.b"] = _linear_init(rng, config.d_G, config.d_G)
        p[f"block{k}.film.W"], _ = _linear_init(rng, config.d_p, 2 * config.d_G)
        p[f"block{k}.film.b"] = np.zeros(2 * config.d_G)
    p["out.W"] = np.zeros((config.d_G, 6))
    p["out.b"] = np.zeros(6)
    return p


def param_shapes(config):
    return {k: v.shape for k, v in init_params(config, np.random.default_rng(0)).items()}


def encode_pointcloud(points, params, config, cache=None):
    """Embed clouds of shape (n, 3) or (S, n, 3); returns (d_p,) or (S, d_p)."""
    P = np.asarray(points, dtype=float)
    single = P.ndim == 2
    if single:
        P = P[None]
    if P.shape[1] == 0:
        raise ValueError("encode_pointcloud: empty point cloud")
    acts, dacts = [P], []
    h = P
    for j in range(len(config.encoder_widths)):
        h, dh = _act(h @ params[f"enc.{j}.W"] + params[f"enc.{j}.b"], cache is not None)
        dacts.append(dh)
        acts.append(h)
    arg = np.argmax(h, axis=1)
    pooled = np.take_along_axis(h, arg[:, None, :], axis=1)[:, 0]
    z_p = pooled @ params["enc.proj.W"] + params["enc.proj.b"]
    if cache is not None:
        cache.update(enc_acts=acts, enc_dacts=dacts, enc_arg=arg, pooled=pooled)
    return z_p[0] if single else z_p


def forward(params, config, t, R, k, z_p, scene_idx, cache=None):
    """Batched noise prediction. ``z_p`` is (S, d_p); ``scene_idx`` maps each grasp to its cloud."""
    B = len(t)
    z_i = sinusoidal_embed(np.asarray(k), config.d_i)
    c_in = np.concatenate([z_p[scene_idx], z_i], axis=1)
    c = c_in @ params["ctx.W"] + params["ctx.b"]
    x = np.concatenate([np.asarray(R).reshape(B, 9), t], axis=1)
    keep = cache is not None
    z, dz_in = _act(x @ params["in.W"] + params["in.b"], keep)
    blocks = []
    dG = config.d_G
    for j in range(config.n_r):
        u = z @ params[f"block{j}.W"] + params[f"block{j}.b"]
        h, dh = _act(u, keep)
        film = c @ params[f"block{j}.film.W"] + params[f"block{j}.film.b"]
        a, b = film[:, :dG], film[:, dG:]
        blocks.append((z, dh, h, a))
        z = z + a * h + b
    out = z @ params["out.W"] + params["out.b"]
    if cache is not None:
        cache.update(c_in=c_in, c=c, x=x, dmish_in=dz_in, blocks=blocks, z_last=z, scene_idx=scene_idx)
    return out


def backward(params, config, cache, dout, n_scenes):
    """Reverse-mode pass for :func:`forward` (and the encoder if it was cached)."""
    g = {}
    dG = config.d_G
    z = cache["z_last"]
    g["out.W"] = z.T @ dout
    g["out.b"] = dout.sum(0)
    dz = dout @ params["out.W"].T
    dc = np.zeros_like(cache["c"])
    c = cache["c"]
    for j in reversed(range(config.n_r)):
        z_prev, dmish, h, a = cache["blocks"][j]
        dh = dz * a
        dfilm = np.concatenate([dz * h, dz], axis=1)
        g[f"block{j}.film.W"] = c.T @ dfilm
        g[f"block{j}.film.b"] = dfilm.sum(0)
        dc += dfilm @ params[f"block{j}.film.W"].T
        du = dh * dmish
        g[f"block{j}.W"] = z_prev.T @ du
        g[f"block{j}.b"] = du.sum(0)
        dz = dz + du @ params[f"block{j}.W"].T
    dpre = dz * cache["dmish_in"]
    g["in.W"] = cache["x"].T @ dpre
    g["in.b"] = dpre.sum(0)
    g["ctx.W"] = cache["c_in"].T @ dc
    g["ctx.b"] = dc.sum(0)
    dc_in = dc @ params["ctx.W"].T
    dz_p = np.zeros((n_scenes, config.d_p))
    np.add.at(dz_p, cache["scene_idx"], dc_in[:, : config.d_p])

    # encoder
    g["enc.proj.W"] = cache["pooled"].T @ dz_p
    g["enc.proj.b"] = dz_p.sum(0)
    dpooled = dz_p @ params["enc.proj.W"].T
    acts, dacts, arg = cache["enc_acts"], cache["enc_dacts"], cache["enc_arg"]
    dh = np.zeros_like(acts[-1])
    np.put_along_axis(dh, arg[:, None, :], dpooled[:, None, :], axis=1)
    for j in reversed(range(len(config.encoder_widths))):
        dpre = dh * dacts[j]
        g[f"enc.{j}.W"] = acts[j].reshape(-1, acts[j].shape[-1]).T @ dpre.reshape(-1, dpre.shape[-1])
        g[f"enc.{j}.b"] = dpre.sum((0, 1))
        if j:
            dh = dpre @ params[f"enc.{j}.W"].T
    return g


def loss_and_grads_fixed(params, config, clouds, scene_idx, t, R, k, target):
    """Mean over the batch of the squared 6-vector residual, with exact gradients."""
    cache = {}
    z_p = encode_pointcloud(clouds, params, config, cache)
    out = forward(params, config, t, R, k, z_p, scene_idx, cache)
    resid = out - target
    loss = float(np.mean(np.sum(resid * resid, axis=1)))
    dout = 2.0 * resid / len(t)
    return loss, backward(params, config, cache, dout, len(clouds))


def denoise_eps(G, i, cloud, params, config, check_range=True):
    """Noise prediction for a single pose; translation must already be normalized."""
    if isinstance(G, GraspPose):
        t, R = G.t, G.R
    else:
        t, R = G
    t = np.asarray(t, dtype=float).reshape(1, 3)
    if check_range and np.any(np.abs(t) > 1.5):
        raise ValueError("denoise_eps: translation outside [-1.5, 1.5]; normalize the scene first")
    z_p = encode_pointcloud(np.asarray(cloud, dtype=float), params, config)[None]
    out = forward(params, config, t, np.asarray(R, dtype=float).reshape(1, 3, 3), np.array([i]), z_p, np.zeros(1, int))
    return out[0]


class Denoiser:
    """Bundles parameters with their config and exposes the noise-prediction callable."""

    def __init__(self, params, config):
        self.params = params
        self.config = config

    @classmethod
    def create(cls, config, rng):
        return cls(init_params(config, rng), config)

    def encode(self, cloud):
        return encode_pointcloud(cloud, self.params, self.config)

    def eps_fn(self, cloud):
        """Return ``f(t, R, k) -> (n, 6)`` conditioned on one cloud (encoded once)."""
        z_p = self.encode(np.asarray(cloud, dtype=float))[None]

        def f(t, R, k):
            n = len(t)
            kk = np.broadcast_to(np.asarray(k), (n,))
            return forward(self.params, self.config, t, R, kk, z_p, np.zeros(n, dtype=int))

        return f


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place bias-corrected Adam update; returns ``(params, state)``."""
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state
