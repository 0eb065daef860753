import numpy as np
import pytest
from scipy import stats

from gdn.diffusion import (
    SamplerConfig,
    chain_noise,
    ddpm_step,
    noise_rotation,
    noise_translation,
    posterior_mean_rotation,
    posterior_mean_translation,
    posterior_mean_translation_clipped,
    predict_t0,
    sample,
)
from gdn.geometry import check_rotation, exp_so3, geodesic_distance, log_so3, random_rotation, rotation_angle
from gdn.igso3 import build_cdf_table, rotations_from_noise
from gdn.metrics import grasp_spread
from gdn.model import AdamState, Denoiser, DenoiserConfig
from gdn.schedule import NoiseSchedule, cosine_schedule
from gdn.training import TrainState, train

SCH = cosine_schedule(100)


def test_noise_translation_basics():
    t0 = np.array([[0.3, -0.2, 0.5]])
    sch = NoiseSchedule(beta=np.array([0.0]), alpha=np.array([1.0]), alpha_bar=np.array([1.0]), beta_tilde=np.zeros(1))
    np.testing.assert_array_equal(noise_translation(t0, 0, np.ones((1, 3)), sch), t0)
    np.testing.assert_allclose(noise_translation(t0, 50, np.zeros((1, 3)), SCH), np.sqrt(SCH.alpha_bar[50]) * t0)


def test_noise_translation_moments():
    rng = np.random.default_rng(0)
    t0 = np.array([0.4, -0.6, 0.2])
    k = 60
    x = noise_translation(np.tile(t0, (100_000, 1)), k, rng.standard_normal((100_000, 3)), SCH)
    ab = SCH.alpha_bar[k]
    np.testing.assert_allclose(x.mean(0), np.sqrt(ab) * t0, rtol=0.02)
    np.testing.assert_allclose(x.var(0), 1 - ab, rtol=0.02)


def test_iterated_translation_matches_marginal():
    rng = np.random.default_rng(1)
    n, t0 = 100_000, 0.5
    x = np.full(n, t0)
    for k in range(SCH.N):
        x = np.sqrt(SCH.alpha[k]) * x + np.sqrt(1 - SCH.alpha[k]) * rng.standard_normal(n)
    ab = SCH.alpha_bar[-1]
    assert abs(x.mean() - np.sqrt(ab) * t0) < 0.02
    assert abs(x.var() / (1 - ab) - 1) < 0.02


def test_rotation_noising_boundaries():
    rng = np.random.default_rng(2)
    R0 = np.tile(random_rotation(rng), (10_000, 1, 1))
    near_one = NoiseSchedule.from_betas(np.linspace(1e-4, 0.02, 100))
    Rk, _ = noise_rotation(R0, 0, near_one, rng)
    assert np.mean(geodesic_distance(Rk, R0) < 0.05) > 0.99
    # at the last index the draw is IGSO(3) with scale sqrt(1 - abar) ~ 1, which is not yet uniform
    Rk, _ = noise_rotation(np.tile(np.eye(3), (10_000, 1, 1)), SCH.N - 1, SCH, rng)
    table = build_cdf_table(np.sqrt(1 - SCH.alpha_bar[-1]))
    assert stats.kstest(rotation_angle(Rk), table).statistic < 0.02
    assert stats.kstest(rotation_angle(Rk), lambda w: (w - np.sin(w)) / np.pi).statistic > 0.1


def test_rotation_target_reconstructs_noise():
    rng = np.random.default_rng(3)
    R0 = random_rotation(rng, 500)
    k = rng.integers(0, 100, 500)
    Rk, eps = noise_rotation(R0, k, SCH, rng)
    scale = np.sqrt(1 - SCH.alpha_bar[k])[:, None]
    lam = exp_so3(np.sqrt(SCH.alpha_bar[k])[:, None] * log_so3(R0))
    np.testing.assert_allclose(exp_so3(scale * eps), Rk @ np.swapaxes(lam, -1, -2), atol=1e-10)


def test_rotation_convolution_closure():
    # two successive forward steps from the identity match the direct two-step marginal
    rng = np.random.default_rng(4)
    n = 100_000
    a1, a2 = SCH.alpha[0], SCH.alpha[1]
    u, z = rng.random(n), rng.standard_normal((n, 3))
    R1 = rotations_from_noise(np.sqrt(1 - a1), u, z)
    u, z = rng.random(n), rng.standard_normal((n, 3))
    R2 = rotations_from_noise(np.sqrt(1 - a2), u, z) @ exp_so3(np.sqrt(a2) * log_so3(R1, check=False))
    R2_direct, _ = noise_rotation(np.tile(np.eye(3), (n, 1, 1)), 1, SCH, rng)
    assert stats.ks_2samp(rotation_angle(R2), rotation_angle(R2_direct)).statistic < 0.015


def test_posterior_mean_translation_hand_value():
    sch = NoiseSchedule(beta=np.array([0.495, 0.01]), alpha=np.array([0.505, 0.99]),
                        alpha_bar=np.array([0.505 * 0.99 / 0.99, 0.5]), beta_tilde=np.zeros(2))
    out = posterior_mean_translation(np.array([[1.0, 0, 0]]), 1, np.array([[1.0, 0, 0]]), sch)
    np.testing.assert_allclose(out[0], [(1 - 0.01 / np.sqrt(0.5)) / np.sqrt(0.99), 0, 0], atol=1e-15)


def test_posterior_mean_translation_linear_and_identity():
    rng = np.random.default_rng(5)
    a, b, e1, e2 = rng.uniform(-1, 1, (4, 1, 3))
    lhs = posterior_mean_translation(2 * a + 3 * b, 40, 2 * e1 + 3 * e2, SCH)
    rhs = 2 * posterior_mean_translation(a, 40, e1, SCH) + 3 * posterior_mean_translation(b, 40, e2, SCH)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
    sch = NoiseSchedule.from_betas(np.array([1e-4, 1e-14]))
    np.testing.assert_allclose(posterior_mean_translation(a, 1, np.zeros((1, 3)), sch), a, atol=1e-13)


def test_clipped_mean_equals_plain_when_inactive():
    rng = np.random.default_rng(6)
    t0 = rng.uniform(-0.8, 0.8, (200, 3))
    k = rng.integers(1, 100, 200)
    eps = rng.standard_normal((200, 3))
    tk = noise_translation(t0, k, eps, SCH)
    np.testing.assert_allclose(predict_t0(tk, k, eps, SCH), t0, atol=1e-10)
    np.testing.assert_allclose(posterior_mean_translation_clipped(tk, k, eps, SCH),
                               posterior_mean_translation(tk, k, eps, SCH), atol=1e-10)


def test_rotation_mean_forms():
    rng = np.random.default_rng(7)
    R = random_rotation(rng)[None]
    out = posterior_mean_rotation(R, 1, np.zeros((1, 3)), NoiseSchedule.from_betas(np.array([1e-4, 1e-14])))
    np.testing.assert_allclose(out, R, atol=1e-12)
    Rk = exp_so3(rng.normal(scale=1e-3, size=(20, 3)))
    eps = rng.normal(scale=1e-3, size=(20, 3))
    for k in (5, 50, 90):
        a = posterior_mean_rotation(Rk, k, eps, SCH, "lie-eps")
        b = posterior_mean_rotation(Rk, k, eps, SCH, "r0-reconstruction")
        assert np.abs(a - b).max() < 1e-6
        check_rotation(a, tol=1e-10)
    big = posterior_mean_rotation(random_rotation(rng, 50), 99, rng.standard_normal((50, 3)) * 3, SCH, "r0-reconstruction")
    check_rotation(big, tol=1e-10)
    with pytest.raises(ValueError):
        posterior_mean_rotation(Rk, 5, eps, SCH, "other")


def zero_eps(t, R, k):
    return np.zeros((len(t), 6))


def test_step_determinism_and_final_step():
    rng = np.random.default_rng(8)
    t = rng.uniform(-1, 1, (5, 3))
    R = random_rotation(rng, 5)
    noise = (rng.standard_normal((5, 3)), rng.random(5), rng.standard_normal((5, 3)))
    cold = SamplerConfig(temp_alpha=0.0)
    a = ddpm_step(t, R, 30, zero_eps, cold, SCH, noise)
    b = ddpm_step(t, R, 30, zero_eps, cold, SCH, None)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    hot = SamplerConfig(temp_alpha=1.0)
    c = ddpm_step(t, R, 0, zero_eps, hot, SCH, noise)
    d = ddpm_step(t, R, 0, zero_eps, hot, SCH, None)
    assert np.array_equal(c[0], d[0]) and np.array_equal(c[1], d[1])


def test_zero_head_chain_is_stable():
    for kind in ("ddpm", "ddim"):
        t, R = sample(zero_eps, 200, SamplerConfig(kind=kind, temp_alpha=1.0), SCH, seed=[9])
        assert np.isfinite(t).all()
        check_rotation(R, tol=1e-9)
        assert np.abs(t).max() <= 1.2


def test_seed_reproducible_and_chain_streams():
    eps = lambda t, R, k: 0.1 * np.concatenate([t, log_so3(R, check=False)], axis=1)  # noqa: E731
    a = sample(eps, 8, SamplerConfig(), SCH, seed=[3, 1])
    b = sample(eps, 8, SamplerConfig(), SCH, seed=[3, 1])
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    # chain c draws are independent of how many chains run
    z4 = chain_noise([3, 1], 4, 5)
    z8 = chain_noise([3, 1], 8, 5)
    assert np.array_equal(z4[0], z8[0][:4])


def test_ddim_full_steps_matches_cold_ddpm():
    # exact noise predictor for a point-mass target: both samplers land on it
    target = np.array([0.3, -0.5, 0.1])
    R_target = exp_so3([0.2, -0.4, 0.7])

    def eps_fn(t, R, k):
        ab = SCH.alpha_bar[k]
        e_t = (t - np.sqrt(ab) * target) / np.sqrt(1 - ab)
        lam = exp_so3(np.sqrt(ab) * log_so3(R_target))
        e_R = log_so3(R @ lam.T, check=False) / np.sqrt(1 - ab)
        return np.concatenate([e_t, e_R], axis=1)

    t1, R1 = sample(eps_fn, 50, SamplerConfig(kind="ddpm", temp_alpha=0.0), SCH, seed=[1])
    t2, R2 = sample(eps_fn, 50, SamplerConfig(kind="ddim", steps=100), SCH, seed=[1])
    assert np.abs(t1 - t2).max() < 1e-3
    assert np.abs(t2 - target).max() < 1e-3
    assert geodesic_distance(R2, R_target).max() < 1e-3


def test_sampler_validation():
    with pytest.raises(ValueError):
        SamplerConfig(kind="euler")
    with pytest.raises(ValueError):
        SamplerConfig(temp_alpha=1.5)
    with pytest.raises(ValueError):
        sample(zero_eps, 2, SamplerConfig(kind="ddim", steps=200), SCH, seed=0)


@pytest.fixture(scope="module")
def unimodal_model():
    rng = np.random.default_rng(10)
    cfg = DenoiserConfig(d_p=16, d_i=16, d_G=64, n_r=2, encoder_widths=[16, 32])
    den = Denoiser.create(cfg, np.random.default_rng(11))
    cloud = rng.uniform(-1, 1, (1, 64, 3))
    t0 = np.array([[0.2, -0.3, 0.4]])
    R0 = exp_so3([0.5, 0.1, -0.8])[None]
    state = TrainState(den.params, AdamState.zeros_like(den.params), rng=rng)
    train(state, cfg, cloud, [(t0, R0)], SCH, steps=2500, lr=2e-3, scenes_per_batch=1, grasps_per_scene=64)
    return den, cloud[0], t0[0], R0[0]


def test_unimodal_recovery(unimodal_model):
    den, cloud, t0, R0 = unimodal_model
    t, R = sample(den.eps_fn(cloud), 200, SamplerConfig(temp_alpha=0.75), SCH, seed=[12])
    assert np.linalg.norm(t - t0, axis=1).mean() < 0.05
    assert geodesic_distance(R, R0).mean() < 0.15


def test_low_temperature_spread_monotone(unimodal_model):
    den, cloud, _, _ = unimodal_model
    f = den.eps_fn(cloud)
    spreads = [grasp_spread(*sample(f, 100, SamplerConfig(temp_alpha=a), SCH, seed=[13])) for a in (1.0, 0.75, 0.5, 0.0)]
    assert all(b <= a for a, b in zip(spreads, spreads[1:])), spreads
