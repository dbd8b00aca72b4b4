import math

import numpy as np
import pytest
from scipy import stats

from arnvs.diffusion import (
    AugmentationConfig,
    DiffusionError,
    NoiseSchedule,
    SamplerConfig,
    add_noise,
    apply_conditioning_augmentation,
    ddim_denoise_frame,
    ddim_timesteps,
    make_schedule,
    sample_frame_timesteps,
)


def test_cosine_schedule_starts_at_one():
    for T in (4, 16, 64, 200):
        sched = make_schedule("cosine", T)
        assert sched.alpha_bar[0] == pytest.approx(1.0, abs=1e-6)


def test_schedules_strictly_decreasing():
    for kind in ("cosine", "linear"):
        ab = make_schedule(kind, 64).alpha_bar
        assert np.all(np.diff(ab) < 0)
        assert np.all(ab > 0) and np.all(ab <= 1)


def test_cosine_t4_matches_hand_computed_closed_form():
    sched = make_schedule("cosine", 4)
    s = 0.008
    denom = math.cos((s / (1 + s)) * math.pi / 2) ** 2
    expected = [
        math.cos(((t / 4 + s) / (1 + s)) * math.pi / 2) ** 2 / denom for t in range(4)
    ]
    np.testing.assert_allclose(sched.alpha_bar, np.clip(expected, 1e-5, 1.0), rtol=1e-12)


def test_make_schedule_rejects_bad_inputs():
    with pytest.raises(DiffusionError):
        make_schedule("cosine", 1)
    with pytest.raises(DiffusionError):
        make_schedule("exotic", 8)


def test_add_noise_identity_at_alpha_one():
    sched = make_schedule("cosine", 64)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 8, 3)).astype(np.float32)
    eps = rng.normal(size=(8, 8, 3)).astype(np.float32)
    assert sched.alpha_bar[0] == 1.0
    np.testing.assert_array_equal(add_noise(x, 0, eps, sched), x)


def test_add_noise_zero_eps():
    sched = make_schedule("cosine", 64)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 4, 3))
    t = 17
    np.testing.assert_allclose(
        add_noise(x, t, np.zeros_like(x), sched), math.sqrt(sched.alpha_bar[t]) * x
    )
    with pytest.raises(DiffusionError):
        add_noise(x, 64, np.zeros_like(x), sched)


def test_add_noise_monte_carlo_variance():
    sched = make_schedule("cosine", 64)
    rng = np.random.default_rng(2)
    t = 30
    x = np.full(100_000, 0.25)
    eps = rng.standard_normal(100_000)
    noisy = add_noise(x, t, eps, sched)
    var = np.var(noisy - math.sqrt(sched.alpha_bar[t]) * x)
    assert var == pytest.approx(1.0 - sched.alpha_bar[t], rel=0.02)


def test_sample_frame_timesteps_marginal_uniformity():
    rng = np.random.default_rng(3)
    T = 16
    draws = sample_frame_timesteps(100_000, rng, T)
    counts = np.bincount(draws, minlength=T)
    _, p = stats.chisquare(counts)
    assert p > 0.01


def test_sample_frame_timesteps_independence_and_shared_mode():
    rng = np.random.default_rng(4)
    T = 64
    a = np.array([sample_frame_timesteps(2, rng, T) for _ in range(100_000)])
    corr = np.corrcoef(a[:, 0], a[:, 1])[0, 1]
    assert abs(corr) < 0.01

    shared = sample_frame_timesteps(6, rng, T, shared=True)
    assert len(set(shared.tolist())) == 1
    assert len(sample_frame_timesteps(1, rng, T)) == 1


def test_ddim_timestep_selection():
    np.testing.assert_array_equal(ddim_timesteps(64, 64), np.arange(64))
    taus = ddim_timesteps(64, 16)
    assert taus[0] == 0 and taus[-1] == 63
    assert np.all(np.diff(taus) > 0)
    np.testing.assert_array_equal(ddim_timesteps(64, 1), [63])


def test_ddim_with_oracle_noise_model_recovers_x0():
    # Oracle: the exact noise that connects the current state to the true x0.
    sched = make_schedule("cosine", 32)
    rng = np.random.default_rng(5)
    x0 = np.clip(rng.normal(scale=0.4, size=(8, 8, 3)), -0.9, 0.9)

    def eps_oracle(x_t, t):
        ab = sched.alpha_bar[t]
        return (x_t - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)

    out = ddim_denoise_frame(
        eps_oracle, x0.shape, sched, SamplerConfig(num_steps=32), np.random.default_rng(6), dtype=np.float64
    )
    np.testing.assert_allclose(out, x0, atol=1e-4)


def test_ddim_deterministic_across_runs():
    sched = make_schedule("cosine", 16)

    def eps_zero(x_t, t):
        return np.zeros_like(x_t)

    a = ddim_denoise_frame(eps_zero, (4, 4, 3), sched, SamplerConfig(num_steps=8), np.random.default_rng(7))
    b = ddim_denoise_frame(eps_zero, (4, 4, 3), sched, SamplerConfig(num_steps=8), np.random.default_rng(7))
    assert np.array_equal(a, b)


def test_sampler_config_validation():
    with pytest.raises(DiffusionError):
        SamplerConfig(num_steps=0)
    with pytest.raises(DiffusionError):
        SamplerConfig(num_steps=8, eta=0.5)


def test_augmentation_identity_cases():
    sched = make_schedule("cosine", 64)
    rng = np.random.default_rng(8)
    x = rng.normal(size=(4, 4, 3)).astype(np.float32)

    out, lvl = apply_conditioning_augmentation(x, AugmentationConfig(enabled=False), rng, sched)
    assert lvl == 0 and np.array_equal(out, x)
    out, lvl = apply_conditioning_augmentation(
        x, AugmentationConfig(context_noise_level=0), rng, sched
    )
    assert lvl == 0 and np.array_equal(out, x)


def test_augmentation_adds_expected_variance():
    sched = make_schedule("cosine", 64)
    rng = np.random.default_rng(9)
    cfg = AugmentationConfig(context_noise_level=8)
    x = np.zeros(200_000)
    out, lvl = apply_conditioning_augmentation(x, cfg, rng, sched)
    assert lvl == 8
    assert np.var(out) == pytest.approx(1.0 - sched.alpha_bar[8], rel=0.02)


def test_augmentation_warns_when_level_large():
    sched = make_schedule("cosine", 64)
    rng = np.random.default_rng(10)
    with pytest.warns(UserWarning):
        apply_conditioning_augmentation(
            np.zeros((2, 2, 3)), AugmentationConfig(context_noise_level=30), rng, sched
        )


def test_schedule_invariants_enforced():
    with pytest.raises(DiffusionError):
        NoiseSchedule(kind="x", alpha_bar=np.array([0.5, 0.5, 0.1]))
    with pytest.raises(DiffusionError):
        NoiseSchedule(kind="x", alpha_bar=np.array([1.0, 0.5, 0.7]))
    with pytest.raises(DiffusionError):
        NoiseSchedule(kind="x", alpha_bar=np.array([1.0, -0.1]))
