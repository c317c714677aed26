import numpy as np
import pytest

from invariantlab.datagen import generate_dataset, prepare_splits
from invariantlab.diffusion import (
    DiffusionTransitionModel,
    NoiseSchedule,
    RolloutConfig,
    forward_diffuse,
    project_energy,
    rollout,
    sample_delta,
    train_ddpm,
)
from invariantlab.dynamics import make_system
from invariantlab.exceptions import ConfigError, InputError, RolloutDivergedError, ShapeError
from invariantlab.neuralcore import LrSchedule

SCHED = NoiseSchedule()


def _cosine(epochs):
    return LrSchedule("warmup_cosine_restarts", base_lr=1e-3, min_lr=1e-5, warmup_epochs=0,
                      restart_period=epochs, period_multiplier=1)


@pytest.fixture(scope="module")
def spring_std():
    batch = generate_dataset(make_system("spring-mass"), 5000, seed=0)
    return prepare_splits(batch, "standardize")


@pytest.fixture(scope="module")
def trained(spring_std):
    train, _ = spring_std
    return DiffusionTransitionModel(epochs=10, lr_schedule=_cosine(10)).fit(train)


@pytest.fixture(scope="module")
def tiny():
    batch = generate_dataset(make_system("spring-mass"), 40, n_steps=20, seed=1)
    train, val = prepare_splits(batch, "standardize")
    model = DiffusionTransitionModel(hidden=(16, 16), n_diffusion_steps=10, epochs=1,
                                     batch_size=64).fit(train)
    return model, train, val


def test_alpha_bars_match_oracle():
    # tests/oracles/compute_oracles.py: 50-digit cumulative product
    ab = SCHED.alpha_bars
    np.testing.assert_allclose(ab[[0, 49, 99]], [0.9999, 0.77718008266117947,
                                                 0.36356324805549192], rtol=1e-13)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        NoiseSchedule(beta_end=1.5)
    with pytest.raises(ConfigError):
        NoiseSchedule(n_diffusion_steps=0)


def test_forward_diffuse_limits(rng):
    delta = rng.standard_normal((5, 2))
    x0, _ = forward_diffuse(delta, np.zeros(5, dtype=int), SCHED, rng)
    np.testing.assert_allclose(x0, delta, atol=0.05)
    t = np.full(5, 60)
    xz, _ = forward_diffuse(delta, t, SCHED, rng, noise=np.zeros_like(delta))
    np.testing.assert_array_equal(xz, np.sqrt(SCHED.alpha_bars[60]) * delta)


def test_forward_diffuse_preserves_unit_variance(rng):
    delta = rng.standard_normal((100_000, 1))
    x, _ = forward_diffuse(delta, np.full(100_000, 40), SCHED, rng)
    assert abs(x.var() - 1.0) <= 0.02


def test_forward_diffuse_rejects_bad_step(rng):
    with pytest.raises(InputError):
        forward_diffuse(np.zeros((1, 2)), np.array([100]), SCHED, rng)


def test_untrained_loss_is_about_one(spring_std):
    train, val = spring_std
    model = DiffusionTransitionModel(epochs=0).fit(train)
    assert abs(model.denoising_loss(val) - 1.0) <= 0.1


def test_loss_decreases_every_epoch(trained):
    losses = [h["train_loss"] for h in trained.history_]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_shuffled_conditioning_trains_worse(spring_std, trained):
    train, val = spring_std
    control = DiffusionTransitionModel(epochs=10, lr_schedule=_cosine(10),
                                       shuffle_conditioning=True).fit(train)
    assert control.denoising_loss(val) > 2 * trained.denoising_loss(val)


def test_fit_requires_standardized_batch(spring_std):
    batch = generate_dataset(make_system("spring-mass"), 10, n_steps=5, seed=0)
    train, _ = prepare_splits(batch, "minmax")
    with pytest.raises(ConfigError):
        DiffusionTransitionModel(epochs=1).fit(train)
    with pytest.raises(InputError):
        DiffusionTransitionModel(epochs=1).fit(train.states)


def test_sampling_is_seeded_and_shaped(tiny):
    model, _, val = tiny
    s = val.states[:3, 0]
    a = sample_delta(model, s, np.zeros(3), rng=np.random.default_rng(5))
    b = sample_delta(model, s, np.zeros(3), rng=np.random.default_rng(5))
    assert a.shape == (3, 2)
    np.testing.assert_array_equal(a, b)
    assert sample_delta(model, s[0], 0.0, rng=np.random.default_rng(5)).shape == (2,)
    with pytest.raises(ShapeError):
        model.sample(np.zeros((2, 3)), 0.0, np.random.default_rng(0))


def test_sample_delta_rejects_foreign_schedule(tiny):
    model, _, val = tiny
    with pytest.raises(ConfigError):
        sample_delta(model, val.states[0, 0], 0.0, schedule=NoiseSchedule(50))


def test_train_ddpm_applies_overrides(tiny):
    _, train, _ = tiny
    model = train_ddpm(DiffusionTransitionModel(hidden=(8,), n_diffusion_steps=10), train,
                       epochs=2, batch_size=32, seed=3)
    assert len(model.history_) == 2 and model.seed == 3


def _quadratic(s):
    return 0.5 * np.sum(s * s, axis=1), s.copy()


def test_projection_fixed_point():
    s = np.array([[1.0, 0.0], [0.6, 0.8]])
    np.testing.assert_array_equal(project_energy(s, 0.5, _quadratic), s)


def test_projection_one_dimensional_oracle():
    # tests/oracles/compute_oracles.py: 2 - 1.5 * 2 / (4 + 1e-8)
    out = project_energy(np.array([2.0]), 0.5, _quadratic)
    assert abs(out[0] - 1.250000001875) <= 1e-15


def test_projection_with_vanishing_gradient_stays_finite():
    def flat(s):
        return np.full(len(s), 3.0), np.zeros_like(s)

    out = project_energy(np.array([[0.2, 0.1]]), 1.0, flat, eps=1e-8)
    np.testing.assert_array_equal(out, [[0.2, 0.1]])


def test_projection_reduces_residual():
    s = np.array([[1.3, -0.4]])
    before = abs(_quadratic(s)[0][0] - 0.5)
    once = project_energy(s, 0.5, _quadratic)
    after = abs(_quadratic(once)[0][0] - 0.5)
    twice = abs(_quadratic(project_energy(once, 0.5, _quadratic))[0][0] - 0.5)
    assert after < 0.2 * before
    assert twice < after ** 2  # Newton-like step: quadratic convergence


def test_rollout_horizon_zero_returns_initial_state(tiny):
    model, _, val = tiny
    s0 = val.raw_states()[0, 0]
    out = rollout(model, s0, RolloutConfig(horizon=0), rng=np.random.default_rng(0))
    np.testing.assert_array_equal(out, s0[None])


def test_rollout_is_seeded_and_batched(tiny):
    model, _, val = tiny
    s0 = val.raw_states()[:4, 0]
    cfg = RolloutConfig(horizon=6, projection_steps_per_sample=0)
    a = rollout(model, s0, cfg, rng=np.random.default_rng(2))
    b = rollout(model, s0, cfg, rng=np.random.default_rng(2))
    assert a.shape == (4, 7, 2)
    np.testing.assert_array_equal(a, b)


def test_rollout_divergence_is_reported(tiny):
    model, _, val = tiny

    class Exploding:
        def predict_raw(self, s):
            return np.zeros(len(s))

        def value_and_grad_raw(self, s):
            return np.full(len(s), np.inf), np.ones_like(s)

    cfg = RolloutConfig(horizon=3, guidance_energy_model=Exploding())
    with pytest.raises(RolloutDivergedError) as info:
        rollout(model, val.raw_states()[:2, 0], cfg, rng=np.random.default_rng(0))
    assert info.value.step == 1


def test_rollout_config_validation():
    with pytest.raises(ConfigError):
        RolloutConfig(projection_epsilon=0.0)
    with pytest.raises(ConfigError):
        RolloutConfig(horizon=-1)


def test_constant_delta_dimensions_are_deterministic():
    # projectile: dvx is exactly 0 and dvy is -g*dt up to roundoff
    batch = generate_dataset(make_system("projectile"), 30, n_steps=10, seed=0)
    train, val = prepare_splits(batch, "standardize")
    model = DiffusionTransitionModel(hidden=(8,), n_diffusion_steps=5, epochs=1,
                                     batch_size=32).fit(train)
    assert np.all(model.delta_std_[2:] == 0) and np.all(model.delta_std_[:2] > 0)
    out = model.sample(val.states[:, 0], 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(out[:, 2:], np.broadcast_to(model.delta_mean_[2:], (len(out), 2)))
    assert np.isfinite(model.denoising_loss(val))
