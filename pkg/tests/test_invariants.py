import numpy as np
import pytest

from invariantlab.datagen import add_noise, generate_dataset, prepare_splits
from invariantlab.dynamics import analytic_energy, make_system
from invariantlab.exceptions import (
    AlignmentDegenerateError,
    ConfigError,
    NonFiniteLossError,
    ShapeError,
)
from invariantlab.invariants import (
    BlackBoxCdn,
    ConservationLossConfig,
    PolynomialCdn,
    StructuredEnergyNet,
    alignment_loss,
    consistency_loss,
    evaluate_invariant,
    loss_gradient_check,
    total_loss,
    train_invariant,
    variance_hinge,
)


@pytest.fixture(scope="module")
def spring_small():
    return generate_dataset(make_system("spring-mass"), 64, n_steps=19, seed=3)


def _fitted(model, batch, mode):
    train, _ = prepare_splits(batch, mode)
    return model.fit(train), train


# -- objective terms ----------------------------------------------------------

def test_consistency_examples():
    assert consistency_loss(np.full((3, 4), 2.5)) == 0.0
    assert consistency_loss(np.array([[0.0, 1.0, 2.0]])) == 1.0
    assert consistency_loss(np.array([[0.0, 0.0], [0.0, 2.0]])) == 2.0
    # tests/oracles/compute_oracles.py: exact rational evaluation
    rows = np.array([[0.3, 0.1, 0.4], [1.5, 0.9, 2.6]])
    assert abs(consistency_loss(rows) - 0.845) <= 1e-12


def test_hinge_examples():
    cfg = ConservationLossConfig(lambda_var=1.0, var_epsilon=1.0)
    assert variance_hinge(np.array([0.0, 1.0]), cfg) == 0.75
    assert variance_hinge(np.array([-3.0, 3.0]), cfg) == 0.0
    flat = ConservationLossConfig(lambda_var=2.0, var_epsilon=0.1)
    assert variance_hinge(np.full(5, 4.0), flat) == pytest.approx(0.2, abs=1e-15)
    half = ConservationLossConfig(lambda_var=1.0, var_epsilon=0.5)
    assert abs(variance_hinge(np.array([0.1, 0.2, 0.7]), half) - 0.4311111111111111) <= 1e-12


def test_alignment_examples(rng):
    e0 = rng.standard_normal(50)
    assert alignment_loss(3.0 * e0 + 2.0, e0) <= 1e-12
    assert abs(alignment_loss(-e0, e0) - 4.0) <= 1e-12
    assert abs(alignment_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0])) - 4.0) <= 1e-12
    # tests/oracles/compute_oracles.py: 50-digit evaluation
    got = alignment_loss(np.array([0.5, 0.1, 0.2]), np.array([1.0, 2.0, 4.0]))
    assert abs(got - 3.1531133203941101) <= 1e-12


def test_alignment_constant_output_is_degenerate():
    with pytest.raises(AlignmentDegenerateError):
        alignment_loss(np.ones(4), np.arange(4.0))


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        ConservationLossConfig(var_epsilon=0.0)


def test_constant_model_loss_is_hinge_only(spring_small):
    model, train = _fitted(PolynomialCdn(system="spring-mass", lambda_align=0.0, epochs=1,
                                         batch_size=16), spring_small, "raw")
    model.coef_[:] = 0.0
    model.coef_[0] = 1.7
    loss, _ = total_loss(model, train)
    assert loss == pytest.approx(model.lambda_var * model.var_epsilon, abs=1e-15)


def test_consistency_scales_quadratically(rng):
    values = rng.standard_normal((6, 9))
    assert consistency_loss(3.0 * values) == pytest.approx(9.0 * consistency_loss(values),
                                                           rel=1e-12)


# -- gradients ----------------------------------------------------------------

@pytest.mark.parametrize("system", ["projectile", "pendulum", "spring-mass"])
@pytest.mark.parametrize("kind", ["cdn", "se", "poly"])
def test_total_loss_gradient_matches_finite_differences(system, kind, rng):
    batch = generate_dataset(make_system(system), 16, n_steps=5, seed=1)
    if kind == "cdn":
        model, mode = BlackBoxCdn(hidden=(12, 12), epochs=1, batch_size=8), "minmax"
    elif kind == "se":
        model, mode = StructuredEnergyNet(system=system, hidden=(10, 10), epochs=1,
                                          batch_size=8), "raw"
    else:
        model, mode = PolynomialCdn(system=system, epochs=1, batch_size=8), "raw"
    model, train = _fitted(model.set_params(lr=1e-2), batch, mode)
    assert loss_gradient_check(model, train, rng, n_probes=40) <= 1e-5


# -- architecture contracts ---------------------------------------------------

def test_structured_net_with_zero_kinetic_is_potential_only(spring_small, rng):
    model, _ = _fitted(StructuredEnergyNet(hidden=(8,), epochs=1, batch_size=16),
                       spring_small, "raw")
    for p in model.kinetic_.parameters():
        p[...] = 0.0
    model.kinetic_.mark_updated()
    states = rng.standard_normal((10, 2))
    np.testing.assert_allclose(model.predict(states), model.potential(states[:, :1]))


def test_polynomial_one_hot_returns_monomial(spring_small, rng):
    model, _ = _fitted(PolynomialCdn(system="spring-mass", epochs=1, batch_size=16),
                       spring_small, "raw")
    model.coef_[:] = 0.0
    model.coef_[model.library_.term_names().index("x^2")] = 1.0
    states = rng.standard_normal((7, 2))
    np.testing.assert_allclose(model.predict(states), states[:, 0] ** 2)
    assert model.equation() == "1.00*x^2"


def test_black_box_predict_is_pure(spring_small):
    model, train = _fitted(BlackBoxCdn(hidden=(8, 8), epochs=1, batch_size=16),
                           spring_small, "minmax")
    a = model.predict(train.states)
    b = model.predict(train.states)
    assert a.tobytes() == b.tobytes()
    np.testing.assert_array_equal(evaluate_invariant(model, train), a)


def test_predict_raw_matches_normalized_predict(spring_small):
    model, train = _fitted(BlackBoxCdn(hidden=(8,), epochs=1, batch_size=16),
                           spring_small, "minmax")
    np.testing.assert_allclose(model.predict_raw(train.raw_states()), model.predict(train.states),
                               atol=1e-12)


def test_raw_input_gradient_accounts_for_scaling(spring_small, rng):
    model, _ = _fitted(BlackBoxCdn(hidden=(8,), epochs=1, batch_size=16), spring_small,
                       "minmax")
    s = rng.uniform(-0.5, 0.5, (3, 2))
    _, g = model.value_and_grad_raw(s)
    h = 1e-6
    for d in range(2):
        e = np.zeros(2)
        e[d] = h
        num = (model.predict_raw(s + e) - model.predict_raw(s - e)) / (2 * h)
        np.testing.assert_allclose(g[:, d], num, rtol=1e-6, atol=1e-8)


# -- fitting ------------------------------------------------------------------

def test_fit_rejects_wrong_normalization(spring_small):
    train, _ = prepare_splits(spring_small, "raw")
    with pytest.raises(ConfigError, match="minmax"):
        BlackBoxCdn(epochs=1).fit(train)


def test_fit_needs_energies_when_aligning(spring_small):
    with pytest.raises(ConfigError):
        StructuredEnergyNet(epochs=1).fit(spring_small.states)
    with pytest.raises(ShapeError):
        StructuredEnergyNet(epochs=1).fit(spring_small.states[0], spring_small.energy0)


def test_fit_on_plain_arrays(spring_small):
    model = StructuredEnergyNet(hidden=(8,), epochs=2, batch_size=16)
    model.fit(spring_small.states, spring_small.energy0)
    assert len(model.history_) == 2


def test_non_finite_data_raises_with_location(spring_small):
    states = spring_small.states.copy()
    states[:, 3] = np.nan
    with pytest.raises(NonFiniteLossError) as info:
        PolynomialCdn(system="spring-mass", epochs=1, batch_size=16).fit(
            states, spring_small.energy0)
    assert info.value.epoch == 0 and info.value.batch == 0


def test_training_reduces_loss_and_is_seeded(spring_small):
    train, val = prepare_splits(spring_small, "raw")
    m1, hist = train_invariant(StructuredEnergyNet(hidden=(16, 16), epochs=15, batch_size=8,
                                                   seed=4), train, val)
    assert hist[-1]["train_loss"] < hist[0]["train_loss"]
    assert np.isfinite(hist[-1]["val_loss"])
    m2, _ = train_invariant(StructuredEnergyNet(hidden=(16, 16), epochs=15, batch_size=8,
                                                seed=4), train, val)
    assert m1.predict(val.states).tobytes() == m2.predict(val.states).tobytes()


def test_structured_net_learns_spring_energy_quickly():
    batch = generate_dataset(make_system("spring-mass"), 500, n_steps=49, seed=0)
    train, val = prepare_splits(batch, "raw")
    model = StructuredEnergyNet(hidden=(32, 32), epochs=20, batch_size=32, pairs_per_trajectory=4)
    model.fit(train)
    assert model.score(val.states, val.reference_energy()) > 0.99


def test_noisy_evaluation_uses_clean_reference():
    batch = add_noise(generate_dataset(make_system("pendulum"), 20, n_steps=9, seed=0), 0.01, 1)
    ref = batch.reference_energy()
    assert np.all(ref == ref[:, :1])
    assert not np.allclose(analytic_energy(batch.system, batch.states), ref)
