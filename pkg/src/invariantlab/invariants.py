"""Learned invariants and the conservation objective.

The objective for a scalar model ``f`` on a batch of trajectories is::

    mean_{i,t} (f(s[i,t+1]) - f(s[i,t]))^2                  temporal consistency
    + lambda_var * max(0, eps - Var_i f(s[i,0]))              variance hinge
    + lambda_align * mean_i (z(f(s[i,0])) - z(E(s[i,0])))^2   standardized alignment

where ``z`` standardizes over the batch with population statistics. All three
terms come with closed-form gradients with respect to the model outputs,
which are then pushed through the model by its own reverse pass.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .datagen import Normalization, Normalizer, TrajectoryBatch
from .dynamics import make_system
from .exceptions import (
    AlignmentDegenerateError,
    ConfigError,
    InputError,
    NonFiniteLossError,
    ShapeError,
)
from .neuralcore import AdamState, LrSchedule, adam_step, backward, forward, lr_at, make_mlp
from .symreg import FeatureLibrary

__all__ = [
    "ConservationLossConfig",
    "consistency_loss",
    "variance_hinge",
    "alignment_loss",
    "total_loss",
    "BlackBoxCdn",
    "PolynomialCdn",
    "StructuredEnergyNet",
    "train_invariant",
    "evaluate_invariant",
    "loss_gradient_check",
]

_STD_FLOOR = 1e-12
_PREDICT_CHUNK = 16384


@dataclass(frozen=True)
class ConservationLossConfig:
    lambda_var: float = 1.0
    var_epsilon: float = 0.1
    lambda_align: float = 0.2

    def __post_init__(self):
        if min(self.lambda_var, self.lambda_align) < 0:
            raise ConfigError("loss weights must be non-negative")
        if not self.var_epsilon > 0:
            raise ConfigError("var_epsilon must be positive")


def _consistency(values):
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] < 2:
        raise ShapeError(f"consistency needs a B x T array with T >= 2, got {v.shape}")
    d = np.diff(v, axis=1)
    n = d.size
    grad = np.zeros_like(v)
    grad[:, 1:] += 2.0 * d / n
    grad[:, :-1] -= 2.0 * d / n
    return float(np.sum(d * d) / n), grad


def _hinge(f0, cfg):
    f0 = np.asarray(f0, dtype=np.float64)
    if f0.ndim != 1 or f0.size < 2:
        raise ShapeError("variance hinge needs at least 2 initial values")
    c = f0 - f0.mean()
    var = float(np.mean(c * c))
    gap = cfg.var_epsilon - var
    if gap <= 0:
        return 0.0, np.zeros_like(f0)
    return cfg.lambda_var * gap, -cfg.lambda_var * 2.0 * c / f0.size


def _alignment(f0, e0):
    f0 = np.asarray(f0, dtype=np.float64)
    e0 = np.asarray(e0, dtype=np.float64)
    if f0.shape != e0.shape or f0.ndim != 1 or f0.size < 2:
        raise ShapeError("alignment needs two equal-length vectors of length >= 2")
    sf, se = f0.std(), e0.std()
    if sf < _STD_FLOOR or se < _STD_FLOOR:
        raise AlignmentDegenerateError("zero-variance batch in the alignment term")
    zf = (f0 - f0.mean()) / sf
    ze = (e0 - e0.mean()) / se
    u = zf - ze
    n = f0.size
    g = 2.0 * u / n
    grad = (g - g.mean() - zf * np.mean(g * zf)) / sf
    return float(np.mean(u * u)), grad


def consistency_loss(values) -> float:
    """Mean squared change of ``values`` (``B x T``) between consecutive steps."""
    return _consistency(values)[0]


def variance_hinge(initial_values, cfg: ConservationLossConfig = None) -> float:
    return _hinge(initial_values, cfg or ConservationLossConfig())[0]


def alignment_loss(f0, e0) -> float:
    return _alignment(f0, e0)[0]


def _objective(values, f0, e0, cfg):
    """Return ``(total, parts, d_values, d_f0)``."""
    lc, gc = _consistency(values)
    lh, gh = _hinge(f0, cfg)
    la, ga = 0.0, 0.0
    if cfg.lambda_align > 0:
        la, ga = _alignment(f0, e0)
    total = lc + lh + cfg.lambda_align * la
    parts = {"consistency": lc, "hinge": lh, "alignment": la}
    return total, parts, gc, gh + cfg.lambda_align * ga


class _InvariantModel(BaseEstimator):
    """Shared training loop for scalar invariant models.

    ``fit`` accepts a :class:`TrajectoryBatch` (normalization must match the
    model) or a plain ``B x T x D`` array plus the clean initial energies
    ``y``. Minibatches are made of whole trajectories; with
    ``pairs_per_trajectory=k`` each trajectory contributes ``k`` random
    consecutive-state pairs to the consistency term instead of all of them.
    """

    expected_normalization = Normalization.RAW

    # -- model-specific hooks -------------------------------------------------
    def _init_params(self, dim, rng):
        raise NotImplementedError

    def _parameters(self):
        raise NotImplementedError

    def _parameter_names(self):
        raise NotImplementedError

    def _forward(self, states):
        raise NotImplementedError

    def _backward(self, tape, dvalues, input_grad=True):
        """Return ``(param_grads, input_grads)``; ``input_grads`` may be None if not requested."""
        raise NotImplementedError

    def _mark_updated(self):
        pass

    # -- estimator API --------------------------------------------------------
    def _loss_config(self):
        return ConservationLossConfig(self.lambda_var, self.var_epsilon, self.lambda_align)

    def _schedule(self):
        return self.schedule if self.schedule is not None else LrSchedule(
            base_lr=self.lr, min_lr=min(self.lr, 1e-6))

    def _coerce(self, X, y):
        if isinstance(X, TrajectoryBatch):
            if X.normalization is not self.expected_normalization:
                raise ConfigError(
                    f"{type(self).__name__} expects {self.expected_normalization.value} inputs, "
                    f"got {X.normalization.value}"
                )
            if y is None:
                y = X.energy0
            return X.states, y, X.normalizer, X.system.name
        states = np.asarray(X, dtype=np.float64)
        if states.ndim != 3:
            raise ShapeError(f"expected B x T x D trajectories, got {states.shape}")
        return states, y, None, getattr(self, "system", None)

    def fit(self, X, y=None, validation=None):
        """Train on trajectories ``X``; ``y`` are clean energies at t=0 (alignment only)."""
        states, e0, normalizer, system = self._coerce(X, y)
        cfg = self._loss_config()
        if cfg.lambda_align > 0 and e0 is None:
            raise ConfigError("lambda_align > 0 needs initial energies (y)")
        e0 = np.zeros(len(states)) if e0 is None else np.asarray(e0, dtype=np.float64)
        B, T, D = states.shape
        if B < 2 or T < 2:
            raise ShapeError("need at least 2 trajectories of at least 2 states")
        self.system_ = system
        self.normalizer_ = normalizer if normalizer is not None else Normalizer("raw").fit(
            states[:, 0])
        self.n_features_in_ = D
        rng = np.random.default_rng(self.seed)
        self._init_params(D, rng)
        params = self._parameters()
        names = self._parameter_names()
        opt = AdamState.for_params(params)
        schedule = self._schedule()

        val = None
        if validation is not None:
            vs, ve, _, _ = self._coerce(validation, None)
            if ve is not None and len(vs) >= 2:
                val = self._draw(vs, np.arange(len(vs)), np.random.default_rng(self.seed + 1))
                val = val + (np.asarray(ve, dtype=np.float64),)

        self.history_ = []
        bs = max(2, int(self.batch_size))
        for epoch in range(int(self.epochs)):
            lr = lr_at(schedule, epoch)
            perm = rng.permutation(B)
            total, count = 0.0, 0
            for b, start in enumerate(range(0, B, bs)):
                idx = perm[start:start + bs]
                if idx.size < 2:
                    continue
                init, seq = self._draw(states, idx, rng)
                try:
                    loss, grads = self._loss_and_grads(init, seq, e0[idx], cfg)
                except AlignmentDegenerateError:
                    continue
                if not np.isfinite(loss):
                    raise NonFiniteLossError(
                        f"non-finite loss at epoch {epoch}, batch {b}", epoch=epoch, batch=b)
                adam_step(params, grads, opt, names, lr)
                self._mark_updated()
                total += loss
                count += 1
            row = {"epoch": epoch, "train_loss": total / max(count, 1), "val_loss": np.nan,
                   "lr": float(lr)}
            if val is not None:
                row["val_loss"] = self._eval_loss(val[0], val[1], val[2], cfg)
            self.history_.append(row)
            if self.verbose:
                print(f"epoch {epoch:4d}  train {row['train_loss']:.6g}  "
                      f"val {row['val_loss']:.6g}  lr {lr:.3g}")
        return self

    def _draw(self, states, idx, rng):
        init = states[idx, 0]
        k = self.pairs_per_trajectory
        if k is None:
            return init, states[idx]
        T = states.shape[1]
        t = rng.integers(0, T - 1, size=(idx.size, int(k)))
        a = states[idx[:, None], t]
        b = states[idx[:, None], t + 1]
        return init, np.stack([a, b], axis=2).reshape(-1, 2, states.shape[2])

    def _loss_and_grads(self, init, seq, e0, cfg):
        n0 = init.shape[0]
        flat = np.concatenate([init, seq.reshape(-1, seq.shape[-1])])
        values, tape = self._forward(flat)
        f0 = values[:n0]
        fseq = values[n0:].reshape(seq.shape[:2])
        loss, _, gseq, g0 = _objective(fseq, f0, e0, cfg)
        dvalues = np.concatenate([g0, gseq.ravel()])
        grads, _ = self._backward(tape, dvalues, input_grad=False)
        return loss, grads

    def _eval_loss(self, init, seq, e0, cfg):
        n0 = init.shape[0]
        flat = np.concatenate([init, seq.reshape(-1, seq.shape[-1])])
        values, _ = self._forward(flat)
        try:
            return _objective(values[n0:].reshape(seq.shape[:2]), values[:n0], e0, cfg)[0]
        except AlignmentDegenerateError:
            return np.nan

    def loss(self, X, y=None):
        """Objective on full trajectories ``X`` (no pair subsampling)."""
        states, e0, _, _ = self._coerce(X, y)
        cfg = self._loss_config()
        if e0 is None:
            e0 = np.zeros(len(states))
        return self._eval_loss(states[:, 0], states, np.asarray(e0, dtype=np.float64), cfg)

    def predict(self, states):
        """Invariant value for every state of shape ``(..., D)``, in model coordinates."""
        check_is_fitted(self, "n_features_in_")
        states = np.asarray(states, dtype=np.float64)
        if states.shape[-1:] != (self.n_features_in_,):
            raise InputError(f"expected states (..., {self.n_features_in_}), got {states.shape}")
        lead = states.shape[:-1]
        flat = states.reshape(-1, self.n_features_in_)
        # chunked so the forward tape of a large net stays small
        values = np.concatenate([self._forward(flat[i:i + _PREDICT_CHUNK])[0]
                                 for i in range(0, max(len(flat), 1), _PREDICT_CHUNK)])
        return values.reshape(lead)

    def predict_raw(self, raw_states):
        """Like :meth:`predict` but takes physical-unit states."""
        check_is_fitted(self, "normalizer_")
        return self.predict(self.normalizer_.transform(raw_states))

    def value_and_grad(self, states):
        """``(values, d values / d states)`` in model coordinates; ``states`` is ``N x D``."""
        check_is_fitted(self, "n_features_in_")
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        values, tape = self._forward(states)
        _, gin = self._backward(tape, np.ones_like(values))
        return values, gin

    def value_and_grad_raw(self, raw_states):
        check_is_fitted(self, "normalizer_")
        values, g = self.value_and_grad(self.normalizer_.transform(raw_states))
        return values, g / self.normalizer_.scale_

    def score(self, states, energies):
        """Pearson R^2 between the learned invariant and reference energies."""
        from .evalreport import pearson_r2

        return pearson_r2(self.predict(states).ravel(), np.asarray(energies).ravel())

    # -- checkpoint support ---------------------------------------------------
    def state_arrays(self):
        check_is_fitted(self, "n_features_in_")
        return [p.copy() for p in self._parameters()]

    def load_state_arrays(self, arrays, dim, system=None, normalizer=None):
        self.n_features_in_ = dim
        self.system_ = system
        self.normalizer_ = normalizer
        self._init_params(dim, np.random.default_rng(0))
        for p, a in zip(self._parameters(), arrays):
            if p.shape != a.shape:
                raise ShapeError(f"checkpoint array shape {a.shape} != {p.shape}")
            p[...] = a
        self._mark_updated()
        return self


def _common_init(obj, lambda_var, var_epsilon, lambda_align, epochs, batch_size,
                 pairs_per_trajectory, lr, schedule, seed, verbose):
    obj.lambda_var = lambda_var
    obj.var_epsilon = var_epsilon
    obj.lambda_align = lambda_align
    obj.epochs = epochs
    obj.batch_size = batch_size
    obj.pairs_per_trajectory = pairs_per_trajectory
    obj.lr = lr
    obj.schedule = schedule
    obj.seed = seed
    obj.verbose = verbose


class BlackBoxCdn(_InvariantModel):
    """Unconstrained MLP ``f(s)`` on min-max normalized states."""

    expected_normalization = Normalization.MINMAX

    def __init__(self, hidden=(256, 256, 256, 256), lambda_var=1.0, var_epsilon=0.1,
                 lambda_align=0.2, epochs=100, batch_size=128, pairs_per_trajectory=8,
                 lr=1e-3, schedule=None, seed=0, verbose=False):
        self.hidden = hidden
        _common_init(self, lambda_var, var_epsilon, lambda_align, epochs, batch_size,
                     pairs_per_trajectory, lr, schedule, seed, verbose)

    def _init_params(self, dim, rng):
        self.net_ = make_mlp(dim, tuple(self.hidden), 1, rng)

    def _parameters(self):
        return self.net_.parameters()

    def _parameter_names(self):
        return self.net_.parameter_names()

    def _mark_updated(self):
        self.net_.mark_updated()

    def _forward(self, states):
        y, tape = forward(self.net_, states)
        return y[:, 0], tape

    def _backward(self, tape, dvalues, input_grad=True):
        return backward(self.net_, tape, dvalues[:, None])


class PolynomialCdn(_InvariantModel):
    """Linear model ``f(s) = w . phi(s)`` over a :class:`FeatureLibrary`, raw states."""

    def __init__(self, system="pendulum", init_scale=0.1, lambda_var=1.0, var_epsilon=0.1,
                 lambda_align=0.2, epochs=256, batch_size=512, pairs_per_trajectory=8,
                 lr=1e-2, schedule=None, seed=0, verbose=False):
        self.system = system
        self.init_scale = init_scale
        _common_init(self, lambda_var, var_epsilon, lambda_align, epochs, batch_size,
                     pairs_per_trajectory, lr, schedule, seed, verbose)

    @property
    def library_(self):
        return FeatureLibrary(make_system(getattr(self, "system_", None) or self.system).name)

    def _init_params(self, dim, rng):
        lib = self.library_
        if lib.spec.state_dim != dim:
            raise ConfigError(f"library for {lib.spec.name} expects dimension "
                              f"{lib.spec.state_dim}, data has {dim}")
        self.coef_ = rng.normal(0.0, self.init_scale, lib.n_terms)

    def _parameters(self):
        return [self.coef_]

    def _parameter_names(self):
        return ["coef"]

    def _forward(self, states):
        phi = self.library_.transform(states)
        return phi @ self.coef_, (phi, states)

    def _backward(self, tape, dvalues, input_grad=True):
        phi, states = tape
        gw = phi.T @ dvalues
        if not input_grad:
            return [gw], None
        J = self.library_.jacobian(states)
        gin = np.einsum("n,m,nmd->nd", dvalues, self.coef_, J)
        return [gw], gin

    def equation(self, decimals=2):
        from .symreg import format_equation

        check_is_fitted(self, "coef_")
        return format_equation(self.library_, self.coef_, decimals)


class StructuredEnergyNet(_InvariantModel):
    """Separable energy ``H(s) = T(v) + V(q)`` with two independent MLPs."""

    def __init__(self, system="spring-mass", hidden=(128, 128), lambda_var=1.0,
                 var_epsilon=0.1, lambda_align=0.2, epochs=100, batch_size=128,
                 pairs_per_trajectory=8, lr=1e-3, schedule=None, seed=0, verbose=False):
        self.system = system
        self.hidden = hidden
        _common_init(self, lambda_var, var_epsilon, lambda_align, epochs, batch_size,
                     pairs_per_trajectory, lr, schedule, seed, verbose)

    def _partition(self):
        spec = make_system(getattr(self, "system_", None) or self.system)
        return list(spec.velocity_dims), list(spec.position_dims)

    def _init_params(self, dim, rng):
        vel, pos = self._partition()
        if len(vel) + len(pos) != dim:
            raise ConfigError("position/velocity partition does not match the data dimension")
        self.kinetic_ = make_mlp(len(vel), tuple(self.hidden), 1, rng)
        self.potential_ = make_mlp(len(pos), tuple(self.hidden), 1, rng)

    def _parameters(self):
        return self.kinetic_.parameters() + self.potential_.parameters()

    def _parameter_names(self):
        return ([f"kinetic.{n}" for n in self.kinetic_.parameter_names()]
                + [f"potential.{n}" for n in self.potential_.parameter_names()])

    def _mark_updated(self):
        self.kinetic_.mark_updated()
        self.potential_.mark_updated()

    def _forward(self, states):
        vel, pos = self._partition()
        t_out, t_tape = forward(self.kinetic_, states[:, vel])
        v_out, v_tape = forward(self.potential_, states[:, pos])
        return t_out[:, 0] + v_out[:, 0], (t_tape, v_tape, states.shape)

    def _backward(self, tape, dvalues, input_grad=True):
        t_tape, v_tape, shape = tape
        vel, pos = self._partition()
        gt, gin_t = backward(self.kinetic_, t_tape, dvalues[:, None])
        gv, gin_v = backward(self.potential_, v_tape, dvalues[:, None])
        gin = np.zeros(shape)
        gin[:, vel] = gin_t
        gin[:, pos] = gin_v
        return gt + gv, gin

    def kinetic(self, velocities):
        return forward(self.kinetic_, np.atleast_2d(velocities))[0][:, 0]

    def potential(self, positions):
        return forward(self.potential_, np.atleast_2d(positions))[0][:, 0]


def total_loss(model: _InvariantModel, batch: TrajectoryBatch, cfg: ConservationLossConfig = None):
    """Objective and parameter gradients on whole trajectories of ``batch``."""
    if batch.normalization is not model.expected_normalization:
        raise ConfigError(
            f"{type(model).__name__} expects {model.expected_normalization.value} inputs, "
            f"got {batch.normalization.value}"
        )
    cfg = cfg or model._loss_config()
    e0 = batch.energy0 if batch.energy0 is not None else np.zeros(len(batch))
    return model._loss_and_grads(batch.states[:, 0], batch.states, e0, cfg)


def train_invariant(model: _InvariantModel, train: TrajectoryBatch, val: TrajectoryBatch = None,
                    **params):
    """Fit ``model`` (with optional parameter overrides); returns ``(model, history)``."""
    if params:
        model.set_params(**params)
    model.fit(train, validation=val)
    return model, model.history_


def evaluate_invariant(model: _InvariantModel, batch: TrajectoryBatch) -> np.ndarray:
    """``B x T`` invariant values over every state of ``batch``."""
    if batch.normalization is not model.expected_normalization:
        raise ConfigError(
            f"{type(model).__name__} expects {model.expected_normalization.value} inputs, "
            f"got {batch.normalization.value}"
        )
    return model.predict(batch.states)


def loss_gradient_check(model: _InvariantModel, batch: TrajectoryBatch, rng: np.random.Generator,
                        n_probes: int = 60, h: float = 1e-5) -> float:
    """Worst relative error of the objective's parameter gradient and of the
    input gradient from :meth:`value_and_grad`, against central differences.

    The objective is blind to an additive constant, so some gradients are
    exactly zero; the 1e-5 denominator floor keeps central-difference
    round-off (about 1e-11 at h=1e-5) from reading as a relative error.
    """
    check_is_fitted(model, "n_features_in_")
    _, grads = total_loss(model, batch)
    params = model._parameters()

    def objective():
        model._mark_updated()
        return total_loss(model, batch)[0]

    worst = 0.0

    def update(numeric, analytic):
        nonlocal worst
        denom = max(abs(numeric), abs(analytic), 1e-5)
        worst = max(worst, abs(numeric - analytic) / denom)

    for _ in range(n_probes):
        j = int(rng.integers(len(params)))
        idx = tuple(int(rng.integers(n)) for n in params[j].shape)
        old = params[j][idx]
        params[j][idx] = old + h
        fp = objective()
        params[j][idx] = old - h
        fm = objective()
        params[j][idx] = old
        update((fp - fm) / (2 * h), grads[j][idx])
    model._mark_updated()

    x = batch.states[:4, 0].copy()
    _, gin = model.value_and_grad(x)
    for i in range(x.shape[0]):
        for d in range(x.shape[1]):
            xp, xm = x.copy(), x.copy()
            xp[i, d] += h
            xm[i, d] -= h
            numeric = (model.predict(xp)[i] - model.predict(xm)[i]) / (2 * h)
            update(numeric, gin[i, d])
    return worst
