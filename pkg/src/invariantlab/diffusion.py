"""Conditional DDPM over one-step state changes, with guided rollouts.

The denoiser sees ``[x_t, s, c, emb(t)]``: the noised (rescaled) state change,
the current standardized state, the standardized CDN invariant at that state,
and a sinusoidal embedding of the diffusion step. Rollouts sample a change,
add it, return to physical units, and nudge the state toward the structured
energy network's initial level set.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .datagen import Normalization, Normalizer, TrajectoryBatch
from .exceptions import (
    ConfigError,
    InputError,
    NonFiniteLossError,
    RolloutDivergedError,
    ShapeError,
)
from .neuralcore import (
    AdamState,
    SinusoidalEmbedding,
    adam_step,
    backward,
    embed_timestep,
    forward,
    lr_at,
    make_mlp,
)

__all__ = [
    "NoiseSchedule",
    "forward_diffuse",
    "DiffusionTransitionModel",
    "train_ddpm",
    "sample_delta",
    "project_energy",
    "RolloutConfig",
    "rollout",
]

_DETERMINISTIC_RTOL = 1e-9  # relative std below which a delta dimension counts as constant


@dataclass(frozen=True)
class NoiseSchedule:
    n_diffusion_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.n_diffusion_steps < 1:
            raise ConfigError("n_diffusion_steps must be >= 1")
        b = self.betas
        if not np.all((b > 0) & (b < 1)):
            raise ConfigError("betas must lie in (0, 1)")

    @property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.n_diffusion_steps)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)


def forward_diffuse(delta, t, schedule: NoiseSchedule, rng: np.random.Generator, noise=None):
    """``x_t = sqrt(abar_t) * delta + sqrt(1 - abar_t) * noise``; returns ``(x_t, noise)``."""
    delta = np.asarray(delta, dtype=np.float64)
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= schedule.n_diffusion_steps):
        raise InputError(f"diffusion step out of range [0, {schedule.n_diffusion_steps})")
    if noise is None:
        noise = rng.standard_normal(delta.shape)
    ab = schedule.alpha_bars[t]
    if delta.ndim > 1 and np.ndim(ab):
        ab = ab[:, None]
    return np.sqrt(ab) * delta + np.sqrt(1.0 - ab) * noise, noise


class DiffusionTransitionModel(BaseEstimator):
    """Noise-prediction DDPM for ``delta = s[t+1] - s[t]`` on standardized states.

    State changes are rescaled per dimension to unit variance before
    diffusion; ``sample`` undoes the rescaling.
    """

    def __init__(self, hidden=(256, 256, 256), n_diffusion_steps=100, beta_start=1e-4,
                 beta_end=0.02, embed_dim=32, epochs=50, batch_size=256,
                 transitions_per_trajectory=8, lr=1e-3, lr_schedule=None,
                 shuffle_conditioning=False, seed=0, verbose=False):
        self.hidden = hidden
        self.n_diffusion_steps = n_diffusion_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.embed_dim = embed_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.transitions_per_trajectory = transitions_per_trajectory
        self.lr = lr
        self.lr_schedule = lr_schedule
        self.shuffle_conditioning = shuffle_conditioning
        self.seed = seed
        self.verbose = verbose

    @property
    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.n_diffusion_steps, self.beta_start, self.beta_end)

    @property
    def embedding(self) -> SinusoidalEmbedding:
        return SinusoidalEmbedding(self.embed_dim)

    def _init_net(self, dim, rng):
        self.state_dim_ = dim
        self.net_ = make_mlp(2 * dim + 1 + self.embed_dim, tuple(self.hidden), dim, rng)

    def _inputs(self, x_t, s, c, t):
        return np.concatenate([x_t, s, c[:, None], embed_timestep(self.embedding, t)], axis=1)

    def fit(self, X, y=None, cdn=None):
        """Train on a standardized :class:`TrajectoryBatch`.

        ``cdn`` is a fitted invariant model; its value at each current state
        is the conditioning scalar. Without one the scalar is held at zero.
        """
        if not isinstance(X, TrajectoryBatch):
            raise InputError("DiffusionTransitionModel.fit expects a TrajectoryBatch")
        if X.normalization is not Normalization.STANDARDIZE:
            raise ConfigError(f"diffusion model expects standardized states, got "
                              f"{X.normalization.value}")
        states = X.states
        B, T, D = states.shape
        rng = np.random.default_rng(self.seed)
        self.normalizer_ = X.normalizer
        deltas = np.diff(states, axis=1)
        flat = deltas.reshape(-1, D)
        self.delta_mean_ = flat.mean(axis=0)
        std = flat.std(axis=0)
        # A dimension whose change is constant up to roundoff (e.g. projectile
        # velocities) is deterministic: std 0 makes sampling return its mean.
        std[std <= _DETERMINISTIC_RTOL * max(np.abs(flat).max(), np.finfo(float).tiny)] = 0.0
        self.delta_std_ = std
        if cdn is not None:
            cond = cdn.predict_raw(X.raw_states()[:, :-1])
            self.cond_mean_ = float(cond.mean())
            self.cond_std_ = float(cond.std()) or 1.0
            cond = (cond - self.cond_mean_) / self.cond_std_
        else:
            cond = np.zeros((B, T - 1))
            self.cond_mean_, self.cond_std_ = 0.0, 1.0
        target = self._standardize_delta(deltas)
        self._init_net(D, rng)
        params = self.net_.parameters()
        names = self.net_.parameter_names()
        opt = AdamState.for_params(params, lr=self.lr)
        sched = self.schedule
        K = int(self.transitions_per_trajectory)
        bs = int(self.batch_size)

        self.history_ = []
        for epoch in range(int(self.epochs)):
            lr = self.lr if self.lr_schedule is None else lr_at(self.lr_schedule, epoch)
            ti = rng.integers(0, T - 1, size=(B, K)).ravel()
            bi = np.repeat(np.arange(B), K)
            order = rng.permutation(bi.size)
            bi, ti = bi[order], ti[order]
            total, count = 0.0, 0
            for b, start in enumerate(range(0, bi.size, bs)):
                i, j = bi[start:start + bs], ti[start:start + bs]
                n = i.size
                s_cur = states[i, j]
                c_cur = cond[i, j]
                if self.shuffle_conditioning:
                    perm = rng.permutation(n)
                    s_cur, c_cur = s_cur[perm], c_cur[perm]
                step = rng.integers(0, sched.n_diffusion_steps, size=n)
                x_t, noise = forward_diffuse(target[i, j], step, sched, rng)
                pred, tape = forward(self.net_, self._inputs(x_t, s_cur, c_cur, step))
                err = pred - noise
                loss = float(np.mean(err * err))
                if not np.isfinite(loss):
                    raise NonFiniteLossError(f"non-finite loss at epoch {epoch}, batch {b}",
                                             epoch=epoch, batch=b)
                grads, _ = backward(self.net_, tape, 2.0 * err / err.size)
                adam_step(params, grads, opt, names, lr)
                self.net_.mark_updated()
                total += loss * n
                count += n
            self.history_.append({"epoch": epoch, "train_loss": total / count, "lr": float(lr)})
            if self.verbose:
                print(f"epoch {epoch:4d}  denoise loss {total / count:.6g}")
        return self

    def _standardize_delta(self, delta):
        """Scale state changes to unit variance; deterministic dimensions map to 0."""
        live = self.delta_std_ > 0
        return np.where(live, (delta - self.delta_mean_) / np.where(live, self.delta_std_, 1.0),
                        0.0)

    def denoising_loss(self, X, cdn=None, rng=None, n_samples=20000):
        """Monte-Carlo noise-prediction loss on a standardized batch."""
        check_is_fitted(self, "net_")
        rng = rng or np.random.default_rng(0)
        states = X.states
        B, T, D = states.shape
        i = rng.integers(0, B, n_samples)
        j = rng.integers(0, T - 1, n_samples)
        s_cur = states[i, j]
        delta = self._standardize_delta(states[i, j + 1] - s_cur)
        if cdn is not None:
            c = (cdn.predict_raw(X.raw_states()[i, j]) - self.cond_mean_) / self.cond_std_
        else:
            c = np.zeros(n_samples)
        step = rng.integers(0, self.n_diffusion_steps, n_samples)
        x_t, noise = forward_diffuse(delta, step, self.schedule, rng)
        pred = forward(self.net_, self._inputs(x_t, s_cur, c, step))[0]
        return float(np.mean((pred - noise) ** 2))

    def sample(self, s_std, f_raw, rng: np.random.Generator, return_trace=False):
        """Ancestral sampling of standardized-state changes for ``N x D`` states.

        ``f_raw`` is the unscaled CDN value at each state.
        """
        check_is_fitted(self, "net_")
        s_std = np.atleast_2d(np.asarray(s_std, dtype=np.float64))
        N, D = s_std.shape
        if D != self.state_dim_:
            raise ShapeError(f"expected states (N, {self.state_dim_}), got {s_std.shape}")
        c = (np.broadcast_to(np.asarray(f_raw, dtype=np.float64), (N,)) - self.cond_mean_)
        c = c / self.cond_std_
        sched = self.schedule
        betas, alphas, abar = sched.betas, sched.alphas, sched.alpha_bars
        x = rng.standard_normal((N, D))
        trace = []
        for t in range(sched.n_diffusion_steps - 1, -1, -1):
            eps = forward(self.net_, self._inputs(x, s_std, c, np.full(N, t)))[0]
            x = (x - betas[t] / np.sqrt(1.0 - abar[t]) * eps) / np.sqrt(alphas[t])
            if t > 0:
                var = betas[t] * (1.0 - abar[t - 1]) / (1.0 - abar[t])
                x = x + np.sqrt(var) * rng.standard_normal((N, D))
            if return_trace:
                trace.append(x.copy())
        delta = x * self.delta_std_ + self.delta_mean_
        return (delta, trace) if return_trace else delta

    def state_arrays(self):
        check_is_fitted(self, "net_")
        extra = [self.delta_mean_, self.delta_std_, np.array([self.cond_mean_, self.cond_std_])]
        return [p.copy() for p in self.net_.parameters()] + extra

    def load_state_arrays(self, arrays, dim, normalizer=None):
        self._init_net(dim, np.random.default_rng(0))
        n = len(self.net_.parameters())
        self.net_.set_parameters(arrays[:n])
        self.delta_mean_, self.delta_std_ = arrays[n], arrays[n + 1]
        self.cond_mean_, self.cond_std_ = (float(v) for v in arrays[n + 2])
        self.normalizer_ = normalizer
        return self


def train_ddpm(model: DiffusionTransitionModel, batch: TrajectoryBatch, cdn=None,
               schedule: NoiseSchedule = None, epochs=None, batch_size=None, seed=None):
    overrides = {k: v for k, v in {"epochs": epochs, "batch_size": batch_size,
                                    "seed": seed}.items() if v is not None}
    if schedule is not None:
        overrides.update(n_diffusion_steps=schedule.n_diffusion_steps,
                         beta_start=schedule.beta_start, beta_end=schedule.beta_end)
    return model.set_params(**overrides).fit(batch, cdn=cdn)


def sample_delta(model: DiffusionTransitionModel, s_t, f_t, schedule=None, rng=None):
    """Sample one state change (standardized units) for a state or a stack of states."""
    if schedule is not None and schedule != model.schedule:
        raise ConfigError("schedule does not match the one the model was trained with")
    single = np.ndim(s_t) == 1
    out = model.sample(s_t, f_t, rng if rng is not None else np.random.default_rng())
    return out[0] if single else out


def project_energy(s, H0, se, eps: float = 1e-8):
    """One first-order step of ``s`` toward the level set ``{H = H0}``.

    ``se`` is either a fitted invariant model (evaluated in physical units via
    ``value_and_grad_raw``) or a callable returning ``(values, grads)``.
    """
    s = np.asarray(s, dtype=np.float64)
    single = s.ndim == 1
    s2 = np.atleast_2d(s)
    if hasattr(se, "value_and_grad_raw"):
        H, g = se.value_and_grad_raw(s2)
    else:
        H, g = se(s2)
    H = np.asarray(H, dtype=np.float64).reshape(-1)
    g = np.asarray(g, dtype=np.float64).reshape(s2.shape)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite energy gradient during projection")
    r = H - np.broadcast_to(np.asarray(H0, dtype=np.float64), H.shape)
    out = s2 - (r / (np.sum(g * g, axis=1) + eps))[:, None] * g
    return out[0] if single else out


@dataclass
class RolloutConfig:
    horizon: int = 199  # generated steps; 200 states including s0
    projection_steps_per_sample: int = 1
    projection_epsilon: float = 1e-8
    guidance_energy_model: object = None

    def __post_init__(self):
        if self.projection_epsilon <= 0:
            raise ConfigError("projection_epsilon must be positive")
        if self.horizon < 0 or self.projection_steps_per_sample < 0:
            raise ConfigError("horizon and projection steps must be non-negative")


def rollout(model: DiffusionTransitionModel, s0, cfg: RolloutConfig = None, cdn=None,
            norm_stats: Normalizer = None, rng: np.random.Generator = None) -> np.ndarray:
    """Generate ``(horizon + 1) x D`` raw-unit trajectories from raw ``s0``.

    ``s0`` may be ``(D,)`` or ``(B, D)``; batched initial states are rolled
    out together with independent noise.
    """
    cfg = cfg or RolloutConfig()
    norm = norm_stats if norm_stats is not None else model.normalizer_
    rng = rng if rng is not None else np.random.default_rng()
    s0 = np.asarray(s0, dtype=np.float64)
    single = s0.ndim == 1
    s = np.atleast_2d(s0).copy()
    traj = np.empty((s.shape[0], cfg.horizon + 1, s.shape[1]))
    traj[:, 0] = s
    se = cfg.guidance_energy_model
    H0 = se.predict_raw(s) if se is not None and cfg.projection_steps_per_sample else None
    for step in range(1, cfg.horizon + 1):
        f = cdn.predict_raw(s) if cdn is not None else np.zeros(s.shape[0])
        s_std = norm.transform(s)
        s = norm.inverse_transform(s_std + model.sample(s_std, f, rng))
        if H0 is not None:
            for _ in range(cfg.projection_steps_per_sample):
                s = project_energy(s, H0, se, cfg.projection_epsilon)
        if not np.all(np.isfinite(s)):
            raise RolloutDivergedError(f"rollout produced non-finite state at step {step}",
                                       step=step)
        traj[:, step] = s
    return traj[0] if single else traj
