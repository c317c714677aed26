"""Physical systems, analytical energies and trajectory propagators.

Three unit-mass Hamiltonian systems are supported:

* projectile, state ``[x, y, vx, vy]``, ``E = (vx^2 + vy^2)/2 + g*y``
* pendulum (unit length), state ``[theta, w]``, ``H = w^2/2 - g*cos(theta)``
* spring-mass, state ``[x, v]``, ``E = k*x^2/2 + v^2/2``

Projectile and spring-mass trajectories use closed-form solutions; the
pendulum is integrated with an embedded Dormand-Prince 5(4) pair.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .exceptions import ConfigError, InputError, IntegrationError, UnsupportedSystemError

__all__ = [
    "SystemKind",
    "SystemSpec",
    "IntegratorConfig",
    "make_system",
    "analytic_energy",
    "step_exact",
    "propagate_exact",
    "integrate_rk45",
    "sample_initial",
]


class SystemKind(str, Enum):
    PROJECTILE = "projectile"
    PENDULUM = "pendulum"
    SPRING_MASS = "spring-mass"


_LAYOUT = {
    # state_dim, variable names, position dims, velocity dims, angular dims
    SystemKind.PROJECTILE: (4, ("x", "y", "vx", "vy"), (0, 1), (2, 3), ()),
    SystemKind.PENDULUM: (2, ("theta", "w"), (0,), (1,), (0,)),
    SystemKind.SPRING_MASS: (2, ("x", "v"), (0,), (1,), ()),
}


@dataclass(frozen=True)
class SystemSpec:
    """A physical system and its constants."""

    kind: SystemKind
    g: float = 9.81
    k: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "kind", SystemKind(self.kind))

    @property
    def state_dim(self) -> int:
        return _LAYOUT[self.kind][0]

    @property
    def variable_names(self) -> tuple:
        return _LAYOUT[self.kind][1]

    @property
    def position_dims(self) -> tuple:
        return _LAYOUT[self.kind][2]

    @property
    def velocity_dims(self) -> tuple:
        return _LAYOUT[self.kind][3]

    @property
    def angular_dims(self) -> tuple:
        return _LAYOUT[self.kind][4]

    @property
    def name(self) -> str:
        return self.kind.value

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "g": self.g, "k": self.k}

    @classmethod
    def from_dict(cls, d):
        return cls(SystemKind(d["kind"]), g=float(d["g"]), k=float(d["k"]))


def make_system(name) -> SystemSpec:
    """Build a :class:`SystemSpec` from a name such as ``"spring-mass"``."""
    if isinstance(name, SystemSpec):
        return name
    key = str(name).strip().lower().replace("_", "-")
    aliases = {"spring": "spring-mass", "springmass": "spring-mass"}
    key = aliases.get(key, key)
    try:
        return SystemSpec(SystemKind(key))
    except ValueError:
        valid = ", ".join(k.value for k in SystemKind)
        raise InputError(f"unknown system {name!r}; expected one of: {valid}") from None


@dataclass(frozen=True)
class IntegratorConfig:
    rtol: float = 1e-12
    atol: float = 1e-14
    max_internal_steps: int = 1_000_000
    safety: float = 0.9

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise ConfigError("rtol and atol must be positive")
        if self.max_internal_steps < 1:
            raise ConfigError("max_internal_steps must be >= 1")


def _check_states(sys, state):
    s = np.asarray(state, dtype=np.float64)
    if s.ndim == 0 or s.shape[-1] != sys.state_dim:
        raise InputError(
            f"{sys.name} states need trailing dimension {sys.state_dim}, got shape {s.shape}"
        )
    if not np.all(np.isfinite(s)):
        raise InputError("state contains non-finite entries")
    return s


def analytic_energy(sys: SystemSpec, state) -> np.ndarray:
    """Energy per unit mass; accepts a single state or any ``(..., D)`` stack."""
    s = _check_states(sys, state)
    if sys.kind is SystemKind.PROJECTILE:
        e = 0.5 * (s[..., 2] ** 2 + s[..., 3] ** 2) + sys.g * s[..., 1]
    elif sys.kind is SystemKind.PENDULUM:
        e = 0.5 * s[..., 1] ** 2 - sys.g * np.cos(s[..., 0])
    else:
        e = 0.5 * sys.k * s[..., 0] ** 2 + 0.5 * s[..., 1] ** 2
    return e if e.ndim else float(e)


def step_exact(sys: SystemSpec, state, dt):
    """Advance ``state`` by ``dt`` seconds with the closed-form solution.

    Only projectile and spring-mass have closed forms; the pendulum raises
    :class:`UnsupportedSystemError`.
    """
    if sys.kind is SystemKind.PENDULUM:
        raise UnsupportedSystemError("pendulum has no closed-form propagator; use integrate_rk45")
    s = _check_states(sys, state)
    dt = np.asarray(dt, dtype=np.float64)
    if np.any(dt < 0):
        raise InputError("dt must be non-negative")
    out = np.empty(np.broadcast_shapes(s.shape, dt.shape + (1,)) if dt.ndim else s.shape)
    if sys.kind is SystemKind.PROJECTILE:
        x, y, vx, vy = np.moveaxis(s, -1, 0)
        out[..., 0] = x + vx * dt
        out[..., 1] = y + vy * dt - 0.5 * sys.g * dt * dt
        out[..., 2] = vx
        out[..., 3] = vy - sys.g * dt
    else:
        w0 = np.sqrt(sys.k)
        c, sn = np.cos(w0 * dt), np.sin(w0 * dt)
        x, v = s[..., 0], s[..., 1]
        out[..., 0] = x * c + (v / w0) * sn
        out[..., 1] = v * c - x * w0 * sn
    return out


def propagate_exact(sys: SystemSpec, s0, n_steps: int, dt: float) -> np.ndarray:
    """Closed-form trajectory ``(..., n_steps + 1, D)`` evaluated directly from ``s0``.

    Each sample is computed from the initial state at ``t = k*dt`` rather than
    by chaining single steps, so no round-off accumulates along the trajectory.
    """
    s0 = _check_states(sys, s0)
    t = np.arange(n_steps + 1, dtype=np.float64) * dt
    return step_exact(sys, s0[..., None, :], t)


# Dormand-Prince 5(4) tableau
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)
_E = _B5 - _B4


def _pendulum_rhs(g):
    def rhs(y):
        out = np.empty_like(y)
        out[..., 0] = y[..., 1]
        out[..., 1] = -g * np.sin(y[..., 0])
        return out

    return rhs


def integrate_rk45(sys: SystemSpec, s0, n_steps: int, dt: float, cfg: IntegratorConfig = None):
    """Integrate the pendulum on the grid ``0, dt, ..., n_steps*dt``.

    ``s0`` may be a single state ``(D,)`` or a batch ``(B, D)``. A batch is
    advanced as one coupled system with a shared step size, and the error
    norm is the maximum over every component, so each trajectory is held to
    at least the accuracy it would get on its own. Internal steps are clipped
    so that every grid time is hit exactly.
    """
    if sys.kind is not SystemKind.PENDULUM:
        raise UnsupportedSystemError("integrate_rk45 is used for the pendulum only")
    if n_steps < 1:
        raise InputError("n_steps must be >= 1")
    if not dt > 0:
        raise InputError("dt must be positive")
    cfg = cfg or IntegratorConfig()
    s0 = _check_states(sys, s0)
    single = s0.ndim == 1
    y = np.atleast_2d(s0).copy()
    rhs = _pendulum_rhs(sys.g)

    out = np.empty((y.shape[0], n_steps + 1, y.shape[1]))
    out[:, 0] = y
    k = np.empty((7,) + y.shape)
    k[0] = rhs(y)
    t = 0.0
    h = min(dt, 1e-3)
    err_prev = 1e-4
    beta = 0.04
    alpha = 0.2 - 0.75 * beta
    n_internal = 0

    for i in range(1, n_steps + 1):
        t_target = i * dt
        while t < t_target:
            if n_internal >= cfg.max_internal_steps:
                raise IntegrationError(
                    f"exceeded max_internal_steps={cfg.max_internal_steps}", t_last=t
                )
            last = t + h >= t_target - 1e-15 * max(1.0, t_target)
            h_try = t_target - t if last else h
            if h_try <= 16 * np.finfo(float).eps * max(1.0, abs(t)):
                raise IntegrationError(f"step size underflow at t={t:.6g}", t_last=t)
            for s in range(1, 7):
                acc = y.copy()
                for j, a in enumerate(_A[s]):
                    if a:
                        acc += h_try * a * k[j]
                k[s] = rhs(acc)
            y_new = acc  # stage 7 argument is the 5th-order solution (FSAL)
            err_vec = h_try * np.tensordot(_E, k, axes=1)
            scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y), np.abs(y_new))
            err = float(np.max(np.abs(err_vec) / scale))
            n_internal += 1
            if err <= 1.0:
                t = t_target if last else t + h_try
                y = y_new
                k[0] = k[6]
                err = max(err, 1e-10)
                fac = cfg.safety * err ** (-alpha) * err_prev**beta
                fac = min(10.0, max(0.2, fac))
                err_prev = err
                if not last or fac < 1.0:
                    h = h_try * fac
            else:
                fac = max(0.2, cfg.safety * err ** (-0.2)) if np.isfinite(err) else 0.2
                h = h_try * fac
        out[:, i] = y
    return out[0] if single else out


def sample_initial(sys: SystemSpec, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw initial states from the per-system sampling box.

    * pendulum: theta ~ U[-pi/2, pi/2], w ~ U[-3, 3]
    * projectile: x = y = 0, vx, vy ~ U[2, 15]
    * spring-mass: x ~ U[-1, 1], v ~ U[-3, 3]
    """
    shape = () if size is None else (int(size),)
    if sys.kind is SystemKind.PENDULUM:
        theta = rng.uniform(-np.pi / 2, np.pi / 2, shape)
        w = rng.uniform(-3.0, 3.0, shape)
        return np.stack([theta, w], axis=-1)
    if sys.kind is SystemKind.PROJECTILE:
        v = rng.uniform(2.0, 15.0, shape + (2,))
        return np.concatenate([np.zeros(shape + (2,)), v], axis=-1)
    x = rng.uniform(-1.0, 1.0, shape)
    v = rng.uniform(-3.0, 3.0, shape)
    return np.stack([x, v], axis=-1)
