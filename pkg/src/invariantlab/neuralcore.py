"""A small float64 multilayer perceptron with hand-written reverse mode.

Networks are stacks of affine layers followed by SiLU or identity
activations. ``forward`` returns the output together with a tape holding the
intermediate values; ``backward`` consumes the tape and returns gradients with
respect to every parameter *and* the input, which the energy projection needs.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import expit

from .exceptions import ConfigError, OptimizerError, ShapeError, StaleTapeError

__all__ = [
    "Activation",
    "DenseNet",
    "Tape",
    "make_mlp",
    "forward",
    "backward",
    "AdamState",
    "adam_step",
    "ScheduleKind",
    "LrSchedule",
    "lr_at",
    "SinusoidalEmbedding",
    "embed_timestep",
    "finite_difference_check",
]


class Activation(str, Enum):
    SILU = "silu"
    IDENTITY = "identity"


def silu(x):
    return x * expit(x)


def silu_grad(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


@dataclass
class Layer:
    weight: np.ndarray  # out x in
    bias: np.ndarray  # out
    activation: Activation = Activation.SILU


@dataclass
class Tape:
    inputs: list
    preacts: list
    version: int
    net_id: int


class DenseNet:
    """Feedforward network; ``layers`` are applied in order."""

    def __init__(self, layers):
        self.layers = list(layers)
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.weight.shape[1] != prev.weight.shape[0]:
                raise ShapeError(
                    f"layer shapes do not chain: {prev.weight.shape} -> {nxt.weight.shape}"
                )
        self._version = 0

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def widths(self) -> list:
        return [self.in_dim] + [layer.weight.shape[0] for layer in self.layers]

    def parameters(self) -> list:
        """Flat list ``[W0, b0, W1, b1, ...]`` of the live arrays."""
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def parameter_names(self) -> list:
        names = []
        for i in range(len(self.layers)):
            names += [f"layers.{i}.weight", f"layers.{i}.bias"]
        return names

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def mark_updated(self):
        """Invalidate outstanding tapes after an in-place parameter change."""
        self._version += 1

    def set_parameters(self, arrays):
        params = self.parameters()
        if len(arrays) != len(params):
            raise ShapeError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            a = np.asarray(a, dtype=np.float64)
            if a.shape != p.shape:
                raise ShapeError(f"parameter shape {a.shape} != {p.shape}")
            p[...] = a
        self.mark_updated()

    def config(self) -> dict:
        return {"widths": self.widths, "activations": [l.activation.value for l in self.layers]}

    def copy(self) -> "DenseNet":
        return DenseNet(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def __call__(self, x):
        return forward(self, x)[0]


def make_mlp(in_dim: int, hidden, out_dim: int, rng: np.random.Generator) -> DenseNet:
    """SiLU hidden layers, identity output; Glorot-uniform weights, zero biases."""
    widths = [in_dim, *hidden, out_dim]
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        act = Activation.IDENTITY if i == len(widths) - 2 else Activation.SILU
        layers.append(Layer(rng.uniform(-a, a, (fan_out, fan_in)), np.zeros(fan_out), act))
    return DenseNet(layers)


def forward(net: DenseNet, x):
    """Evaluate ``net`` on ``x`` of shape ``(in_dim,)`` or ``(N, in_dim)``."""
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1:] != (net.in_dim,) or h.ndim > 2:
        raise ShapeError(f"expected input (..., {net.in_dim}), got {h.shape}")
    inputs, preacts = [], []
    for layer in net.layers:
        inputs.append(h)
        z = h @ layer.weight.T + layer.bias
        preacts.append(z)
        h = silu(z) if layer.activation is Activation.SILU else z
    return h, Tape(inputs, preacts, net._version, id(net))


def backward(net: DenseNet, tape: Tape, dy):
    """Reverse pass. Returns ``(param_grads, input_grad)``.

    ``param_grads`` follows the order of :meth:`DenseNet.parameters`. For a
    batched forward the parameter gradients are summed over the batch.
    """
    if tape.net_id != id(net) or tape.version != net._version:
        raise StaleTapeError("tape does not belong to the current parameters of this network")
    g = np.asarray(dy, dtype=np.float64)
    if g.shape != tape.preacts[-1].shape:
        raise ShapeError(f"dy shape {g.shape} != output shape {tape.preacts[-1].shape}")
    grads = [None] * (2 * len(net.layers))
    for i in range(len(net.layers) - 1, -1, -1):
        layer, z, h = net.layers[i], tape.preacts[i], tape.inputs[i]
        if layer.activation is Activation.SILU:
            g = g * silu_grad(z)
        if g.ndim == 1:
            grads[2 * i] = np.outer(g, h)
            grads[2 * i + 1] = g.copy()
        else:
            grads[2 * i] = g.T @ h
            grads[2 * i + 1] = g.sum(axis=0)
        g = g @ layer.weight
    return grads, g


@dataclass
class AdamState:
    """Bias-corrected Adam moments for a fixed list of parameter arrays."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kwargs):
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params],
                   **kwargs)


def adam_step(params, grads, state: AdamState, names=None, lr=None):
    """Update ``params`` in place and advance ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state have different lengths")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ShapeError(f"gradient {i} shape {g.shape} != parameter {params[i].shape}")
        if not np.all(np.isfinite(g)):
            name = names[i] if names else f"param[{i}]"
            raise OptimizerError(f"non-finite gradient in {name}")
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


class ScheduleKind(str, Enum):
    CONSTANT = "constant"
    WARMUP_COSINE_RESTARTS = "warmup_cosine_restarts"


@dataclass(frozen=True)
class LrSchedule:
    kind: ScheduleKind = ScheduleKind.CONSTANT
    base_lr: float = 1e-3
    min_lr: float = 1e-6
    warmup_epochs: int = 0
    restart_period: int = 50
    period_multiplier: int = 2

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive")
        if not 0 < self.min_lr <= self.base_lr:
            raise ConfigError("min_lr must lie in (0, base_lr]")
        if self.restart_period < 1 or self.period_multiplier < 1 or self.warmup_epochs < 0:
            raise ConfigError("restart_period and period_multiplier must be >= 1")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """Learning rate at ``epoch``.

    Warmup ramps linearly from ``min_lr`` (the positive floor) to ``base_lr``;
    afterwards cosine annealing runs from ``base_lr`` to ``min_lr`` and restarts
    with periods ``P, P*m, P*m^2, ...``.
    """
    if schedule.kind is ScheduleKind.CONSTANT:
        return schedule.base_lr
    base, lo = schedule.base_lr, schedule.min_lr
    w = schedule.warmup_epochs
    if epoch < w:
        return lo + (base - lo) * epoch / w
    e = epoch - w
    period = schedule.restart_period
    while e >= period:
        e -= period
        period *= schedule.period_multiplier
    return lo + 0.5 * (base - lo) * (1.0 + np.cos(np.pi * e / period))


@dataclass(frozen=True)
class SinusoidalEmbedding:
    dim: int = 32
    max_period: float = 10_000.0

    def __post_init__(self):
        if self.dim < 2 or self.dim % 2:
            raise ConfigError(f"embedding dim must be even and >= 2, got {self.dim}")

    def frequencies(self) -> np.ndarray:
        half = self.dim // 2
        if half == 1:
            return np.ones(1)
        return self.max_period ** (-np.arange(half) / (half - 1))


def embed_timestep(emb: SinusoidalEmbedding, t) -> np.ndarray:
    """Interleaved ``[sin(t*f0), cos(t*f0), sin(t*f1), ...]``; ``t`` scalar or 1-D."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ConfigError("timestep must be non-negative")
    ang = t[..., None] * emb.frequencies()
    out = np.empty(t.shape + (emb.dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def finite_difference_check(net: DenseNet, x, rng: np.random.Generator, n_probes: int = 100,
                            h: float = 1e-5) -> float:
    """Worst relative error between backprop and central differences.

    The scalar probed is ``sum(r * net(x))`` for a fixed random ``r``; each
    probe perturbs one randomly chosen parameter or input entry.
    """
    x = np.array(x, dtype=np.float64)
    y, tape = forward(net, x)
    r = rng.standard_normal(y.shape)
    pgrads, xgrad = backward(net, tape, r)

    def objective():
        return float(np.sum(r * forward(net, x)[0]))

    params = net.parameters()
    worst = 0.0
    for _ in range(n_probes):
        if rng.random() < 0.25:
            target, analytic = x, xgrad
        else:
            j = int(rng.integers(len(params)))
            target, analytic = params[j], pgrads[j]
        idx = tuple(int(rng.integers(n)) for n in target.shape)
        old = target[idx]
        target[idx] = old + h
        fp = objective()
        target[idx] = old - h
        fm = objective()
        target[idx] = old
        numeric = (fp - fm) / (2 * h)
        denom = max(abs(numeric), abs(analytic[idx]), 1e-6)
        worst = max(worst, abs(numeric - analytic[idx]) / denom)
    net.mark_updated()
    return worst
