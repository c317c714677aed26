"""Trajectory datasets: generation, noise, normalization, splitting and I/O."""

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import fileformat
from .dynamics import (
    SystemKind,
    SystemSpec,
    analytic_energy,
    integrate_rk45,
    propagate_exact,
    sample_initial,
)
from .exceptions import FormatError, IntegrationError, NormalizationError, SplitError, StateError

__all__ = [
    "Normalization",
    "Normalizer",
    "TrajectoryBatch",
    "SplitSpec",
    "generate_dataset",
    "add_noise",
    "normalize",
    "split",
    "prepare_splits",
    "save_batch",
    "load_batch",
]

DEFAULT_DT = 0.005
DEFAULT_STEPS = 199  # 200 samples per trajectory


class Normalization(str, Enum):
    RAW = "raw"
    MINMAX = "minmax"
    STANDARDIZE = "standardize"


class Normalizer(TransformerMixin, BaseEstimator):
    """Per-dimension affine map fitted on ``(..., D)`` state arrays.

    ``mode="minmax"`` maps the fitted range onto ``[0, 1]``;
    ``mode="standardize"`` subtracts the mean and divides by the population
    std; ``mode="raw"`` is the identity.
    """

    def __init__(self, mode="raw"):
        self.mode = mode

    def fit(self, X, y=None):
        mode = Normalization(self.mode)
        X = np.asarray(X, dtype=np.float64)
        flat = X.reshape(-1, X.shape[-1])
        D = flat.shape[1]
        if mode is Normalization.RAW:
            self.offset_ = np.zeros(D)
            self.scale_ = np.ones(D)
        elif mode is Normalization.MINMAX:
            lo, hi = flat.min(axis=0), flat.max(axis=0)
            self._check_degenerate(hi - lo, "hi == lo")
            self.offset_, self.scale_ = lo, hi - lo
        else:
            mean, std = flat.mean(axis=0), flat.std(axis=0)
            self._check_degenerate(std, "std == 0")
            self.offset_, self.scale_ = mean, std
        self.n_features_in_ = D
        return self

    @staticmethod
    def _check_degenerate(scale, what):
        bad = np.flatnonzero(~(scale > 0))
        if bad.size:
            raise NormalizationError(f"degenerate dimension {int(bad[0])}: {what}")

    def transform(self, X):
        check_is_fitted(self, "scale_")
        X = np.asarray(X, dtype=np.float64)
        if Normalization(self.mode) is Normalization.RAW:
            return X.copy()
        return (X - self.offset_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self, "scale_")
        X = np.asarray(X, dtype=np.float64)
        if Normalization(self.mode) is Normalization.RAW:
            return X.copy()
        return X * self.scale_ + self.offset_

    def stats(self) -> dict:
        """``{"lo", "hi"}`` for min-max, ``{"mean", "std"}`` for standardization."""
        check_is_fitted(self, "scale_")
        mode = Normalization(self.mode)
        if mode is Normalization.MINMAX:
            return {"lo": self.offset_.tolist(), "hi": (self.offset_ + self.scale_).tolist()}
        if mode is Normalization.STANDARDIZE:
            return {"mean": self.offset_.tolist(), "std": self.scale_.tolist()}
        return {}

    def to_dict(self) -> dict:
        check_is_fitted(self, "scale_")
        return {"mode": Normalization(self.mode).value, "offset": self.offset_.tolist(),
                "scale": self.scale_.tolist()}

    @classmethod
    def from_dict(cls, d):
        norm = cls(d["mode"])
        norm.offset_ = np.asarray(d["offset"], dtype=np.float64)
        norm.scale_ = np.asarray(d["scale"], dtype=np.float64)
        norm.n_features_in_ = norm.offset_.size
        return norm


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.9
    seed: int = 42

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise SplitError("train_fraction must lie strictly between 0 and 1")

    def indices(self, n: int):
        """Trajectory-level ``(train_idx, val_idx)`` from a seeded permutation."""
        if n < 2:
            raise SplitError(f"need at least 2 trajectories to split, got {n}")
        perm = np.random.default_rng(self.seed).permutation(n)
        n_train = min(max(int(round(self.train_fraction * n)), 1), n - 1)
        return np.sort(perm[:n_train]), np.sort(perm[n_train:])


@dataclass
class TrajectoryBatch:
    """``B x T x D`` states plus provenance.

    ``energy0`` holds the analytical energy of the *clean raw* initial state of
    every trajectory; it survives noise, normalization and splitting so that
    supervision and evaluation never see corrupted labels.
    """

    states: np.ndarray
    system: SystemSpec
    dt: float = DEFAULT_DT
    noise_sigma_fraction: float = 0.0
    normalization: Normalization = Normalization.RAW
    normalizer: Normalizer = None
    energy0: np.ndarray = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 3 or self.states.shape[2] != self.system.state_dim:
            raise StateError(
                f"states must be B x T x {self.system.state_dim}, got {self.states.shape}"
            )
        self.normalization = Normalization(self.normalization)
        if self.energy0 is not None:
            self.energy0 = np.asarray(self.energy0, dtype=np.float64)

    @property
    def shape(self):
        return self.states.shape

    def __len__(self):
        return self.states.shape[0]

    def raw_states(self) -> np.ndarray:
        if self.normalization is Normalization.RAW or self.normalizer is None:
            return self.states
        return self.normalizer.inverse_transform(self.states)

    def reference_energy(self) -> np.ndarray:
        """``B x T`` analytical energy to compare learned invariants against.

        For clean data this is the energy of every raw state. For noisy data it
        is the clean trajectory energy, which the propagators conserve to
        round-off, broadcast along time.
        """
        if self.noise_sigma_fraction == 0:
            return analytic_energy(self.system, self.raw_states())
        if self.energy0 is None:
            raise StateError("noisy batch carries no clean reference energies")
        return np.repeat(self.energy0[:, None], self.states.shape[1], axis=1)

    def subset(self, idx) -> "TrajectoryBatch":
        idx = np.asarray(idx)
        meta = dict(self.metadata)
        parent = meta.get("indices")
        meta["indices"] = (np.asarray(parent)[idx] if parent is not None else idx).tolist()
        return replace(
            self,
            states=self.states[idx],
            energy0=None if self.energy0 is None else self.energy0[idx],
            metadata=meta,
        )


def generate_dataset(sys: SystemSpec, n_traj: int, n_steps: int = DEFAULT_STEPS,
                     dt: float = DEFAULT_DT, seed: int = 0, chunk: int = 2048) -> TrajectoryBatch:
    """Simulate ``n_traj`` clean trajectories of ``n_steps + 1`` states each."""
    if n_traj < 1:
        raise StateError("n_traj must be >= 1")
    rng = np.random.default_rng(seed)
    s0 = sample_initial(sys, rng, size=n_traj)
    if sys.kind is SystemKind.PENDULUM:
        states = np.empty((n_traj, n_steps + 1, sys.state_dim))
        for start in range(0, n_traj, chunk):
            stop = min(start + chunk, n_traj)
            try:
                states[start:stop] = integrate_rk45(sys, s0[start:stop], n_steps, dt)
            except IntegrationError as exc:
                exc.trajectory_index = start
                raise
    else:
        states = propagate_exact(sys, s0, n_steps, dt)
    return TrajectoryBatch(
        states=states,
        system=sys,
        dt=dt,
        energy0=analytic_energy(sys, s0),
        metadata={"seed": int(seed), "n_steps": int(n_steps), "provenance": "simulated"},
    )


def add_noise(batch: TrajectoryBatch, fraction: float, seed: int = 0) -> TrajectoryBatch:
    """Additive Gaussian noise with per-dimension sigma ``fraction * std_d``.

    ``std_d`` is the std of the clean raw states over the whole batch.
    """
    if batch.noise_sigma_fraction != 0:
        raise StateError("batch is already noisy; noise can only be applied once")
    if batch.normalization is not Normalization.RAW:
        raise StateError("noise must be applied to raw states before normalization")
    if fraction < 0:
        raise StateError("noise fraction must be non-negative")
    meta = dict(batch.metadata, noise_seed=int(seed))
    if fraction == 0:
        return replace(batch, states=batch.states.copy(), metadata=meta)
    D = batch.states.shape[2]
    sigma = fraction * batch.states.reshape(-1, D).std(axis=0)
    rng = np.random.default_rng(seed)
    noisy = batch.states + rng.standard_normal(batch.states.shape) * sigma
    return replace(batch, states=noisy, noise_sigma_fraction=float(fraction), metadata=meta)


def normalize(batch: TrajectoryBatch, mode, split_spec: SplitSpec = None) -> TrajectoryBatch:
    """Normalize every trajectory with statistics from the training rows only."""
    if batch.normalization is not Normalization.RAW:
        raise StateError("normalize expects a raw batch")
    split_spec = split_spec or SplitSpec()
    train_idx, _ = split_spec.indices(len(batch))
    norm = Normalizer(Normalization(mode).value).fit(batch.states[train_idx])
    return replace(
        batch,
        states=norm.transform(batch.states),
        normalization=Normalization(mode),
        normalizer=norm,
    )


def split(batch: TrajectoryBatch, spec: SplitSpec = None):
    """Trajectory-level ``(train, val)`` partition."""
    spec = spec or SplitSpec()
    train_idx, val_idx = spec.indices(len(batch))
    return batch.subset(train_idx), batch.subset(val_idx)


def prepare_splits(batch: TrajectoryBatch, mode, spec: SplitSpec = None):
    """Normalize with training statistics, then split."""
    spec = spec or SplitSpec()
    return split(normalize(batch, mode, spec), spec)


def save_batch(batch: TrajectoryBatch, path) -> None:
    meta = {
        "system": batch.system.to_dict(),
        "dt": batch.dt,
        "shape": list(batch.states.shape),
        "noise_sigma_fraction": batch.noise_sigma_fraction,
        "normalization": batch.normalization.value,
        "normalizer": None if batch.normalizer is None else batch.normalizer.to_dict(),
        "energy0": None if batch.energy0 is None else batch.energy0.tolist(),
        "metadata": batch.metadata,
    }
    fileformat.write_container(path, fileformat.DATASET_MAGIC, meta, [batch.states])


def load_batch(path) -> TrajectoryBatch:
    meta, arrays = fileformat.read_container(path, fileformat.DATASET_MAGIC)
    if len(arrays) != 1 or list(arrays[0].shape) != meta.get("shape"):
        raise FormatError(f"{path}: header shape does not match payload")
    norm = meta["normalizer"]
    return TrajectoryBatch(
        states=arrays[0],
        system=SystemSpec.from_dict(meta["system"]),
        dt=meta["dt"],
        noise_sigma_fraction=meta["noise_sigma_fraction"],
        normalization=Normalization(meta["normalization"]),
        normalizer=None if norm is None else Normalizer.from_dict(norm),
        energy0=None if meta["energy0"] is None else np.asarray(meta["energy0"]),
        metadata=meta["metadata"],
    )
