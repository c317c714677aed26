"""Evaluation metrics and report files."""

import csv
import json
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.stats import rankdata

from .datagen import TrajectoryBatch
from .dynamics import SystemSpec, analytic_energy
from .exceptions import DegenerateMetricError, ShapeError

__all__ = [
    "pearson_r2",
    "spearman",
    "rollout_mse",
    "energy_std_ratio",
    "drift_check",
    "MetricsReport",
    "emit_report",
    "load_reports",
    "CSV_COLUMNS",
]

CSV_COLUMNS = [
    "system", "model", "noise_fraction", "r2", "spearman", "rollout_mse",
    "sigma_true", "sigma_gen", "ratio", "seed", "n_traj", "epochs",
]


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise DegenerateMetricError("need at least 2 samples")
    return a, b


def _corr(a, b):
    a = a - a.mean()
    b = b - b.mean()
    saa, sbb = float(a @ a), float(b @ b)
    if saa == 0.0 or sbb == 0.0:
        raise DegenerateMetricError("zero variance input; correlation is undefined")
    return float(a @ b) / np.sqrt(saa * sbb)


def pearson_r2(a, b) -> float:
    """Squared Pearson correlation, invariant to affine maps of either input."""
    a, b = _pair(a, b)
    return float(min(1.0, _corr(a, b) ** 2))


def spearman(a, b) -> float:
    """Pearson correlation of average ranks."""
    a, b = _pair(a, b)
    r = _corr(rankdata(a), rankdata(b))
    return float(np.clip(r, -1.0, 1.0))


def rollout_mse(generated, truth) -> float:
    g = np.asarray(generated, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if g.shape != t.shape:
        raise ShapeError(f"shape mismatch: {g.shape} vs {t.shape}")
    return float(np.mean((g - t) ** 2))


def energy_std_ratio(generated, truth, sys: SystemSpec):
    """Median within-trajectory energy std of each batch and their ratio.

    Returns ``(sigma_gen, sigma_true, ratio)``.
    """
    g = np.asarray(generated, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if g.ndim == 2:
        g, t = g[None], t[None]
    sigma_gen = float(np.median(analytic_energy(sys, g).std(axis=1)))
    sigma_true = float(np.median(analytic_energy(sys, t).std(axis=1)))
    if sigma_true == 0.0:
        ratio = 1.0 if sigma_gen == 0.0 else float("inf")
    else:
        ratio = sigma_gen / sigma_true
    return sigma_gen, sigma_true, ratio


def drift_check(batch: TrajectoryBatch, sys: SystemSpec = None) -> float:
    """Largest within-trajectory std of the analytical energy."""
    sys = sys or batch.system
    return float(analytic_energy(sys, batch.raw_states()).std(axis=1).max())


@dataclass
class MetricsReport:
    system: str
    model: str
    noise_fraction: float = 0.0
    r2: float = None
    spearman: float = None
    rollout_mse: float = None
    sigma_true: float = None
    sigma_gen: float = None
    ratio: float = None
    seed: int = None
    n_traj: int = None
    epochs: int = None
    metadata: dict = field(default_factory=dict)
    # (analytic B x T, learned B x T) energies for plotting; not serialized
    series: tuple = field(default=None, repr=False, compare=False)

    @property
    def run_id(self) -> str:
        noise = f"{self.noise_fraction:g}".replace(".", "p")
        return f"{self.system}_{self.model}_noise{noise}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("series")
        return d

    def csv_row(self) -> list:
        out = []
        for col in CSV_COLUMNS:
            v = getattr(self, col)
            out.append("" if v is None else (repr(v) if isinstance(v, float) else str(v)))
        return out


def emit_report(reports, out_dir) -> dict:
    """Write ``metrics.csv``, ``metrics.json`` and ``energy_series/<run>.csv``.

    Returns the paths written, keyed by kind.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {"csv": os.path.join(out_dir, "metrics.csv"),
             "json": os.path.join(out_dir, "metrics.json"), "series": []}
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in reports:
            w.writerow(r.csv_row())
    with open(paths["json"], "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2)
    for r in reports:
        if r.series is None:
            continue
        analytic, learned = (np.asarray(a) for a in r.series)
        sdir = os.path.join(out_dir, "energy_series")
        os.makedirs(sdir, exist_ok=True)
        path = os.path.join(sdir, f"{r.run_id}.csv")
        B, T = analytic.shape
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trajectory", "step", "analytic_energy", "learned_energy"])
            for i in range(B):
                for t in range(T):
                    w.writerow([i, t, repr(float(analytic[i, t])), repr(float(learned[i, t]))])
        paths["series"].append(path)
    return paths


def load_reports(path) -> list:
    """Read reports back from ``metrics.json``."""
    names = {f.name for f in fields(MetricsReport)} - {"series"}
    with open(path) as fh:
        return [MetricsReport(**{k: v for k, v in d.items() if k in names}) for d in json.load(fh)]
