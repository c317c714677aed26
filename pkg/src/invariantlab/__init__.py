"""Learning conserved quantities of simple mechanical systems from trajectories."""

from .datagen import (
    Normalization,
    Normalizer,
    SplitSpec,
    TrajectoryBatch,
    add_noise,
    generate_dataset,
    load_batch,
    normalize,
    prepare_splits,
    save_batch,
    split,
)
from .diffusion import (
    DiffusionTransitionModel,
    NoiseSchedule,
    RolloutConfig,
    project_energy,
    rollout,
)
from .dynamics import SystemKind, SystemSpec, analytic_energy, integrate_rk45, make_system
from .evalreport import MetricsReport, energy_std_ratio, pearson_r2, rollout_mse, spearman
from .invariants import (
    BlackBoxCdn,
    ConservationLossConfig,
    PolynomialCdn,
    StructuredEnergyNet,
)
from .symreg import FeatureLibrary, Stlsq, format_equation

__version__ = "0.1.0"
