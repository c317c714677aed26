"""Command-line pipeline: data -> invariants -> diffusion rollouts -> reports.

Exit codes: 0 success, 1 usage/config/missing input, 2 drift gate failed,
3 numerical failure (non-finite loss, diverged rollout, singular fit).

Output layout under the output root::

    <root>/<system>/data/clean.bin, noisy_<frac>.bin, drift.json
    <root>/<system>/models/<model>_noise<frac>.ckpt, ..._history.csv
    <root>/<system>/rollout/generated_proj<k>.bin
    <root>/<system>/symreg/<target>.json, <target>.txt
    <root>/metrics.csv, metrics.json, energy_series/
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import checkpoint
from .config import ExperimentConfig, load_config
from .datagen import (
    SplitSpec,
    add_noise,
    generate_dataset,
    load_batch,
    prepare_splits,
    save_batch,
)
from .diffusion import DiffusionTransitionModel, RolloutConfig, rollout
from .dynamics import SystemSpec, analytic_energy, make_system
from .evalreport import (
    MetricsReport,
    drift_check,
    emit_report,
    energy_std_ratio,
    load_reports,
    pearson_r2,
    rollout_mse,
    spearman,
)
from .exceptions import (
    ConfigError,
    DegenerateMetricError,
    FormatError,
    IntegrationError,
    InvariantLabError,
    NonFiniteLossError,
    OptimizerError,
    RolloutDivergedError,
    SingularFitError,
)
from .invariants import BlackBoxCdn, PolynomialCdn, StructuredEnergyNet, loss_gradient_check
from .neuralcore import LrSchedule, finite_difference_check, make_mlp
from .symreg import FeatureLibrary, Stlsq, format_equation

EXIT_OK, EXIT_CONFIG, EXIT_DRIFT, EXIT_NUMERIC = 0, 1, 2, 3

# Largest allowed within-trajectory energy std of a clean dataset.
DRIFT_TOLERANCE = {"pendulum": 1e-7, "projectile": 1e-10, "spring-mass": 1e-10}

MODELS = ("cdn", "cdn-noalign", "poly", "se", "ddpm")
_NORMALIZATION = {"cdn": "minmax", "cdn-noalign": "minmax", "poly": "raw", "se": "raw",
                  "ddpm": "standardize"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


class CliError(Exception):
    def __init__(self, message, code=EXIT_CONFIG):
        super().__init__(message)
        self.code = code


# -- paths --------------------------------------------------------------------

def _frac_tag(noise: float) -> str:
    return f"{noise:g}".replace(".", "p")


def _system_dir(cfg, system):
    return os.path.join(cfg.output_root(), system)


def _data_path(cfg, system, noise):
    name = "clean.bin" if noise == 0 else f"noisy_{_frac_tag(noise)}.bin"
    return os.path.join(_system_dir(cfg, system), "data", name)


def _model_path(cfg, system, model, noise):
    return os.path.join(_system_dir(cfg, system), "models", f"{model}_noise{_frac_tag(noise)}.ckpt")


def _model_tag(kind, cfg):
    """Checkpoint name stem; the polynomial presets get separate files."""
    return f"poly-{cfg.poly.schedule}" if kind == "poly" else kind


def _require(path, hint):
    if not os.path.exists(path):
        raise CliError(f"missing {path}; {hint}")
    return path


# -- config handling ----------------------------------------------------------

def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "system", None):
        cfg.experiment.system = args.system
    if getattr(args, "out", None):
        cfg.experiment.output_dir = args.out
    if getattr(args, "noise", None) is not None:
        cfg.data.noise_fraction = args.noise
    if getattr(args, "n_traj", None) is not None:
        cfg.data.n_traj = args.n_traj
    if getattr(args, "seed", None) is not None:
        cfg.data.seed = args.seed
    cfg.experiment.system = make_system(cfg.experiment.system).name
    if cfg.data.noise_fraction < 0:
        raise ConfigError("noise fraction must be non-negative")
    return cfg


def _split_spec(cfg):
    return SplitSpec(cfg.data.train_fraction, cfg.data.split_seed)


def _dataset(cfg, system, noise):
    """Clean or noisy dataset written by ``gen-data``."""
    path = _require(_data_path(cfg, system, noise), "run gen-data first")
    return load_batch(path), path


def _generated_dataset(sys_spec: SystemSpec, n_traj, cfg, noise):
    batch = generate_dataset(sys_spec, n_traj, cfg.data.n_steps, cfg.data.dt, cfg.data.seed)
    if noise > 0:
        batch = add_noise(batch, noise, cfg.data.noise_seed)
    return batch


# -- gen-data -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load(args)
    sys_spec = make_system(cfg.experiment.system)
    clean = generate_dataset(sys_spec, cfg.data.n_traj, cfg.data.n_steps, cfg.data.dt,
                             cfg.data.seed)
    drift = drift_check(clean)
    tol = DRIFT_TOLERANCE[sys_spec.name]
    os.makedirs(os.path.join(_system_dir(cfg, sys_spec.name), "data"), exist_ok=True)
    path = _data_path(cfg, sys_spec.name, 0.0)
    save_batch(clean, path)
    print(f"wrote {path}  ({cfg.data.n_traj} trajectories, drift {drift:.3g})")
    written = {"clean": path}
    if cfg.data.noise_fraction > 0:
        noisy = add_noise(clean, cfg.data.noise_fraction, cfg.data.noise_seed)
        npath = _data_path(cfg, sys_spec.name, cfg.data.noise_fraction)
        save_batch(noisy, npath)
        written["noisy"] = npath
        print(f"wrote {npath}  (noise fraction {cfg.data.noise_fraction:g})")
    with open(os.path.join(_system_dir(cfg, sys_spec.name), "data", "drift.json"), "w") as fh:
        json.dump({"system": sys_spec.name, "max_energy_std": drift, "tolerance": tol,
                   "passed": drift <= tol, "files": written}, fh, indent=2)
    if drift > tol:
        print(f"drift gate failed: {drift:.3g} > {tol:g}", file=sys.stderr)
        return EXIT_DRIFT
    return EXIT_OK


# -- train --------------------------------------------------------------------

def _cosine(lr, min_lr, epochs):
    return LrSchedule("warmup_cosine_restarts", base_lr=lr, min_lr=min_lr, warmup_epochs=0,
                      restart_period=max(1, epochs), period_multiplier=1)


def _build_invariant(kind, cfg, system, epochs):
    loss = cfg.loss
    common = dict(lambda_var=loss.lambda_var, var_epsilon=loss.var_epsilon)
    if kind in ("cdn", "cdn-noalign"):
        c = cfg.cdn
        epochs = epochs or c.epochs
        return BlackBoxCdn(hidden=tuple(c.hidden), lambda_align=0.0 if kind == "cdn-noalign"
                           else loss.lambda_align, epochs=epochs, batch_size=c.batch_size,
                           pairs_per_trajectory=c.pairs_per_trajectory, lr=c.lr,
                           schedule=_cosine(c.lr, c.min_lr, epochs), seed=c.seed, **common)
    if kind == "se":
        c = cfg.se
        epochs = epochs or c.epochs
        return StructuredEnergyNet(system=system, hidden=tuple(c.hidden),
                                   lambda_align=loss.lambda_align, epochs=epochs,
                                   batch_size=c.batch_size,
                                   pairs_per_trajectory=c.pairs_per_trajectory, lr=c.lr,
                                   schedule=_cosine(c.lr, c.min_lr, epochs), seed=c.seed,
                                   **common)
    p = cfg.poly
    epochs = epochs or (p.short_epochs if p.schedule == "short" else p.long_epochs)
    sched = LrSchedule("warmup_cosine_restarts", base_lr=p.lr, min_lr=p.min_lr,
                       warmup_epochs=p.warmup_epochs, restart_period=p.restart_period,
                       period_multiplier=p.period_multiplier)
    return PolynomialCdn(system=system, init_scale=p.init_scale, lambda_align=loss.lambda_align,
                         epochs=epochs, batch_size=p.batch_size,
                         pairs_per_trajectory=p.pairs_per_trajectory, lr=p.lr, schedule=sched,
                         seed=p.seed, **common)


def _write_history(model, path):
    rows = getattr(model, "history_", [])
    if not rows:
        return
    keys = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow([repr(float(r[k])) if isinstance(r[k], float) else r[k] for k in keys])


def _training_data(kind, cfg, sys_spec, noise):
    """Return ``(batch, provenance)``; poly presets regenerate their own data size."""
    if kind == "poly":
        p = cfg.poly
        n = p.short_n_traj if p.schedule == "short" else p.long_n_traj
        batch = _generated_dataset(sys_spec, n, cfg, noise)
        return batch, {"generated": {"n_traj": n, "n_steps": cfg.data.n_steps,
                                     "dt": cfg.data.dt, "seed": cfg.data.seed,
                                     "noise_fraction": noise,
                                     "noise_seed": cfg.data.noise_seed}}
    batch, path = _dataset(cfg, sys_spec.name, noise)
    return batch, {"dataset": os.path.abspath(path)}


def cmd_train(args) -> int:
    cfg = _load(args)
    if args.schedule:
        cfg.poly.schedule = args.schedule
    if args.epochs is not None and args.epochs < 1:
        raise ConfigError("--epochs must be >= 1")
    sys_spec = make_system(cfg.experiment.system)
    noise = cfg.data.noise_fraction
    kind = args.model
    batch, provenance = _training_data(kind, cfg, sys_spec, noise)
    train, val = prepare_splits(batch, _NORMALIZATION[kind], _split_spec(cfg))
    if kind == "ddpm":
        d = cfg.ddpm
        epochs = args.epochs or d.epochs
        cdn = checkpoint.load_model(_require(_model_path(cfg, sys_spec.name, "cdn", noise),
                                             "train cdn first"))
        model = DiffusionTransitionModel(
            hidden=tuple(d.hidden), n_diffusion_steps=d.n_diffusion_steps,
            beta_start=d.beta_start, beta_end=d.beta_end, embed_dim=d.embed_dim,
            epochs=epochs, batch_size=d.batch_size,
            transitions_per_trajectory=d.transitions_per_trajectory, lr=d.lr,
            lr_schedule=_cosine(d.lr, d.min_lr, epochs), seed=d.seed, verbose=args.verbose)
        model.fit(train, cdn=cdn)
    else:
        model = _build_invariant(kind, cfg, sys_spec.name, args.epochs)
        model.set_params(verbose=args.verbose)
        model.fit(train, validation=val)
    path = _model_path(cfg, sys_spec.name, _model_tag(kind, cfg), noise)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    extra = dict(provenance, model=_model_tag(kind, cfg), noise_fraction=noise, split_seed=cfg.data.split_seed,
                 train_fraction=cfg.data.train_fraction, config=cfg.to_dict())
    checkpoint.save_model(model, path, extra=extra)
    _write_history(model, path[:-len(".ckpt")] + "_history.csv")
    last = model.history_[-1]["train_loss"] if model.history_ else float("nan")
    print(f"wrote {path}  (final train loss {last:.6g})")
    if kind == "poly":
        print(f"learned invariant: {model.equation()}")
    return EXIT_OK


# -- eval ---------------------------------------------------------------------

def _validation_for(meta, cfg, sys_spec):
    extra = meta.get("extra", {})
    if "dataset" in extra:
        batch = load_batch(_require(extra["dataset"], "dataset referenced by checkpoint"))
    elif "generated" in extra:
        g = extra["generated"]
        batch = generate_dataset(sys_spec, g["n_traj"], g["n_steps"], g["dt"], g["seed"])
        if g["noise_fraction"] > 0:
            batch = add_noise(batch, g["noise_fraction"], g["noise_seed"])
    else:
        raise CliError("checkpoint does not record its training data")
    spec = SplitSpec(extra.get("train_fraction", 0.9), extra.get("split_seed", 42))
    return batch, spec


def _append_reports(cfg, new_reports):
    root = cfg.output_root()
    path = os.path.join(root, "metrics.json")
    existing = load_reports(path) if os.path.exists(path) else []
    emit_report(existing + list(new_reports), root)


def cmd_eval(args) -> int:
    cfg = _load(args)
    sys_spec = make_system(cfg.experiment.system)
    noise = cfg.data.noise_fraction
    meta = {}
    if args.model == "analytic":
        batch, _ = _dataset(cfg, sys_spec.name, noise)
        _, val = prepare_splits(batch, "raw", _split_spec(cfg))
        learned = analytic_energy(sys_spec, val.raw_states())
        label, epochs = "analytic", None
    else:
        if args.schedule:
            cfg.poly.schedule = args.schedule
        tag = _model_tag(args.model, cfg)
        path = args.checkpoint or _model_path(cfg, sys_spec.name, tag, noise)
        model, meta = checkpoint.load_model(_require(path, "train the model first"),
                                            with_meta=True)
        if isinstance(model, DiffusionTransitionModel):
            raise CliError("eval scores invariant models; use rollout for ddpm")
        sys_spec = make_system(meta["system"] or sys_spec.name)
        batch, spec = _validation_for(meta, cfg, sys_spec)
        noise = batch.noise_sigma_fraction
        _, val = prepare_splits(batch, model.expected_normalization, spec)
        learned = model.predict(val.states)
        label = meta["extra"].get("model", type(model).__name__)
        epochs = model.epochs
    reference = val.reference_energy()
    report = MetricsReport(system=sys_spec.name, model=label, noise_fraction=float(noise),
                           seed=cfg.data.seed, n_traj=len(batch), epochs=epochs,
                           metadata={"config": cfg.to_dict(),
                                     "checkpoint_extra": meta.get("extra", {})},
                           series=(reference[:16], learned[:16]))
    try:
        report.r2 = pearson_r2(learned, reference)
        report.spearman = spearman(learned, reference)
    except DegenerateMetricError as exc:
        report.metadata["diagnostic"] = f"degenerate metric: {exc}"
        print(f"warning: {exc}", file=sys.stderr)
    _append_reports(cfg, [report])
    print(",".join(report.csv_row()))
    return EXIT_OK


# -- rollout ------------------------------------------------------------------

def cmd_rollout(args) -> int:
    cfg = _load(args)
    sys_spec = make_system(cfg.experiment.system)
    r = cfg.rollout
    horizon = r.horizon if args.horizon is None else args.horizon
    steps = r.projection_steps if args.projection_steps is None else args.projection_steps
    n = r.n_rollouts if args.n_rollouts is None else args.n_rollouts
    name = sys_spec.name

    def load(kind):
        return checkpoint.load_model(_require(_model_path(cfg, name, kind, 0.0),
                                              f"train {kind} first"))

    ddpm, cdn, se = load("ddpm"), load("cdn"), load("se")
    batch, _ = _dataset(cfg, name, 0.0)
    _, val = prepare_splits(batch, "raw", _split_spec(cfg))
    truth = val.raw_states()
    if horizon >= truth.shape[1]:
        raise ConfigError(f"horizon {horizon} exceeds the {truth.shape[1] - 1} available steps")
    if n < 1 or n > len(truth):
        raise ConfigError(f"n_rollouts must be in [1, {len(truth)}]")
    truth = truth[:n, :horizon + 1]
    rcfg = RolloutConfig(horizon=horizon, projection_steps_per_sample=steps,
                         projection_epsilon=r.projection_epsilon, guidance_energy_model=se)
    generated = rollout(ddpm, truth[:, 0], rcfg, cdn=cdn, rng=np.random.default_rng(r.seed))

    out_dir = os.path.join(_system_dir(cfg, name), "rollout")
    os.makedirs(out_dir, exist_ok=True)
    gen_batch = type(batch)(states=generated, system=sys_spec, dt=batch.dt,
                            metadata={"source": "ddpm rollout", "projection_steps": steps})
    save_batch(gen_batch, os.path.join(out_dir, f"generated_proj{steps}.bin"))
    sigma_gen, sigma_true, ratio = energy_std_ratio(generated, truth, sys_spec)
    report = MetricsReport(system=name, model=f"ddpm_proj{steps}", noise_fraction=0.0,
                           rollout_mse=rollout_mse(generated, truth), sigma_true=sigma_true,
                           sigma_gen=sigma_gen, ratio=ratio, seed=r.seed, n_traj=n,
                           epochs=ddpm.epochs,
                           metadata={"config": cfg.to_dict(), "horizon": horizon,
                                     "projection_steps": steps, "aggregation": "median"})
    _append_reports(cfg, [report])
    print(",".join(report.csv_row()))
    return EXIT_OK


# -- symreg -------------------------------------------------------------------

def cmd_symreg(args) -> int:
    cfg = _load(args)
    sys_spec = make_system(cfg.experiment.system)
    batch, _ = _dataset(cfg, sys_spec.name, 0.0)
    states = batch.raw_states().reshape(-1, sys_spec.state_dim)
    rng = np.random.default_rng(cfg.data.seed)
    n = min(cfg.symreg.n_states, len(states))
    states = states[rng.choice(len(states), size=n, replace=False)]
    if args.target == "analytic":
        target = analytic_energy(sys_spec, states)
    else:
        path = args.checkpoint or _model_path(cfg, sys_spec.name, "cdn", 0.0)
        model = checkpoint.load_model(_require(path, "pass --checkpoint or train cdn first"))
        if isinstance(model, DiffusionTransitionModel):
            raise CliError("symreg needs an invariant model checkpoint")
        target = model.predict_raw(states)
    lib = FeatureLibrary(sys_spec.name)
    s = cfg.symreg
    reg = Stlsq(s.threshold, s.ridge_lambda, s.max_iterations)
    try:
        reg.fit(lib.transform(states), target)
    except SingularFitError as exc:
        raise CliError(f"{exc}; increase [symreg] ridge_lambda", EXIT_NUMERIC) from None
    equation = format_equation(lib, reg.coef_, s.decimals)
    out_dir = os.path.join(_system_dir(cfg, sys_spec.name), "symreg")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{args.target}.json"), "w") as fh:
        json.dump({"system": sys_spec.name, "target": args.target, "n_states": n,
                   "terms": lib.term_names(),
                   "coefficients": [float(c) for c in reg.coef_],
                   "active": [bool(a) for a in reg.active_], "equation": equation,
                   "config": cfg.to_dict()}, fh, indent=2)
    with open(os.path.join(out_dir, f"{args.target}.txt"), "w") as fh:
        fh.write(equation + "\n")
    print(equation)
    return EXIT_OK


# -- report -------------------------------------------------------------------

def cmd_report(args) -> int:
    cfg = _load(args)
    path = _require(os.path.join(cfg.output_root(), "metrics.json"), "run eval or rollout first")
    reports = load_reports(path)
    emit_report(reports, cfg.output_root())
    cols = ("system", "model", "noise_fraction", "r2", "spearman", "rollout_mse", "ratio")
    print("  ".join(f"{c:>14}" for c in cols))
    for r in reports:
        cells = []
        for c in cols:
            v = getattr(r, c)
            cells.append(f"{'-' if v is None else (f'{v:.6g}' if isinstance(v, float) else v):>14}")
        print("  ".join(cells))
    return EXIT_OK


# -- grad-check ---------------------------------------------------------------

def grad_check_all(seed=0, n_probes=60):
    """Finite-difference checks for every trainable architecture; ``{name: worst rel err}``."""
    rng = np.random.default_rng(seed)
    out = {}
    for name in ("projectile", "pendulum", "spring-mass"):
        sys_spec = make_system(name)
        batch = generate_dataset(sys_spec, 16, n_steps=5, seed=seed)
        for label, model, mode in (
            ("cdn", BlackBoxCdn(hidden=(16, 16), epochs=1, batch_size=8), "minmax"),
            ("se", StructuredEnergyNet(system=name, hidden=(12, 12), epochs=1, batch_size=8),
             "raw"),
            ("poly", PolynomialCdn(system=name, epochs=1, batch_size=8), "raw"),
        ):
            train, _ = prepare_splits(batch, mode, SplitSpec(0.5, seed))
            model.set_params(lr=1e-2).fit(train)
            out[f"{label}/{name}"] = loss_gradient_check(model, train, rng, n_probes)
        D = sys_spec.state_dim
        denoiser = make_mlp(2 * D + 1 + 32, (16, 16, 16), D, rng)
        out[f"ddpm/{name}"] = finite_difference_check(
            denoiser, rng.standard_normal((6, 2 * D + 33)), rng, n_probes)
        cdn_net = make_mlp(D, (256,) * 4, 1, rng)
        out[f"cdn-full/{name}"] = finite_difference_check(
            cdn_net, rng.standard_normal((4, D)), rng, n_probes)
    return out


def cmd_grad_check(args) -> int:
    results = grad_check_all(args.seed or 0, args.probes)
    worst = max(results.values())
    for k, v in results.items():
        print(f"{k:24s} {v:.3e}  {'ok' if v <= args.tolerance else 'FAIL'}")
    return EXIT_OK if worst <= args.tolerance else EXIT_NUMERIC


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="invariantlab", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, noise=True):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--system", help="projectile, pendulum or spring-mass")
        p.add_argument("--out", help="output root (default: $INVARIANTLAB_OUTPUT_ROOT or ./runs)")
        if noise:
            p.add_argument("--noise", type=float, help="state-noise fraction")
        return p

    p = common(sub.add_parser("gen-data", help="simulate datasets and run the drift gate"))
    p.add_argument("--n-traj", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train", help="train an invariant or diffusion model"))
    p.add_argument("model", choices=MODELS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--schedule", choices=("short", "long"), help="polynomial preset")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="score an invariant against analytic energy"))
    p.add_argument("--model", default="cdn",
                   choices=("analytic",) + tuple(m for m in MODELS if m != "ddpm"))
    p.add_argument("--checkpoint", help="explicit checkpoint path")
    p.add_argument("--schedule", choices=("short", "long"), help="polynomial preset")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("rollout", help="guided DDPM rollouts and energy-std ratio"),
               noise=False)
    p.add_argument("--horizon", type=int)
    p.add_argument("--projection-steps", type=int)
    p.add_argument("--n-rollouts", type=int)
    p.set_defaults(func=cmd_rollout)

    p = common(sub.add_parser("symreg", help="sparse regression onto the feature library"),
               noise=False)
    p.add_argument("--target", choices=("analytic", "checkpoint"), default="analytic")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_symreg)

    p = common(sub.add_parser("report", help="rewrite metrics.csv and print the table"),
               noise=False)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("grad-check", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probes", type=int, default=60)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (NonFiniteLossError, RolloutDivergedError, OptimizerError, IntegrationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvariantLabError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
