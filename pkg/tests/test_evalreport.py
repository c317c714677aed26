import csv
import json

import numpy as np
import pytest

from invariantlab.datagen import add_noise, generate_dataset
from invariantlab.dynamics import make_system
from invariantlab.evalreport import (
    CSV_COLUMNS,
    MetricsReport,
    drift_check,
    emit_report,
    energy_std_ratio,
    load_reports,
    pearson_r2,
    rollout_mse,
    spearman,
)
from invariantlab.exceptions import DegenerateMetricError, ShapeError


def test_r2_affine_and_sign(rng):
    a = rng.standard_normal(100)
    assert pearson_r2(a, 3 * a + 7) == pytest.approx(1.0, abs=1e-15)
    assert pearson_r2(a, -a) == pytest.approx(1.0, abs=1e-15)


def test_r2_hand_example():
    # tests/oracles/compute_oracles.py: exactly 27/28
    assert abs(pearson_r2([1, 2, 3], [1, 2, 4]) - 27 / 28) <= 1e-15


def test_r2_of_constant_is_degenerate():
    with pytest.raises(DegenerateMetricError):
        pearson_r2(np.ones(5), np.arange(5.0))
    with pytest.raises(ShapeError):
        pearson_r2(np.ones(5), np.ones(4))


def test_spearman_examples(rng):
    a = rng.standard_normal(50)
    assert spearman(a, np.exp(a)) == pytest.approx(1.0, abs=1e-15)
    assert spearman(a, -a) == pytest.approx(-1.0, abs=1e-15)
    assert abs(spearman([1, 2, 3, 4], [1, 3, 2, 4]) - 0.8) <= 1e-12


def test_spearman_handles_ties():
    assert spearman([1, 1, 2, 3], [1, 1, 2, 3]) == pytest.approx(1.0)


def test_rollout_mse_examples(rng):
    truth = rng.standard_normal((3, 4, 2))
    assert rollout_mse(truth, truth) == 0.0
    assert rollout_mse(truth + 0.3, truth) == pytest.approx(0.09, abs=1e-15)
    t = np.zeros((2, 2, 1))
    g = t.copy()
    g[1, 0, 0] = 0.1
    assert rollout_mse(g, t) == pytest.approx(0.0025, abs=1e-15)
    with pytest.raises(ShapeError):
        rollout_mse(t, t[:1])


def test_energy_ratio_identity_and_negative_control():
    batch = generate_dataset(make_system("pendulum"), 30, seed=0)
    sg, st, ratio = energy_std_ratio(batch.states, batch.states, batch.system)
    assert ratio == 1.0 and st <= 1e-7
    noisy = add_noise(batch, 0.01, seed=1)
    _, _, r = energy_std_ratio(noisy.states, batch.states, batch.system)
    assert r > 1e3


def test_energy_ratio_zero_truth_conventions():
    sys_spec = make_system("spring-mass")
    still = np.zeros((1, 5, 2))
    assert energy_std_ratio(still, still, sys_spec)[2] == 1.0
    moving = still.copy()
    moving[0, 1:, 0] = 1.0
    assert energy_std_ratio(moving, still, sys_spec)[2] == float("inf")


def test_drift_check():
    spring = generate_dataset(make_system("spring-mass"), 20, seed=0)
    assert drift_check(spring) <= 1e-10
    assert drift_check(add_noise(spring, 0.01, seed=0)) > 1e-5


def test_emit_empty_report(tmp_path):
    paths = emit_report([], tmp_path)
    with open(paths["csv"]) as fh:
        assert list(csv.reader(fh)) == [CSV_COLUMNS]


def test_report_round_trip_and_series(tmp_path, rng):
    analytic, learned = rng.standard_normal((3, 7)), rng.standard_normal((3, 7))
    rep = MetricsReport(system="pendulum", model="se", noise_fraction=0.01,
                        r2=0.1 + 0.2, spearman=1 / 3, seed=0, n_traj=5000, epochs=100,
                        metadata={"note": "x"}, series=(analytic, learned))
    other = MetricsReport(system="projectile", model="ddpm_proj1", rollout_mse=1e-3,
                          sigma_true=6.3e-7, sigma_gen=1e-2, ratio=1e-2 / 6.3e-7)
    paths = emit_report([rep, other], tmp_path)
    back = load_reports(paths["json"])
    assert back[0].to_dict() == rep.to_dict() and back[1].to_dict() == other.to_dict()
    assert back[0].r2 == 0.1 + 0.2  # bit-exact through JSON
    with open(paths["series"][0]) as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1 + 3 * 7
    assert float(rows[1 + 7 * 2 + 3][3]) == learned[2, 3]
    with open(paths["csv"]) as fh:
        table = list(csv.DictReader(fh))
    assert table[1]["r2"] == "" and float(table[0]["r2"]) == rep.r2
    with open(paths["json"]) as fh:
        assert "series" not in json.load(fh)[0]


def test_run_id_encodes_noise():
    assert MetricsReport("spring-mass", "cdn", 0.01).run_id == "spring-mass_cdn_noise0p01"
