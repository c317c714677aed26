import os

import numpy as np
import pytest

from invariantlab.cli import main
from invariantlab.evalreport import load_reports

SYSTEMS = ("projectile", "pendulum", "spring-mass")

# filled by tests/test_acceptance.py, printed at the end of the run
CRITERIA = []


def record_criterion(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    CRITERIA.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


class Pipeline:
    """Runs CLI subcommands once each under one output root and caches results."""

    NOISE = 0.01

    def __init__(self, root):
        self.root = str(root)
        self._done = {}

    def run(self, *argv):
        code = main(list(argv) + ["--out", self.root])
        if code != 0:
            raise AssertionError(f"invariantlab {' '.join(argv)} exited {code}")

    def _once(self, key, fn):
        if key not in self._done:
            self._done[key] = fn()
        return self._done[key]

    def _last_report(self, system, model, noise):
        reports = load_reports(os.path.join(self.root, "metrics.json"))
        for r in reversed(reports):
            if r.system == system and r.model == model and r.noise_fraction == noise:
                return r
        raise AssertionError(f"no report for {system}/{model}/{noise}")

    def data(self, system):
        return self._once(("data", system), lambda: self.run(
            "gen-data", "--system", system, "--noise", str(self.NOISE)))

    def train(self, system, model, noise=0.0, schedule=None):
        def go():
            if model != "poly":
                self.data(system)
            if model == "ddpm":
                self.train(system, "cdn")
            extra = ["--schedule", schedule] if schedule else []
            self.run("train", model, "--system", system, "--noise", str(noise), *extra)
        return self._once(("train", system, model, noise, schedule), go)

    def evaluate(self, system, model, noise=0.0, schedule=None):
        def go():
            self.train(system, model, noise, schedule)
            extra = ["--schedule", schedule] if schedule else []
            self.run("eval", "--system", system, "--model", model, "--noise", str(noise),
                     *extra)
            label = f"poly-{schedule}" if model == "poly" else model
            return self._last_report(system, label, noise)
        return self._once(("eval", system, model, noise, schedule), go)

    def rollout(self, system, projection_steps=1):
        def go():
            self.train(system, "ddpm")
            self.train(system, "se")
            self.run("rollout", "--system", system, "--projection-steps", str(projection_steps))
            return self._last_report(system, f"ddpm_proj{projection_steps}", 0.0)
        return self._once(("rollout", system, projection_steps), go)


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    return Pipeline(tmp_path_factory.mktemp("pipeline"))
