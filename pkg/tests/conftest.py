import json

import numpy as np
import pytest

from casecohort.data_model import write_cohort
from casecohort.simulation import SimConfig, generate_cohort, sample_phase3, sample_subcohort

SMALL = {
    "n": 800,
    "beta": {"X1": 0.4, "X2": 0.7, "X3": 0.3},
    "covariates": {
        "X1": {"dist": "bernoulli", "p": 0.3},
        "X2": {"dist": "normal"},
        "X3": {"dist": "normal"},
        "Z": {"dist": "proxy", "of": "X2", "coef": 0.8, "sd": 0.6},
    },
    "phase2": ["X2"],
    "baseline": {"rate": 0.02},
    "entry": [50, 70],
    "censoring_rate": 0.02,
    "horizon": 15,
    "strata": {"variable": "Z", "cuts": [0.8]},
    "m": {"0": 90, "1": 70},
    "seed": 11,
}


@pytest.fixture(scope="session")
def small_config():
    return SimConfig.from_dict(SMALL)


@pytest.fixture(scope="session")
def data_files(tmp_path_factory, small_config):
    """CSV files for a stratified case-cohort and a three-phase variant."""
    root = tmp_path_factory.mktemp("data")
    rng = np.random.default_rng(5)
    cohort = sample_subcohort(generate_cohort(small_config, rng), small_config.m, rng)
    write_cohort(cohort, root / "strat.csv")
    p3 = sample_phase3(cohort, {"0": 0.95, "1": 0.9}, rng)
    write_cohort(p3, root / "p3.csv")
    (root / "sim.json").write_text(json.dumps({
        **SMALL, "n": 500, "m": {"0": 60, "1": 50}, "replicates": 4,
        "analysis": {"cox_phase1": ["X1", "X3"], "cox_phase2": ["X2"],
                     "profiles": [{"X1": 0, "X2": 0, "X3": 0}], "tau1": 55, "tau2": 65},
    }))
    return root


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(number, ok, detail):
        line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} ({detail})"
        lines[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
