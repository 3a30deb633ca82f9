import numpy as np
import pytest
from scipy import stats

from casecohort.errors import ConfigError, MTooLarge
from casecohort.simulation import (
    AnalysisSpec,
    PiecewiseHazard,
    SimConfig,
    generate_cohort,
    run_monte_carlo,
    sample_phase3,
    sample_subcohort,
    summary_csv,
    summary_json,
)

BASE = {
    "n": 2000,
    "beta": {"X1": 0.4, "X2": 0.7, "X3": 0.3},
    "covariates": {
        "X1": {"dist": "bernoulli", "p": 0.3},
        "X2": {"dist": "normal"},
        "X3": {"dist": "normal"},
        "Z": {"dist": "proxy", "of": "X2", "coef": 0.8, "sd": 0.6},
    },
    "phase2": ["X2"],
    "baseline": {"rate": 0.01},
    "entry": [50, 70],
    "censoring_rate": 0.02,
    "horizon": 15,
    "strata": {"variable": "Z", "cuts": [0.8]},
    "m": {"0": 200, "1": 150},
    "seed": 1,
}
PROFILES = ({"X1": 0, "X2": 0, "X3": 0}, {"X1": 1, "X2": 1, "X3": 0.5})


def test_event_times_are_exponential_under_null():
    cfg = SimConfig.from_dict({
        "n": 10_000, "beta": {"X": 0.0}, "covariates": {"X": {"dist": "normal"}}, "baseline": {"rate": 0.05},
    })
    cohort = generate_cohort(cfg, 7)
    assert np.all(cohort.status == 1)
    assert stats.kstest(cohort.exit, "expon", args=(0, 1 / 0.05)).pvalue > 0.01


def test_piecewise_hazard_inverse():
    hz = PiecewiseHazard((0.0, 2.0, 5.0), (0.1, 0.3, 0.05))
    t = np.array([0.0, 1.0, 2.0, 3.5, 5.0, 20.0])
    assert hz.inverse(hz.cumulative(t)) == pytest.approx(t)
    assert hz.cumulative(np.array([5.0]))[0] == pytest.approx(0.2 + 0.9)


def test_same_seed_same_cohort():
    cfg = SimConfig.from_dict(BASE)
    a, b = generate_cohort(cfg, 3), generate_cohort(cfg, 3)
    assert np.array_equal(a.exit, b.exit) and np.array_equal(a.status, b.status)
    for name in a.covariates:
        assert np.array_equal(a.covariates[name], b.covariates[name])


def test_zero_censoring_ends_follow_up_at_horizon_or_event():
    cfg = SimConfig.from_dict({**BASE, "censoring_rate": 0.0})
    cohort = generate_cohort(cfg, 4)
    censored = cohort.status == 0
    assert np.allclose(cohort.exit[censored] - cohort.entry[censored], 15.0)
    assert np.all(cohort.exit[~censored] - cohort.entry[~censored] <= 15.0)


def test_subcohort_counts_are_exact():
    cfg = SimConfig.from_dict(BASE)
    cohort = generate_cohort(cfg, 5)
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = sample_subcohort(cohort, cfg.m, rng)
        for label, mj in cfg.m.items():
            assert int(s.in_subcohort[s.stratum == label].sum()) == mj
        assert np.all(np.isnan(s.covariates["X2"][~s.in_phase2]))
        assert not np.any(np.isnan(s.covariates["X2"][s.in_phase2]))
    counts = {label: int((cohort.stratum == label).sum()) for label in cfg.m}
    census = sample_subcohort(cohort, counts, rng)
    assert np.all(census.in_subcohort)
    with pytest.raises(MTooLarge):
        sample_subcohort(cohort, {"0": counts["0"] + 1, "1": 1}, rng)


def test_inclusion_frequency():
    cfg = SimConfig.from_dict({"n": 10, "beta": {"X": 0.0}, "covariates": {"X": {"dist": "normal"}}, "horizon": 5})
    cohort = generate_cohort(cfg, 0)
    rng = np.random.default_rng(1)
    hits = np.zeros(10)
    for _ in range(10_000):
        hits += sample_subcohort(cohort, 3, rng).in_subcohort
    assert np.all(np.abs(hits / 10_000 - 0.3) <= 0.015)


def test_phase_three_retention():
    cfg = SimConfig.from_dict(BASE)
    rng = np.random.default_rng(2)
    cohort = sample_subcohort(generate_cohort(cfg, 6), cfg.m, rng)
    kept = sample_phase3(cohort, {"0": 0.5, "1": 0.9}, rng, mechanism="srswor")
    for s, p in (("0", 0.5), ("1", 0.9)):
        members = cohort.in_phase2 & (cohort.status == int(s))
        assert int((kept.in_phase3 & members).sum()) == round(p * members.sum())
    assert np.all(kept.weight3[kept.in_phase3 & (cohort.status == 1)] == 1 / 0.9)
    assert np.all(np.isnan(kept.covariates["X2"][kept.in_phase2 & ~kept.in_phase3]))


def test_config_errors():
    with pytest.raises(ConfigError):
        SimConfig.from_dict({**BASE, "typo": 1})
    with pytest.raises(ConfigError):
        SimConfig.from_dict({k: v for k, v in BASE.items() if k != "beta"})
    with pytest.raises(ConfigError):
        SimConfig.from_dict({**BASE, "beta": {"W": 1.0}})
    with pytest.raises(ConfigError):
        SimConfig.from_dict({**BASE, "covariates": {**BASE["covariates"], "X1": {"dist": "gamma"}}})
    with pytest.raises(ConfigError):
        AnalysisSpec.from_dict({"cox_phase1": ["X1"], "bogus": True})
    cfg = SimConfig.from_dict(BASE)
    with pytest.raises(ConfigError):
        run_monte_carlo(cfg, AnalysisSpec(("X1",)), replicates=2)


def test_summary_is_byte_identical_across_runs_and_threads():
    cfg = SimConfig.from_dict({**BASE, "n": 600, "m": {"0": 80, "1": 60}})
    spec = AnalysisSpec(("X1", "X3"), ("X2",), profiles=PROFILES, tau1=55, tau2=65)
    a = run_monte_carlo(cfg, spec, replicates=6, n_jobs=1)
    b = run_monte_carlo(cfg, spec, replicates=6, n_jobs=1)
    c = run_monte_carlo(cfg, spec, replicates=6, n_jobs=2)
    assert summary_csv(a.summary()) == summary_csv(b.summary()) == summary_csv(c.summary())
    assert summary_json(a) == summary_json(c)


@pytest.mark.montecarlo
def test_full_cohort_estimates_are_unbiased():
    cfg = SimConfig.from_dict(BASE)
    spec = AnalysisSpec(("X1", "X2", "X3"), sampled=False, profiles=PROFILES, tau1=55, tau2=65)
    result = run_monte_carlo(cfg, spec, replicates=500)
    assert result.failures == 0
    for row in result.summary():
        if row["parameter"].startswith("beta."):
            assert abs(row["mean_estimate"] - row["truth"]) <= 3 * row["mc_se_mean"], row
