import json
from dataclasses import replace

import numpy as np
import pytest

from icph.core import EqualVariances
from icph.errors import InvalidSpec
from icph.estimation import FitOptions, fit
from icph.experiments import (
    ExperimentConfig,
    coverage_pvalue,
    rep_seed,
    run_experiment,
    sample_models_in_gmep_range,
    strip_runtime,
)
from icph.simulate import ScmSpec, simulate

SMALL = ExperimentConfig(reps=3, n_values=(150,), delta_beta_values=(1.5,), with_gmep=False)


def test_level_rows_are_reproducible():
    a = run_experiment("level", SMALL)
    b = run_experiment("level", SMALL)
    assert strip_runtime(a) == strip_runtime(b)
    row = a[0]
    assert row["reps"] == 3 and row["seed"] == 0 and row["config_hash"] == SMALL.hash()
    counts = json.loads(row["s_hat_counts"])
    assert sum(counts.values()) == 3 - row["failed_reps"]
    assert row["kmeans_icp"] is None and row["jci_pc"] is None
    assert 0 <= row["fdr"] <= 1


def test_zero_violation_equals_power():
    power = run_experiment("power", SMALL)
    viol = run_experiment("h_violation", replace(SMALL, deltas=(0.0,)))
    skip = {"runtime_s", "config_hash", "generator", "delta"}
    strip = lambda r: {k: v for k, v in r.items() if k not in skip}  # noqa: E731
    assert strip(viol[0]) == strip(power[0])


def test_hash_ignores_workers_only():
    assert SMALL.hash() == replace(SMALL, workers=4).hash()
    assert SMALL.hash() != replace(SMALL, seed=1).hash()


def test_rep_seeds_are_distinct_and_stable():
    seeds = [rep_seed(0, r) for r in range(100)]
    assert len(set(seeds)) == 100
    assert rep_seed(3, 7) == rep_seed(3, 7)


def test_nonbinary_row_records_degrees():
    cfg = replace(SMALL, reps=1, num_states_values=(2,), degrees=(2, 3))
    (row,) = run_experiment("nonbinary", cfg)
    assert row["num_states"] == 2 and row["degrees"] == "2,3"


def test_many_predictors_reports_screening():
    cfg = replace(SMALL, reps=2, num_extra_values=(10,), screening_k=3)
    (row,) = run_experiment("many_predictors", cfg)
    assert 0 <= row["screening_hit_rate"] <= 1
    assert row["num_extra"] == 10


def test_coverage_rows():
    cfg = ExperimentConfig(reps=5, draws=2, coverage_n=200, gmep_range=(0.6, 1.0))
    rows = run_experiment("coverage_vs_gmep", cfg)
    assert [r["draw"] for r in rows] == [0, 1]
    for r in rows:
        assert 0.6 <= r["gmep"] <= 1.0
        assert 0 <= r["coverage"] <= 1
    assert strip_runtime(rows) == strip_runtime(run_experiment("coverage_vs_gmep", cfg))


def test_coverage_pvalue_uses_closest_orbit_member():
    sim = simulate(ScmSpec("coverage_scm", n=500, seed=3, params={"beta1": -0.9, "beta2": 0.9}))
    res = fit(sim.data.y, sim.data.x, FitOptions(constraint=EqualVariances()))
    theta0 = sim.truth["theta0"]
    swapped = theta0[[2, 3, 0, 1, 4]]
    assert coverage_pvalue(res, theta0) == pytest.approx(coverage_pvalue(res, swapped), rel=1e-12)


def test_gmep_range_sampler():
    models = sample_models_in_gmep_range(4, 3, 0.7, 0.8)
    assert len(models) == 3
    assert all(0.7 <= g <= 0.8 for _, g in models)
    with pytest.raises(InvalidSpec):
        sample_models_in_gmep_range(4, 1, 2.0, 3.0, max_tries=5)


def test_unknown_kind_and_bad_config():
    with pytest.raises(InvalidSpec):
        run_experiment("nope", SMALL)
    with pytest.raises(InvalidSpec):
        ExperimentConfig(reps=0)


def test_parallel_workers_match_serial():
    a = run_experiment("level", replace(SMALL, reps=2))
    b = run_experiment("level", replace(SMALL, reps=2, workers=2))
    assert strip_runtime(a) == strip_runtime(b)
    assert np.isfinite(a[0]["fdr_se"])
