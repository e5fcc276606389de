"""Monte-Carlo experiment harness.

``run_experiment(kind, config)`` returns a list of flat rows, one per grid
cell (or per parameter draw for ``coverage_vs_gmep``).  Repetition ``r``
of every cell uses a seed derived from ``(config.seed, r)`` only, so cells
share random numbers: for instance ``h_violation`` at ``delta = 0``
reproduces the ``power`` data exactly.
"""

from __future__ import annotations

import hashlib
import json
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats

from .core import EqualVariances, LowerBound, parse_constraint
from .discovery import DiscoveryOptions, discover
from .errors import ICPHError, InvalidSpec
from .estimation import FitOptions, fit
from .invariance import chi2_sf, region_from_fit
from .simulate import (
    ROBUSTNESS_VARIANTS,
    ScmSpec,
    coverage_gmep,
    sample_coverage_params,
    simulate,
    three_env_gmep,
)

KINDS = (
    "coverage_vs_gmep",
    "level",
    "power",
    "robustness",
    "nonbinary",
    "many_predictors",
    "h_violation",
)


@dataclass(frozen=True)
class ExperimentConfig:
    reps: int = 100
    seed: int = 0
    alpha: float = 0.05
    method: str = "NLM"
    constraint: str = "equality"
    num_restarts: int = 5
    n_values: tuple = (100, 300, 500)
    delta_beta_values: tuple = (0.5, 1.5)
    generators: tuple = ROBUSTNESS_VARIANTS
    num_states_values: tuple = (2, 3)
    degrees: tuple = (2, 3, 4, 5)
    num_extra_values: tuple = (100,)
    screening_k: int = 5
    deltas: tuple = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    draws: int = 10
    coverage_n: int = 100
    gmep_range: tuple = (0.0, 1.0)
    with_gmep: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.reps < 1 or self.draws < 1:
            raise InvalidSpec("reps and draws must be positive")
        if not 0 < self.alpha < 1:
            raise InvalidSpec("alpha must lie in (0, 1)")
        for name in ("n_values", "delta_beta_values", "generators", "num_states_values",
                     "degrees", "num_extra_values", "deltas", "gmep_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def hash(self) -> str:
        # parallelism does not change results, so it stays out of the hash
        settings = {k: v for k, v in asdict(self).items() if k != "workers"}
        blob = json.dumps(settings, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def rep_seed(base: int, rep: int) -> int:
    return int(np.random.SeedSequence([base, rep]).generate_state(1)[0])


def _fit_options(config, num_states=2):
    return FitOptions(
        method=config.method,
        constraint=parse_constraint(config.constraint),
        num_states=num_states,
        num_restarts=config.num_restarts,
        seed=0,
    )


def _binom_se(p, n):
    return float(np.sqrt(p * (1 - p) / n))


# ---------------------------------------------------------------------------
# ICPH cells
# ---------------------------------------------------------------------------


def _icph_rep(job):
    spec, options, with_gmep = job
    sim = simulate(spec)
    t0 = time.perf_counter()
    try:
        res = discover(sim.data, options)
    except ICPHError as exc:
        return {"failed": True, "error": type(exc).__name__}
    s_star = tuple(spec.s_star)
    p_star = res.set_pvalues.get(s_star)
    out = {
        "failed": False,
        "s_hat": res.s_hat,
        "s_hat_names": tuple(sim.data.predictor_names[j] for j in res.s_hat),
        "p_s_star": p_star,
        "screened_ok": set(s_star) <= set(res.screened),
        "degenerate": sum(bool(getattr(t, "degenerate", False)) for t in res.tests.values()),
        "seconds": time.perf_counter() - t0,
    }
    if with_gmep and spec.generator != "continuous_h":
        out["gmep"] = three_env_gmep(sim.truth["params"], sim.truth["env_lambdas"][0])
    return out


def _map(fn, jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def _icph_cell(config, spec, options, extra):
    start = time.perf_counter()
    jobs = [(replace(spec, seed=rep_seed(config.seed, r)), options, config.with_gmep)
            for r in range(config.reps)]
    outs = _map(_icph_rep, jobs, config.workers)
    done = [o for o in outs if not o["failed"]]
    n_ok = max(len(done), 1)
    s_star = set(spec.s_star)
    false_disc = sum(not set(o["s_hat"]) <= s_star for o in done) / n_ok
    rej_star = sum(o["p_s_star"] is not None and o["p_s_star"] <= config.alpha for o in done) / n_ok
    hist = Counter("{" + ",".join(o["s_hat_names"]) + "}" for o in done)
    row = {
        "generator": spec.generator,
        "n": spec.n,
        "delta_beta": spec.delta_beta,
        **extra,
        "reps": config.reps,
        "failed_reps": len(outs) - len(done),
        "fdr": false_disc,
        "fdr_se": _binom_se(false_disc, n_ok),
        "reject_s_star": rej_star,
    }
    for j, name in enumerate(("X1", "X2", "X3")):
        row[f"reject_{name}"] = sum(j in o["s_hat"] for o in done) / n_ok
    if any("gmep" in o for o in done):
        row["mean_gmep"] = float(np.mean([o["gmep"] for o in done if "gmep" in o]))
    if options.screening_k is not None:
        row["screening_hit_rate"] = sum(o["screened_ok"] for o in done) / n_ok
    row["degenerate_tests"] = int(sum(o["degenerate"] for o in done))
    row["s_hat_counts"] = json.dumps(dict(sorted(hist.items())), sort_keys=True)
    row["modal_s_hat"] = max(sorted(hist), key=lambda k: hist[k]) if hist else ""
    # comparison methods are out of scope and never imitated
    row["kmeans_icp"] = None
    row["jci_pc"] = None
    row["seed"] = config.seed
    row["config_hash"] = config.hash()
    row["runtime_s"] = round(time.perf_counter() - start, 3)
    return row


def _disc_options(config, num_states=2, degrees=None, screening_k=None):
    return DiscoveryOptions(
        fit=_fit_options(config, num_states),
        alpha=config.alpha,
        degrees=degrees,
        screening_k=screening_k,
    )


def _grid_level(config):
    rows = []
    for n in config.n_values:
        for db in config.delta_beta_values:
            spec = ScmSpec("three_env_scm", n=n, delta_beta=db)
            rows.append(_icph_cell(config, spec, _disc_options(config), {}))
    return rows


def _robustness(config):
    rows = []
    for g in config.generators:
        for n in config.n_values:
            for db in config.delta_beta_values:
                spec = ScmSpec(g, n=n, delta_beta=db)
                rows.append(_icph_cell(config, spec, _disc_options(config), {}))
    return rows


def _nonbinary(config):
    rows = []
    for nst in config.num_states_values:
        for n in config.n_values:
            for db in config.delta_beta_values:
                spec = ScmSpec("nonbinary", n=n, delta_beta=db, num_states=nst)
                opts = _disc_options(config, degrees=config.degrees)
                extra = {"num_states": nst, "degrees": ",".join(map(str, opts.degrees))}
                rows.append(_icph_cell(config, spec, opts, extra))
    return rows


def _many_predictors(config):
    rows = []
    for m in config.num_extra_values:
        for n in config.n_values:
            for db in config.delta_beta_values:
                spec = ScmSpec("extra_predictors", n=n, delta_beta=db, num_extra=m)
                opts = _disc_options(config, screening_k=config.screening_k)
                rows.append(_icph_cell(config, spec, opts, {"num_extra": m}))
    return rows


def _h_violation(config):
    rows = []
    for delta in config.deltas:
        for n in config.n_values:
            for db in config.delta_beta_values:
                spec = ScmSpec("y_intervention", n=n, delta_beta=db, delta=delta)
                rows.append(_icph_cell(config, spec, _disc_options(config), {"delta": delta}))
    return rows


# ---------------------------------------------------------------------------
# coverage of the adjusted regions
# ---------------------------------------------------------------------------


def coverage_pvalue(fit_result, theta0) -> float:
    """Largest ``alpha`` whose adjusted region misses ``theta0``."""
    region = region_from_fit(fit_result)
    return chi2_sf(float(np.min(region.distances(theta0))), region.dim)


def _coverage_rep(job):
    params, n, seed, fit_opts = job
    sim = simulate(ScmSpec("coverage_scm", n=n, seed=seed, params=params))
    try:
        res = fit(sim.data.y, sim.data.x, fit_opts)
        return coverage_pvalue(res, sim.truth["theta0"])
    except ICPHError:
        return None


def sample_models_in_gmep_range(seed, count, lo, hi, max_tries=100_000):
    """Draw coverage-model parameters until ``count`` fall in ``[lo, hi]``."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(max_tries):
        p = sample_coverage_params(rng)
        g = coverage_gmep(p)
        if lo <= g <= hi:
            out.append((p, g))
            if len(out) == count:
                return out
    raise InvalidSpec(f"could not find {count} models with GMEP in [{lo}, {hi}]")


def _coverage_vs_gmep(config):
    fit_opts = FitOptions(method=config.method, constraint=EqualVariances(),
                          num_restarts=config.num_restarts)
    models = sample_models_in_gmep_range(config.seed, config.draws, *config.gmep_range)
    rows = []
    for i, (params, g) in enumerate(models):
        start = time.perf_counter()
        jobs = [(params, config.coverage_n, rep_seed(config.seed + 1 + i, r), fit_opts)
                for r in range(config.reps)]
        pvals = _map(_coverage_rep, jobs, config.workers)
        ok = np.array([p for p in pvals if p is not None])
        cov = float(np.mean(ok > config.alpha)) if ok.size else float("nan")
        rows.append({
            "draw": i,
            "gmep": g,
            "n": config.coverage_n,
            "reps": config.reps,
            "failed_reps": int(len(pvals) - ok.size),
            "coverage": cov,
            "coverage_se": _binom_se(cov, max(ok.size, 1)),
            "pvalue_ks": float(stats.kstest(ok, "uniform").statistic) if ok.size else float("nan"),
            **{f"param_{k}": v for k, v in params.items()},
            "seed": config.seed,
            "config_hash": config.hash(),
            "runtime_s": round(time.perf_counter() - start, 3),
        })
    return rows


_DISPATCH = {
    "coverage_vs_gmep": _coverage_vs_gmep,
    "level": _grid_level,
    "power": _grid_level,
    "robustness": _robustness,
    "nonbinary": _nonbinary,
    "many_predictors": _many_predictors,
    "h_violation": _h_violation,
}


def run_experiment(kind: str, config: ExperimentConfig = ExperimentConfig()) -> list[dict]:
    """Run one experiment family and return its summary table."""
    if kind not in _DISPATCH:
        raise InvalidSpec(f"unknown experiment kind {kind!r}; choose from {', '.join(KINDS)}")
    return _DISPATCH[kind](config)


def strip_runtime(rows):
    """Rows without timing columns, for reproducibility comparisons."""
    return [{k: v for k, v in r.items() if k != "runtime_s"} for r in rows]
