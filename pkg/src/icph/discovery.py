"""Subset scan for h-invariant predictor sets.

Every subset ``S`` of the (optionally screened) predictors is tested for
equality of the switching regression of ``Y`` on ``X^S`` across
environments.  The estimate is the intersection of all accepted subsets,
the empty set when nothing is accepted.  Predictor ``j`` gets the p-value
``max{p_S : j not in S}``, or 1 for every predictor if no subset is
accepted.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import combinations

import numpy as np
from sklearn.linear_model import lasso_path

from .core import Dataset
from .errors import DegenerateData, InsufficientData, SubsetBlowup
from .estimation import FitOptions
from .invariance import (
    DEFAULT_TEST_PARAMETERS,
    MAX_ASSIGNMENTS,
    test_equality_multi_degree,
    test_equality_sr,
)
from .simulate import ScmSpec, simulate

log = logging.getLogger(__name__)

DEFAULT_SUBSET_CAP = 2**12


@dataclass(frozen=True)
class DiscoveryOptions:
    fit: FitOptions = field(default_factory=FitOptions)
    alpha: float = 0.05
    test_parameters: tuple = DEFAULT_TEST_PARAMETERS
    degrees: tuple | None = None
    screening_k: int | None = None
    max_subset_size: int | None = None
    subset_cap: int = DEFAULT_SUBSET_CAP
    max_assignments: int = MAX_ASSIGNMENTS
    workers: int = 1

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.screening_k is not None and self.screening_k < 1:
            raise ValueError("screening_k must be at least 1")
        if self.degrees is not None:
            degs = tuple(sorted({int(k) for k in self.degrees}))
            if not degs or degs[0] < 1:
                raise ValueError("degrees must be positive integers")
            object.__setattr__(self, "degrees", degs)
        object.__setattr__(self, "test_parameters", tuple(self.test_parameters))

    @property
    def multi_degree(self) -> bool:
        return self.degrees is not None and len(self.degrees) > 1


@dataclass(frozen=True)
class DiscoveryResult:
    set_pvalues: dict
    s_hat: tuple
    predictor_pvalues: np.ndarray
    predictor_names: tuple
    alpha: float
    screened: tuple
    screening_order: tuple = ()
    tests: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def accepted(self) -> list:
        return [S for S, p in self.set_pvalues.items() if p > self.alpha]

    @property
    def guarantee_level(self) -> float:
        """Asymptotic coverage of ``s_hat`` (halved budget when screening)."""
        return 1.0 - (2.0 if self.screening_order else 1.0) * self.alpha

    def to_dict(self) -> dict:
        names = self.predictor_names
        sets = []
        for S, p in self.set_pvalues.items():
            t = self.tests.get(S)
            sets.append({
                "set": [names[j] for j in S],
                "p_value": float(p),
                "floored": bool(getattr(t, "floored", False)),
                "degenerate": bool(getattr(t, "degenerate", False)),
            })
        return {
            "alpha": float(self.alpha),
            "s_hat": [names[j] for j in self.s_hat],
            "set_pvalues": sets,
            "predictor_pvalues": {names[j]: float(p) for j, p in enumerate(self.predictor_pvalues)},
            "screened": [names[j] for j in self.screened],
            "screening": bool(self.screening_order),
            "guarantee_level": self.guarantee_level,
        }


def lasso_screen(y, x, k: int, n_alphas: int = 200) -> list[int]:
    """First ``k`` predictors to enter along the Lasso path.

    Columns are centered and scaled to unit variance.  Predictors that
    enter at the same grid point are ordered by the size of their
    coefficient there; predictors that never enter are appended by
    decreasing absolute correlation with ``y``.
    """
    y = np.asarray(y, dtype=float).ravel()
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if k < 1:
        raise ValueError("k must be at least 1")
    if n < 2 or not np.std(y) > 0:
        raise DegenerateData("screening needs at least two points and a non-constant response")
    sd = x.std(axis=0)
    usable = np.flatnonzero(sd > 0)
    if usable.size == 0:
        raise DegenerateData("all predictors are constant")
    xs = (x[:, usable] - x[:, usable].mean(axis=0)) / sd[usable]
    yc = y - y.mean()
    _, coefs, _ = lasso_path(xs, yc, n_alphas=n_alphas, eps=1e-4)
    active = coefs != 0
    entered = []
    for col in range(active.shape[1]):
        new = [j for j in np.flatnonzero(active[:, col]) if j not in entered]
        new.sort(key=lambda j: -abs(coefs[j, col]))
        entered.extend(new)
    corr = np.abs(xs.T @ yc)
    rest = sorted((j for j in range(usable.size) if j not in entered), key=lambda j: -corr[j])
    order = [int(usable[j]) for j in entered + rest]
    order += [j for j in range(d) if j not in order]
    return order[:k]


def _subsets(columns, max_size):
    out = []
    for size in range(0, max_size + 1):
        out.extend(combinations(columns, size))
    return out


def _test_subset(data, S, options: DiscoveryOptions):
    if options.multi_degree:
        return test_equality_multi_degree(
            data, S, options.fit, options.degrees, options.test_parameters, options.max_assignments
        )
    fit_opts = options.fit
    if options.degrees is not None:
        fit_opts = replace(fit_opts, num_states=options.degrees[0])
    return test_equality_sr(data, S, fit_opts, options.test_parameters, options.max_assignments)


def _strip(result):
    # fitted models are large and not needed by callers of discover
    if hasattr(result, "per_degree"):
        return replace(result, per_degree={k: _strip(r) for k, r in result.per_degree.items()})
    return replace(result, fits=())


def _run_one(args):
    data, S, options = args
    return _strip(_test_subset(data, S, options))


def discover(data: Dataset, options: DiscoveryOptions = DiscoveryOptions()) -> DiscoveryResult:
    """Estimate the intersection of all accepted predictor sets."""
    if data.num_envs < 2:
        raise InsufficientData("discovery needs at least two environments")
    d = data.d
    order = ()
    if options.screening_k is not None and options.screening_k < d:
        order = tuple(lasso_screen(data.y, data.x, options.screening_k))
        columns = tuple(sorted(order))
    else:
        columns = tuple(range(d))
    max_size = len(columns) if options.max_subset_size is None else min(options.max_subset_size, len(columns))
    subsets = _subsets(columns, max_size)
    if len(subsets) > options.subset_cap:
        raise SubsetBlowup(
            f"{len(subsets)} subsets exceed the cap of {options.subset_cap}; enable screening"
        )
    jobs = [(data, S, options) for S in subsets]
    if options.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=options.workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(job) for job in jobs]
    tests = dict(zip(subsets, results))
    set_pvalues = {S: float(r.p_value) for S, r in tests.items()}
    accepted = [set(S) for S, p in set_pvalues.items() if p > options.alpha]
    if accepted:
        s_hat = tuple(sorted(set.intersection(*accepted)))
        pvals = np.array([
            max((p for S, p in set_pvalues.items() if j not in S), default=1.0) for j in range(d)
        ])
    else:
        s_hat = ()
        pvals = np.ones(d)
    return DiscoveryResult(set_pvalues, s_hat, pvals, data.predictor_names, options.alpha,
                           columns, order, tests)


@dataclass(frozen=True)
class CoverageCheck:
    rate: float
    se: float
    num_reps: int
    s_hats: tuple

    def to_dict(self) -> dict:
        return {"rate": self.rate, "se": self.se, "num_reps": self.num_reps,
                "s_hats": [list(s) for s in self.s_hats]}


def coverage_guarantee_check(num_reps: int, scm_spec: ScmSpec, options: DiscoveryOptions) -> CoverageCheck:
    """Monte-Carlo estimate of ``P(s_hat is a subset of S*)``.

    Repetition ``r`` simulates with seed ``scm_spec.seed + r``.
    """
    if num_reps < 1:
        raise ValueError("num_reps must be positive")
    s_star = set(scm_spec.s_star)
    hits = 0
    s_hats = []
    for r in range(num_reps):
        sim = simulate(replace(scm_spec, seed=scm_spec.seed + r))
        res = discover(sim.data, options)
        s_hats.append(res.s_hat)
        hits += set(res.s_hat) <= s_star
    rate = hits / num_reps
    return CoverageCheck(rate, float(np.sqrt(rate * (1 - rate) / num_reps)), num_reps, tuple(s_hats))
