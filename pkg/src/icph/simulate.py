"""Synthetic data generators, GMEP and latent-state decoding.

Generators
----------
``coverage_scm``
    One predictor, two IID states, shared noise variance::

        H ~ Ber(lambda),  X = mu_x + sigma_x N,  Y = mu_y + beta_H X + sigma_y N

``three_env_scm``
    ``(Y, X1, X2, X3, H)`` with ``X1 -> X2 -> Y -> X3`` and ``X1 -> Y``,
    split at two random change points into an observational block, a block
    with a shifted noise on ``X2`` and a block where ``X3`` is set
    independently of ``Y``.  Mixing weights are redrawn per environment.
    The robustness, non-binary, extra-predictor and ``Y``-intervention
    variants modify this generator.

All draws use ``numpy.random.default_rng(seed)``; latent states are
``0 .. l-1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np
from scipy import special

from .core import Dataset, design_matrix, posterior_state_probs
from .errors import IntegrationFailure, InvalidSpec

GENERATORS = (
    "coverage_scm",
    "three_env_scm",
    "heterogeneous_variances",
    "uniform_noise",
    "laplace_noise",
    "h_affects_x1_mean",
    "h_affects_x1_var",
    "continuous_h",
    "nonbinary",
    "extra_predictors",
    "y_intervention",
)
ROBUSTNESS_VARIANTS = GENERATORS[2:8]


@dataclass(frozen=True)
class ScmSpec:
    """What to simulate.

    ``params`` may pin any of the sampled parameters by name (for instance
    ``{"beta1": 0.5}`` for ``coverage_scm``); everything else is drawn from
    the default ranges.
    """

    generator: str = "three_env_scm"
    n: int = 500
    seed: int = 0
    delta_beta: float = 1.5
    num_states: int = 2
    num_extra: int = 0
    delta: float = 0.0
    block_size: int = 1
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise InvalidSpec(f"unknown generator {self.generator!r}")
        if self.n < 1:
            raise InvalidSpec("n must be positive")
        if self.num_states < 1 or (self.generator == "nonbinary" and self.num_states < 2):
            raise InvalidSpec("num_states must be at least 2 for the non-binary generator")
        if self.num_extra < 0 or self.block_size < 1:
            raise InvalidSpec("num_extra must be >= 0 and block_size >= 1")
        if self.generator == "three_env_scm" or self.generator in ROBUSTNESS_VARIANTS:
            if self.n < 60:
                raise InvalidSpec("three-environment generators need n >= 60")

    @property
    def s_star(self) -> tuple:
        """Column indices (0-based) of the causal parents of ``Y``."""
        if self.generator == "coverage_scm":
            return (0,)
        return (0, 1)


@dataclass(frozen=True)
class Simulation:
    data: Dataset
    states: np.ndarray
    truth: dict


# ---------------------------------------------------------------------------
# coverage model
# ---------------------------------------------------------------------------


def sample_coverage_params(rng, fixed=None) -> dict:
    p = {
        "mu_x": rng.uniform(-1, 1),
        "mu_y": rng.uniform(-1, 1),
        "beta1": rng.uniform(-1, 1),
        "beta2": rng.uniform(-1, 1),
        "sigma_x": rng.uniform(0.1, 1),
        "sigma_y": rng.uniform(0.1, 0.5),
        "lam": rng.uniform(0.3, 0.7),
    }
    p.update(fixed or {})
    return {k: float(v) for k, v in p.items()}


def coverage_theta0(p) -> np.ndarray:
    """True ``theta`` in fitting order: intercept and slope per state, then the variance."""
    return np.array([p["mu_y"], p["beta1"], p["mu_y"], p["beta2"], p["sigma_y"] ** 2])


def _coverage(spec: ScmSpec, rng) -> Simulation:
    p = sample_coverage_params(rng, spec.params)
    n = spec.n
    nblocks = -(-n // spec.block_size)
    hb = (rng.random(nblocks) >= p["lam"]).astype(int)
    h = np.repeat(hb, spec.block_size)[:n]
    x = p["mu_x"] + p["sigma_x"] * rng.standard_normal(n)
    beta = np.where(h == 0, p["beta1"], p["beta2"])
    y = p["mu_y"] + beta * x + p["sigma_y"] * rng.standard_normal(n)
    data = Dataset(y, x[:, None], np.ones(n, dtype=int), ("X",))
    truth = {
        "generator": spec.generator,
        "s_star": spec.s_star,
        "params": p,
        "theta0": coverage_theta0(p),
        "lam": np.array([p["lam"], 1 - p["lam"]]),
    }
    return Simulation(data, h, truth)


# ---------------------------------------------------------------------------
# three-environment family
# ---------------------------------------------------------------------------


def _beta(rng, size=None):
    return rng.choice([-1.0, 1.0], size=size) * rng.uniform(0.5, 1.5, size=size)


def change_points(rng, n: int) -> tuple[int, int]:
    """Two change points leaving every block at least ``max(20, n/10)`` points."""
    a = max(20, math.ceil(n / 10))
    if 3 * a > n:
        raise InvalidSpec(f"n={n} is too small for three environments of size {a}")
    while True:
        t1, t2 = np.sort(rng.choice(np.arange(1, n), size=2, replace=False))
        if t1 >= a and t2 - t1 >= a and n - t2 >= a:
            return int(t1), int(t2)


def _mixing(rng, nst):
    if nst == 2:
        lam = rng.uniform(0.3, 0.7)
        return np.array([lam, 1 - lam])
    w = rng.uniform(0.1, 1.0 / (nst + 1), size=nst)
    return w / w.sum()


def sample_three_env_params(spec: ScmSpec, rng) -> dict:
    nst = spec.num_states if spec.generator == "nonbinary" else 2
    g = spec.generator
    mu = lambda size=None: rng.uniform(-0.2, 0.2, size=size)  # noqa: E731
    var = lambda size=None: rng.uniform(0.1, 0.3, size=size)  # noqa: E731
    p = {
        "num_states": nst,
        "mu1": mu(), "mu2": mu(), "mu3": mu(),
        "var1": var(), "var2": var(), "var3": var(),
        "beta21": _beta(rng), "beta3y": _beta(rng),
        "mu_y": mu(nst),
    }
    b1, b2 = _beta(rng), _beta(rng)
    steps = np.arange(nst)
    p["beta_y1"] = b1 + np.sign(b1) * steps * spec.delta_beta
    p["beta_y2"] = b2 + np.sign(b2) * steps * spec.delta_beta
    if g == "heterogeneous_variances":
        p["var_y"] = var(nst)
    else:
        p["var_y"] = np.repeat(var(), nst)
    if g == "h_affects_x1_mean":
        p["mu1_state"] = rng.uniform(-1, 1, size=nst)
    if g == "h_affects_x1_var":
        p["var1_state"] = rng.uniform(0.1, 1, size=nst)
    if g == "continuous_h":
        p["mu_y_c"] = mu()
        p["beta_y1_c"], p["beta_y2_c"] = _beta(rng), _beta(rng)
        p["var_y_c"] = var()
    p["e2_mu2"] = rng.uniform(1, 1.5)
    p["e2_var2"] = rng.uniform(1, 1.5)
    p["e3_mu3"] = rng.uniform(-1, -0.5)
    p.update(spec.params)
    return p


def _noise_y(g, rng, size):
    if g == "uniform_noise":
        return rng.uniform(-math.sqrt(3), math.sqrt(3), size)
    if g == "laplace_noise":
        return rng.laplace(0.0, 1.0 / math.sqrt(2), size)
    return rng.standard_normal(size)


def _three_env(spec: ScmSpec, rng) -> Simulation:
    g = spec.generator
    n = spec.n
    p = sample_three_env_params(spec, rng)
    nst = p["num_states"]
    t1, t2 = change_points(rng, n)
    env = np.concatenate([np.full(t1, 1), np.full(t2 - t1, 2), np.full(n - t2, 3)])
    lams = [_mixing(rng, nst) for _ in range(3)]
    h = np.concatenate([rng.choice(nst, size=int(np.sum(env == e)), p=lams[e - 1]) for e in (1, 2, 3)])
    if g == "continuous_h":
        h_cont = rng.standard_normal(n)

    if g == "h_affects_x1_mean":
        x1 = p["mu1_state"][h] + math.sqrt(p["var1"]) * rng.standard_normal(n)
    elif g == "h_affects_x1_var":
        x1 = p["mu1"] + np.sqrt(p["var1_state"][h]) * rng.standard_normal(n)
    else:
        x1 = p["mu1"] + math.sqrt(p["var1"]) * rng.standard_normal(n)

    n2 = p["mu2"] + math.sqrt(p["var2"]) * rng.standard_normal(n)
    in2 = env == 2
    n2[in2] = p["e2_mu2"] + math.sqrt(p["e2_var2"]) * rng.standard_normal(in2.sum())
    x2 = p["beta21"] * x1 + n2

    b1 = np.broadcast_to(p["beta_y1"], (nst,))[h].copy()
    b2 = np.broadcast_to(p["beta_y2"], (nst,))[h].copy()
    if g == "y_intervention":
        b1[env == 2] += spec.delta
        b2[env == 2] += spec.delta
        b1[env == 3] -= spec.delta
        b2[env == 3] -= spec.delta
    ny = _noise_y(g, rng, n)
    if g == "continuous_h":
        y = (p["mu_y_c"] + p["beta_y1_c"] * x1 + p["beta_y2_c"] * x2) * h_cont + math.sqrt(p["var_y_c"]) * ny
    else:
        y = p["mu_y"][h] + b1 * x1 + b2 * x2 + np.sqrt(p["var_y"][h]) * ny

    x3 = p["beta3y"] * y + p["mu3"] + math.sqrt(p["var3"]) * rng.standard_normal(n)
    in3 = env == 3
    x3[in3] = p["e3_mu3"] + math.sqrt(p["var3"]) * rng.standard_normal(in3.sum())

    cols = [x1, x2, x3]
    names = ["X1", "X2", "X3"]
    if spec.num_extra:
        alpha = rng.uniform(-1, 1, size=spec.num_extra)
        z = x3[:, None] * alpha[None, :] + rng.standard_normal((n, spec.num_extra))
        cols.extend(z.T)
        names.extend(f"Z{j + 1}" for j in range(spec.num_extra))
        p["alpha_z"] = alpha
    data = Dataset(y, np.column_stack(cols), env, tuple(names))
    truth = {
        "generator": g,
        "s_star": spec.s_star,
        "params": p,
        "change_points": (t1, t2),
        "env_lambdas": lams,
    }
    states = h_cont if g == "continuous_h" else h
    return Simulation(data, states, truth)


def simulate(spec: ScmSpec) -> Simulation:
    """Draw one data set; identical ``spec`` gives identical output."""
    rng = np.random.default_rng(spec.seed)
    if spec.generator == "coverage_scm":
        return _coverage(spec, rng)
    return _three_env(spec, rng)


# ---------------------------------------------------------------------------
# GMEP
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GmepEstimate:
    value: float
    se: float
    method: str

    def __float__(self):
        return self.value


def _posterior_factors(y, x_design, betas, variances, lam):
    mean = x_design @ betas.T
    logd = -0.5 * (np.log(2 * np.pi * variances) + (y[..., None] - mean) ** 2 / variances)
    a = logd + np.log(lam)
    return np.exp(a - special.logsumexp(a, axis=-1, keepdims=True))


GL_NODES = 8
GL_HALF_WIDTH = 8.5


def _panel_rule(panels):
    """Composite Gauss-Legendre nodes and standard-normal-weighted weights."""
    z, w = np.polynomial.legendre.leggauss(GL_NODES)
    edges = np.linspace(-GL_HALF_WIDTH, GL_HALF_WIDTH, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    u = (mid[:, None] + half[:, None] * z[None, :]).ravel()
    wu = (half[:, None] * w[None, :]).ravel() * np.exp(-0.5 * u * u) / math.sqrt(2 * math.pi)
    return u, wu


def _gmep_quadrature(betas, variances, lam, x_mean, x_sd, intercept, tol=1e-5):
    # the Gaussian mass outside +-8.5 sd is below 1e-16, so truncation is harmless
    prev = None
    for panels in (8, 16, 32, 64, 128):
        u, wu = _panel_rule(panels)
        X = design_matrix((x_mean + x_sd * u)[:, None], intercept)
        per_state = np.empty(len(lam))
        for j in range(len(lam)):
            y = (X @ betas[j])[:, None] + math.sqrt(variances[j]) * u[None, :]
            post = _posterior_factors(y, X[:, None, :], betas, variances, lam)[..., j]
            per_state[j] = wu @ post @ wu
        val = float(np.exp(np.mean(np.log(per_state))))
        if prev is not None and abs(val - prev) < tol:
            return GmepEstimate(val, abs(val - prev), "quadrature")
        prev = val
    raise IntegrationFailure("GMEP quadrature did not converge")


def gmep_monte_carlo(betas, variances, lam, x_mean, x_cov, intercept=True,
                     num_samples=100_000, seed=0) -> GmepEstimate:
    """Monte-Carlo GMEP with a delta-method standard error."""
    betas = np.atleast_2d(np.asarray(betas, dtype=float))
    variances = np.broadcast_to(np.asarray(variances, dtype=float), (betas.shape[0],))
    lam = np.asarray(lam, dtype=float)
    x_mean = np.atleast_1d(np.asarray(x_mean, dtype=float))
    x_cov = np.atleast_2d(np.asarray(x_cov, dtype=float))
    rng = np.random.default_rng(seed)
    nst = len(lam)
    means, ses = np.empty(nst), np.empty(nst)
    for j in range(nst):
        x = rng.multivariate_normal(x_mean, x_cov, size=num_samples)
        X = design_matrix(x, intercept)
        y = X @ betas[j] + np.sqrt(variances[j]) * rng.standard_normal(num_samples)
        post = _posterior_factors(y, X, betas, variances, lam)[:, j]
        means[j] = post.mean()
        ses[j] = post.std(ddof=1) / math.sqrt(num_samples)
    val = float(np.exp(np.mean(np.log(means))))
    se = float(val / nst * math.sqrt(np.sum((ses / means) ** 2)))
    return GmepEstimate(val, se, "monte-carlo")


def gmep(betas, variances, lam, x_mean, x_cov, intercept=True,
         num_samples=100_000, seed=0) -> GmepEstimate:
    """Geometric mean over states of the expected posterior of the true state.

    ``betas`` is ``(l, p)`` in design order (intercept first when
    ``intercept``), ``x_cov`` the covariance of the Gaussian predictors.
    One predictor uses composite Gauss-Legendre quadrature over
    ``(x, y)``, doubling the panels until successive values agree within
    ``1e-5``; more predictors use
    ``num_samples`` Monte-Carlo draws per state.
    """
    betas = np.atleast_2d(np.asarray(betas, dtype=float))
    lam = np.asarray(lam, dtype=float)
    variances = np.broadcast_to(np.asarray(variances, dtype=float), (betas.shape[0],)).copy()
    if lam.size < 2 or lam.size != betas.shape[0]:
        raise InvalidSpec("gmep needs at least two states and one weight per state")
    if np.any(lam <= 0) or abs(lam.sum() - 1) > 1e-9:
        raise InvalidSpec("mixing weights must be positive and sum to one")
    x_mean = np.atleast_1d(np.asarray(x_mean, dtype=float))
    x_cov = np.atleast_2d(np.asarray(x_cov, dtype=float))
    if x_mean.size == 1:
        return _gmep_quadrature(betas, variances, lam, x_mean[0], math.sqrt(x_cov[0, 0]), intercept)
    return gmep_monte_carlo(betas, variances, lam, x_mean, x_cov, intercept, num_samples, seed)


def coverage_gmep(p) -> float:
    betas = np.array([[p["mu_y"], p["beta1"]], [p["mu_y"], p["beta2"]]])
    return gmep(betas, p["sigma_y"] ** 2, [p["lam"], 1 - p["lam"]],
                p["mu_x"], p["sigma_x"] ** 2).value


def three_env_gmep(p, lam=None, num_samples=20_000, seed=0) -> float:
    """GMEP of ``Y | (X1, X2)`` in the observational block."""
    nst = p["num_states"]
    lam = np.full(nst, 1.0 / nst) if lam is None else np.asarray(lam)
    betas = np.column_stack([p["mu_y"], np.broadcast_to(p["beta_y1"], (nst,)),
                             np.broadcast_to(p["beta_y2"], (nst,))])
    mean = np.array([p["mu1"], p["beta21"] * p["mu1"] + p["mu2"]])
    v1 = p["var1"]
    cov = np.array([[v1, p["beta21"] * v1], [p["beta21"] * v1, p["beta21"] ** 2 * v1 + p["var2"]]])
    return gmep_monte_carlo(betas, p["var_y"], lam, mean, cov, True, num_samples, seed).value


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


def reconstruct_states(fit_result, y, x, grouping=None) -> np.ndarray:
    """Most probable latent state per point, or per group of points.

    With ``grouping`` (one group id per point) the posteriors are summed
    within each group and every point gets its group's argmax.  Ties go to
    the lower state label.
    """
    layout = fit_result.layout
    X = design_matrix(np.asarray(x, dtype=float).reshape(len(y), -1), layout.intercept)
    theta, trans = layout.unpack(fit_result.phi_hat)
    post = posterior_state_probs(np.asarray(y, dtype=float), X, theta, trans)
    if grouping is None:
        return np.argmax(post, axis=1)
    grouping = np.asarray(grouping)
    if grouping.shape[0] != post.shape[0]:
        raise InvalidSpec("grouping must have one entry per observation")
    keys, inverse = np.unique(grouping, return_inverse=True)
    sums = np.zeros((keys.size, post.shape[1]))
    np.add.at(sums, inverse, post)
    return np.argmax(sums, axis=1)[inverse]


def decoding_accuracy(estimated, truth) -> float:
    """Accuracy maximized over relabelings of the estimated states."""
    estimated = np.asarray(estimated)
    truth = np.asarray(truth)
    k = int(max(estimated.max(), truth.max())) + 1
    best = 0.0
    for pi in permutations(range(k)):
        best = max(best, float(np.mean(np.asarray(pi)[estimated] == truth)))
    return best
