"""Constrained maximum-likelihood fitting of switching regression models.

Two optimizers are available:

``EM``
    Expectation-maximization for independent latent states.  The M-step is
    closed form (weighted least squares per state); under a lower bound the
    variance update is clamped at the bound, which is the exact constrained
    maximizer.
``NLM``
    Quasi-Newton (BFGS) maximization over an unconstrained
    reparametrization: ``sigma2 = c + exp(s)`` under a lower bound,
    ``sigma2 = exp(s)`` for a shared variance, and an additive-log-ratio map
    for every row of the transition matrix.  Works for both ``IID`` and
    ``HMM`` latent structure.

Both run from the same deterministic list of starting values and keep the
best restart (ties go to the lowest restart index).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize

from .core import (
    HMM,
    IID,
    EqualVariances,
    LowerBound,
    ParamLayout,
    SRTheta,
    TransitionParam,
    VarianceConstraint,
    design_matrix,
    loglik_and_gradient,
    loglik_phi,
    state_logdens,
)
from ._kernels import iid_posteriors
from .errors import (
    AllRestartsFailed,
    DegenerateData,
    DimensionMismatch,
    NonFiniteLikelihood,
    NonFiniteObjective,
    NumericalError,
    SingularInformation,
)

log = logging.getLogger(__name__)

EPS = np.finfo(float).eps
FD_STEP = EPS ** (1.0 / 3.0)
SINGULAR_RATIO = 1e-10
NLM_GTOL = 1e-9
SQUAREM_MAX_STEP = 16.0
SCREEN_POOL = 10
SCREEN_STEPS = 5


@dataclass(frozen=True)
class FitOptions:
    method: str = "NLM"
    model: str = IID
    constraint: VarianceConstraint = field(default_factory=LowerBound)
    num_states: int = 2
    intercept: bool = True
    num_restarts: int = 5
    max_iterations: int = 20000
    tol: float = 1e-8
    seed: int = 0
    gradient: str = "analytic"

    def __post_init__(self):
        if self.method not in ("EM", "NLM"):
            raise ValueError("method must be 'EM' or 'NLM'")
        if self.model not in (IID, HMM):
            raise ValueError("model must be 'IID' or 'HMM'")
        if self.num_restarts < 1:
            raise ValueError("num_restarts must be at least 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.num_states < 1:
            raise ValueError("num_states must be at least 1")
        if self.gradient not in ("analytic", "fd"):
            raise ValueError("gradient must be 'analytic' or 'fd'")

    def layout(self, num_raw_predictors: int) -> ParamLayout:
        return ParamLayout(
            self.num_states,
            num_raw_predictors + int(self.intercept),
            self.constraint,
            self.model,
            self.intercept,
        )


@dataclass(frozen=True)
class FitResult:
    layout: ParamLayout
    phi_hat: np.ndarray
    loglik_value: float
    fisher: np.ndarray
    converged: bool
    restart_index: int
    iterations: int
    status: str = "ok"
    loglik_trace: tuple = ()
    num_obs: int = 0

    @property
    def theta(self) -> SRTheta:
        return self.layout.unpack(self.phi_hat)[0]

    @property
    def transition(self) -> TransitionParam:
        return self.layout.unpack(self.phi_hat)[1]

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self, predictor_names=None) -> dict:
        names = self.layout.coordinate_names(predictor_names)
        return {
            "status": self.status,
            "converged": bool(self.converged),
            "loglik": float(self.loglik_value),
            "restart_index": int(self.restart_index),
            "iterations": int(self.iterations),
            "num_obs": int(self.num_obs),
            "parameters": {n: float(v) for n, v in zip(names, self.phi_hat)},
            "fisher": [[float(v) for v in row] for row in self.fisher],
        }


def _prepare(y, x, options):
    y = np.asarray(y, dtype=float).ravel()
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != y.size:
        raise DimensionMismatch("x and y have different numbers of rows")
    if y.size == 0:
        raise DegenerateData("no observations")
    X = design_matrix(x, options.intercept)
    return y, X, options.layout(x.shape[1])


def _lstsq(X, y):
    return np.linalg.lstsq(X, y, rcond=None)[0]


def _binned_starts(y, X, layout, options, count):
    m, p = X.shape
    nst = layout.num_states
    if p > 0 and np.linalg.matrix_rank(X) < p:
        raise DegenerateData("pooled design matrix is rank deficient")
    beta0 = _lstsq(X, y) if p else np.zeros(0)
    res = y - X @ beta0 if p else y.copy()
    pooled_var = float(np.mean(res**2))
    if not pooled_var > 0:
        raise DegenerateData("data are fitted exactly by a linear model")
    sd = np.sqrt(pooled_var)
    floor = layout.constraint.c if isinstance(layout.constraint, LowerBound) else 0.0
    rng = np.random.default_rng(options.seed)
    starts = []
    for r in range(count):
        noisy = res + (rng.normal(0.0, 0.5 * r * sd, m) if r else 0.0)
        rank = np.empty(m, dtype=int)
        rank[np.argsort(noisy, kind="stable")] = np.arange(m)
        groups = (rank * nst) // m
        betas = np.empty((nst, p))
        variances = np.empty(nst)
        sizes = np.empty(nst)
        for j in range(nst):
            sel = groups == j
            sizes[j] = sel.sum()
            if sel.sum() >= max(p, 1) and p:
                betas[j] = _lstsq(X[sel], y[sel])
            else:
                betas[j] = beta0
            rj = y[sel] - X[sel] @ betas[j] if p else y[sel]
            variances[j] = np.mean(rj**2) if sel.any() else pooled_var
        variances = np.maximum(variances, max(0.01 * pooled_var, 2.0 * floor))
        if isinstance(layout.constraint, EqualVariances):
            var_block = np.array([np.sum(sizes * variances) / m])
        else:
            var_block = variances
        gamma = np.full(nst - 1, 1.0 / nst)
        starts.append(np.concatenate([betas.ravel(), var_block, gamma]))
    return starts


def _init_from_design(y, X, layout, options):
    """Binned starts screened by a few EM steps.

    ``SCREEN_POOL * num_restarts`` binned candidates each get
    ``SCREEN_STEPS`` IID EM steps; the ``num_restarts`` candidates with the
    highest log-likelihood are returned in that order.  For HMM layouts the
    screened mixing weights become every row of the transition matrix.
    """
    nst = layout.num_states
    iid = replace(layout, flavor=IID)
    if nst == 1:
        return _binned_starts(y, X, iid, options, 1)
    cands = _binned_starts(y, X, iid, options, SCREEN_POOL * options.num_restarts)
    scored = []
    for i, phi in enumerate(cands):
        try:
            for _ in range(SCREEN_STEPS):
                _, phi = _em_step(y, X, iid, phi)
            ll = loglik_phi(y, X, iid, phi)
        except (_RestartFailed, NumericalError, np.linalg.LinAlgError):
            continue
        if np.isfinite(ll) and _valid(iid, phi):
            scored.append((-ll, i, phi))
    if len(scored) < options.num_restarts:
        # screening lost too many candidates; fall back to the raw bins
        picked = cands[: options.num_restarts]
    else:
        scored.sort(key=lambda t: (t[0], t[1]))
        picked = [t[2] for t in scored[: options.num_restarts]]
    if layout.flavor == IID:
        return picked
    out = []
    for phi in picked:
        betas, var, gamma = iid.split(phi)
        lam = np.append(gamma, 1.0 - gamma.sum())
        rows = np.tile(lam[:-1], nst)
        out.append(np.concatenate([betas.ravel(), phi[iid.n_beta: iid.n_beta + iid.n_var], rows]))
    return out


def init_starts(y, x, options: FitOptions) -> list[np.ndarray]:
    """Deterministic starting values, one ``phi`` per restart.

    Candidates split the points into ``l`` groups by quantiles of the
    pooled OLS residuals (perturbed by seeded noise, growing with the
    candidate index) and fit each group by OLS, with uniform mixing
    weights.  A pool of candidates is screened by a few EM steps and the
    best ones are kept.  A single start, the pooled OLS fit, is returned
    when ``l = 1``.
    """
    y, X, layout = _prepare(y, x, options)
    return _init_from_design(y, X, layout, options)


# ---------------------------------------------------------------------------
# EM
# ---------------------------------------------------------------------------


class _RestartFailed(Exception):
    pass


def _m_step(y, X, layout, w):
    m, p = X.shape
    nst = layout.num_states
    betas = np.empty((nst, p))
    sq = np.empty((m, nst))
    for j in range(nst):
        wj = w[:, j]
        if p:
            xtx = (X * wj[:, None]).T @ X
            if np.linalg.cond(xtx) > 1e12:
                raise _RestartFailed("component lost its support")
            betas[j] = np.linalg.solve(xtx, X.T @ (wj * y))
        r = y - X @ betas[j] if p else y
        sq[:, j] = wj * r**2
    counts = w.sum(axis=0)
    if isinstance(layout.constraint, EqualVariances):
        var_block = np.array([sq.sum() / m])
        if not var_block[0] > 0:
            raise _RestartFailed("variance collapsed to zero")
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            var_block = sq.sum(axis=0) / counts
        if not np.all(np.isfinite(var_block)):
            raise _RestartFailed("component lost all weight")
        # for fixed betas the expected loglik is unimodal in each variance,
        # so clamping gives the exact constrained M-step
        var_block = np.maximum(var_block, layout.constraint.c)
    return np.concatenate([betas.ravel(), var_block, counts[:-1] / m])


def _em_step(y, X, layout, phi):
    """``(loglik(phi), EM update of phi)``."""
    ll, w = _iid_estep(y, X, layout, phi)
    return ll, _m_step(y, X, layout, w)


def _valid(layout, phi):
    _, var, gamma = layout.split(phi)
    floor = layout.constraint.c if isinstance(layout.constraint, LowerBound) else 0.0
    return bool(np.all(var > floor) and np.all(gamma > 0) and gamma.sum() < 1)


def _em_run(y, X, layout, phi0, options):
    """EM with SQUAREM extrapolation.

    Each cycle takes two plain EM steps, extrapolates along them and
    applies one more EM step to the extrapolated point.  The extrapolation
    is kept only if it is valid and beats the plain update, so the
    recorded log-likelihood never decreases.
    """
    phi = np.array(phi0, dtype=float)
    trace = []
    converged = False
    evals = 0
    ll0 = None
    while evals < options.max_iterations:
        ll0, phi1 = _em_step(y, X, layout, phi)
        ll1, phi2 = _em_step(y, X, layout, phi1)
        evals += 2
        trace.extend([ll0, ll1])
        ll2, _ = _em_step(y, X, layout, phi2)
        evals += 1
        best_phi, best_ll = phi2, ll2
        r = phi1 - phi
        v = phi2 - phi1 - r
        nv = np.linalg.norm(v)
        if nv > 0:
            a = max(-SQUAREM_MAX_STEP, min(-1.0, -np.linalg.norm(r) / nv))
            cand = phi - 2.0 * a * r + a * a * v
            if _valid(layout, cand):
                try:
                    _, cand = _em_step(y, X, layout, cand)
                    ll_c, _ = _em_step(y, X, layout, cand)
                    evals += 2
                    if ll_c > best_ll:
                        best_phi, best_ll = cand, ll_c
                except (_RestartFailed, NonFiniteLikelihood, np.linalg.LinAlgError):
                    pass
        trace.append(best_ll)
        if best_ll - ll0 < options.tol * max(1.0, abs(best_ll)) * 1e-2:
            converged = True
            phi = best_phi
            break
        phi = best_phi
    ll = loglik_phi(y, X, layout, phi)
    if not trace or ll != trace[-1]:
        trace.append(ll)
    return phi, ll, trace, converged, evals


def _iid_estep(y, X, layout, phi):
    betas, var, gamma = layout.split(phi)
    lam = np.append(gamma, 1.0 - gamma.sum())
    if np.any(lam <= 0):
        raise _RestartFailed("a mixing weight vanished")
    variances = np.broadcast_to(var, (layout.num_states,))
    ll, w = iid_posteriors(state_logdens(y, X, betas, variances), np.log(lam))
    if not np.isfinite(ll):
        raise NonFiniteLikelihood("E-step produced a non-finite log-likelihood")
    return ll, w


def fit_em(y, x, options: FitOptions) -> FitResult:
    """EM fit of an IID switching regression, best of all restarts."""
    if options.method != "EM":
        raise ValueError("fit_em requires options.method == 'EM'")
    if options.model != IID:
        raise ValueError("the EM optimizer supports model IID only")
    y, X, layout = _prepare(y, x, options)
    starts = _init_from_design(y, X, layout, options)
    best = None
    for r, phi0 in enumerate(starts):
        try:
            phi, ll, trace, conv, iters = _em_run(y, X, layout, phi0, options)
        except (_RestartFailed, NumericalError, np.linalg.LinAlgError) as exc:
            log.debug("EM restart %d failed: %s", r, exc)
            continue
        if not np.isfinite(ll):
            continue
        if best is None or ll > best[1]:
            best = (phi, ll, trace, conv, iters, r)
    if best is None:
        raise AllRestartsFailed("every EM restart violated the constraints or diverged")
    phi, ll, trace, conv, iters, r = best
    return _finish(y, X, layout, phi, ll, conv, r, iters, tuple(trace))


# ---------------------------------------------------------------------------
# NLM
# ---------------------------------------------------------------------------


class _Reparam:
    """Bijection between natural ``phi`` and unconstrained ``psi``."""

    def __init__(self, layout: ParamLayout):
        self.layout = layout
        self.c = layout.constraint.c if isinstance(layout.constraint, LowerBound) else 0.0
        nst = layout.num_states
        self.rows = 1 if layout.flavor == IID else nst
        self.k = nst - 1

    def to_psi(self, phi):
        L = self.layout
        phi = np.asarray(phi, dtype=float)
        out = phi.copy()
        var = phi[L.n_beta: L.theta_dim]
        out[L.n_beta: L.theta_dim] = np.log(np.maximum(var - self.c, 1e-300))
        if self.k:
            free = phi[L.theta_dim:].reshape(self.rows, self.k)
            last = np.maximum(1.0 - free.sum(axis=1, keepdims=True), 1e-300)
            out[L.theta_dim:] = np.log(np.maximum(free, 1e-300) / last).ravel()
        return out

    def to_phi(self, psi):
        L = self.layout
        out = np.array(psi, dtype=float)
        s = np.clip(out[L.n_beta: L.theta_dim], -700.0, 700.0)
        out[L.n_beta: L.theta_dim] = self.c + np.exp(s)
        if self.k:
            a = np.clip(out[L.theta_dim:].reshape(self.rows, self.k), -700.0, 700.0)
            amax = np.maximum(a.max(axis=1, keepdims=True), 0.0)
            e = np.exp(a - amax)
            denom = np.exp(-amax) + e.sum(axis=1, keepdims=True)
            out[L.theta_dim:] = (e / denom).ravel()
        return out

    def pull_back(self, psi, phi, grad_phi):
        """Chain rule: gradient w.r.t. ``psi`` from gradient w.r.t. ``phi``."""
        L = self.layout
        g = np.array(grad_phi, dtype=float)
        g[L.n_beta: L.theta_dim] *= phi[L.n_beta: L.theta_dim] - self.c
        if self.k:
            p = phi[L.theta_dim:].reshape(self.rows, self.k)
            gg = grad_phi[L.theta_dim:].reshape(self.rows, self.k)
            g[L.theta_dim:] = (p * gg - p * np.sum(p * gg, axis=1, keepdims=True)).ravel()
        return g


def fd_gradient(fun, x, scale: float = 1.0) -> np.ndarray:
    """Central differences with step ``eps^(1/3) * max(1, |x_i|) * scale``."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        h = FD_STEP * max(1.0, abs(x[i])) * scale
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fun(xp) - fun(xm)) / (xp[i] - xm[i])
    return g


def _nlm_run(y, X, layout, phi0, options):
    rep = _Reparam(layout)
    m = y.size
    big = 1e10

    def value(psi):
        try:
            return -loglik_phi(y, X, layout, rep.to_phi(psi)) / m
        except NonFiniteLikelihood:
            return big

    def objective(psi):
        phi = rep.to_phi(psi)
        try:
            ll, g = loglik_and_gradient(y, X, layout, phi)
        except NonFiniteLikelihood:
            return big, np.zeros_like(psi)
        if not np.all(np.isfinite(g)):
            return big, np.zeros_like(psi)
        return -ll / m, -rep.pull_back(psi, phi, g) / m

    if options.gradient == "fd":
        fun, jac = value, (lambda psi: fd_gradient(value, psi))
    else:
        fun, jac = objective, True
    psi0 = rep.to_psi(phi0)
    res = optimize.minimize(
        fun, psi0, jac=jac, method="BFGS",
        options={"maxiter": options.max_iterations, "gtol": NLM_GTOL},
    )
    phi = rep.to_phi(res.x)
    ll = loglik_phi(y, X, layout, phi)
    if not np.isfinite(ll) or -ll / m >= big:
        raise NonFiniteObjective("optimizer ended at a non-finite objective")
    gnorm = np.max(np.abs(objective(res.x)[1])) if options.gradient == "analytic" else np.max(np.abs(jac(res.x)))
    converged = bool(res.success or gnorm < 1e-6)
    return phi, ll, converged, int(res.nit)


def fit_nlm(y, x, options: FitOptions) -> FitResult:
    """Quasi-Newton fit (IID or HMM), best of all restarts."""
    if options.method != "NLM":
        raise ValueError("fit_nlm requires options.method == 'NLM'")
    y, X, layout = _prepare(y, x, options)
    starts = _init_from_design(y, X, layout, options)
    best = None
    for r, phi0 in enumerate(starts):
        try:
            phi, ll, conv, iters = _nlm_run(y, X, layout, phi0, options)
        except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
            log.debug("NLM restart %d failed: %s", r, exc)
            continue
        if best is None or ll > best[1]:
            best = (phi, ll, conv, iters, r)
    if best is None:
        raise AllRestartsFailed("every NLM restart failed")
    phi, ll, conv, iters, r = best
    return _finish(y, X, layout, phi, ll, conv, r, iters, ())


def fit(y, x, options: FitOptions) -> FitResult:
    """Dispatch on ``options.method``."""
    if options.method == "EM":
        return fit_em(y, x, options)
    return fit_nlm(y, x, options)


# ---------------------------------------------------------------------------
# observed information
# ---------------------------------------------------------------------------


def _information(y, X, layout, phi):
    phi = np.asarray(phi, dtype=float)
    k = phi.size
    hess = np.empty((k, k))
    for i in range(k):
        h = FD_STEP * max(1.0, abs(phi[i]))
        up = phi.copy()
        dn = phi.copy()
        up[i] += h
        dn[i] -= h
        try:
            g_up = loglik_and_gradient(y, X, layout, up)[1]
            g_dn = loglik_and_gradient(y, X, layout, dn)[1]
        except NonFiniteLikelihood as exc:
            raise SingularInformation("information undefined at the boundary") from exc
        hess[:, i] = (g_up - g_dn) / (up[i] - dn[i])
    info = -0.5 * (hess + hess.T)
    if not np.all(np.isfinite(info)):
        raise SingularInformation("information matrix is not finite")
    return info


def _check_information(info):
    if info.size == 0:
        return
    ev = np.linalg.eigvalsh(info)
    if ev[-1] <= 0 or ev[0] < SINGULAR_RATIO * ev[-1]:
        err = SingularInformation(
            f"observed information is (near) singular: eigenvalues in [{ev[0]:.3g}, {ev[-1]:.3g}]"
        )
        err.information = info
        raise err


def observed_fisher(y, x, phi_hat, options: FitOptions) -> np.ndarray:
    """Negative Hessian of the log-likelihood at ``phi_hat``.

    Natural (constrained) coordinates; central differences of the analytic
    score, symmetrized.  Raises :class:`SingularInformation` when the
    smallest eigenvalue is below ``1e-10`` times the largest.
    """
    y, X, layout = _prepare(y, x, options)
    info = _information(y, X, layout, phi_hat)
    _check_information(info)
    return info


def _finish(y, X, layout, phi, ll, conv, r, iters, trace):
    status = "ok"
    try:
        info = _information(y, X, layout, phi)
        _check_information(info)
    except SingularInformation as exc:
        status = "singular"
        info = getattr(exc, "information", np.full((layout.dim, layout.dim), np.nan))
    phi = np.array(phi, dtype=float)
    phi.setflags(write=False)
    info = np.array(info)
    info.setflags(write=False)
    return FitResult(layout, phi, float(ll), info, conv, r, iters, status, trace, y.size)
