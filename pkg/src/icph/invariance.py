"""Permutation-adjusted confidence ellipsoids and the overlap test.

A fitted switching regression gives an ellipsoid around ``theta_hat`` for
every relabeling of its states.  Models from several environments are
declared compatible when some choice of relabeling gives ellipsoids with a
common point.  Rather than scanning confidence levels, the test computes

    m* = min over relabelings, min over theta, max over e of
         (theta - c_e)' A_e (theta - c_e)

and converts it to a p-value with the chi-square tail, times the number of
environments (Bonferroni), floored at ``1e-4``.
"""

from __future__ import annotations

import logging
from itertools import combinations
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize, special

from .core import ParamLayout, all_permutations
from .errors import (
    AllRestartsFailed,
    ComplexityError,
    DegenerateData,
    DomainError,
    InsufficientData,
    NumericalError,
    SingularInformation,
)
from .estimation import FitOptions, FitResult, fit

log = logging.getLogger(__name__)

P_FLOOR = 1e-4
DEFAULT_TEST_PARAMETERS = ("intercept", "beta", "sigma")
MAX_ASSIGNMENTS = 100_000


def chi2_quantile(prob: float, dof: int) -> float:
    """Quantile function of the chi-square distribution."""
    if not (0.0 <= prob < 1.0) or int(dof) != dof or dof < 1:
        raise DomainError(f"chi2_quantile needs prob in [0, 1) and integer dof >= 1, got {prob}, {dof}")
    if prob == 0.0:
        return 0.0
    return float(2.0 * special.gammaincinv(0.5 * dof, prob))


def chi2_sf(x: float, dof: int) -> float:
    """Upper tail ``P(chi2(dof) > x)``."""
    if int(dof) != dof or dof < 1:
        raise DomainError(f"dof must be a positive integer, got {dof}")
    if x <= 0:
        return 1.0
    return float(special.gammaincc(0.5 * dof, 0.5 * x))


# ---------------------------------------------------------------------------
# regions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConfidenceRegion:
    """Union of ellipsoids ``{t : (t - c)' A (t - c) <= q}`` over the orbit.

    ``center`` and ``shape`` belong to the fitted labeling; ``perms`` holds
    one index array per label permutation, acting on the tested coordinates,
    so that orbit member ``i`` has center ``center[perms[i]]`` and shape
    ``shape[perms[i]][:, perms[i]]``.
    """

    center: np.ndarray
    shape: np.ndarray
    perms: tuple
    mask: np.ndarray
    labels: tuple = ()

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def centers(self) -> np.ndarray:
        return np.array([self.center[p] for p in self.perms])

    @property
    def shapes(self) -> np.ndarray:
        return np.array([self.shape[np.ix_(p, p)] for p in self.perms])

    def radius2(self, alpha: float) -> float:
        return chi2_quantile(1.0 - alpha, self.dim)

    def distances(self, theta) -> np.ndarray:
        """Mahalanobis distance of ``theta`` to every orbit member."""
        theta = np.asarray(theta, dtype=float)
        out = np.empty(len(self.perms))
        for i, p in enumerate(self.perms):
            d = theta - self.center[p]
            out[i] = d @ self.shape[np.ix_(p, p)] @ d
        return out

    def contains(self, theta, alpha: float) -> bool:
        return bool(np.min(self.distances(theta)) <= self.radius2(alpha))


def _masked_perm(full_idx, positions):
    where = {int(v): i for i, v in enumerate(positions)}
    return np.array([where[int(full_idx[v])] for v in positions], dtype=int)


def region_from_fit(fit_result: FitResult, mask=None) -> ConfidenceRegion:
    """Permutation-adjusted region for the tested coordinates of ``theta``.

    ``mask`` is a boolean array over ``theta`` (defaults to all of it).  The
    shape matrix is the inverse of the corresponding block of the inverse
    information, i.e. the untested coordinates and ``gamma`` are
    marginalized out.
    """
    layout: ParamLayout = fit_result.layout
    if mask is None:
        mask = np.ones(layout.theta_dim, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.size != layout.theta_dim:
        raise ValueError("mask length must equal dim(theta)")
    if not mask.any():
        raise ValueError("no coordinates selected for testing")
    if not fit_result.ok:
        raise SingularInformation("fit has singular observed information")
    info = np.asarray(fit_result.fisher)
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise SingularInformation("observed information is not invertible") from exc
    positions = np.flatnonzero(mask)
    block = cov[np.ix_(positions, positions)]
    block = 0.5 * (block + block.T)
    ev = np.linalg.eigvalsh(block)
    if ev[0] <= 0 or ev[0] < 1e-14 * ev[-1]:
        raise SingularInformation("marginal covariance of tested coordinates is not positive definite")
    shape = np.linalg.inv(block)
    shape = 0.5 * (shape + shape.T)
    center = np.asarray(fit_result.phi_hat)[positions].copy()
    perms = []
    labels = []
    for pi in all_permutations(layout.num_states):
        perms.append(_masked_perm(layout.theta_permutation(pi), positions))
        labels.append(pi)
    for a in (center, shape):
        a.setflags(write=False)
    return ConfidenceRegion(center, shape, tuple(perms), mask.copy(), tuple(labels))


# ---------------------------------------------------------------------------
# min-max Mahalanobis
# ---------------------------------------------------------------------------


def _quad(theta, c, a):
    d = theta - c
    return float(d @ a @ d)


def _weighted_center(w, centers, shapes):
    a = np.tensordot(w, shapes, axes=1)
    b = np.einsum("e,eij,ej->i", w, shapes, centers)
    return np.linalg.solve(a, b)


def _pair_minimax(c1, a1, c2, a2):
    if np.array_equal(c1, c2):
        return 0.0, c1.copy()
    centers = np.array([c1, c2])
    shapes = np.array([a1, a2])

    def point(w):
        return _weighted_center(np.array([1.0 - w, w]), centers, shapes)

    def slope(w):
        # derivative of the concave dual; decreasing in w
        th = point(w)
        return _quad(th, c2, a2) - _quad(th, c1, a1)

    if slope(0.0) <= 0.0:
        w = 0.0
    elif slope(1.0) >= 0.0:
        w = 1.0
    else:
        w = optimize.brentq(slope, 0.0, 1.0, xtol=1e-16, rtol=4 * np.finfo(float).eps, maxiter=500)
    th = point(w)
    return max(_quad(th, c1, a1), _quad(th, c2, a2)), th


def _support_newton(centers, shapes, max_iter=100):
    """Maximize the dual over weights supported on all given regions.

    Newton's method on the simplex slice, using the Hessian
    ``-2 G M^-1 G'`` with ``G_e = A_e (theta(w) - c_e)`` and
    ``M = sum_e w_e A_e``.
    """
    k = centers.shape[0]
    w = np.full(k, 1.0 / k)

    def evaluate(w):
        m = np.tensordot(w, shapes, axes=1)
        th = np.linalg.solve(m, np.einsum("e,eij,ej->i", w, shapes, centers))
        d = th[None, :] - centers
        g = np.einsum("eij,ej->ei", shapes, d)
        q = np.einsum("ei,ei->e", d, g)
        return m, th, g, q

    m, th, g, q = evaluate(w)
    for _ in range(max_iter):
        if np.ptp(q) <= 1e-13 * (1.0 + q.max()):
            break
        hess = -2.0 * g @ np.linalg.solve(m, g.T)
        kkt = np.zeros((k + 1, k + 1))
        kkt[:k, :k] = hess - 1e-14 * (1.0 + np.abs(hess).max()) * np.eye(k)
        kkt[:k, k] = kkt[k, :k] = 1.0
        try:
            step = np.linalg.solve(kkt, np.append(-q, 0.0))[:k]
        except np.linalg.LinAlgError:
            break
        neg = step < 0
        t = 1.0
        if neg.any():
            t = min(1.0, 0.999 * np.min(-w[neg] / step[neg]))
        dual = w @ q
        while t > 1e-12:
            w_new = w + t * step
            m_new, th_new, g_new, q_new = evaluate(w_new)
            if w_new @ q_new >= dual - 1e-15 * abs(dual):
                break
            t *= 0.5
        else:
            break
        w, m, th, g, q = w_new, m_new, th_new, g_new, q_new
    return th


def _multi_minimax(centers, shapes):
    """Exact ``min_theta max_e q_e(theta)`` for a few ellipsoids.

    The optimum is attained by some subset of regions with equal
    distances; every subset is solved and the smallest primal value wins
    (each candidate point gives an upper bound, the right subset is tight).
    """
    k = centers.shape[0]
    if k == 1:
        return 0.0, centers[0].copy()
    if k == 2:
        return _pair_minimax(centers[0], shapes[0], centers[1], shapes[1])
    if all(np.array_equal(centers[0], c) for c in centers[1:]):
        return 0.0, centers[0].copy()

    def primal(th):
        d = th[None, :] - centers
        return float(np.max(np.einsum("ei,eij,ej->e", d, shapes, d)))

    best_val, best_th = np.inf, None
    for size in range(2, k + 1):
        for sub in combinations(range(k), size):
            idx = list(sub)
            if size == 2:
                th = _pair_minimax(centers[idx[0]], shapes[idx[0]], centers[idx[1]], shapes[idx[1]])[1]
            else:
                th = _support_newton(centers[idx], shapes[idx])
            val = primal(th)
            if val < best_val:
                best_val, best_th = val, th
    return best_val, best_th


def min_max_mahalanobis(regions, max_assignments: int = MAX_ASSIGNMENTS):
    """Smallest common Mahalanobis radius over all label assignments.

    Returns ``(m_star, assignment, theta)`` where ``assignment[e]`` indexes
    the orbit member of region ``e`` (the first region always uses its own
    labeling) and ``theta`` is the minimizing common point.
    """
    regions = list(regions)
    if len(regions) < 2:
        raise ValueError("need at least two regions")
    dim = regions[0].dim
    if any(r.dim != dim for r in regions):
        raise ValueError("regions have different dimensions")
    n_orbit = len(regions[0].perms)
    k = len(regions)
    if float(n_orbit) ** (k - 1) > max_assignments:
        raise ComplexityError(
            f"{n_orbit}^{k - 1} label assignments exceed the cap of {max_assignments}"
        )
    base_c = [r.center for r in regions]
    base_a = [r.shape for r in regions]

    def member(e, i):
        p = regions[e].perms[i]
        return base_c[e][p], base_a[e][np.ix_(p, p)]

    # pair values only depend on the relative relabeling of the two regions
    pair_cache: dict = {}

    def pair_value(e, i, f, j):
        pi, pj = regions[e].perms[i], regions[f].perms[j]
        rel = pj[np.argsort(pi)]
        key = (e, f, rel.tobytes())
        if key not in pair_cache:
            cf = base_c[f][rel]
            af = base_a[f][np.ix_(rel, rel)]
            pair_cache[key] = _pair_minimax(base_c[e], base_a[e], cf, af)[0]
        return pair_cache[key]

    if k == 2:
        best = None
        for j in range(n_orbit):
            val, th = _pair_minimax(base_c[0], base_a[0], *member(1, j))
            if best is None or val < best[0] - 1e-15:
                best = (val, (0, j), th)
        return float(best[0]), list(best[1]), best[2]

    best = [np.inf, None, None]

    def search(assign, bound):
        e = len(assign)
        if e == k:
            cs = np.array([member(f, assign[f])[0] for f in range(k)])
            as_ = np.array([member(f, assign[f])[1] for f in range(k)])
            val, th = _multi_minimax(cs, as_)
            if val < best[0] - 1e-15:
                best[:] = [val, list(assign), th]
            return
        cands = []
        for j in range(n_orbit):
            lb = bound
            for f in range(e):
                lb = max(lb, pair_value(f, assign[f], e, j))
                if lb >= best[0]:
                    break
            if lb < best[0]:
                cands.append((lb, j))
        cands.sort()
        for lb, j in cands:
            if lb >= best[0]:
                break
            search(assign + [j], lb)

    search([0], 0.0)
    return float(best[0]), best[1], best[2]


# ---------------------------------------------------------------------------
# equality tests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EqualityTestResult:
    p_value: float
    m_star: float
    dim: int
    num_states: int
    assignment: tuple
    env_status: tuple
    degenerate: bool
    floored: bool
    fits: tuple = field(default=(), repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "p_value": float(self.p_value),
            "m_star": None if not np.isfinite(self.m_star) else float(self.m_star),
            "dim": int(self.dim),
            "num_states": int(self.num_states),
            "assignment": [list(map(int, a)) for a in self.assignment],
            "env_status": list(self.env_status),
            "degenerate": bool(self.degenerate),
            "floored": bool(self.floored),
        }


def p_value_from_mstar(m_star: float, dim: int, num_envs: int) -> tuple[float, bool]:
    raw = num_envs * chi2_sf(m_star, dim)
    return float(min(1.0, max(P_FLOOR, raw))), raw < P_FLOOR


def _fit_env(y, x, options: FitOptions):
    layout = options.layout(x.shape[1])
    if y.size <= layout.dim + 5:
        return None, "insufficient"
    try:
        res = fit(y, x, options)
    except AllRestartsFailed:
        return None, "failed"
    except (DegenerateData, NumericalError, np.linalg.LinAlgError):
        return None, "failed"
    if not res.ok:
        return res, "singular"
    return res, "ok"


def test_equality_sr(data, S, options: FitOptions,
                     test_parameters=DEFAULT_TEST_PARAMETERS,
                     max_assignments: int = MAX_ASSIGNMENTS) -> EqualityTestResult:
    """Test whether ``Y | X^S`` follows the same switching regression in every environment.

    One model is fitted per environment.  Environments that are too small,
    whose fit fails, or whose information is singular make the test return
    the p-value floor with ``degenerate=True``.
    """
    K = data.num_envs
    if K < 2:
        raise InsufficientData("at least two environments are required")
    cols = sorted(int(s) for s in S)
    layout = options.layout(len(cols))
    mask = layout.theta_mask(test_parameters)
    dim = int(mask.sum())
    if dim == 0:
        raise ValueError("test_parameters select no coordinates")
    fits, statuses = [], []
    for e in range(1, K + 1):
        y, x = data.env_data(e, cols)
        res, status = _fit_env(y, x, options)
        fits.append(res)
        statuses.append(status)
    if any(s != "ok" for s in statuses):
        return EqualityTestResult(P_FLOOR, np.inf, dim, options.num_states, (), tuple(statuses),
                                  True, True, tuple(fits))
    try:
        regions = [region_from_fit(f, mask) for f in fits]
    except SingularInformation:
        statuses = ["ok" if _region_ok(f, mask) else "singular" for f in fits]
        return EqualityTestResult(P_FLOOR, np.inf, dim, options.num_states, (), tuple(statuses),
                                  True, True, tuple(fits))
    m_star, assignment, _ = min_max_mahalanobis(regions, max_assignments)
    p, floored = p_value_from_mstar(m_star, dim, K)
    labels = tuple(tuple(int(v) for v in regions[e].labels[i]) for e, i in enumerate(assignment))
    return EqualityTestResult(p, m_star, dim, options.num_states, labels, tuple(statuses),
                              False, floored, tuple(fits))


test_equality_sr.__test__ = False


def _region_ok(f, mask):
    try:
        region_from_fit(f, mask)
        return True
    except SingularInformation:
        return False


@dataclass(frozen=True)
class MultiDegreeResult:
    p_value: float
    per_degree: dict

    @property
    def degenerate(self) -> bool:
        return all(r.degenerate for r in self.per_degree.values())

    @property
    def floored(self) -> bool:
        return self.p_value <= P_FLOOR

    def to_dict(self) -> dict:
        return {
            "p_value": float(self.p_value),
            "per_degree": {str(k): r.to_dict() for k, r in sorted(self.per_degree.items())},
        }


def test_equality_multi_degree(data, S, options: FitOptions, degrees,
                               test_parameters=DEFAULT_TEST_PARAMETERS,
                               max_assignments: int = MAX_ASSIGNMENTS) -> MultiDegreeResult:
    """Maximum of the single-degree p-values over ``degrees``."""
    degrees = sorted({int(k) for k in degrees})
    if not degrees or degrees[0] < 1:
        raise ValueError("degrees must be a nonempty set of positive integers")
    per = {}
    for k in degrees:
        opts = replace(options, num_states=k)
        per[k] = test_equality_sr(data, S, opts, test_parameters, max_assignments)
    return MultiDegreeResult(max(r.p_value for r in per.values()), per)


test_equality_multi_degree.__test__ = False
