"""Switching regression models: parameter types, parametrizations and likelihood.

A switching regression of degree ``l`` explains a response ``y_t`` by one of
``l`` Gaussian linear models, selected by a latent state ``h_t``.  The latent
states are either independent with common law ``lambda`` (``"IID"``) or a
stationary first-order Markov chain with transition matrix ``Gamma``
(``"HMM"``).

Conventions used throughout the package
---------------------------------------
* Intercepts are ordinary coefficients of a constant column.  When a model
  has ``intercept=True`` that column is column 0 of the design matrix (see
  :func:`design_matrix`).
* The density of the predictors is never modelled; every log-likelihood
  returned here omits the additive constant ``log p(x)``.
* The flat parameter vector ``phi`` is ordered as: regression coefficients in
  state-major blocks (``beta_1, ..., beta_l``), then the variance block (``l``
  entries under :class:`LowerBound`, a single shared entry under
  :class:`EqualVariances`), then the transition parameters ``gamma``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import permutations
from typing import Sequence, Union

import numpy as np

from . import _kernels
from .errors import DimensionMismatch, NonFiniteLikelihood, ReducibleChain

IID = "IID"
HMM = "HMM"
FLAVORS = (IID, HMM)

DEFAULT_LOWER_BOUND = 1e-4
EM_LEGACY_LOWER_BOUND = 1e-16

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LowerBound:
    """All error variances are bounded below by ``c``."""

    c: float = DEFAULT_LOWER_BOUND

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("lower bound must be positive")


@dataclass(frozen=True)
class EqualVariances:
    """All states share one error variance."""


VarianceConstraint = Union[LowerBound, EqualVariances]


def parse_constraint(value, bound=DEFAULT_LOWER_BOUND) -> VarianceConstraint:
    if isinstance(value, (LowerBound, EqualVariances)):
        return value
    key = str(value).strip().lower().replace("_", "-").replace(" ", "-")
    if key in ("lower-bound", "lowerbound", "lb"):
        return LowerBound(bound)
    if key in ("equality", "equal", "equal-variances", "eq"):
        return EqualVariances()
    raise ValueError(f"unknown variance constraint {value!r}")


def _frozen(a, dtype=np.float64):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SRTheta:
    """Regression matrix of a switching regression.

    ``betas`` has shape ``(l, p)``.  ``sigma2`` holds the stored variances:
    ``l`` values under :class:`LowerBound`, one value under
    :class:`EqualVariances`.  Use :attr:`variances` for the per-state view.
    """

    betas: np.ndarray
    sigma2: np.ndarray
    constraint: VarianceConstraint = field(default_factory=LowerBound)
    intercept: bool = False

    def __post_init__(self):
        betas = np.atleast_2d(np.asarray(self.betas, dtype=float))
        sigma2 = np.atleast_1d(np.asarray(self.sigma2, dtype=float)).ravel()
        nst = betas.shape[0]
        if isinstance(self.constraint, EqualVariances):
            if sigma2.size == nst and nst > 1:
                if not np.all(sigma2 == sigma2[0]):
                    raise ValueError("EqualVariances requires identical variances")
                sigma2 = sigma2[:1]
            if sigma2.size != 1:
                raise DimensionMismatch("EqualVariances stores exactly one variance")
            if not sigma2[0] > 0:
                raise ValueError("variance must be positive")
        else:
            if sigma2.size != nst:
                raise DimensionMismatch(f"expected {nst} variances, got {sigma2.size}")
            if np.any(sigma2 < self.constraint.c):
                raise ValueError(f"variances violate lower bound {self.constraint.c}")
        object.__setattr__(self, "betas", _frozen(betas))
        object.__setattr__(self, "sigma2", _frozen(sigma2))

    @property
    def num_states(self) -> int:
        return self.betas.shape[0]

    @property
    def num_predictors(self) -> int:
        return self.betas.shape[1]

    @property
    def variances(self) -> np.ndarray:
        return np.broadcast_to(self.sigma2, (self.num_states,)).copy()

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.betas.ravel(), self.sigma2])

    @classmethod
    def from_vector(cls, vec, num_states, num_predictors, constraint=None, intercept=False):
        constraint = LowerBound() if constraint is None else constraint
        vec = np.asarray(vec, dtype=float)
        nb = num_states * num_predictors
        nv = 1 if isinstance(constraint, EqualVariances) else num_states
        if vec.size != nb + nv:
            raise DimensionMismatch(f"theta vector has length {vec.size}, expected {nb + nv}")
        return cls(vec[:nb].reshape(num_states, num_predictors), vec[nb:], constraint, intercept)

    def permuted(self, pi: Sequence[int]) -> "SRTheta":
        """New state ``j`` takes the parameters of old state ``pi[j]``."""
        pi = list(pi)
        sigma2 = self.sigma2 if self.sigma2.size == 1 else self.sigma2[pi]
        return SRTheta(self.betas[pi], sigma2, self.constraint, self.intercept)


@dataclass(frozen=True)
class TransitionParam:
    """Parameters of the latent-state law.

    IID: ``gamma`` holds ``lambda_1, ..., lambda_{l-1}``.
    HMM: ``gamma`` holds, row by row, the first ``l-1`` entries of each row
    of ``Gamma``; the last column is implied by the row sums.
    """

    flavor: str
    gamma: np.ndarray
    num_states: int

    def __post_init__(self):
        if self.flavor not in FLAVORS:
            raise ValueError(f"flavor must be one of {FLAVORS}")
        g = np.atleast_1d(np.asarray(self.gamma, dtype=float)).ravel()
        nst = int(self.num_states)
        expected = nst - 1 if self.flavor == IID else (nst - 1) * nst
        if g.size != expected:
            raise DimensionMismatch(f"gamma has length {g.size}, expected {expected}")
        if np.any(g < 0) or np.any(g > 1):
            raise ValueError("gamma entries must lie in [0, 1]")
        rows = g.reshape(-1, nst - 1) if nst > 1 else np.zeros((1, 0))
        if np.any(rows.sum(axis=1) > 1 + 1e-12):
            raise ValueError("gamma row sums exceed 1")
        object.__setattr__(self, "gamma", _frozen(g))
        object.__setattr__(self, "num_states", nst)

    @property
    def matrix(self) -> np.ndarray:
        nst = self.num_states
        if self.flavor == IID:
            row = np.append(self.gamma, 1.0 - self.gamma.sum())
            return np.tile(row, (nst, 1))
        free = self.gamma.reshape(nst, nst - 1)
        return np.column_stack([free, 1.0 - free.sum(axis=1)])

    @classmethod
    def iid(cls, weights) -> "TransitionParam":
        w = np.asarray(weights, dtype=float)
        return cls(IID, w[:-1], w.size)

    @classmethod
    def from_matrix(cls, flavor, gamma_matrix) -> "TransitionParam":
        g = np.asarray(gamma_matrix, dtype=float)
        nst = g.shape[0]
        if flavor == IID:
            return cls(IID, g[0, :-1], nst)
        return cls(HMM, g[:, :-1].ravel(), nst)

    def weights(self) -> np.ndarray:
        """Marginal state law without the irreducibility check."""
        if self.flavor == IID:
            return np.append(self.gamma, 1.0 - self.gamma.sum())
        return _stationary(self.matrix)

    def permuted(self, pi: Sequence[int]) -> "TransitionParam":
        pi = list(pi)
        g = self.matrix[np.ix_(pi, pi)]
        return TransitionParam.from_matrix(self.flavor, g)


def _stationary(gmat):
    nst = gmat.shape[0]
    a = np.eye(nst) - gmat + np.ones((nst, nst))
    lam = np.linalg.solve(a.T, np.ones(nst))
    return lam / lam.sum()


def stationary_distribution(trans: TransitionParam) -> np.ndarray:
    """Stationary law ``lambda`` of ``Gamma(gamma)``.

    Raises :class:`ReducibleChain` unless ``Gamma^(l^2)`` is strictly
    positive, which certifies irreducibility and aperiodicity.
    """
    gmat = trans.matrix
    nst = gmat.shape[0]
    if not np.all(np.linalg.matrix_power(gmat, nst * nst) > 0):
        raise ReducibleChain("transition matrix is not irreducible and aperiodic")
    if trans.flavor == IID:
        return gmat[0].copy()
    return _stationary(gmat)


@dataclass(frozen=True)
class ParamLayout:
    """Describes how a flat ``phi`` vector maps onto model parameters."""

    num_states: int
    num_predictors: int
    constraint: VarianceConstraint = field(default_factory=LowerBound)
    flavor: str = IID
    intercept: bool = False

    @property
    def n_beta(self) -> int:
        return self.num_states * self.num_predictors

    @property
    def n_var(self) -> int:
        return 1 if isinstance(self.constraint, EqualVariances) else self.num_states

    @property
    def theta_dim(self) -> int:
        return self.n_beta + self.n_var

    @property
    def gamma_dim(self) -> int:
        nst = self.num_states
        return nst - 1 if self.flavor == IID else (nst - 1) * nst

    @property
    def dim(self) -> int:
        return self.theta_dim + self.gamma_dim

    def pack(self, theta: SRTheta, trans: TransitionParam) -> np.ndarray:
        if theta.num_states != self.num_states or trans.num_states != self.num_states:
            raise DimensionMismatch("number of states does not match layout")
        if theta.num_predictors != self.num_predictors:
            raise DimensionMismatch("number of predictors does not match layout")
        return np.concatenate([theta.to_vector(), trans.gamma])

    def unpack(self, phi) -> tuple[SRTheta, TransitionParam]:
        phi = np.asarray(phi, dtype=float)
        if phi.size != self.dim:
            raise DimensionMismatch(f"phi has length {phi.size}, expected {self.dim}")
        theta = SRTheta.from_vector(
            phi[: self.theta_dim], self.num_states, self.num_predictors,
            self.constraint, self.intercept,
        )
        return theta, TransitionParam(self.flavor, phi[self.theta_dim:], self.num_states)

    def split(self, phi):
        """Fast, unvalidated view: ``(betas (l,p), variances (l,), gamma)``."""
        phi = np.asarray(phi, dtype=float)
        betas = phi[: self.n_beta].reshape(self.num_states, self.num_predictors)
        var = phi[self.n_beta: self.theta_dim]
        if var.size == 1:
            var = np.repeat(var, self.num_states)
        return betas, var, phi[self.theta_dim:]

    def transition_matrix(self, gamma) -> np.ndarray:
        nst = self.num_states
        gamma = np.asarray(gamma, dtype=float)
        if self.flavor == IID:
            row = np.append(gamma, 1.0 - gamma.sum())
            return np.tile(row, (nst, 1))
        free = gamma.reshape(nst, nst - 1)
        return np.column_stack([free, 1.0 - free.sum(axis=1)])

    def theta_permutation(self, pi: Sequence[int]) -> np.ndarray:
        """Index array ``idx`` with ``theta_pi = theta[idx]``."""
        p = self.num_predictors
        idx = [pi[j] * p + i for j in range(self.num_states) for i in range(p)]
        if self.n_var == 1:
            idx.append(self.n_beta)
        else:
            idx.extend(self.n_beta + pi[j] for j in range(self.num_states))
        return np.asarray(idx, dtype=int)

    def theta_mask(self, test_parameters=("intercept", "beta", "sigma")) -> np.ndarray:
        """Boolean mask over theta selecting the tested coordinates."""
        tp = {s.lower() for s in test_parameters}
        unknown = tp - {"intercept", "beta", "sigma"}
        if unknown:
            raise ValueError(f"unknown test parameters {sorted(unknown)}")
        mask = np.zeros(self.theta_dim, dtype=bool)
        for j in range(self.num_states):
            for i in range(self.num_predictors):
                is_icpt = self.intercept and i == 0
                if (is_icpt and "intercept" in tp) or (not is_icpt and "beta" in tp):
                    mask[j * self.num_predictors + i] = True
        if "sigma" in tp:
            mask[self.n_beta:] = True
        return mask

    def coordinate_names(self, predictor_names=None) -> list[str]:
        p = self.num_predictors
        if predictor_names is None:
            predictor_names = [f"x{i + 1}" for i in range(p - int(self.intercept))]
        cols = (["intercept"] if self.intercept else []) + list(predictor_names)
        names = [f"beta[{j + 1}].{c}" for j in range(self.num_states) for c in cols]
        if self.n_var == 1:
            names.append("sigma2")
        else:
            names.extend(f"sigma2[{j + 1}]" for j in range(self.num_states))
        if self.flavor == IID:
            names.extend(f"lambda[{j + 1}]" for j in range(self.num_states - 1))
        else:
            names.extend(
                f"Gamma[{i + 1},{k + 1}]"
                for i in range(self.num_states)
                for k in range(self.num_states - 1)
            )
        return names


def all_permutations(num_states: int) -> list[tuple[int, ...]]:
    return list(permutations(range(num_states)))


def permute_phi(layout: ParamLayout, phi, pi: Sequence[int]) -> np.ndarray:
    """Relabel states: new state ``j`` is old state ``pi[j]``."""
    if sorted(pi) != list(range(layout.num_states)):
        raise ValueError(f"{pi!r} is not a permutation of {layout.num_states} states")
    phi = np.asarray(phi, dtype=float)
    theta_part = phi[: layout.theta_dim][layout.theta_permutation(pi)]
    gmat = layout.transition_matrix(phi[layout.theta_dim:])[np.ix_(pi, pi)]
    if layout.flavor == IID:
        gamma = gmat[0, :-1]
    else:
        gamma = gmat[:, :-1].ravel()
    return np.concatenate([theta_part, gamma])


def design_matrix(x, intercept: bool) -> np.ndarray:
    """Predictor matrix with a leading constant column when requested."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if intercept:
        return np.column_stack([np.ones(x.shape[0]), x])
    return x


def _check_dims(y, x, num_predictors):
    y = np.asarray(y, dtype=float).ravel()
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None] if num_predictors == 1 else x.reshape(y.size, -1)
    if x.shape[0] != y.size:
        raise DimensionMismatch(f"x has {x.shape[0]} rows but y has {y.size} entries")
    if x.shape[1] != num_predictors:
        raise DimensionMismatch(f"x has {x.shape[1]} columns, model expects {num_predictors}")
    if y.size == 0:
        raise DimensionMismatch("empty data")
    return y, x


def state_logdens(y, x, betas, variances):
    """Matrix of ``log N(y_t | x_t beta_j, sigma2_j)``, shape ``(m, l)``."""
    resid = y[:, None] - x @ betas.T
    return -0.5 * (_LOG_2PI + np.log(variances)[None, :] + resid**2 / variances[None, :])


def _marginal_law(flavor, gmat):
    if flavor == IID:
        return gmat[0]
    return _stationary(gmat)


def _loglik_raw(y, x, betas, variances, flavor, gmat):
    logdens = state_logdens(y, x, betas, variances)
    lam = _marginal_law(flavor, gmat)
    if flavor == IID or gmat.shape[0] == 1:
        with np.errstate(divide="ignore"):
            ll, _ = _kernels.iid_posteriors(logdens, np.log(lam))
    else:
        ll = _kernels.hmm_forward(logdens, gmat, lam)
    return ll


def loglik(y, x, theta: SRTheta, trans: TransitionParam) -> float:
    """Log-likelihood of one environment's data, up to ``log p(x)``."""
    y, x = _check_dims(y, x, theta.num_predictors)
    if theta.num_states != trans.num_states:
        raise DimensionMismatch("theta and gamma disagree on the number of states")
    ll = _loglik_raw(y, x, theta.betas, theta.variances, trans.flavor, trans.matrix)
    if not np.isfinite(ll):
        raise NonFiniteLikelihood("log-likelihood is not finite")
    return ll


def loglik_phi(y, x, layout: ParamLayout, phi) -> float:
    betas, var, gamma = layout.split(phi)
    ll = _loglik_raw(y, x, betas, var, layout.flavor, layout.transition_matrix(gamma))
    if not np.isfinite(ll):
        raise NonFiniteLikelihood("log-likelihood is not finite")
    return ll


def _posteriors_raw(y, x, betas, variances, flavor, gmat):
    logdens = state_logdens(y, x, betas, variances)
    lam = _marginal_law(flavor, gmat)
    if flavor == IID or gmat.shape[0] == 1:
        with np.errstate(divide="ignore", invalid="ignore"):
            ll, w = _kernels.iid_posteriors(logdens, np.log(lam))
        return ll, w, None, lam
    ll, w, xi = _kernels.hmm_forward_backward(logdens, gmat, lam)
    return ll, w, xi, lam


def posterior_state_probs(y, x, theta: SRTheta, trans: TransitionParam) -> np.ndarray:
    """``P(H_t = j | y, x)`` for every point, shape ``(m, l)``."""
    y, x = _check_dims(y, x, theta.num_predictors)
    ll, w, _, _ = _posteriors_raw(y, x, theta.betas, theta.variances, trans.flavor, trans.matrix)
    if not np.isfinite(ll):
        raise NonFiniteLikelihood("log-likelihood is not finite")
    return w


def loglik_and_gradient(y, x, layout: ParamLayout, phi):
    """Log-likelihood and its gradient in the natural coordinates of ``phi``.

    The gradient uses the identity ``grad log L = E[grad log p(y, h) | y]``,
    so it costs one forward-backward pass.
    """
    betas, var, gamma = layout.split(phi)
    gmat = layout.transition_matrix(gamma)
    ll, w, xi, lam = _posteriors_raw(y, x, betas, var, layout.flavor, gmat)
    if not np.isfinite(ll):
        raise NonFiniteLikelihood("log-likelihood is not finite")
    nst = layout.num_states
    resid = y[:, None] - x @ betas.T
    wr = w * resid
    # extreme line-search probes can overflow here; callers reject non-finite gradients
    with np.errstate(over="ignore", invalid="ignore"):
        g_beta = (x.T @ wr).T / var[:, None]
        g_var = (w * resid**2).sum(axis=0) / (2.0 * var**2) - w.sum(axis=0) / (2.0 * var)
    if layout.n_var == 1:
        g_var = np.array([g_var.sum()])
    if nst == 1:
        g_gamma = np.zeros(0)
    elif layout.flavor == IID:
        counts = w.sum(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            g_gamma = counts[:-1] / lam[:-1] - counts[-1] / lam[-1]
    else:
        g_gamma = _hmm_gamma_gradient(gmat, lam, w[0], xi)
    return ll, np.concatenate([g_beta.ravel(), g_var, g_gamma])


def _hmm_gamma_gradient(gmat, lam, w0, xi):
    nst = gmat.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = xi / gmat
    direct = ratio[:, :-1] - ratio[:, -1:]
    # stationary start: d lambda / d Gamma through the fundamental matrix
    z = np.linalg.inv(np.eye(nst) - gmat + np.outer(np.ones(nst), lam))
    score0 = w0 / lam
    zs = z @ score0
    init = lam[:, None] * (zs[:-1] - zs[-1])[None, :]
    return (direct + init).ravel()


@dataclass(frozen=True)
class Dataset:
    """Observed data ``(y, x)`` with environment labels ``1..K``.

    The latent path is never part of a dataset; simulators return it
    separately.
    """

    y: np.ndarray
    x: np.ndarray
    env: np.ndarray
    predictor_names: tuple = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[0] == 0 and y.size:
            x = np.zeros((y.size, 0))
        env = np.asarray(self.env).ravel()
        if y.size < 1:
            raise DimensionMismatch("dataset needs at least one observation")
        if x.shape[0] != y.size or env.size != y.size:
            raise DimensionMismatch("y, x and env must have the same number of rows")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise ValueError("dataset contains missing or non-finite values")
        if not np.all(env == np.round(env)):
            raise ValueError("environment labels must be integers")
        env = env.astype(int)
        k = int(env.max())
        if env.min() < 1 or any(not np.any(env == e) for e in range(1, k + 1)):
            raise ValueError("environments must be labelled 1..K, each nonempty")
        names = tuple(self.predictor_names) or tuple(f"X{i + 1}" for i in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise DimensionMismatch("predictor_names length does not match x")
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "env", _frozen(env, dtype=int))
        object.__setattr__(self, "predictor_names", names)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def num_envs(self) -> int:
        return int(self.env.max())

    def env_indices(self, e: int) -> np.ndarray:
        return np.flatnonzero(self.env == e)

    def env_data(self, e: int, columns=None):
        """``(y_e, x_e)`` for environment ``e`` restricted to ``columns``."""
        idx = self.env_indices(e)
        cols = list(range(self.d)) if columns is None else list(columns)
        return self.y[idx], self.x[np.ix_(idx, cols)]

    def select(self, columns) -> "Dataset":
        cols = list(columns)
        return Dataset(self.y, self.x[:, cols], self.env, tuple(self.predictor_names[c] for c in cols))
