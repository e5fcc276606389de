"""Hot inner loops: mixture E-step and scaled forward-backward recursion.

Every kernel exists twice, a numba ``@njit`` version and a pure-numpy
version with identical semantics.  The numba path is the default; set
``ICPH_DISABLE_NUMBA=1`` in the environment to force the numpy path (useful
when the JIT warm-up dominates, or numba is unavailable).  Both variants are
importable by name so tests and ``benchmarks/bench_kernels.py`` can compare
them directly.

All kernels consume a matrix ``logdens`` of per-point, per-state Gaussian
log-densities (shape ``m x l``) and never see the regression parameters.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_FLAG = os.environ.get("ICPH_DISABLE_NUMBA", "").strip().lower()
USE_NUMBA = HAVE_NUMBA and _FLAG not in ("1", "true", "yes", "on")


# --------------------------------------------------------------------------
# numpy reference implementations
# --------------------------------------------------------------------------


def iid_posteriors_numpy(logdens, loglam):
    """Return ``(loglik, weights)`` for independent latent states."""
    a = logdens + loglam[None, :]
    shift = a.max(axis=1)
    e = np.exp(a - shift[:, None])
    s = e.sum(axis=1)
    loglik = float(np.sum(np.log(s) + shift))
    return loglik, e / s[:, None]


def hmm_forward_numpy(logdens, gamma, lam0):
    m, _ = logdens.shape
    shift = logdens.max(axis=1)
    b = np.exp(logdens - shift[:, None])
    alpha = lam0 * b[0]
    c = alpha.sum()
    if not c > 0.0:
        return -np.inf
    total = np.log(c) + shift[0]
    alpha = alpha / c
    for t in range(1, m):
        alpha = (alpha @ gamma) * b[t]
        c = alpha.sum()
        if not c > 0.0:
            return -np.inf
        total += np.log(c) + shift[t]
        alpha = alpha / c
    return float(total)


def hmm_forward_backward_numpy(logdens, gamma, lam0):
    """Scaled forward-backward pass.

    Returns ``(loglik, posteriors, xi_sum)`` where ``xi_sum[i, k]`` is the
    expected number of ``i -> k`` transitions given the data.
    """
    m, nst = logdens.shape
    shift = logdens.max(axis=1)
    b = np.exp(logdens - shift[:, None])
    alpha = np.empty((m, nst))
    scale = np.empty(m)
    a = lam0 * b[0]
    scale[0] = a.sum()
    if not scale[0] > 0.0:
        return -np.inf, np.full((m, nst), np.nan), np.full((nst, nst), np.nan)
    alpha[0] = a / scale[0]
    for t in range(1, m):
        a = (alpha[t - 1] @ gamma) * b[t]
        scale[t] = a.sum()
        if not scale[t] > 0.0:
            return -np.inf, np.full((m, nst), np.nan), np.full((nst, nst), np.nan)
        alpha[t] = a / scale[t]
    beta = np.empty((m, nst))
    beta[m - 1] = 1.0
    xi = np.zeros((nst, nst))
    for t in range(m - 1, 0, -1):
        v = b[t] * beta[t]
        beta[t - 1] = (gamma @ v) / scale[t]
        xi += np.outer(alpha[t - 1], v) * gamma / scale[t]
    post = alpha * beta
    post /= post.sum(axis=1, keepdims=True)
    loglik = float(np.sum(np.log(scale)) + shift.sum())
    return loglik, post, xi


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def iid_posteriors_numba(logdens, loglam):
        m, nst = logdens.shape
        w = np.empty((m, nst))
        total = 0.0
        for t in range(m):
            mx = -np.inf
            for j in range(nst):
                v = logdens[t, j] + loglam[j]
                w[t, j] = v
                if v > mx:
                    mx = v
            s = 0.0
            for j in range(nst):
                e = np.exp(w[t, j] - mx)
                w[t, j] = e
                s += e
            for j in range(nst):
                w[t, j] /= s
            total += np.log(s) + mx
        return total, w

    @numba.njit(cache=True)
    def hmm_forward_numba(logdens, gamma, lam0):
        m, nst = logdens.shape
        alpha = np.empty(nst)
        tmp = np.empty(nst)
        b = np.empty(nst)
        total = 0.0
        for t in range(m):
            mx = -np.inf
            for j in range(nst):
                if logdens[t, j] > mx:
                    mx = logdens[t, j]
            for j in range(nst):
                b[j] = np.exp(logdens[t, j] - mx)
            c = 0.0
            if t == 0:
                for j in range(nst):
                    tmp[j] = lam0[j] * b[j]
                    c += tmp[j]
            else:
                for k in range(nst):
                    acc = 0.0
                    for i in range(nst):
                        acc += alpha[i] * gamma[i, k]
                    tmp[k] = acc * b[k]
                    c += tmp[k]
            if not c > 0.0:
                return -np.inf
            for j in range(nst):
                alpha[j] = tmp[j] / c
            total += np.log(c) + mx
        return total

    @numba.njit(cache=True)
    def hmm_forward_backward_numba(logdens, gamma, lam0):
        m, nst = logdens.shape
        b = np.empty((m, nst))
        shift_sum = 0.0
        for t in range(m):
            mx = -np.inf
            for j in range(nst):
                if logdens[t, j] > mx:
                    mx = logdens[t, j]
            shift_sum += mx
            for j in range(nst):
                b[t, j] = np.exp(logdens[t, j] - mx)
        alpha = np.empty((m, nst))
        scale = np.empty(m)
        post = np.full((m, nst), np.nan)
        xi = np.zeros((nst, nst))
        c = 0.0
        for j in range(nst):
            alpha[0, j] = lam0[j] * b[0, j]
            c += alpha[0, j]
        if not c > 0.0:
            xi[:, :] = np.nan
            return -np.inf, post, xi
        scale[0] = c
        for j in range(nst):
            alpha[0, j] /= c
        for t in range(1, m):
            c = 0.0
            for k in range(nst):
                acc = 0.0
                for i in range(nst):
                    acc += alpha[t - 1, i] * gamma[i, k]
                alpha[t, k] = acc * b[t, k]
                c += alpha[t, k]
            if not c > 0.0:
                xi[:, :] = np.nan
                return -np.inf, post, xi
            scale[t] = c
            for k in range(nst):
                alpha[t, k] /= c
        beta = np.empty((m, nst))
        for j in range(nst):
            beta[m - 1, j] = 1.0
        v = np.empty(nst)
        for t in range(m - 1, 0, -1):
            for k in range(nst):
                v[k] = b[t, k] * beta[t, k]
            for i in range(nst):
                acc = 0.0
                for k in range(nst):
                    acc += gamma[i, k] * v[k]
                    xi[i, k] += alpha[t - 1, i] * gamma[i, k] * v[k] / scale[t]
                beta[t - 1, i] = acc / scale[t]
        total = shift_sum
        for t in range(m):
            total += np.log(scale[t])
            s = 0.0
            for j in range(nst):
                post[t, j] = alpha[t, j] * beta[t, j]
                s += post[t, j]
            for j in range(nst):
                post[t, j] /= s
        return total, post, xi

else:  # pragma: no cover
    iid_posteriors_numba = iid_posteriors_numpy
    hmm_forward_numba = hmm_forward_numpy
    hmm_forward_backward_numba = hmm_forward_backward_numpy


def _as_float(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def iid_posteriors(logdens, loglam):
    if USE_NUMBA:
        ll, w = iid_posteriors_numba(_as_float(logdens), _as_float(loglam))
        return float(ll), w
    return iid_posteriors_numpy(logdens, loglam)


def hmm_forward(logdens, gamma, lam0):
    if USE_NUMBA:
        return float(hmm_forward_numba(_as_float(logdens), _as_float(gamma), _as_float(lam0)))
    return hmm_forward_numpy(logdens, gamma, lam0)


def hmm_forward_backward(logdens, gamma, lam0):
    if USE_NUMBA:
        ll, post, xi = hmm_forward_backward_numba(
            _as_float(logdens), _as_float(gamma), _as_float(lam0)
        )
        return float(ll), post, xi
    return hmm_forward_backward_numpy(logdens, gamma, lam0)
