import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icph import _kernels as k

needs_numba = pytest.mark.skipif(not k.HAVE_NUMBA, reason="numba not installed")


def _inputs(seed, m, nst):
    rng = np.random.default_rng(seed)
    logdens = rng.normal(-1.0, 3.0, (m, nst))
    gamma = rng.dirichlet(np.ones(nst), size=nst)
    lam = rng.dirichlet(np.ones(nst))
    return logdens, gamma, lam


@needs_numba
@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 60), st.integers(1, 4))
def test_iid_parity(seed, m, nst):
    logdens, _, lam = _inputs(seed, m, nst)
    ll_a, w_a = k.iid_posteriors_numpy(logdens, np.log(lam))
    ll_b, w_b = k.iid_posteriors_numba(logdens, np.log(lam))
    assert abs(ll_a - ll_b) <= 1e-10 * max(1, abs(ll_a))
    np.testing.assert_allclose(w_a, w_b, atol=1e-12)


@needs_numba
@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 60), st.integers(1, 4))
def test_hmm_parity(seed, m, nst):
    logdens, gamma, lam = _inputs(seed, m, nst)
    ll_a = k.hmm_forward_numpy(logdens, gamma, lam)
    ll_b = k.hmm_forward_numba(logdens, gamma, lam)
    assert abs(ll_a - ll_b) <= 1e-10 * max(1, abs(ll_a))
    fa = k.hmm_forward_backward_numpy(logdens, gamma, lam)
    fb = k.hmm_forward_backward_numba(logdens, gamma, lam)
    assert abs(fa[0] - fb[0]) <= 1e-10 * max(1, abs(fa[0]))
    np.testing.assert_allclose(fa[1], fb[1], atol=1e-12)
    np.testing.assert_allclose(fa[2], fb[2], atol=1e-10)


def test_expected_transitions_sum_to_length():
    logdens, gamma, lam = _inputs(3, 50, 3)
    _, post, xi = k.hmm_forward_backward_numpy(logdens, gamma, lam)
    assert abs(xi.sum() - 49) < 1e-9
    # row sums of xi are the posteriors of the first m-1 points
    np.testing.assert_allclose(xi.sum(axis=1), post[:-1].sum(axis=0), atol=1e-9)


def test_forward_equals_forward_backward_loglik():
    logdens, gamma, lam = _inputs(4, 80, 2)
    assert abs(k.hmm_forward(logdens, gamma, lam) - k.hmm_forward_backward(logdens, gamma, lam)[0]) < 1e-9


def test_zero_probability_reports_minus_inf():
    logdens = np.array([[0.0, -np.inf], [-np.inf, 0.0]])
    gamma = np.eye(2)
    assert k.hmm_forward_numpy(logdens, gamma, np.array([1.0, 0.0])) == -np.inf


def test_env_flag_selects_numpy_path():
    code = "import icph._kernels as k; print(k.USE_NUMBA)"
    env = dict(os.environ, ICPH_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "False"
