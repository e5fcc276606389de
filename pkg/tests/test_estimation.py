import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icph.core import HMM, EqualVariances, LowerBound, all_permutations, loglik_phi, permute_phi
from icph.errors import DegenerateData
from icph.estimation import FitOptions, fit, fit_em, fit_nlm, init_starts, observed_fisher
from icph.experiments import sample_models_in_gmep_range
from icph.simulate import ScmSpec, simulate


def two_lines(seed, m=400, gap=4.0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=m)
    h = rng.integers(0, 2, m)
    y = 1.0 + 2.0 * x + gap * h + 0.3 * rng.normal(size=m)
    return y, x, h


def ols(y, x):
    X = np.column_stack([np.ones(len(y)), x])
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    return beta, np.mean((y - X @ beta) ** 2)


# --- starting values ---------------------------------------------------------


def test_starts_are_deterministic():
    y, x, _ = two_lines(0)
    a = init_starts(y, x, FitOptions(num_restarts=5, seed=3))
    b = init_starts(y, x, FitOptions(num_restarts=5, seed=3))
    assert len(a) == 5
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)


def test_single_state_start_is_ols():
    y, x, _ = two_lines(1)
    (start,) = init_starts(y, x, FitOptions(num_states=1))
    beta, s2 = ols(y, x)
    np.testing.assert_allclose(start, np.r_[beta, s2], rtol=1e-12)


def test_parallel_lines_give_a_separated_start():
    y, x, _ = two_lines(2, gap=4.0)
    starts = init_starts(y, x, FitOptions())
    gaps = [abs(s[0] - s[2]) for s in starts]
    assert max(gaps) > 0.5 * 4.0


def test_rank_deficient_design():
    x = np.ones((50, 1))
    with pytest.raises(DegenerateData):
        init_starts(np.arange(50.0), x, FitOptions())


def test_hmm_starts_have_transition_rows():
    y, x, _ = two_lines(3)
    starts = init_starts(y, x, FitOptions(model=HMM))
    layout = FitOptions(model=HMM).layout(1)
    assert all(s.size == layout.dim for s in starts)


# --- EM ----------------------------------------------------------------------


def test_em_single_state_is_ols():
    y, x, _ = two_lines(4)
    res = fit_em(y, x, FitOptions(method="EM", num_states=1))
    beta, s2 = ols(y, x)
    np.testing.assert_allclose(res.theta.betas[0], beta, atol=1e-6)
    np.testing.assert_allclose(res.theta.sigma2[0], s2, rtol=1e-6)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_em_trace_non_decreasing(seed, equal):
    d = simulate(ScmSpec("coverage_scm", n=200, seed=seed)).data
    opts = FitOptions(method="EM", constraint=EqualVariances() if equal else LowerBound())
    res = fit_em(d.y, d.x, opts)
    assert np.all(np.diff(res.loglik_trace) >= -1e-9)
    assert abs(res.loglik_trace[-1] - res.loglik_value) < 1e-9


def test_em_rejects_hmm():
    y, x, _ = two_lines(5)
    with pytest.raises(ValueError):
        fit_em(y, x, FitOptions(method="EM", model=HMM))


def _match_betas(est, true):
    return min(np.max(np.abs(est[list(p)] - true)) for p in all_permutations(len(true)))


def test_em_recovers_separated_slopes():
    (params, g), = sample_models_in_gmep_range(11, 1, 0.76, 0.80)
    true = np.array([[params["mu_y"], params["beta1"]], [params["mu_y"], params["beta2"]]])
    good = 0
    for seed in range(100):
        d = simulate(ScmSpec("coverage_scm", n=500, seed=seed, params=params)).data
        res = fit_em(d.y, d.x, FitOptions(method="EM", constraint=EqualVariances()))
        good += _match_betas(res.theta.betas, true) <= 0.1
    assert good >= 90, (good, g)


# --- NLM ---------------------------------------------------------------------


@pytest.mark.parametrize("gradient", ["analytic", "fd"])
def test_nlm_single_state_is_ols(gradient):
    y, x, _ = two_lines(6)
    res = fit_nlm(y, x, FitOptions(num_states=1, gradient=gradient))
    beta, s2 = ols(y, x)
    np.testing.assert_allclose(res.theta.betas[0], beta, atol=1e-5)
    np.testing.assert_allclose(res.theta.sigma2[0], s2, atol=1e-5)


def test_nlm_fd_and_analytic_agree():
    d = simulate(ScmSpec("coverage_scm", n=300, seed=7)).data
    a = fit(d.y, d.x, FitOptions(constraint=EqualVariances()))
    b = fit(d.y, d.x, FitOptions(constraint=EqualVariances(), gradient="fd"))
    assert abs(a.loglik_value - b.loglik_value) < 1e-5


def test_nlm_and_em_agree_on_a_few_seeds():
    for seed in range(10):
        d = simulate(ScmSpec("coverage_scm", n=300, seed=seed)).data
        opts = dict(constraint=EqualVariances())
        a = fit(d.y, d.x, FitOptions(method="EM", **opts))
        b = fit(d.y, d.x, FitOptions(method="NLM", **opts))
        assert abs(a.loglik_value - b.loglik_value) <= 1e-4


def _sticky_hmm(seed, m=1000):
    rng = np.random.default_rng(seed)
    gmat = np.array([[0.9, 0.1], [0.2, 0.8]])
    h = np.empty(m, dtype=int)
    h[0] = rng.choice(2, p=[2 / 3, 1 / 3])
    for t in range(1, m):
        h[t] = rng.choice(2, p=gmat[h[t - 1]])
    x = rng.normal(size=m)
    y = np.where(h == 0, -1.0 + 1.0 * x, 1.0 - 1.0 * x) + 0.5 * rng.normal(size=m)
    return y, x, gmat


def test_hmm_transition_recovery():
    good = 0
    for seed in range(100):
        y, x, gmat = _sticky_hmm(seed)
        res = fit(y, x, FitOptions(model=HMM))
        g = res.transition.matrix
        err = min(np.max(np.abs(g[np.ix_(p, p)] - gmat)) for p in ((0, 1), (1, 0)))
        good += err <= 0.1
    assert good >= 85


# --- constraints and determinism ---------------------------------------------


def test_constraints_hold_exactly():
    d = simulate(ScmSpec("coverage_scm", n=200, seed=8)).data
    eq = fit(d.y, d.x, FitOptions(constraint=EqualVariances()))
    assert eq.theta.sigma2.size == 1
    for method in ("EM", "NLM"):
        lb = fit(d.y, d.x, FitOptions(method=method, constraint=LowerBound(0.05)))
        assert np.all(lb.theta.sigma2 >= 0.05)


def test_fit_is_deterministic():
    d = simulate(ScmSpec("coverage_scm", n=200, seed=9)).data
    for method in ("EM", "NLM"):
        a = fit(d.y, d.x, FitOptions(method=method, seed=4))
        b = fit(d.y, d.x, FitOptions(method=method, seed=4))
        assert a.phi_hat.tobytes() == b.phi_hat.tobytes()
        assert a.fisher.tobytes() == b.fisher.tobytes()
        assert a.loglik_trace == b.loglik_trace


def test_permutation_closure_at_optimum():
    d = simulate(ScmSpec("coverage_scm", n=300, seed=10)).data
    res = fit(d.y, d.x, FitOptions())
    X = np.column_stack([np.ones(d.n), d.x])
    for pi in all_permutations(2):
        q = permute_phi(res.layout, res.phi_hat, pi)
        assert abs(loglik_phi(d.y, X, res.layout, q) - res.loglik_value) <= 1e-10 * abs(res.loglik_value)


# --- observed information ----------------------------------------------------


def test_fisher_single_state_closed_form():
    rng = np.random.default_rng(12)
    m = 500
    x = rng.normal(size=m)
    y = 0.5 + 1.5 * x + rng.normal(size=m)
    opts = FitOptions(num_states=1)
    res = fit(y, x, opts)
    s2 = res.theta.sigma2[0]
    X = np.column_stack([np.ones(m), x])
    expected = np.zeros((3, 3))
    expected[:2, :2] = X.T @ X / s2
    expected[2, 2] = m / (2 * s2**2)
    np.testing.assert_allclose(res.fisher, expected, rtol=1e-3, atol=1e-3 * np.max(expected))


def test_fisher_matches_hessian_of_loglik():
    d = simulate(ScmSpec("coverage_scm", n=300, seed=13)).data
    opts = FitOptions(constraint=EqualVariances())
    res = fit(d.y, d.x, opts)
    X = np.column_stack([np.ones(d.n), d.x])
    phi = np.array(res.phi_hat)
    k = phi.size
    hess = np.empty((k, k))
    h = 1e-4
    f = lambda v: loglik_phi(d.y, X, res.layout, v)  # noqa: E731
    for i in range(k):
        for j in range(k):
            ei, ej = np.eye(k)[i] * h, np.eye(k)[j] * h
            hess[i, j] = (f(phi + ei + ej) - f(phi + ei - ej) - f(phi - ei + ej) + f(phi - ei - ej)) / (4 * h * h)
    np.testing.assert_allclose(res.fisher, -hess, rtol=1e-3, atol=1e-2)


def test_fisher_symmetric_and_psd():
    for seed in range(5):
        d = simulate(ScmSpec("coverage_scm", n=300, seed=seed)).data
        res = fit(d.y, d.x, FitOptions(constraint=EqualVariances()))
        assert np.array_equal(res.fisher, res.fisher.T)
        ev = np.linalg.eigvalsh(res.fisher)
        assert ev[0] >= -1e-6 * np.max(np.abs(ev))
        again = observed_fisher(d.y, d.x, res.phi_hat, FitOptions(constraint=EqualVariances()))
        np.testing.assert_array_equal(again, res.fisher)


def test_to_dict_names():
    y, x, _ = two_lines(14)
    out = fit(y, x, FitOptions()).to_dict(["X"])
    assert set(out["parameters"]) == {
        "beta[1].intercept", "beta[1].X", "beta[2].intercept", "beta[2].X",
        "sigma2[1]", "sigma2[2]", "lambda[1]",
    }
