import math
import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from pif.vi import (FitOptions, GammaPrior, GammaVariational, allocate_multinomial,
                    check_convergence, digamma, gamma_elog, gamma_kl_terms, gamma_mean,
                    init_variational, poisson_loglik)

EULER = 0.57721566490153286


def gv(shape, rate):
    return GammaVariational(np.atleast_1d(float(shape)), np.atleast_1d(float(rate)))


# --------------------------------------------------------------------------
# digamma

@pytest.mark.parametrize("x", [0.5, 1.0, 7.3])
def test_digamma_recurrence(x):
    assert digamma(x + 1) - digamma(x) == pytest.approx(1.0 / x, abs=1e-12)


def test_digamma_at_one_and_ten():
    assert digamma(1.0) == pytest.approx(-EULER, abs=1e-12)
    assert digamma(10.0) == pytest.approx(-EULER + sum(1.0 / k for k in range(1, 10)), abs=1e-12)


def test_digamma_matches_mpmath():
    xs = np.concatenate([np.logspace(-6, 6, 400), np.linspace(0.1, 30, 200)])
    ours = digamma(xs)
    for x, v in zip(xs, ours):
        ref = float(mpmath.digamma(mpmath.mpf(float(x))))
        assert abs(v - ref) <= 1e-12 * max(1.0, abs(ref)), x


def test_digamma_scalar_and_array_agree():
    xs = np.array([1e-3, 0.37, 2.0, 11.5, 400.0])
    assert np.array_equal(digamma(xs), np.array([digamma(float(x)) for x in xs]))


@pytest.mark.parametrize("bad", [0.0, -1.0, float("nan")])
def test_digamma_domain(bad):
    with pytest.raises(ValueError):
        digamma(bad)
    with pytest.raises(ValueError):
        digamma(np.array([1.0, bad]))


@settings(max_examples=1000, deadline=None)
@given(st.floats(1e-4, 1e4))
def test_digamma_recurrence_property(x):
    lhs = digamma(x + 1) - digamma(x)
    assert abs(lhs - 1.0 / x) <= 1e-9 * (1.0 / x)


# --------------------------------------------------------------------------
# Gamma helpers

@pytest.mark.parametrize("k,v,mean", [(2, 4, 0.5), (3.3, 3.3, 1.0), (0.3, 0.1, 3.0)])
def test_gamma_mean(k, v, mean):
    assert gamma_mean(gv(k, v))[0] == pytest.approx(mean, rel=1e-15)


def test_gamma_elog_examples():
    assert gamma_elog(gv(1, 1))[0] == pytest.approx(-EULER, abs=1e-12)
    psi5 = -EULER + 1 + 1 / 2 + 1 / 3 + 1 / 4
    assert gamma_elog(gv(5, 5))[0] == pytest.approx(psi5 - math.log(5), abs=1e-12)
    assert psi5 - math.log(5) == pytest.approx(float(mpmath.digamma(5) - mpmath.log(5)), abs=1e-15)
    base, scaled = gamma_elog(gv(2.5, 1.5))[0], gamma_elog(gv(2.5, 1.5 * 7))[0]
    assert base - scaled == pytest.approx(math.log(7), abs=1e-14)


def test_gamma_elog_matches_sampling_oracle():
    k, v = 0.7, 2.0
    draws = np.random.default_rng(0).gamma(k, 1 / v, size=400_000)
    assert gamma_elog(gv(k, v))[0] == pytest.approx(np.log(draws).mean(), abs=0.02)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_jensen(k, v):
    assert gamma_elog(gv(k, v))[0] < math.log(gamma_mean(gv(k, v))[0])


def test_gamma_prior_validation():
    with pytest.raises(ValueError):
        GammaPrior(0, 1)
    with pytest.raises(ValueError):
        GammaPrior(1, -1)
    assert GammaPrior(0.3, 0.1).mean == pytest.approx(3.0)


def test_variational_validation():
    with pytest.raises(ValueError):
        GammaVariational(np.ones(2), np.ones(3))
    with pytest.raises(ValueError):
        GammaVariational(np.array([1.0, 0.0]), np.ones(2)).validate()


def test_kl_terms_match_quadrature():
    prior, k, v = GammaPrior(0.8, 1.3), 2.2, 0.9
    q = stats.gamma(k, scale=1 / v)
    p = stats.gamma(prior.shape, scale=1 / prior.rate)
    ref, _ = integrate.quad(lambda t: q.pdf(t) * (p.logpdf(t) - q.logpdf(t)), 0, np.inf, limit=200)
    assert gamma_kl_terms(prior, gv(k, v)) == pytest.approx(ref, abs=1e-8)
    assert gamma_kl_terms(prior, gv(prior.shape, prior.rate)) == pytest.approx(0.0, abs=1e-12)


def test_init_variational_jitter():
    prior = GammaPrior(0.1, 0.2)
    g = init_variational(prior, (50, 4), np.random.default_rng(0))
    assert np.all(g.rate == 0.2)
    assert np.all((g.shape >= 0.1) & (g.shape < 0.11))
    again = init_variational(prior, (50, 4), np.random.default_rng(0))
    assert np.array_equal(g.shape, again.shape)


# --------------------------------------------------------------------------
# allocation and likelihood

def test_allocate_equal_scores():
    assert np.allclose(allocate_multinomial(4, np.zeros(4)), 0.25, atol=1e-15)


def test_allocate_one_to_three():
    assert np.allclose(allocate_multinomial(1, np.log([1.0, 3.0])), [0.25, 0.75], atol=1e-15)


def test_allocate_one_one_two():
    assert np.allclose(allocate_multinomial(1, [0.0, 0.0, math.log(2)]), [0.25, 0.25, 0.5],
                       atol=1e-15)


def test_allocate_all_neg_inf_falls_back():
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        phi = allocate_multinomial(3, np.full(3, -np.inf))
    assert np.allclose(phi, 1 / 3)
    assert any("uniform" in str(r.message) for r in rec)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-300, 300))
def test_allocate_shift_invariant(scores, shift):
    a = allocate_multinomial(1, scores)
    b = allocate_multinomial(1, np.asarray(scores) + shift)
    assert abs(a.sum() - 1) < 1e-12
    assert np.allclose(a, b, atol=1e-12, rtol=0)


def test_poisson_loglik_examples():
    assert poisson_loglik(0, 1) == pytest.approx(-1.0, abs=1e-15)
    assert poisson_loglik(1, 1) == pytest.approx(-1.0, abs=1e-15)
    assert poisson_loglik(3, 2) == pytest.approx(3 * math.log(2) - 2 - math.log(6), abs=1e-12)
    assert poisson_loglik(3, 2) == pytest.approx(-1.7123, abs=1e-4)
    assert poisson_loglik(2, 0.0, 1e-10) == pytest.approx(2 * math.log(1e-10) - 1e-10 - math.log(2))


def test_poisson_loglik_matches_scipy():
    y = np.arange(0, 30)
    lam = np.linspace(0.01, 25, 30)
    assert np.allclose(poisson_loglik(y, lam), stats.poisson.logpmf(y, lam), atol=1e-11)


@pytest.mark.parametrize("y", [1, 2, 5, 17])
def test_poisson_loglik_peaks_at_count(y):
    grid = np.linspace(0.05, 3 * y, 4001)
    vals = poisson_loglik(np.full(grid.size, y), grid)
    assert abs(grid[np.argmax(vals)] - y) <= grid[1] - grid[0]


# --------------------------------------------------------------------------
# convergence

def test_check_convergence_examples():
    opts = FitOptions(elbo_rel_tol=1e-4, max_sweeps=50)
    assert check_convergence([-100.0, -100.0], opts)
    assert not check_convergence([-100.0, -90.0], opts)
    assert check_convergence(list(np.linspace(-1000, -10, 50)), opts)
    assert not check_convergence([-100.0], opts)
    with pytest.raises(ValueError):
        check_convergence([], opts)


def test_fit_options_validation():
    with pytest.raises(ValueError):
        FitOptions(max_sweeps=0)
    with pytest.raises(ValueError):
        FitOptions(elbo_rel_tol=0)
    with pytest.raises(ValueError):
        FitOptions.from_dict({"max_sweep": 3})
    opts = FitOptions(max_sweeps=7, seed=3)
    assert FitOptions.from_dict(opts.to_dict()) == opts
