import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from instances import EVIDENCE_Q1, PREDICTION_CASES, SAMPLER_CASES, instance, sun_prior
from sunprobit.errors import CapExceeded, IndexOutOfRange, NotFactorizable
from sunprobit.gauss import CdfSettings
from sunprobit.models import (
    Dataset,
    ModelSpec,
    ProbitLikelihood,
    build_likelihood,
    likelihood_eval,
    predict_frequencies,
)
from sunprobit.sun import (
    SunParams,
    log_evidence,
    marginal_subset,
    posterior_update,
    predict_exact,
    predict_from_posterior,
    sample_posterior,
    skew_normal,
    sun_log_density,
    sun_moments,
)

DERIVED = json.loads((Path(__file__).parent / "fixtures" / "derived.json").read_text())
DELTA = 1 / math.sqrt(2)


def one_obs_posterior():
    spec = ModelSpec("Sequential", 2, 1)
    lik = build_likelihood(spec, Dataset([1], [[1.0]]))
    return posterior_update(SunParams.gaussian([0.0], [[1.0]]), lik)


# -- density


def test_gaussian_density():
    prior = SunParams.gaussian([0.5, -1.0], [[2.0, 0.3], [0.3, 1.0]])
    beta = np.array([0.1, 0.2])
    ref = stats.multivariate_normal([0.5, -1.0], [[2.0, 0.3], [0.3, 1.0]]).logpdf(beta)
    assert sun_log_density(prior, beta) == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize("b", [-2.0, -0.3, 0.0, 1.7])
def test_skew_normal_density(b):
    ref = math.log(2) + stats.norm.logpdf(b) + stats.norm.logcdf(b)
    assert sun_log_density(skew_normal(DELTA), [b]) == pytest.approx(ref, abs=1e-12)


def test_zero_delta_cancels():
    rng = np.random.default_rng(0)
    params = SunParams(xi=np.zeros(2), Omega=np.eye(2), Delta=np.zeros((2, 2)),
                       gamma=rng.standard_normal(2), Gamma=np.array([[1.0, 0.3], [0.3, 1.0]]))
    beta = rng.standard_normal(2)
    assert sun_log_density(params, beta) == pytest.approx(
        stats.multivariate_normal(np.zeros(2), np.eye(2)).logpdf(beta), abs=1e-6)


def test_validation():
    with pytest.raises(ValueError):
        SunParams(xi=np.zeros(1), Omega=np.eye(1), Delta=np.ones((1, 1)), gamma=np.zeros(1),
                  Gamma=2 * np.eye(1))
    with pytest.raises(NotFactorizable):
        SunParams(xi=np.zeros(1), Omega=np.eye(1), Delta=np.full((1, 1), 1.5), gamma=np.zeros(1),
                  Gamma=np.eye(1))


def test_json_round_trip_bit_exact():
    params = sun_prior(3, 2, np.random.default_rng(1))
    back = SunParams.from_json(json.loads(json.dumps(params.to_json())))
    assert back.equals(params)


# -- posterior update


def test_single_binary_posterior():
    post = one_obs_posterior()
    ref = skew_normal(DELTA)
    for key in ("xi", "Omega", "Delta", "gamma", "Gamma"):
        np.testing.assert_allclose(getattr(post, key), getattr(ref, key), atol=1e-15)


def test_empty_data_returns_prior():
    prior = sun_prior(2, 1, np.random.default_rng(2))
    post = posterior_update(prior, ProbitLikelihood.empty(2))
    assert post.equals(prior)


def test_sequential_update_equals_batch():
    spec, data, lik, prior = instance(SAMPLER_CASES[2])
    first = build_likelihood(spec, Dataset(data.y[:1], data.X[:1]))
    second = build_likelihood(spec, Dataset(data.y[1:], data.X[1:]))
    staged = posterior_update(posterior_update(prior, first), second)
    batch = posterior_update(prior, lik)
    for key in ("xi", "Omega", "Delta", "gamma", "Gamma"):
        np.testing.assert_allclose(getattr(staged, key), getattr(batch, key), atol=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6))
def test_conjugacy_on_grid(seed):
    rng = np.random.default_rng(seed)
    spec = ModelSpec("ClassSpecific", 2, 1)
    n = int(rng.integers(1, 4))
    lik = build_likelihood(spec, Dataset(rng.integers(1, 3, n), rng.standard_normal((n, 1))))
    prior = SunParams.gaussian(rng.standard_normal(1), [[1.0 + rng.random()]])
    post = posterior_update(prior, lik)
    ev = log_evidence(prior, lik)
    for b in np.linspace(-2, 2, 7):
        r = sun_log_density(prior, [b]) + likelihood_eval(lik, [b]) - ev - sun_log_density(post, [b])
        assert abs(r) <= 1e-4


# -- sampling


def test_sampler_gaussian_degeneration():
    params = SunParams(xi=np.array([1.0, -1.0]), Omega=np.array([[2.0, 0.5], [0.5, 1.0]]),
                       Delta=np.zeros((2, 1)), gamma=np.array([0.3]), Gamma=np.eye(1))
    T = 10**5
    D = sample_posterior(params, T, np.random.default_rng(3)).draws
    se = np.sqrt(np.diag(params.Omega) / T)
    assert np.all(np.abs(D.mean(axis=0) - params.xi) <= 4 * se)


def test_sampler_skew_normal_mean():
    T = 10**5
    D = sample_posterior(skew_normal(DELTA), T, np.random.default_rng(4)).draws[:, 0]
    sd = math.sqrt(1 - 2 * DELTA**2 / math.pi)
    assert abs(D.mean() - 1 / math.sqrt(math.pi)) <= 4 * sd / math.sqrt(T)


def test_sampler_matches_frozen_rejection():
    ref = DERIVED["sampler"][0]
    spec, data, lik, prior = instance(ref["case"])
    post = posterior_update(prior, lik)
    assert post.h == ref["h_plus_m"] == 3
    T = 10**5
    D = sample_posterior(post, T, np.random.default_rng(5)).draws
    var, rvar = D.var(axis=0, ddof=1), np.asarray(ref["var"])
    se_mean = np.sqrt(var / T + rvar / ref["T"])
    assert np.all(np.abs(D.mean(axis=0) - ref["mean"]) <= 4 * se_mean)
    m4 = ((D - D.mean(axis=0)) ** 4).mean(axis=0)
    se_var = np.sqrt((m4 - var**2) / T + (np.asarray(ref["m4"]) - rvar**2) / ref["T"])
    assert np.all(np.abs(var - rvar) <= 4 * se_var)


def test_sampler_reproducible_with_seed():
    post = one_obs_posterior()
    a = sample_posterior(post, 5, 123).draws
    b = sample_posterior(post, 5, 123).draws
    np.testing.assert_array_equal(a, b)


def test_sampler_cap_names_remedy():
    post = one_obs_posterior()
    with pytest.raises(CapExceeded, match="pfm"):
        sample_posterior(post, 10, 0, cap=0)


def test_closed_form_moments_match_sampler():
    spec, data, lik, prior = instance(SAMPLER_CASES[1])
    post = posterior_update(prior, lik)
    m, C = sun_moments(post)
    T = 10**5
    D = sample_posterior(post, T, np.random.default_rng(6)).draws
    assert np.all(np.abs(D.mean(axis=0) - m) <= 4 * np.sqrt(np.diag(C) / T))


# -- evidence


def test_evidence_single_binary_is_half():
    spec = ModelSpec("Sequential", 2, 1)
    for x, omega in [(1.0, 1.0), (-2.5, 7.0)]:
        lik = build_likelihood(spec, Dataset([2], [[x]]))
        ev = log_evidence(SunParams.gaussian([0.0], [[omega]]), lik)
        assert ev == pytest.approx(math.log(0.5), abs=1e-6)


def test_evidence_two_binary_is_third():
    spec = ModelSpec("Sequential", 2, 1)
    lik = build_likelihood(spec, Dataset([1, 1], [[1.0], [1.0]]))
    ev = log_evidence(SunParams.gaussian([0.0], [[1.0]]), lik)
    assert math.exp(ev) == pytest.approx(1 / 3, abs=1e-6)


def test_evidence_empty_data_is_one():
    prior = sun_prior(2, 1, np.random.default_rng(7))
    assert log_evidence(prior, ProbitLikelihood.empty(2)) == 0.0


def test_evidence_q1_three_classes_matches_quadrature():
    ref = next(e for e in DERIVED["evidence"] if e["case"] == EVIDENCE_Q1)
    spec, data, lik, prior = instance(EVIDENCE_Q1)
    assert spec.q == 1 and spec.L == 3 and data.n == 2
    ev = math.exp(log_evidence(prior, lik))
    assert ev == pytest.approx(ref["evidence"], rel=1e-3)


# -- prediction


def test_prediction_without_data_is_symmetric():
    spec = ModelSpec("Sequential", 3, 2)
    prior = SunParams.gaussian(np.zeros(4), 4 * np.eye(4))
    pred = predict_exact(prior, spec, ProbitLikelihood.empty(4), np.array([1.0, -0.3]))
    np.testing.assert_allclose(pred.probs, [0.5, 0.25, 0.25], atol=1e-6)


@pytest.mark.parametrize("case", PREDICTION_CASES[:2])
def test_prediction_raw_sum(case):
    spec, data, lik, prior = instance(case)
    x = np.random.default_rng(8).standard_normal(spec.x_shape())
    pred = predict_exact(prior, spec, lik, x)
    assert pred.tol_met
    assert pred.raw_sum == pytest.approx(1.0, abs=5 * 1e-4 * (spec.L + 1))
    assert pred.probs.sum() == pytest.approx(1.0, abs=1e-12)


def test_prediction_matches_frequency_rule():
    spec, data, lik, prior = instance(PREDICTION_CASES[0])
    assert (data.n, spec.p, spec.L) == (6, 2, 3)
    x = np.array([0.4, -1.1])
    pred = predict_exact(prior, spec, lik, x)
    T = 10**5
    rng = np.random.default_rng(9)
    draws = sample_posterior(posterior_update(prior, lik), T, rng).draws
    freq = predict_frequencies(spec, x, draws, rng)
    p = pred.probs
    assert np.all(np.abs(freq - p) <= 4 * np.sqrt(p * (1 - p) / T))


def test_prediction_from_posterior_equals_exact():
    spec, data, lik, prior = instance(PREDICTION_CASES[1])
    x = np.array([0.2, 0.1])
    a = predict_exact(prior, spec, lik, x)
    b = predict_from_posterior(posterior_update(prior, lik), spec, x)
    np.testing.assert_array_equal(a.probs, b.probs)


# -- marginals


def test_marginal_full_selection_identity():
    params = sun_prior(3, 2, np.random.default_rng(10))
    assert marginal_subset(params, [0, 1, 2]).equals(params)


def test_marginal_gaussian():
    prior = SunParams.gaussian([1.0, 2.0, 3.0], np.diag([1.0, 2.0, 3.0]) + 0.1)
    sub = marginal_subset(prior, [2, 0])
    np.testing.assert_array_equal(sub.xi, [3.0, 1.0])
    np.testing.assert_array_equal(sub.Omega, prior.Omega[np.ix_([2, 0], [2, 0])])


def test_marginal_density_integrates_to_one():
    spec, data, lik, prior = instance(SAMPLER_CASES[2])
    post = posterior_update(prior, lik)
    sub = marginal_subset(post, [1])
    c, s = sub.xi[0], math.sqrt(sub.Omega[0, 0])
    x, w = np.polynomial.legendre.leggauss(200)
    loose = CdfSettings(tol=1e-6, rel_tol=1e-3)
    dens = [math.exp(sun_log_density(sub, [c + 12 * s * t], loose)) for t in x]
    total = 12 * s * float(np.dot(w, dens))
    assert total == pytest.approx(1.0, abs=1e-3)


def test_marginal_bad_index():
    with pytest.raises(IndexOutOfRange):
        marginal_subset(sun_prior(2, 1, np.random.default_rng(11)), [2])
