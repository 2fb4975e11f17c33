import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from sunprobit.errors import DimensionMismatch, UnknownLabel
from sunprobit.models import (
    Dataset,
    Family,
    ModelSpec,
    ProbitLikelihood,
    build_expanded,
    build_likelihood,
    class_log_probs,
    labels_from_latents,
    likelihood_eval,
    predict_frequencies,
    unit_block,
    unit_log_likelihoods,
)


def test_discrete_choice_block():
    spec = ModelSpec("DiscreteChoice", 3, 2)
    x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    rows, block = unit_block(spec, x, 2)
    np.testing.assert_array_equal(rows, [[-1.0, 1.0], [-1.0, 0.0]])
    np.testing.assert_array_equal(block, [[2.0, 1.0], [1.0, 2.0]])


def test_discrete_choice_binary_block():
    S = np.array([[1.5, 0.2], [0.2, 0.7]])
    spec = ModelSpec("DiscreteChoice", 2, 1, S)
    rows, block = unit_block(spec, np.array([[0.4], [1.0]]), 2)
    np.testing.assert_allclose(rows, [[0.6]])
    np.testing.assert_allclose(block, [[1.5 + 0.7 - 0.4]])


def test_class_specific_blocks():
    spec = ModelSpec("ClassSpecific", 3, 2)
    rows, block = unit_block(spec, np.array([1.0, 2.0]), 1)
    np.testing.assert_array_equal(rows, [[1, 2, -1, -2], [1, 2, 0, 0]])
    np.testing.assert_array_equal(block, [[2, 1], [1, 2]])
    rows, _ = unit_block(spec, np.array([1.0, 2.0]), 3)
    np.testing.assert_array_equal(rows, [[-1, -2, 0, 0], [0, 0, -1, -2]])


def test_class_specific_binary_is_binary_probit():
    spec = ModelSpec("ClassSpecific", 2, 3)
    assert spec.q == 3
    rows, block = unit_block(spec, np.array([1.0, -1.0, 2.0]), 1)
    np.testing.assert_array_equal(rows, [[1.0, -1.0, 2.0]])
    np.testing.assert_array_equal(block, [[2.0]])


def test_sequential_blocks():
    spec = ModelSpec("Sequential", 3, 2)
    x = np.array([1.0, 0.5])
    rows, block = unit_block(spec, x, 2)
    np.testing.assert_array_equal(rows, [[-1, -0.5, 0, 0], [0, 0, 1, 0.5]])
    np.testing.assert_array_equal(block, np.eye(2))
    rows, _ = unit_block(spec, x, 1)
    np.testing.assert_array_equal(rows, [[1, 0.5, 0, 0]])
    rows, _ = unit_block(spec, x, 3)
    np.testing.assert_array_equal(rows, [[-1, -0.5, 0, 0], [0, 0, -1, -0.5]])


def test_sequential_ignores_sigma():
    spec = ModelSpec("Sequential", 3, 1, np.diag([2.0, 3.0, 4.0]))
    np.testing.assert_array_equal(spec.Sigma, np.eye(3))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(0, 10**6))
def test_lambda_diagonal_positive(L, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((L, L))
    spec = ModelSpec("DiscreteChoice", L, 2, A @ A.T + 0.1 * np.eye(L))
    x = rng.standard_normal((L, 2))
    for y in range(1, L + 1):
        _, block = unit_block(spec, x, y)
        assert np.all(np.diag(block) > 0)


def test_bad_labels_and_shapes():
    spec = ModelSpec("Sequential", 3, 2)
    with pytest.raises(UnknownLabel):
        unit_block(spec, np.ones(2), 4)
    with pytest.raises(UnknownLabel):
        unit_block(spec, np.ones(2), 0)
    with pytest.raises(DimensionMismatch):
        unit_block(spec, np.ones(3), 1)
    with pytest.raises(DimensionMismatch):
        ModelSpec("DiscreteChoice", 3, 1, np.eye(2))


def test_family_parse():
    assert Family.parse("class_specific") is Family.CLASS_SPECIFIC
    with pytest.raises(ValueError):
        Family.parse("ordinal")


def test_sequential_likelihood_at_zero():
    rng = np.random.default_rng(0)
    spec = ModelSpec("Sequential", 4, 3)
    data = Dataset(rng.integers(1, 5, 7), rng.standard_normal((7, 3)))
    lik = build_likelihood(spec, data)
    assert likelihood_eval(lik, np.zeros(spec.q)) == pytest.approx(-lik.m * math.log(2), abs=1e-12)


def test_class_specific_uniform_at_zero():
    spec = ModelSpec("ClassSpecific", 3, 2)
    lp = class_log_probs(spec, np.array([0.3, -1.0]), np.zeros(4))
    np.testing.assert_allclose(np.exp(lp), [1 / 3] * 3, atol=1e-12)


@pytest.mark.parametrize("y", [1, 2])
def test_binary_sequential_likelihood(y):
    spec = ModelSpec("Sequential", 2, 1)
    lik = build_likelihood(spec, Dataset([y], [[1.0]]))
    sign = 1.0 if y == 1 else -1.0
    assert likelihood_eval(lik, [0.7]) == pytest.approx(special.log_ndtr(sign * 0.7), abs=1e-14)


def test_append_multiplies_likelihood():
    rng = np.random.default_rng(3)
    spec = ModelSpec("ClassSpecific", 3, 2)
    data = Dataset([1, 3], rng.standard_normal((2, 2)))
    lik = build_likelihood(spec, data)
    x_new = rng.standard_normal(2)
    big = build_expanded(lik, spec, x_new, 2)
    beta = rng.standard_normal(spec.q)
    rows, block = unit_block(spec, x_new, 2)
    extra = class_log_probs(spec, x_new, beta)[1]
    assert likelihood_eval(big, beta) == pytest.approx(likelihood_eval(lik, beta) + extra, abs=1e-6)
    assert big.n_units == 3 and big.m == lik.m + rows.shape[0]


def test_sequential_expansion_sizes():
    spec = ModelSpec("Sequential", 4, 1)
    lik = ProbitLikelihood.empty(spec.q)
    assert build_expanded(lik, spec, [1.0], 1).m == 1
    assert build_expanded(lik, spec, [1.0], 4).m == 3


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(["DiscreteChoice", "ClassSpecific", "Sequential"]), st.integers(2, 4),
       st.integers(0, 10**6))
def test_class_probabilities_sum_to_one(family, L, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((L, L))
    spec = ModelSpec(family, L, 2, A @ A.T + np.eye(L))
    x = rng.standard_normal(spec.x_shape())
    beta = rng.standard_normal(spec.q)
    total = np.exp(class_log_probs(spec, x, beta)).sum()
    assert total == pytest.approx(1.0, abs=5e-6)


def test_labels_from_latents():
    seq = ModelSpec("Sequential", 3, 1)
    z = np.array([[-1.0, 2.0], [0.5, 1.0], [-1.0, -1.0]])
    np.testing.assert_array_equal(labels_from_latents(seq, z), [2, 1, 3])
    cs = ModelSpec("ClassSpecific", 3, 1)
    np.testing.assert_array_equal(labels_from_latents(cs, np.array([[0.1, 0.5, 0.2]])), [2])


def test_frequencies_match_class_probabilities():
    rng = np.random.default_rng(9)
    spec = ModelSpec("ClassSpecific", 3, 2)
    x = np.array([0.4, -0.8])
    beta = np.array([0.5, -0.2, 1.0, 0.3])
    T = 10**5
    freq = predict_frequencies(spec, x, np.tile(beta, (T, 1)), rng)
    assert freq.sum() == pytest.approx(1.0, abs=1e-15)
    p = np.exp(class_log_probs(spec, x, beta))
    assert np.all(np.abs(freq - p) <= 4 * np.sqrt(p * (1 - p) / T))


def test_unit_log_likelihoods_shape():
    spec = ModelSpec("Sequential", 3, 1)
    lik = build_likelihood(spec, Dataset([1, 2, 3], [[1.0], [2.0], [-1.0]]))
    assert unit_log_likelihoods(lik, np.zeros(2)).shape == (3,)
    with pytest.raises(DimensionMismatch):
        likelihood_eval(lik, np.zeros(3))
