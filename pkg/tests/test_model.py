from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clcnet.errors import DegenerateInputError, InvalidProbabilityError
from clcnet.model import ConfidenceModel, clcnet_forward
from clcnet.tabnet import RegressorConfig
from clcnet.trainer import gradient_check, warm_up_batchnorm

SMALL = RegressorConfig(n_d=4, n_a=4, attn_width=4)


@pytest.fixture(scope="module")
def model():
    return ConfidenceModel.init(m=30, sigma=0.02, config=SMALL, seed=1)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 25), seed=st.integers(0, 2**32 - 1))
def test_permutation_invariance(model, n, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.full(n, 0.3))
    base = clcnet_forward(p, model)
    for _ in range(5):
        assert clcnet_forward(p[rng.permutation(n)], model) == base


def test_score_in_unit_interval_and_matches_batch(model):
    rng = np.random.default_rng(2)
    probs = rng.dirichlet(np.ones(8), size=20)
    batch = model.score_batch(probs)
    assert np.all((batch >= 0) & (batch <= 1))
    singles = np.array([clcnet_forward(p, model) for p in probs])
    np.testing.assert_allclose(batch, singles, rtol=1e-12)


def test_input_validation(model):
    with pytest.raises(DegenerateInputError):
        clcnet_forward([1.0], model)
    with pytest.raises(InvalidProbabilityError):
        clcnet_forward([0.7, -0.2, 0.5], model)


def test_unnormalised_input_is_rescaled(model):
    p = np.array([0.5, 0.3, 0.2])
    np.testing.assert_allclose(clcnet_forward(p * 3, model), clcnet_forward(p, model), rtol=1e-13)


def test_different_class_counts_are_accepted(model):
    for n in (2, 10, 1000):
        p = np.random.default_rng(n).dirichlet(np.ones(n))
        assert 0 <= clcnet_forward(p, model) <= 1


def test_copy_is_independent(model):
    other = model.copy()
    other.params["head.b"][0] += 1.0
    assert model.params["head.b"][0] != other.params["head.b"][0]


def test_parameter_count_covers_every_array(model):
    assert model.n_parameters() == sum(v.size for v in model.params.values())


def test_gradient_check_training_mode():
    m = ConfidenceModel.init(m=12, sigma=0.05, config=SMALL, seed=3)
    rng = np.random.default_rng(3)
    probs = rng.dirichlet(np.full(5, 0.5), size=4)
    result = gradient_check(m, probs, np.array([1.0, 0.0, 1.0, 0.0]), training=True)
    assert result.n_checked > 100
    assert result.max_rel_error <= 1e-4, result.worst


def test_gradient_check_inference_mode_after_warm_up():
    m = ConfidenceModel.init(m=12, sigma=0.05, config=SMALL, seed=4)
    rng = np.random.default_rng(4)
    warm_up_batchnorm(m, rng.dirichlet(np.full(5, 0.5), size=200))
    result = gradient_check(m, rng.dirichlet(np.full(5, 0.5)), 1.0)
    assert result.max_rel_error <= 1e-4, result.worst


def test_head_bias_gradient_closed_form():
    m = ConfidenceModel.init(m=12, sigma=0.05, config=SMALL, seed=6)
    m.params["head.w"] = np.zeros_like(m.params["head.w"])
    p = np.array([[0.5, 0.3, 0.2]])
    for label in (0.0, 1.0):
        y, cache = m.forward(p)
        grads = m.backward(2.0 * (y - label), cache)
        np.testing.assert_allclose(grads["head.b"], [0.25 * 2.0 * (0.5 - label)], rtol=1e-15)


def test_motivating_pair_gets_distinct_scores(model):
    a = clcnet_forward([0.6, 0.1, 0.1, 0.1, 0.1], model)
    b = clcnet_forward([0.6, 0.39, 0.01, 0.0, 0.0], model)
    assert a != b
