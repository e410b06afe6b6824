from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clcnet.errors import DegenerateInputError, InvalidProbabilityError, NumericOverflowError
from clcnet.mapping import (
    MappingParams,
    attention_scores,
    gaussian_basis,
    gaussian_column,
    map_batch_backward,
    map_batch_forward,
    map_to_fixed_dim,
    normalize_probs,
    softmax,
    sort_desc,
)


def scalar_mapping_oracle(a, wq, wk, sigma):
    """Element-by-element sum over columns with plain Python floats."""
    n, m = len(a), len(wq)
    q1 = [w * a[0] for w in wq]
    scores = []
    for x in range(n):
        kx = [w * a[x] for w in wk]
        scores.append(sum(k * q for k, q in zip(kx, q1)))
    top = max(scores)
    exps = [math.exp(s - top) for s in scores]
    total = sum(exps)
    att = [e / total for e in exps]
    out = []
    for i in range(m):
        acc = 0.0
        for x in range(1, n + 1):
            offset = i / (m - 1) - (x - 1) / n
            acc += att[x - 1] * a[x - 1] * math.exp(-(offset**2) / (2 * sigma**2))
        out.append(acc)
    return sorted(out, reverse=True)


def _sorted_simplex(rng, n):
    return -np.sort(-rng.dirichlet(np.ones(n)))


def test_matrix_form_matches_scalar_oracle():
    rng = np.random.default_rng(7)
    for _ in range(25):
        n, m = int(rng.integers(2, 30)), int(rng.integers(2, 60))
        sigma = float(rng.uniform(0.005, 0.3))
        params = MappingParams.init(m, sigma, rng)
        a = _sorted_simplex(rng, n)
        got = map_to_fixed_dim(a, params)
        want = np.array(scalar_mapping_oracle(a, params.wq, params.wk, sigma))
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-300)


def test_batch_forward_matches_single():
    rng = np.random.default_rng(3)
    params = MappingParams.init(40, 0.02, rng)
    a = -np.sort(-rng.dirichlet(np.ones(7), size=5), axis=1)
    v, _ = map_batch_forward(a, params.wq, params.wk, params.sigma)
    for row, got in zip(a, v):
        np.testing.assert_allclose(got, map_to_fixed_dim(row, params), rtol=1e-13)


def test_gaussian_column_peaks_at_its_center():
    # x=1 is centred at 0, so the largest entry is the first one and equals a^x
    col = gaussian_column(1, 0.7, n=10, m=50, sigma=0.01)
    assert col.argmax() == 0
    assert col[0] == 0.7
    np.testing.assert_allclose(gaussian_basis(10, 50, 0.01)[:, 0] * 0.7, col, rtol=1e-15)


def test_gaussian_basis_is_read_only():
    basis = gaussian_basis(5, 20, 0.05)
    with pytest.raises(ValueError):
        basis[0, 0] = 1.0


def test_uniform_keys_give_uniform_attention():
    params = MappingParams(np.ones(8), np.zeros(8))
    att = attention_scores(np.array([0.5, 0.3, 0.2]), params)
    np.testing.assert_allclose(att, np.full(3, 1 / 3), rtol=1e-15)


def test_attention_overflow_is_reported():
    params = MappingParams(np.full(4, 1e200), np.full(4, 1e200))
    with pytest.raises(NumericOverflowError):
        attention_scores(np.array([0.9, 0.1]), params)


def test_softmax_is_shift_invariant_and_stable():
    z = np.array([1000.0, 999.0, -5.0])
    np.testing.assert_allclose(softmax(z), softmax(z - 1000.0), rtol=1e-15)
    assert np.isfinite(softmax(z)).all()


def test_normalize_probs_contract():
    np.testing.assert_allclose(normalize_probs([2.0, 2.0]), [0.5, 0.5])
    np.testing.assert_allclose(normalize_probs([0.0, 0.0], is_logits=True), [0.5, 0.5])
    with pytest.raises(DegenerateInputError):
        normalize_probs([1.0])
    with pytest.raises(InvalidProbabilityError):
        normalize_probs([0.5, -0.1, 0.6])
    with pytest.raises(InvalidProbabilityError):
        normalize_probs([np.nan, 1.0])
    with pytest.raises(InvalidProbabilityError):
        normalize_probs([0.0, 0.0])


def test_sort_desc_is_stable_on_ties():
    s = sort_desc([0.2, 0.4, 0.2, 0.2])
    np.testing.assert_array_equal(s.permutation, [1, 0, 2, 3])
    np.testing.assert_array_equal(s.values, [0.4, 0.2, 0.2, 0.2])


def test_mapping_params_validation():
    with pytest.raises(ValueError):
        MappingParams(np.ones(3), np.ones(4))
    with pytest.raises(ValueError):
        MappingParams(np.ones(3), np.ones(3), sigma=0.0)
    with pytest.raises(ValueError):
        MappingParams(np.ones(1), np.ones(1))


def test_init_respects_bounds():
    params = MappingParams.init(100, rng=0)
    assert np.all(np.abs(params.wq) <= 0.1) and np.all(np.abs(params.wk) <= 0.1)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(2, 40), m=st.integers(2, 64), seed=st.integers(0, 2**32 - 1))
def test_output_is_sorted_nonnegative_and_bounded(n, m, seed):
    rng = np.random.default_rng(seed)
    params = MappingParams.init(m, 0.05, rng)
    a = _sorted_simplex(rng, n)
    v = map_to_fixed_dim(a, params)
    assert v.shape == (m,)
    assert np.all(v >= 0)
    assert np.all(np.diff(v) <= 0)
    # each output entry is a convex combination of a^x * (bell <= 1)
    assert v.max() <= a[0] + 1e-15


def test_batch_backward_matches_finite_differences():
    rng = np.random.default_rng(11)
    wq, wk = rng.normal(size=12), rng.normal(size=12)
    a = -np.sort(-rng.dirichlet(np.ones(6), size=4), axis=1)
    weights = rng.normal(size=(4, 12))

    def loss(wq_, wk_):
        v, _ = map_batch_forward(a, wq_, wk_, 0.1)
        return float(np.sum(v * weights))

    _, cache = map_batch_forward(a, wq, wk, 0.1)
    dwq, dwk = map_batch_backward(weights, cache)
    h = 1e-6
    for j in range(12):
        e = np.zeros(12)
        e[j] = h
        np.testing.assert_allclose(dwq[j], (loss(wq + e, wk) - loss(wq - e, wk)) / (2 * h), rtol=1e-5, atol=1e-9)
        np.testing.assert_allclose(dwk[j], (loss(wq, wk + e) - loss(wq, wk - e)) / (2 * h), rtol=1e-5, atol=1e-9)
