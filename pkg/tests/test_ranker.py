import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from sumrec.numerics import ShapeError
from sumrec.ranker import RankerParams, bce, dloss_dlogit, forward, loss, score


def test_zero_weights_give_half():
    rp = RankerParams.zeros(3, hidden=4)
    assert score(rp, np.ones(3), -np.ones(3)) == 0.5


def test_large_output_bias_saturates():
    rp = RankerParams.zeros(3, hidden=4)
    rp.b2[...] = 20.0
    assert score(rp, np.zeros(3), np.zeros(3)) > 0.999


def test_score_matches_formula_oracle():
    rng = np.random.default_rng(0)
    for i in range(100):
        rp = RankerParams.init(3, np.random.default_rng(i), hidden=5)
        rp.b1[:] = rng.normal(size=5)
        u, v = rng.normal(size=3), rng.normal(size=3)
        assert abs(score(rp, u, v) - oracles.fcn2(rp, u, v)) <= 1e-12


def test_score_rejects_dimension_mismatch():
    rp = RankerParams.zeros(3)
    with pytest.raises(ShapeError):
        score(rp, np.zeros(4), np.zeros(3))


def test_loss_examples():
    assert loss([0.5], [1]) == pytest.approx(math.log(2), abs=1e-6)
    assert loss([1.0, 0.0], [1, 0]) <= 1e-6
    theta = np.array([2.0])
    # zero data term up to the clip floor
    assert loss([1.0], [1], lam=0.01, all_params=[theta]) == pytest.approx(0.04, abs=1e-6)


def test_loss_rejects_nonbinary_labels():
    with pytest.raises(ValueError):
        loss([0.3], [0.5])


@given(st.lists(st.tuples(st.floats(0.0, 1.0), st.sampled_from([0, 1])), min_size=1, max_size=20))
def test_loss_nonnegative_and_label_flip_symmetric(pairs):
    p = np.array([a for a, _ in pairs])
    y = np.array([b for _, b in pairs])
    assert loss(p, y) >= 0
    assert np.allclose(bce(p, y), bce(1 - p, 1 - y), atol=1e-9)


def test_logit_gradient_is_prediction_minus_label():
    rng = np.random.default_rng(1)
    for _ in range(20):
        z = rng.normal(scale=3)
        y = float(rng.integers(0, 2))
        h = 1e-6

        def f(t):
            return loss([1 / (1 + math.exp(-t))], [y])

        fd = (f(z + h) - f(z - h)) / (2 * h)
        yhat = np.array([1 / (1 + math.exp(-z))])
        analytic = dloss_dlogit(yhat, np.array([y]), 1)[0]
        assert analytic == pytest.approx(yhat[0] - y)
        assert analytic == pytest.approx(fd, abs=1e-6)


def test_batched_forward_matches_single_scores():
    rng = np.random.default_rng(2)
    rp = RankerParams.init(4, rng, hidden=8)
    U, V = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    yhat, _, _ = forward(rp, U, V)
    for i in range(6):
        assert yhat[i] == pytest.approx(score(rp, U[i], V[i]), abs=1e-15)
