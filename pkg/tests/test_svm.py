import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tubeloc import svm


def two_point_oracle():
    """min 1/2 (w1^2 + w2^2 + b^2) s.t. w1 + b >= 1, w1 - b >= 1 gives w = (1, 0), b = 0."""
    return np.array([1.0, 0.0]), 0.0


@pytest.fixture
def blobs(rng):
    P = rng.normal(0, 0.5, (30, 3)) + [3, 0, 0]
    N = rng.normal(0, 0.5, (50, 3)) - [3, 0, 0]
    return P, N


def test_two_point_closed_form():
    m = svm.train([[1.0, 0.0]], [[-1.0, 0.0]], C=1e6)
    w, b = two_point_oracle()
    np.testing.assert_allclose(m.weights, w, atol=1e-9)
    assert abs(m.bias - b) <= 1e-9
    assert svm.decision(m, [1.0, 0.0]) == pytest.approx(1.0, abs=1e-9)
    assert svm.decision(m, [-1.0, 0.0]) == pytest.approx(-1.0, abs=1e-9)
    # linear extrapolation of w = (1, 0), b = 0
    assert svm.decision(m, [2.0, 0.0]) == pytest.approx(2.0, abs=1e-9)
    assert svm.decision(m, [0.0, 5.0]) == pytest.approx(0.0, abs=1e-9)


def test_separable_blobs_no_violations(blobs):
    P, N = blobs
    m = svm.train(P, N, C=10.0)
    assert np.all(svm.decision(m, P) >= 1 - 1e-4)
    assert np.all(svm.decision(m, N) <= -1 + 1e-4)


def test_duality_gap_and_dual_trace(blobs, rng):
    P, N = blobs
    P = P + rng.normal(0, 2.0, P.shape)  # overlapping classes
    m = svm.train(P, N, C=1.0)
    assert 0 <= m.duality_gap <= 1e-6
    assert m.duality_gap <= 1e-6 * (1 + abs(m.primal))
    assert np.all(np.diff(m.dual_trace) >= -1e-12)


def test_deterministic_and_permutation_invariant(blobs, rng):
    P, N = blobs
    a = svm.train(P, N, seed=3)
    b = svm.train(P, N, seed=3)
    assert np.array_equal(a.weights, b.weights) and a.bias == b.bias
    c = svm.train(P[rng.permutation(len(P))], N[rng.permutation(len(N))], seed=3)
    assert np.array_equal(a.weights, c.weights) and a.bias == c.bias
    # strong convexity: ||w - w*||^2 <= 2 gap for each solution
    d = svm.train(P, N, seed=11)
    wa, wd = np.append(a.weights, a.bias), np.append(d.weights, d.bias)
    bound = np.sqrt(2 * a.duality_gap) + np.sqrt(2 * d.duality_gap)
    assert np.linalg.norm(wa - wd) <= bound


def test_warm_start_matches_cold(blobs, rng):
    P, N = blobs
    P = P + rng.normal(0, 1.5, P.shape)
    first = svm.train(P[:20], N[:30])
    warm = svm.train(P, N, warm_start=first)
    cold = svm.train(P, N)
    probe = rng.normal(0, 3, (20, 3))
    np.testing.assert_allclose(svm.decision(warm, probe), svm.decision(cold, probe), atol=1e-3)
    assert abs(warm.primal - cold.primal) <= 1e-6 * (1 + abs(cold.primal)) + 2e-6


def test_class_balance_single_positive(rng):
    N = rng.normal(0, 1, (40, 2)) - [4, 0]
    m = svm.train([[4.0, 0.0]], N)
    assert svm.decision(m, [4.0, 0.0]) > 0


def test_training_errors():
    with pytest.raises(ValueError):
        svm.train([], [[1.0]])
    with pytest.raises(ValueError):
        svm.train([[1.0, 2.0]], [[1.0]])
    with pytest.raises(ValueError):
        svm.train([[np.nan]], [[1.0]])
    with pytest.raises(ValueError):
        svm.train([[1.0]], [[-1.0]], C=0)
    m = svm.train([[1.0]], [[-1.0]])
    with pytest.raises(ValueError):
        svm.decision(m, [1.0, 2.0])


def test_decision_examples():
    m = svm.LinearModel(weights=np.array([1.0, 0.0]), bias=0.0, C=1.0)
    assert svm.decision(m, [0.0, 3.0]) == 0.0
    mb = svm.LinearModel(weights=np.array([2.0, -1.0]), bias=0.5, C=1.0)
    assert svm.decision(mb, np.zeros(2)) == 0.5


def test_probability_examples():
    m = svm.LinearModel(weights=np.array([1.0]), bias=0.0, C=1.0)
    assert svm.probability(m, [0.0]) == 0.5
    assert svm.probability(m, [-1.0]) == pytest.approx(1 / (1 + math.e), abs=1e-15)
    assert round(svm.probability(m, [-1.0]), 4) == 0.2689
    big = svm.sigmoid(np.array([10.0, 50.0, 800.0]))
    assert np.all(np.diff(big) >= 0) and big[-1] == 1.0 and np.all(big < 1 + 1e-15)
    assert svm.sigmoid(-800.0) == 0.0


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=20, unique=True))
def test_sigmoid_strictly_increasing(v):
    z = np.sort(np.array(v))
    s = svm.sigmoid(z)
    gaps = np.diff(z) > 1e-6
    assert np.all(np.diff(s)[gaps] > 0)


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_decision_linearity(alpha, beta):
    m = svm.LinearModel(weights=np.array([0.3, -1.2, 2.0]), bias=0.7, C=1.0)
    x, y = np.array([1.0, 2.0, -0.5]), np.array([-2.0, 0.1, 0.4])
    lhs = svm.decision(m, alpha * x + beta * y)
    rhs = alpha * svm.decision(m, x) + beta * svm.decision(m, y) - (alpha + beta - 1) * m.bias
    assert lhs == pytest.approx(rhs, abs=1e-9)


def test_monitor_collects_models():
    with svm.monitor() as seen:
        svm.train([[1.0]], [[-1.0]])
        svm.train([[2.0]], [[-1.0]])
    svm.train([[1.0]], [[-1.0]])
    assert len(seen) == 2


def test_model_file_round_trip(tmp_path, blobs):
    m = svm.train(*blobs, C=2.0, seed=5)
    svm.save_model(tmp_path / "m.svm", m)
    back = svm.load_model(tmp_path / "m.svm")
    assert np.array_equal(back.weights, m.weights)
    assert (back.bias, back.C, back.n_pos, back.n_neg, back.seed) == (m.bias, 2.0, 30, 50, 5)
    text = svm.dump_model(m)
    assert text.startswith("dim 3\n") and f"bias {m.bias!r}" in text
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ValueError):
        svm.load_model(tmp_path / "bad")
