import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nonrev.env import StageEnvironment
from nonrev.errors import InvalidParameterError, NotAWinnerError, TooLargeError


def brute_force(feasible, n, w):
    """Best feasible 0/1 vector, ties to the smallest sorted winner tuple."""
    best, best_key, best_val = None, None, -math.inf
    for x in itertools.product((0, 1), repeat=n):
        if not feasible(x):
            continue
        val = float(np.dot(w, x))
        key = tuple(i for i in range(n) if x[i])
        if best is None or val > best_val + 1e-12 * max(1, abs(best_val)) or (
            abs(val - best_val) <= 1e-12 * max(1, abs(best_val)) and key < best_key
        ):
            best, best_key, best_val = np.array(x), key, val
    return best


def bundles_feasible(bundles):
    sets = [set(b) for b in bundles]

    def ok(x):
        chosen = [sets[i] for i in range(len(x)) if x[i]]
        return all(not (a & b) for a, b in itertools.combinations(chosen, 2))

    return ok


CASES = [
    (StageEnvironment.single_item(4), lambda x: sum(x) <= 1),
    (StageEnvironment.k_unit(5, 2), lambda x: sum(x) <= 2),
    (StageEnvironment.k_unit(4, 2, exact=True), lambda x: sum(x) == 2),
    (StageEnvironment.single_minded(3, [{1}, {2}, {1, 2}, {3}, {2, 3}]),
     bundles_feasible([{1}, {2}, {1, 2}, {3}, {2, 3}])),
]


@pytest.mark.parametrize("env, feasible", CASES, ids=lambda c: repr(c) if isinstance(c, StageEnvironment) else "")
@settings(max_examples=60, deadline=None)
@given(data=st.data())
def test_surplus_max_matches_brute_force(env, feasible, data):
    w = np.array(data.draw(st.lists(st.integers(-3, 3).map(float), min_size=env.n, max_size=env.n)))
    got = env.surplus_max(w)
    assert np.array_equal(got, brute_force(feasible, env.n, w))
    assert env.is_feasible(got)


@pytest.mark.parametrize(
    "env, w, expected",
    [
        (StageEnvironment.single_item(3), [3, 5, 2], [0, 1, 0]),
        (StageEnvironment.single_item(3), [-1, -2, -3], [0, 0, 0]),
        (StageEnvironment.single_item(3), [4, 4, 1], [1, 0, 0]),
        (StageEnvironment.single_item(2), [0, 0], [0, 0]),
        (StageEnvironment.single_minded(2, [{1}, {2}, {1, 2}]), [3, 3, 5], [1, 1, 0]),
        (StageEnvironment.k_unit(3, 2), [1, -1, 4], [1, 0, 1]),
        (StageEnvironment.k_unit(3, 2, exact=True), [-1, -2, 4], [1, 0, 1]),
        (StageEnvironment.position([1.0, 0.5, 0.0]), [0.2, 0.9, 0.5], [0.0, 1.0, 0.5]),
    ],
)
def test_surplus_max_examples(env, w, expected):
    assert np.array_equal(env.surplus_max(w), expected)


def test_batch_matches_single():
    env = StageEnvironment.single_minded(3, [{1}, {2}, {1, 2}, {2, 3}])
    W = np.random.default_rng(3).normal(size=(200, 4))
    batch = env.surplus_max_batch(W)
    assert all(np.array_equal(batch[r], env.surplus_max(W[r])) for r in range(len(W)))


@pytest.mark.parametrize("env", [c[0] for c in CASES] + [StageEnvironment.position([1, 0.6, 0.2, 0])], ids=repr)
def test_allocation_weakly_monotone_in_own_weight(env):
    rng = np.random.default_rng(11)
    for _ in range(100):
        w = rng.normal(size=env.n)
        i = int(rng.integers(env.n))
        lo = env.surplus_max(w)[i]
        w2 = w.copy()
        w2[i] += abs(rng.normal())
        assert env.surplus_max(w2)[i] >= lo


@pytest.mark.parametrize(
    "env, w, winner, expected",
    [
        (StageEnvironment.single_item(3), [3, 5, 2], 1, 3.0),
        (StageEnvironment.single_minded(2, [{1}, {2}, {1, 2}]), [3, 3, 5], 0, 2.0),
        (StageEnvironment.k_unit(3, 2), [5, 4, 1], 1, 1.0),
        (StageEnvironment.k_unit(3, 2), [5, 4, -2], 1, 0.0),
        (StageEnvironment.k_unit(3, 2, exact=True), [5, 4, 1], 1, 1.0),
        (StageEnvironment.k_unit(2, 1, exact=True), [3, 4], 1, 3.0),
    ],
)
def test_threshold_payment_examples(env, w, winner, expected):
    assert env.threshold_payment(w, winner) == pytest.approx(expected)
    assert env.threshold_payment(w, winner, method="bisect") == pytest.approx(expected, abs=1e-6)


@pytest.mark.parametrize("env", [c[0] for c in CASES], ids=repr)
def test_exact_threshold_agrees_with_bisection(env):
    rng = np.random.default_rng(5)
    checked = 0
    for _ in range(60):
        w = rng.normal(size=env.n)
        x = env.surplus_max(w)
        for i in np.flatnonzero(x):
            exact = env.threshold_payment(w, int(i))
            bis = env.threshold_payment(w, int(i), method="bisect")
            assert exact == pytest.approx(bis, abs=1e-6) or (exact == -math.inf and bis == -math.inf)
            checked += 1
    assert checked > 20


def test_threshold_is_minus_inf_when_always_served():
    env = StageEnvironment.k_unit(2, 2, exact=True)
    assert env.threshold_payment([1.0, 2.0], 0) == -math.inf


def test_threshold_errors():
    env = StageEnvironment.single_item(3)
    with pytest.raises(NotAWinnerError):
        env.threshold_payment([3, 5, 2], 0)
    with pytest.raises(InvalidParameterError):
        env.threshold_payment([3, 5, 2], 7)
    with pytest.raises(InvalidParameterError):
        StageEnvironment.position([1, 0]).threshold_payment([1, 0], 0)


def test_threshold_batch_nan_for_unserved():
    env = StageEnvironment.single_item(3)
    W = np.array([[3.0, 5.0, 2.0]])
    out = env.threshold_payment_batch(W, env.surplus_max_batch(W) > 0.5)
    assert np.isnan(out[0, 0]) and np.isnan(out[0, 2]) and out[0, 1] == pytest.approx(3.0)


def test_constructor_validation():
    with pytest.raises(InvalidParameterError):
        StageEnvironment.k_unit(3, 4)
    with pytest.raises(InvalidParameterError):
        StageEnvironment.position([0.5, 1.0])
    with pytest.raises(InvalidParameterError):
        StageEnvironment.single_minded(2, [{3}])
    with pytest.raises(InvalidParameterError):
        StageEnvironment.explicit([[0, 2]])
    with pytest.raises(TooLargeError):
        StageEnvironment.k_unit(30, 15)
    with pytest.raises(InvalidParameterError):
        StageEnvironment.single_item(2).surplus_max([1.0, 2.0, 3.0])


def test_explicit_and_from_spec():
    env = StageEnvironment.explicit([[1, 1, 0], [0, 0, 1]])
    # not downward closed: someone is always served
    assert np.array_equal(env.surplus_max([-1, -1, -5]), [1, 1, 0])
    assert np.array_equal(StageEnvironment.from_spec({"name": "k_unit", "k": 2}, n=4).surplus_max([1, 2, 3, 4]), [0, 0, 1, 1])
    with pytest.raises(InvalidParameterError):
        StageEnvironment.from_spec({"name": "matroid"}, n=3)
    with pytest.raises(InvalidParameterError):
        StageEnvironment.from_spec({"name": "k_unit"}, n=3)
