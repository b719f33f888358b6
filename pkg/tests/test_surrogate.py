import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from nonrev import dist as D
from nonrev.env import StageEnvironment
from nonrev.errors import InsufficientSamplesError, InvalidParameterError, OutOfSupportError
from nonrev.surrogate import (
    SelectionRule,
    SurrogateProfile,
    bin_index,
    characteristic_weights,
    optimal_surrogates,
    run_sra,
    run_sra_batch,
    run_ssra,
    run_surrogate_binning,
    sample_ranking_batch,
    select_binning,
    select_sample_ranking,
    within_row_ranks,
)


def weights_by_loops(psi, env):
    """Plain-loop enumeration of every rank profile, one surplus_max call each."""
    n, T = psi.shape
    w = np.zeros((n, T))
    for ranks in itertools.product(range(T), repeat=n):
        x = env.surplus_max(psi[np.arange(n), list(ranks)])
        for i, r in enumerate(ranks):
            w[i, r] += x[i]
    return w / T ** (n - 1)


def test_profile_validation():
    with pytest.raises(InvalidParameterError):
        SurrogateProfile([[0.0, 1.0]])
    p = SurrogateProfile.evenly_spaced(2, 5)
    assert p.psi.shape == (2, 5) and p.psi[0, 0] == 1 and p.psi[0, -1] == 0


def test_characteristic_weights_small_example():
    env = StageEnvironment.single_item(2)
    cw = characteristic_weights(SurrogateProfile([[2.0, 0.5], [1.0, 0.0]]), env)
    # rank 1 of population 1 always wins; rank 2 (0.5) beats only the 0 surrogate
    assert cw.exact
    assert np.allclose(cw.w, [[1.0, 0.5], [0.5, 0.0]])
    assert cw.items_per_stage() == pytest.approx(1.0)


@pytest.mark.parametrize(
    "env",
    [StageEnvironment.single_item(3), StageEnvironment.k_unit(3, 2),
     StageEnvironment.single_minded(2, [{1}, {2}, {1, 2}])],
    ids=repr,
)
def test_exact_weights_match_loop_enumeration(env):
    rng = np.random.default_rng(4)
    psi = -np.sort(-rng.normal(size=(env.n, 4)), axis=1)
    cw = characteristic_weights(SurrogateProfile(psi), env)
    assert np.allclose(cw.w, weights_by_loops(psi, env), atol=1e-14)


def test_monte_carlo_weights_within_three_se():
    env = StageEnvironment.single_minded(2, [{1}, {2}, {1, 2}])
    psi = np.array([[3.0, 1.0, 0.2, -1.0], [2.5, 0.8, 0.1, -0.5], [4.0, 2.0, 0.5, -2.0]])
    p = SurrogateProfile(psi)
    exact = characteristic_weights(p, env)
    mc = characteristic_weights(p, env, budget=1, trials=200_000, rng=np.random.default_rng(9))
    assert not mc.exact
    z = np.abs(mc.w - exact.w) / np.maximum(mc.se, 1e-12)
    # family-wise 1e-3 level over the estimated entries (Bonferroni)
    crit = stats.norm.isf(1e-3 / (2 * z.size))
    assert np.all((z <= crit) | (np.abs(mc.w - exact.w) < 1e-12))


def test_weights_rows_weakly_decreasing_for_monotone_stage_alg():
    env = StageEnvironment.k_unit(4, 2)
    rng = np.random.default_rng(1)
    psi = -np.sort(-rng.normal(size=(4, 6)), axis=1)
    w = characteristic_weights(SurrogateProfile(psi), env).w
    assert np.all(np.diff(w, axis=1) <= 1e-12)


def test_within_row_ranks_is_a_permutation_and_descending():
    rng = np.random.default_rng(0)
    bids = rng.normal(size=(50, 3, 7))
    r = within_row_ranks(bids, rng)
    assert np.array_equal(np.sort(r, axis=-1), np.broadcast_to(np.arange(1, 8), r.shape))
    top = np.take_along_axis(bids, np.argmin(r, axis=-1)[..., None], axis=-1)[..., 0]
    assert np.array_equal(top, bids.max(axis=-1))


def test_within_row_ranks_breaks_ties_uniformly():
    rng = np.random.default_rng(2)
    r = within_row_ranks(np.zeros((60_000, 3)), rng)
    counts = np.bincount(r[:, 0], minlength=4)[1:]
    assert stats.chisquare(counts).pvalue > 1e-3


def test_run_sra_example():
    env = StageEnvironment.single_item(2)
    p = SurrogateProfile([[1.0, 0.0], [0.5, 0.0]])
    bids = np.array([[0.9, 0.1], [0.3, 0.7]])
    x = run_sra(p, env, bids, np.random.default_rng(0))
    # stage 1: pop1's 0.9 (psi 1) beats pop2's 0.3 (psi 0); stage 2: pop1's 0.1 (psi 0) loses to pop2's 0.7 (psi .5)
    assert np.array_equal(x, [[1, 0], [0, 1]])


def test_run_sra_is_invariant_to_monotone_bid_transforms():
    env = StageEnvironment.k_unit(3, 2)
    p = optimal_surrogates([D.uniform()] * 3, 8)
    bids = np.random.default_rng(5).random((40, 3, 8))
    a = run_sra_batch(p, env, bids, np.random.default_rng(1))
    b = run_sra_batch(p, env, np.exp(3 * bids) - 7, np.random.default_rng(1))
    assert np.array_equal(a, b)


def test_run_sra_uses_each_surrogate_once_per_population():
    env = StageEnvironment.single_item(2)
    psi = np.array([[5.0, 4.0, 3.0], [2.9, 2.0, 1.0]])
    x = run_sra(SurrogateProfile(psi), env, np.random.default_rng(3).random((2, 3)), np.random.default_rng(0))
    # population 1's surrogates dominate, so it wins all three stages
    assert np.array_equal(x[:, 0], [1, 1, 1])


def test_run_sra_shape_check():
    with pytest.raises(InvalidParameterError):
        run_sra(SurrogateProfile.evenly_spaced(2, 3), StageEnvironment.single_item(2), np.zeros((2, 4)),
                np.random.default_rng(0))


def test_items_per_stage_matches_simulation():
    env = StageEnvironment.k_unit(3, 2)
    d_list = [D.uniform(), D.exponential(1.0), D.uniform(0, 2)]
    p = optimal_surrogates(d_list, 4, "revenue")
    cw = characteristic_weights(p, env)
    rng = np.random.default_rng(8)
    bids = np.stack([d.sample(rng, (20_000, 4)) for d in d_list], axis=1)
    per_stage = run_sra_batch(p, env, bids, rng).sum(axis=2).ravel()
    se = per_stage.std(ddof=1) / np.sqrt(per_stage.size)
    assert abs(per_stage.mean() - cw.items_per_stage()) <= 3 * se


@pytest.mark.parametrize(
    "d, T, objective, expected",
    [
        (D.uniform(), 2, "welfare", [2 / 3, 1 / 3]),
        (D.uniform(), 2, "revenue", [1 / 3, -1 / 3]),
        (D.uniform(), 3, "welfare", [3 / 4, 1 / 2, 1 / 4]),
        (D.exponential(1.0), 2, "welfare", [1.5, 0.5]),
    ],
)
def test_optimal_surrogates_examples(d, T, objective, expected):
    assert np.allclose(optimal_surrogates([d], T, objective).psi[0], expected, atol=1e-9)


def test_optimal_surrogates_unknown_objective():
    with pytest.raises(InvalidParameterError):
        optimal_surrogates([D.uniform()], 2, "profit")


def test_sample_ranking_rank_distribution_is_uniform():
    rule = SelectionRule.sample_ranking(np.linspace(1, 0, 6), reference=D.exponential(1.0))
    rng = np.random.default_rng(12)
    r = sample_ranking_batch(rule, D.exponential(1.0).sample(rng, 60_000), rng)
    assert stats.chisquare(np.bincount(r, minlength=7)[1:]).pvalue > 1e-3


def test_select_sample_ranking_with_pool():
    rule = SelectionRule.sample_ranking([3.0, 2.0, 1.0], pool=[0.1, 0.2, 0.3])
    rng = np.random.default_rng(0)
    assert select_sample_ranking(rule, 10.0, rng) == (1, 3.0)
    assert select_sample_ranking(rule, -1.0, rng) == (3, 1.0)
    with pytest.raises(InsufficientSamplesError):
        select_sample_ranking(SelectionRule.sample_ranking([3.0, 2.0, 1.0], pool=[0.5]), 0.3, rng)
    with pytest.raises(InvalidParameterError):
        SelectionRule.sample_ranking([1.0], reference=D.uniform(), pool=[1.0])


def test_binning_boundaries_and_support():
    rule = SelectionRule.binning([3.0, 2.0, 1.0, 0.0], D.uniform())
    assert np.array_equal(bin_index(rule, [0.99, 0.75, 0.74, 0.5, 0.0]), [1, 1, 2, 2, 4])
    assert select_binning(rule, 0.3) == (3, 1.0)
    with pytest.raises(OutOfSupportError):
        bin_index(rule, 1.5)
    with pytest.raises(InvalidParameterError):
        SelectionRule.binning_from_thresholds([1.0, 0.0], [0.2, 0.5])


def test_binning_assigns_equal_probability_bins():
    d = D.exponential(2.0)
    rule = SelectionRule.binning(np.linspace(1, 0, 8), d)
    j = bin_index(rule, d.sample(np.random.default_rng(4), 80_000))
    assert stats.chisquare(np.bincount(j, minlength=9)[1:]).pvalue > 1e-3


def test_surrogate_binning_and_single_stage_ranking():
    env = StageEnvironment.single_item(2)
    p = SurrogateProfile([[1.0, 0.0], [0.6, 0.1]])
    rules = [SelectionRule.binning(p.psi[i], D.uniform()) for i in range(2)]
    assert np.array_equal(run_surrogate_binning(p, env, rules, [0.9, 0.9]), [1, 0])
    assert np.array_equal(run_surrogate_binning(p, env, rules, [0.2, 0.9]), [0, 1])
    x = run_ssra(p, env, [5.0, -5.0], [[0.0], [0.0]], np.random.default_rng(0))
    assert np.array_equal(x, [1, 0])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(2, 4))
def test_welfare_surrogates_average_to_mean(T, n):
    d = D.uniform(0, n)
    assert optimal_surrogates([d], T).psi.mean() == pytest.approx(n / 2, rel=1e-9)
