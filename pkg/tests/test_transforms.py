import numpy as np
import pytest
from scipy import stats

from nonrev import dist as D
from nonrev.env import StageEnvironment
from nonrev.errors import InvalidParameterError
from nonrev.samplemech import binned_revenue_exact
from nonrev.transforms import (
    bin_edge_values,
    bin_surrogates,
    binned_mechanism,
    k_top_promote_quantile,
    resample_quantiles,
    run_optimal_binning,
    run_resampling,
    run_stage,
    run_top_promotion,
    top_promote_quantile,
    uniform_breakpoints,
)


@pytest.mark.parametrize(
    "q, k, T, expected",
    [(0.1, 1, 4, 0.0), (0.25, 1, 4, 0.0), (0.625, 1, 4, 0.5), (1.0, 2, 8, 1.0), (0.3, 0, 5, 0.3)],
)
def test_top_promote_examples(q, k, T, expected):
    assert top_promote_quantile(q, k, T) == pytest.approx(expected)


def test_top_promote_validation_and_breakpoint_variant():
    with pytest.raises(InvalidParameterError):
        top_promote_quantile(0.5, 4, 4)
    assert k_top_promote_quantile(0.6, [0.2, 0.5, 0.8], 2) == pytest.approx(0.2)
    assert k_top_promote_quantile(0.6, [0.2, 0.5, 0.8], 0) == 0.6
    with pytest.raises(InvalidParameterError):
        k_top_promote_quantile(0.6, [0.2, 0.5], 3)


def test_top_promoted_quantile_law():
    k, T = 2, 8
    q = top_promote_quantile(np.random.default_rng(0).random(100_000), k, T)
    assert abs(np.mean(q == 0) - k / T) < 0.005
    assert stats.kstest(q[q > 0], "uniform").pvalue > 1e-3


@pytest.mark.parametrize("k, T", [(0, 5), (1, 4), (2, 8), (3, 8)])
def test_resampled_quantiles_are_uniform(k, T):
    rng = np.random.default_rng(3)
    q = rng.random(100_000)
    out = resample_quantiles(q, k, T, rng)
    assert stats.kstest(out, "uniform").pvalue > 1e-3
    b_in = np.clip(np.ceil(q * T), 1, T)
    b_out = np.clip(np.ceil(out * T), 1, T)
    top = b_in <= T - k
    # upper bins keep their bin; the bottom block stays inside the block
    assert np.array_equal(b_in[top], b_out[top])
    assert np.all(b_out[~top] > T - k)


def test_resampling_bottom_block_keeps_order_in_law():
    k, T = 3, 8
    rng = np.random.default_rng(4)
    lo = (T - k) / T
    out = {m: resample_quantiles(np.full(50_000, lo + (m - 0.5) / T), k, T, rng) for m in (1, 2, 3)}
    means = [out[m].mean() for m in (1, 2, 3)]
    # m-th smallest of k uniforms on the block has mean lo + m (1 - lo) / (k + 1)
    assert np.allclose(means, [lo + m * (1 - lo) / (k + 1) for m in (1, 2, 3)], atol=2e-3)


def test_resampling_validation():
    with pytest.raises(InvalidParameterError):
        resample_quantiles(np.array([0.5]), 2, 4, np.random.default_rng(0))
    with pytest.raises(InvalidParameterError):
        run_resampling(StageEnvironment.single_item(1), None, [D.uniform()], 1, 4, values=[0.5])


def test_run_stage_and_promotion_on_values():
    env = StageEnvironment.single_item(2)
    d = [D.uniform(), D.uniform()]
    assert np.array_equal(run_stage(env, None, d, [[0.3, 0.6]]), [[0, 1]])
    # both promoted to the top when their quantiles are below k/T: tie goes to agent 1
    assert np.array_equal(run_top_promotion(env, None, d, 1, 4, values=[0.8, 0.9]), [1, 0])
    # revenue objective: below the monopoly quantile nobody is served
    assert np.array_equal(run_stage(env, None, d, [[0.3, 0.4]], objective="revenue"), [[0, 0]])


def test_resampling_allocation_is_stage_allocation_of_new_quantiles():
    env = StageEnvironment.k_unit(3, 1)
    d = [D.uniform()] * 3
    q = np.random.default_rng(1).random((500, 3))
    x = run_resampling(env, None, d, 1, 4, quantiles=q, rng=np.random.default_rng(2))
    q_new = top_promote_quantile(resample_quantiles(q, 1, 4, np.random.default_rng(2)), 1, 4)
    assert np.array_equal(x, run_stage(env, None, d, quantiles=q_new))


def test_bin_surrogates_uniform():
    assert np.allclose(bin_surrogates(D.uniform(), [0.5]), [0.5, -0.5])
    assert np.allclose(bin_surrogates(D.uniform(), [0.5], "welfare"), [0.75, 0.25])
    assert np.allclose(bin_edge_values(D.uniform(), [0.25, 0.5]), [0.75, 0.5, 0.0])
    with pytest.raises(InvalidParameterError):
        bin_surrogates(D.uniform(), [0.5], "profit")


def test_optimal_binning_examples():
    env1 = StageEnvironment.single_item(1)
    x, p = run_optimal_binning(env1, [D.uniform()], [[0.5]], [0.7])
    assert x[0] == 1 and p[0] == pytest.approx(0.5)
    x, p = run_optimal_binning(env1, [D.uniform()], [[0.5]], [0.3])
    assert x[0] == 0 and p[0] == 0
    env2 = StageEnvironment.single_item(2)
    x, p = run_optimal_binning(env2, [D.uniform()] * 2, uniform_breakpoints(2, 2), [0.7, 0.8])
    assert np.array_equal(x, [1, 0]) and p[0] == pytest.approx(0.5)


def served_threshold_by_bisection(env, psi, th, floors, values, i, hi):
    """Smallest value of agent i still served, others fixed, by bisection on the allocation alone."""
    def served(v):
        trial = values.copy()
        trial[i] = v
        return binned_mechanism(env, psi, th, floors, trial[None, :])[0][0, i] > 0.5

    lo_v = floors[i]
    if served(lo_v):
        return lo_v
    lo, up = lo_v, hi
    for _ in range(60):
        mid = 0.5 * (lo + up)
        lo, up = (lo, mid) if served(mid) else (mid, up)
    return up


@pytest.mark.parametrize(
    "env",
    [StageEnvironment.single_item(3), StageEnvironment.k_unit(3, 2),
     StageEnvironment.single_minded(2, [{1}, {2}, {1, 2}])],
    ids=repr,
)
def test_binned_payments_are_critical_values(env):
    d_list = [D.uniform(), D.uniform(0, 2), D.exponential(1.0)][: env.n]
    T = 5
    bp = uniform_breakpoints(env.n, T)
    psi = np.stack([bin_surrogates(d, bp[i]) for i, d in enumerate(d_list)])
    th = np.stack([d.value_at(bp[i]) for i, d in enumerate(d_list)])
    floors = np.zeros(env.n)
    rng = np.random.default_rng(6)
    vals = np.stack([d.sample(rng, 40) for d in d_list], axis=1)
    x, pay, _ = binned_mechanism(env, psi, th, floors, vals)
    checked = 0
    for r in range(len(vals)):
        for i in np.flatnonzero(x[r] > 0.5):
            crit = served_threshold_by_bisection(env, psi, th, floors, vals[r], i, vals[r, i])
            assert pay[r, i] == pytest.approx(crit, abs=1e-9)
            checked += 1
    assert checked > 20


def test_binned_revenue_matches_virtual_surplus():
    env = StageEnvironment.single_item(2)
    d_list = [D.uniform(), D.uniform(0, 2)]
    T = 4
    bp = uniform_breakpoints(2, T)
    psi = np.stack([bin_surrogates(d, bp[i]) for i, d in enumerate(d_list)])
    exact = binned_revenue_exact(psi, psi, env)
    rng = np.random.default_rng(7)
    vals = np.stack([d.sample(rng, 200_000) for d in d_list], axis=1)
    _, pay = run_optimal_binning(env, d_list, bp, vals)
    tot = pay.sum(axis=1)
    assert abs(tot.mean() - exact) <= 3 * tot.std(ddof=1) / np.sqrt(tot.size)


def test_k_top_promotion_breakpoint_example():
    assert k_top_promote_quantile(0.65, [0.1, 0.3, 0.8], 2) == pytest.approx(0.5)
    assert k_top_promote_quantile(0.3, [0.1, 0.3, 0.8], 2) == 0.0
    q = np.linspace(0, 1, 21)
    assert np.allclose(k_top_promote_quantile(q, np.arange(1, 8) / 8, 3), top_promote_quantile(q, 3, 8))


@pytest.mark.parametrize("env", [StageEnvironment.single_item(3), StageEnvironment.single_minded(2, [{1}, {2}, {1, 2}])],
                         ids=repr)
def test_promoting_one_population_never_lowers_its_welfare(env):
    d_list = [D.uniform(), D.exponential(1.0), D.uniform(0, 2)]
    rng = np.random.default_rng(21)
    q = rng.random((100_000, 3))
    v0 = np.asarray(d_list[0].value_at(q[:, 0]))
    base = run_stage(env, None, d_list, quantiles=q)[:, 0] * v0
    qp = q.copy()
    qp[:, 0] = top_promote_quantile(q[:, 0], 2, 8)
    promoted = run_stage(env, None, d_list, quantiles=qp)[:, 0] * v0
    diff = promoted - base
    # promoted quantiles are weakly better, so the gain is pointwise non-negative
    assert np.all(diff >= 0)
    assert diff.mean() >= -3 * diff.std(ddof=1) / np.sqrt(diff.size)
