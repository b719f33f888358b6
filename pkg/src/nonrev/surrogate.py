"""Surrogate selection, surrogate ranking/binning algorithms and characteristic weights.

Rank 1 is always the highest bid and indexes the largest surrogate. A stage
algorithm is any callable mapping an ``(m, n)`` matrix of surrogate values to
an ``(m, n)`` matrix of allocations; by default it is the environment's
exact surplus maximizer.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dist import OrderStatSpec, QuantileDistribution
from .env import StageEnvironment
from .errors import InsufficientSamplesError, InvalidParameterError, OutOfSupportError

StageAlgorithm = Callable[[np.ndarray], np.ndarray]


def default_stage_alg(env: StageEnvironment) -> StageAlgorithm:
    return env.surplus_max_batch


@dataclass(frozen=True, eq=False)
class SurrogateProfile:
    """``psi[i, j-1]`` is population ``i``'s surrogate for rank ``j``."""

    psi: np.ndarray

    def __post_init__(self):
        psi = np.atleast_2d(np.asarray(self.psi, dtype=float))
        object.__setattr__(self, "psi", psi)
        if psi.shape[1] < 1:
            raise InvalidParameterError("surrogate rows must be non-empty")
        if np.any(np.diff(psi, axis=1) > 1e-12 * np.maximum(1.0, np.abs(psi[:, 1:]))):
            raise InvalidParameterError("each surrogate row must be weakly decreasing")

    @property
    def n(self) -> int:
        return self.psi.shape[0]

    @property
    def T(self) -> int:
        return self.psi.shape[1]

    @classmethod
    def evenly_spaced(cls, n: int, T: int, hi: float = 1.0, lo: float = 0.0) -> "SurrogateProfile":
        return cls(np.tile(np.linspace(hi, lo, T), (n, 1)))


@dataclass(frozen=True, eq=False)
class CharacteristicWeights:
    """Allocation probability ``w[i, j-1]`` of population ``i`` holding rank ``j``."""

    w: np.ndarray
    exact: bool
    se: np.ndarray | None = None
    profiles: int = 0

    def items_per_stage(self) -> float:
        return float(self.w.sum() / self.w.shape[1])

    def is_degenerate(self, tol: float = 1e-12) -> bool:
        return bool(np.ptp(self.w) <= tol)


@dataclass(frozen=True, eq=False)
class SelectionRule:
    """Maps one population's bid to a rank/bin and hence a surrogate.

    ``sample_ranking`` ranks the bid among ``T - 1`` draws from ``reference``
    (a distribution) or from ``pool`` (an empirical bid sample). ``binning``
    uses decreasing thresholds ``thresholds[0] >= ... >= thresholds[T-2]``
    bounded by ``support``; a bid equal to a threshold goes to the higher bin.
    """

    kind: str
    psi_row: np.ndarray
    reference: QuantileDistribution | None = None
    pool: np.ndarray | None = None
    thresholds: np.ndarray | None = None
    support: tuple[float, float] = (-np.inf, np.inf)

    @property
    def T(self) -> int:
        return len(self.psi_row)

    @classmethod
    def sample_ranking(cls, psi_row, reference: QuantileDistribution | None = None, pool=None) -> "SelectionRule":
        if (reference is None) == (pool is None):
            raise InvalidParameterError("give exactly one of reference or pool")
        return cls("sample_ranking", np.asarray(psi_row, dtype=float), reference,
                   None if pool is None else np.asarray(pool, dtype=float))

    @classmethod
    def binning(cls, psi_row, reference: QuantileDistribution) -> "SelectionRule":
        """Equal-probability bins of ``reference``: bin ``j`` is quantiles ``[(j-1)/T, j/T]``."""
        psi_row = np.asarray(psi_row, dtype=float)
        T = len(psi_row)
        th = np.asarray(reference.value_at(np.arange(1, T) / T), dtype=float)
        lo = float(reference.value_at(1.0))
        hi = float(reference.value_at(0.0))
        return cls("binning", psi_row, reference, None, th, (lo, hi))

    @classmethod
    def binning_from_thresholds(cls, psi_row, thresholds, support=(-np.inf, np.inf)) -> "SelectionRule":
        th = np.asarray(thresholds, dtype=float)
        if len(th) != len(psi_row) - 1 or np.any(np.diff(th) > 0):
            raise InvalidParameterError("need T-1 weakly decreasing thresholds")
        return cls("binning", np.asarray(psi_row, dtype=float), None, None, th, tuple(support))


def _random_rank(greater: np.ndarray, ties: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # uniform position among the tied block
    return 1 + greater + np.floor(rng.random(np.shape(greater)) * (ties + 1)).astype(int)


def select_sample_ranking(rule: SelectionRule, bid: float, rng: np.random.Generator) -> tuple[int, float]:
    """Rank ``bid`` among ``T - 1`` fresh reference samples; return ``(rank, psi^rank)``."""
    if rule.kind != "sample_ranking":
        raise InvalidParameterError("rule is not a sample-ranking rule")
    T = rule.T
    if rule.reference is not None:
        samples = rule.reference.sample(rng, T - 1)
    else:
        if len(rule.pool) < T - 1:
            raise InsufficientSamplesError(f"pool has {len(rule.pool)} samples, need {T - 1}")
        samples = rng.choice(rule.pool, size=T - 1, replace=False)
    samples = np.asarray(samples)
    r = int(_random_rank(np.sum(samples > bid), np.sum(samples == bid), rng))
    return r, float(rule.psi_row[r - 1])


def sample_ranking_batch(rule: SelectionRule, bids: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Ranks for many independent bids, each against its own fresh reference sample."""
    bids = np.asarray(bids, dtype=float)
    T = rule.T
    if rule.reference is None:
        raise InvalidParameterError("batched sample ranking needs a reference distribution")
    samples = rule.reference.sample(rng, (bids.size, T - 1))
    b = bids.reshape(-1, 1)
    r = _random_rank(np.sum(samples > b, axis=1), np.sum(samples == b, axis=1), rng)
    return r.reshape(bids.shape)


def bin_index(rule: SelectionRule, bids) -> np.ndarray:
    """Bin of each bid (1 = highest); boundary bids go to the higher bin."""
    if rule.kind != "binning":
        raise InvalidParameterError("rule is not a binning rule")
    b = np.asarray(bids, dtype=float)
    lo, hi = rule.support
    slack = 1e-12 * max(1.0, abs(hi) if np.isfinite(hi) else 1.0)
    if np.any((b < lo - slack) | (b > hi + slack) | np.isnan(b)):
        raise OutOfSupportError(f"bid outside the binning partition [{lo}, {hi}]")
    return 1 + np.sum(b[..., None] < rule.thresholds, axis=-1)


def select_binning(rule: SelectionRule, bid: float) -> tuple[int, float]:
    j = int(bin_index(rule, bid))
    return j, float(rule.psi_row[j - 1])


def characteristic_weights(
    profile: SurrogateProfile,
    env: StageEnvironment,
    stage_alg: StageAlgorithm | None = None,
    *,
    budget: int = 10**6,
    trials: int = 100_000,
    rng: np.random.Generator | None = None,
    chunk: int = 65_536,
) -> CharacteristicWeights:
    """Service probability of each surrogate against uniformly ranked opponents.

    Exact enumeration of all ``T**n`` rank profiles when ``T**(n-1) <= budget``,
    otherwise a Monte Carlo estimate with per-entry standard errors.
    """
    alg = stage_alg or default_stage_alg(env)
    n, T = profile.n, profile.T
    psi = profile.psi
    rows = np.arange(n)
    if T ** (n - 1) <= budget:
        total = T**n
        sums = np.zeros((n, T))
        for start in range(0, total, chunk):
            flat = np.arange(start, min(total, start + chunk))
            ranks = np.stack(np.unravel_index(flat, (T,) * n), axis=1)
            x = np.asarray(alg(psi[rows, ranks]), dtype=float)
            for i in range(n):
                sums[i] += np.bincount(ranks[:, i], weights=x[:, i], minlength=T)
        return CharacteristicWeights(sums / T ** (n - 1), True, np.zeros((n, T)), total)

    rng = rng if rng is not None else np.random.default_rng(0)
    sums = np.zeros((n, T))
    sq = np.zeros((n, T))
    counts = np.zeros((n, T))
    for start in range(0, trials, chunk):
        m = min(chunk, trials - start)
        ranks = rng.integers(0, T, size=(m, n))
        x = np.asarray(alg(psi[rows, ranks]), dtype=float)
        for i in range(n):
            counts[i] += np.bincount(ranks[:, i], minlength=T)
            sums[i] += np.bincount(ranks[:, i], weights=x[:, i], minlength=T)
            sq[i] += np.bincount(ranks[:, i], weights=x[:, i] ** 2, minlength=T)
    c = np.maximum(counts, 1)
    w = sums / c
    var = np.maximum(sq / c - w**2, 0.0) * c / np.maximum(c - 1, 1)
    return CharacteristicWeights(w, False, np.sqrt(var / c), trials)


def within_row_ranks(bids: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """1-based descending ranks along the last axis, exact ties broken uniformly."""
    bids = np.asarray(bids, dtype=float)
    keys = rng.random(bids.shape)
    order = np.lexsort((keys, -bids), axis=-1)
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(1, bids.shape[-1] + 1), axis=-1)
    return ranks


def run_sra_batch(
    profile: SurrogateProfile,
    env: StageEnvironment,
    bids: np.ndarray,
    rng: np.random.Generator,
    stage_alg: StageAlgorithm | None = None,
) -> np.ndarray:
    """Surrogate ranking on an ``(m, n, T)`` bid array; returns ``(m, T, n)`` allocations."""
    alg = stage_alg or default_stage_alg(env)
    bids = np.asarray(bids, dtype=float)
    if bids.ndim != 3 or bids.shape[1:] != (profile.n, profile.T):
        raise InvalidParameterError(f"bids must have shape (m, {profile.n}, {profile.T})")
    m, n, T = bids.shape
    ranks = within_row_ranks(bids, rng)
    surr = profile.psi[np.arange(n)[None, :, None], ranks - 1]
    flat = surr.transpose(0, 2, 1).reshape(m * T, n)
    return np.asarray(alg(flat), dtype=float).reshape(m, T, n)


def run_sra(
    profile: SurrogateProfile,
    env: StageEnvironment,
    bids: np.ndarray,
    rng: np.random.Generator,
    stage_alg: StageAlgorithm | None = None,
) -> np.ndarray:
    """Surrogate ranking on one batch of ``n x T`` bids; returns ``T`` stage allocations."""
    return run_sra_batch(profile, env, np.asarray(bids, dtype=float)[None], rng, stage_alg)[0]


def run_ssra(
    profile: SurrogateProfile,
    env: StageEnvironment,
    bids: Sequence[float],
    bid_pools: Sequence[Sequence[float]],
    rng: np.random.Generator,
    stage_alg: StageAlgorithm | None = None,
) -> np.ndarray:
    """Single-stage surrogate ranking: each bid is ranked among ``T - 1`` draws from its pool."""
    alg = stage_alg or default_stage_alg(env)
    T = profile.T
    surr = np.empty(profile.n)
    for i, (b, pool) in enumerate(zip(bids, bid_pools)):
        rule = SelectionRule.sample_ranking(profile.psi[i], pool=np.asarray(pool, dtype=float))
        _, surr[i] = select_sample_ranking(rule, float(b), rng) if T > 1 else (1, profile.psi[i, 0])
    return np.asarray(alg(surr[None, :]), dtype=float)[0]


def run_surrogate_binning_batch(
    profile: SurrogateProfile,
    env: StageEnvironment,
    rules: Sequence[SelectionRule],
    bids: np.ndarray,
    stage_alg: StageAlgorithm | None = None,
) -> np.ndarray:
    alg = stage_alg or default_stage_alg(env)
    bids = np.atleast_2d(np.asarray(bids, dtype=float))
    surr = np.empty_like(bids)
    for i, rule in enumerate(rules):
        surr[:, i] = rule.psi_row[bin_index(rule, bids[:, i]) - 1]
    return np.asarray(alg(surr), dtype=float)


def run_surrogate_binning(profile, env, rules, bids, stage_alg=None) -> np.ndarray:
    """Allocate one stage by binning each bid and running the stage algorithm on the surrogates."""
    for rule, row in zip(rules, profile.psi):
        if rule.kind != "binning" or not np.array_equal(rule.psi_row, row):
            raise InvalidParameterError("rules must be binning rules carrying the profile's surrogates")
    return run_surrogate_binning_batch(profile, env, rules, np.asarray(bids)[None, :], stage_alg)[0]


def optimal_surrogates(d_list: Sequence[QuantileDistribution], T: int, objective: str = "welfare",
                       rtol: float = 1e-9) -> SurrogateProfile:
    """Conditional expectation of value (welfare) or virtual value (revenue) given rank."""
    of = {"welfare": "value", "revenue": "virtual_value"}.get(objective)
    if of is None:
        raise InvalidParameterError(f"unknown objective {objective!r}")
    psi = np.array([[d.expected_order_stat(OrderStatSpec(j, T), of, rtol) for j in range(1, T + 1)] for d in d_list])
    # remove quadrature noise that could break weak monotonicity
    psi = np.minimum.accumulate(psi, axis=1)
    return SurrogateProfile(psi)
