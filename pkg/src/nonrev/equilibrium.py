"""Symmetric equilibria of i.i.d. rank-by-bid position auctions.

Within one population of a surrogate ranking mechanism each agent faces a
position auction against ``T - 1`` i.i.d. opponents, so the equilibrium
strategy follows from the payment identity without any fixed-point search.
Work happens in quantile space: with ``x(q)`` the interim allocation, the
interim payment is ``p(q) = integral_q^1 v(r) (-x'(r)) dr``, which vanishes
at the bottom of the support and needs no derivative of ``v``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import stats
from scipy.interpolate import PchipInterpolator

from .dist import Q_FLOOR, QuantileDistribution
from .env import StageEnvironment
from .errors import InvalidParameterError
from .quadrature import adaptive_simpson, adaptive_simpson_cells
from .surrogate import StageAlgorithm, SurrogateProfile, run_sra_batch

SEMANTICS = ("winner_pays_bid", "all_pay")


@dataclass(frozen=True, eq=False)
class PositionAuctionSpec:
    """Position weights ``w^1 >= ... >= w^T`` faced by one population of i.i.d. agents."""

    weights: np.ndarray
    d: QuantileDistribution
    semantics: str = "winner_pays_bid"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        if w.ndim != 1 or w.size < 1:
            raise InvalidParameterError("weights must be a non-empty vector")
        if np.any(np.diff(w) > 1e-12) or np.any(w < 0) or np.any(w > 1):
            raise InvalidParameterError("weights must be weakly decreasing in [0, 1]")
        if self.semantics not in SEMANTICS:
            raise InvalidParameterError(f"semantics must be one of {SEMANTICS}")

    @property
    def T(self) -> int:
        return len(self.weights)

    def with_semantics(self, semantics: str) -> "PositionAuctionSpec":
        return PositionAuctionSpec(self.weights, self.d, semantics)


def allocation_of_quantile(spec: PositionAuctionSpec, q) -> np.ndarray:
    """``x(q) = sum_j w^j C(T-1, j-1) q^(j-1) (1-q)^(T-j)``."""
    q = np.asarray(q, dtype=float)
    j = np.arange(spec.T)
    return np.sum(spec.weights * stats.binom.pmf(j, spec.T - 1, q[..., None]), axis=-1)


def allocation_slope(spec: PositionAuctionSpec, q) -> np.ndarray:
    """``-x'(q)``, non-negative because the weights decrease."""
    q = np.asarray(q, dtype=float)
    T = spec.T
    if T == 1:
        return np.zeros_like(q)
    drops = spec.weights[:-1] - spec.weights[1:]
    j = np.arange(T - 1)
    return (T - 1) * np.sum(drops * stats.binom.pmf(j, T - 2, q[..., None]), axis=-1)


def interim_allocation(spec: PositionAuctionSpec, v):
    """Probability-weighted service of an agent with value ``v``."""
    q = spec.d.quantile_of(v)
    out = allocation_of_quantile(spec, q)
    return float(out) if np.ndim(v) == 0 else out


@dataclass(frozen=True, eq=False)
class BidFunction:
    """Monotone bid strategy on a value grid with shape-preserving interpolation.

    Outside the grid the strategy is held at its end values.
    """

    values: np.ndarray
    bids: np.ndarray
    semantics: str = "winner_pays_bid"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        b = np.asarray(self.bids, dtype=float)
        if v.shape != b.shape or v.ndim != 1 or v.size < 2:
            raise InvalidParameterError("values and bids must be matching 1-d grids")
        if np.any(np.diff(v) <= 0):
            raise InvalidParameterError("value grid must be strictly increasing")
        if np.any(np.diff(b) < -1e-12):
            raise InvalidParameterError("bids must be weakly increasing in value")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "bids", np.maximum.accumulate(b))
        object.__setattr__(self, "_interp", PchipInterpolator(v, self.bids, extrapolate=False))

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        vc = np.clip(v, self.values[0], self.values[-1])
        out = self._interp(vc)
        return float(out) if out.ndim == 0 else out

    def inverse(self, b, iters: int = 80):
        """Smallest grid-interpolated value whose bid reaches ``b`` (vectorized bisection)."""
        b = np.asarray(b, dtype=float)
        lo = np.full(b.shape, self.values[0])
        hi = np.full(b.shape, self.values[-1])
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            up = self._interp(mid) >= b
            hi = np.where(up, mid, hi)
            lo = np.where(up, lo, mid)
        out = hi
        return float(out) if out.ndim == 0 else out

    @property
    def is_strictly_increasing(self) -> bool:
        return bool(np.all(np.diff(self.bids) > 0))


def _quantile_grid(d: QuantileDistribution, grid: int, q_top: float) -> np.ndarray:
    # half the points evenly in quantile, half evenly in value
    half = max(grid // 2, 2)
    qs = np.linspace(q_top, 1.0, half)
    v_hi = float(d.value_at(q_top))
    v_lo = float(d.value_at(1.0))
    # value points sit midway so they do not duplicate the quantile points for linear v
    vs = v_lo + (np.arange(grid - half) + 0.5) / (grid - half) * (v_hi - v_lo)
    qv = np.asarray(d.quantile_of(vs), dtype=float)
    q = np.unique(np.clip(np.concatenate([qs, qv, [q_top, 1.0]]), q_top, 1.0))
    # drop near-coincident points, which would wreck the interpolant's slopes
    v = np.asarray(d.value_at(q), dtype=float)
    gap = 1e-9 * max(1.0, abs(v_hi - v_lo))
    keep = [0]
    for i in range(1, len(q)):
        if v[keep[-1]] - v[i] > gap and q[i] - q[keep[-1]] > 1e-14:
            keep.append(i)
    if keep[-1] != len(q) - 1:
        keep[-1] = len(q) - 1
    return q[keep]


def payment_on_grid(spec: PositionAuctionSpec, q: np.ndarray, rtol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Interim payment ``p(q)`` and ``x(q) - x(1)`` on an increasing quantile grid, both by quadrature."""
    d = spec.d
    v = lambda r: np.asarray(d.value_fn(np.maximum(r, Q_FLOOR)), dtype=float)
    pay_cells = adaptive_simpson_cells(lambda r: v(r) * allocation_slope(spec, r), q, rtol=rtol, initial=2)
    mass_cells = adaptive_simpson_cells(lambda r: allocation_slope(spec, r), q, rtol=rtol, initial=2)
    pay = np.concatenate([np.cumsum(pay_cells[::-1])[::-1], [0.0]])
    mass = np.concatenate([np.cumsum(mass_cells[::-1])[::-1], [0.0]])
    return pay, mass


def equilibrium_bid(spec: PositionAuctionSpec, grid: int = 2048, q_top: float | None = None) -> BidFunction:
    """Equilibrium strategy from the payment identity.

    All-pay bids equal the interim payment. Winner-pays-bid bids are the
    payment divided by the allocation probability; where nothing is allocated
    the bid is pinned to its limit from above, the bottom of the support.
    """
    d = spec.d
    if q_top is None:
        q_top = 0.0 if math.isfinite(float(d.value_at(0.0))) else 1e-12
    q = _quantile_grid(d, grid, q_top)
    pay, mass = payment_on_grid(spec, q)
    values = np.asarray(d.value_at(q), dtype=float)
    if spec.semantics == "all_pay":
        bids = pay
    else:
        x1 = float(spec.weights[-1]) if spec.T > 1 else float(spec.weights[0])
        alloc = x1 + mass
        with np.errstate(divide="ignore", invalid="ignore"):
            bids = np.where(alloc > 1e-300, pay / alloc, values[-1])
        bids = np.minimum(bids, values)
    # grid runs from high to low value; flip to increasing values
    return BidFunction(values[::-1].copy(), np.maximum.accumulate(bids[::-1]), spec.semantics)


def expected_payment(spec: PositionAuctionSpec, bid_fn: BidFunction, rtol: float = 1e-10) -> float:
    """Ex ante payment of one agent playing ``bid_fn`` against equilibrium allocation ``x``."""
    d = spec.d
    v = lambda q: np.asarray(d.value_fn(np.maximum(q, Q_FLOOR)), dtype=float)
    if spec.semantics == "all_pay":
        f = lambda q: bid_fn(v(q))
    else:
        f = lambda q: allocation_of_quantile(spec, q) * bid_fn(v(q))
    return adaptive_simpson(f, 0.0, 1.0, rtol=rtol, breakpoints=d.kinks)


def expected_virtual_surplus(spec: PositionAuctionSpec, rtol: float = 1e-10) -> float:
    """``E[phi(q) x(q)]`` by parts: ``R(1) x(1) + integral R (-x')``."""
    d = spec.d
    f = lambda q: d._revenue(q) * allocation_slope(spec, q)
    x1 = float(allocation_of_quantile(spec, 1.0))
    return float(d.revenue_curve(1.0)) * x1 + adaptive_simpson(f, 0.0, 1.0, rtol=rtol, breakpoints=d.kinks)


def _expected_weight(sorted_opp: np.ndarray, bids: np.ndarray, cum_w: np.ndarray) -> np.ndarray:
    """Expected position weight of each bid in ``bids`` against each row of sorted opponent bids.

    Ties with opponents are broken uniformly, which averages the weights of the tied positions.
    """
    m, k = sorted_opp.shape
    below = np.empty((m, len(bids)), dtype=int)
    upto = np.empty((m, len(bids)), dtype=int)
    for r in range(m):
        below[r] = np.searchsorted(sorted_opp[r], bids, side="left")
        upto[r] = np.searchsorted(sorted_opp[r], bids, side="right")
    greater = k - upto
    ties = upto - below
    # positions greater+1 .. greater+ties+1 (1-based) are equally likely
    return (cum_w[greater + ties + 1] - cum_w[greater]) / (ties + 1)


def best_response_gap(
    spec: PositionAuctionSpec,
    bid_fn: BidFunction,
    trials: int = 100_000,
    deviation_grid: int = 64,
    value_grid: int = 33,
    rng: np.random.Generator | None = None,
    chunk: int = 2_000,
) -> tuple[float, float]:
    """Largest Monte Carlo utility gain from deviating, and its standard error.

    All candidate (value, deviation) pairs share the same opponent draws.
    The deviation set always contains each grid value's own bid, so the gap
    is never negative.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    T = spec.T
    d = spec.d
    q_vals = np.linspace(0.0, 1.0, value_grid)
    q_vals[0] = max(q_vals[0], 1e-9) if not math.isfinite(float(d.value_at(0.0))) else 0.0
    vals = np.asarray(d.value_at(q_vals), dtype=float)
    own = np.asarray(bid_fn(vals), dtype=float)
    top = float(np.max(bid_fn.bids))
    devs = np.unique(np.concatenate([np.linspace(0.0, top, deviation_grid), own]))
    own_idx = np.searchsorted(devs, own)
    cum_w = np.concatenate([[0.0], np.cumsum(spec.weights)])

    s1 = np.zeros((len(vals), len(devs)))
    s2 = np.zeros_like(s1)
    for start in range(0, trials, chunk):
        m = min(chunk, trials - start)
        if T > 1:
            opp = np.sort(np.asarray(bid_fn(d.sample(rng, (m, T - 1))), dtype=float).reshape(m, T - 1), axis=1)
        else:
            opp = np.empty((m, 0))
        X = _expected_weight(opp, devs, cum_w)  # (m, D)
        if spec.semantics == "all_pay":
            u = vals[None, :, None] * X[:, None, :] - devs[None, None, :]
        else:
            u = (vals[:, None] - devs[None, :])[None] * X[:, None, :]
        base = np.take_along_axis(u, np.broadcast_to(own_idx[None, :, None], (m, len(vals), 1)), axis=2)
        g = u - base
        s1 += g.sum(axis=0)
        s2 += (g**2).sum(axis=0)
    mean = s1 / trials
    var = np.maximum(s2 / trials - mean**2, 0.0) * trials / max(trials - 1, 1)
    se = np.sqrt(var / trials)
    idx = np.unravel_index(np.argmax(mean), mean.shape)
    return float(max(mean[idx], 0.0)), float(se[idx])


BidMap = Callable[[np.ndarray], np.ndarray]


def revelation_match_rate(
    profile: SurrogateProfile,
    env: StageEnvironment,
    stage_alg: StageAlgorithm | None,
    d_list: Sequence[QuantileDistribution],
    bid_maps: Sequence[BidMap],
    trials: int,
    rng: np.random.Generator,
    chunk: int = 2_000,
) -> float:
    """Fraction of trials where surrogate ranking on bids equals surrogate ranking on values.

    Both runs consume an identical tie-breaking stream.
    """
    n, T = profile.n, profile.T
    matches = 0
    for start in range(0, trials, chunk):
        m = min(chunk, trials - start)
        values = np.stack([d.sample(rng, (m, T)) for d in d_list], axis=1)
        bids = np.stack([np.asarray(bm(values[:, i, :]), dtype=float) for i, bm in enumerate(bid_maps)], axis=1)
        seed = int(rng.integers(2**63))
        a = run_sra_batch(profile, env, values, np.random.default_rng(seed), stage_alg)
        b = run_sra_batch(profile, env, bids, np.random.default_rng(seed), stage_alg)
        matches += int(np.sum(np.all(np.isclose(a, b), axis=(1, 2))))
    return matches / trials


def check_revelation_equivalence(profile, env, stage_alg, d_list, trials, rng, bid_maps=None) -> bool:
    """True iff allocations on bids and on values agree on every trial.

    ``bid_maps`` defaults to each population's winner-pays-bid equilibrium
    strategy for the position auction induced by its characteristic weights.
    """
    if bid_maps is None:
        from .surrogate import characteristic_weights

        cw = characteristic_weights(profile, env, stage_alg)
        bid_maps = [
            equilibrium_bid(PositionAuctionSpec(np.minimum.accumulate(np.clip(cw.w[i], 0, 1)), d))
            for i, d in enumerate(d_list)
        ]
    return revelation_match_rate(profile, env, stage_alg, d_list, bid_maps, trials, rng) == 1.0


def unrevelation_allpay_bid(
    d_list: Sequence[QuantileDistribution],
    env: StageEnvironment,
    agent: int,
    grid: Sequence[float],
    trials: int = 100_000,
    rng: np.random.Generator | None = None,
) -> BidFunction:
    """All-pay bids that replicate the truthful welfare-maximizing mechanism's expected payments.

    ``s(v)`` is the Monte Carlo expectation, over opponents' values, of the
    threshold payment the agent owes when served at value ``v``. All grid
    points share the same opponent draws.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    grid = np.asarray(grid, dtype=float)
    n = env.n
    values = np.stack([d.sample(rng, trials) for d in d_list], axis=1)
    bids = np.empty(len(grid))
    for g, v in enumerate(grid):
        w = values.copy()
        w[:, agent] = v
        x = env.surplus_max_batch(w)
        served = x > 0.5
        t = env.threshold_payment_batch(w, served)[:, agent]
        pay = np.where(served[:, agent], np.where(np.isfinite(t), t, 0.0), 0.0)
        bids[g] = pay.mean()
    return BidFunction(grid, np.maximum.accumulate(bids), "all_pay")
