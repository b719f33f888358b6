"""Quantile transformations: top promotion, resampling, and optimal surrogate binning.

All batched functions take ``(m, n)`` arrays of quantiles (or values) and
return ``(m, n)`` allocations. Working from quantiles keeps point-mass
distributions unambiguous; values are converted through ``quantile_of`` only
when a caller supplies values.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .dist import Q_FLOOR, QuantileDistribution
from .env import StageEnvironment
from .errors import InvalidParameterError
from .surrogate import StageAlgorithm, default_stage_alg


def top_promote_quantile(q, k: int, T: int):
    """Send quantiles in ``[0, k/T]`` to 0 and rescale ``[k/T, 1]`` onto ``[0, 1]``; ``k = 0`` is the identity."""
    if k == 0:
        return q
    if not 1 <= k < T:
        raise InvalidParameterError(f"need 1 <= k < T, got k={k}, T={T}")
    c = k / T
    arr = np.asarray(q, dtype=float)
    out = np.where(arr <= c, 0.0, (arr - c) / (1.0 - c))
    return float(out) if np.ndim(q) == 0 else out


def k_top_promote_quantile(q, bp_row: Sequence[float], k: int):
    """Top promotion at the estimated breakpoint ``bp_row[k-1]`` instead of ``k/T``."""
    if k == 0:
        return q
    bp_row = np.asarray(bp_row, dtype=float)
    if not 1 <= k <= len(bp_row):
        raise InvalidParameterError(f"need 1 <= k <= T-1, got k={k}")
    c = float(bp_row[k - 1])
    arr = np.asarray(q, dtype=float)
    out = np.where(arr <= c, 0.0, (arr - c) / (1.0 - c))
    return float(out) if np.ndim(q) == 0 else out


def _weights(d_list: Sequence[QuantileDistribution], q: np.ndarray, objective: str) -> np.ndarray:
    return np.stack([d.score(q[:, i], objective) for i, d in enumerate(d_list)], axis=1)


def _to_quantiles(d_list, values=None, quantiles=None) -> np.ndarray:
    if (values is None) == (quantiles is None):
        raise InvalidParameterError("give exactly one of values or quantiles")
    if quantiles is not None:
        return np.atleast_2d(np.asarray(quantiles, dtype=float))
    v = np.atleast_2d(np.asarray(values, dtype=float))
    return np.stack([np.asarray(d.quantile_of(v[:, i]), dtype=float) for i, d in enumerate(d_list)], axis=1)


def _stage(env, stage_alg, d_list, q, objective) -> np.ndarray:
    alg = stage_alg or default_stage_alg(env)
    return np.asarray(alg(_weights(d_list, np.maximum(q, Q_FLOOR), objective)), dtype=float)


def run_stage(env, stage_alg, d_list, values=None, *, quantiles=None, objective: str = "welfare") -> np.ndarray:
    """The untransformed stage algorithm on values (welfare) or virtual values (revenue)."""
    q = _to_quantiles(d_list, values, quantiles)
    return _stage(env, stage_alg, d_list, q, objective)


def run_top_promotion(
    env: StageEnvironment,
    stage_alg: StageAlgorithm | None,
    d_list: Sequence[QuantileDistribution],
    k: int,
    T: int,
    values=None,
    rng: np.random.Generator | None = None,
    *,
    quantiles=None,
    objective: str = "welfare",
) -> np.ndarray:
    """Run the stage algorithm with each agent's quantile top-promoted.

    A promoted quantile of 0 maps to the top of the support. ``rng`` is
    accepted for interface symmetry; promotion is deterministic.
    """
    q = _to_quantiles(d_list, values, quantiles)
    out = _stage(env, stage_alg, d_list, top_promote_quantile(q, k, T), objective)
    return out[0] if np.ndim(values if values is not None else quantiles) == 1 else out


def resample_quantiles(q, k: int, T: int, rng: np.random.Generator) -> np.ndarray:
    """Redraw each quantile uniformly within its bin of width ``1/T``.

    For the bottom ``k`` bins each agent draws ``k`` uniforms on
    ``[(T-k)/T, 1]`` jointly, sorts them, and keeps the one whose position
    matches its bin, so the bottom block keeps its relative order in law.
    """
    if not 0 <= 2 * k < T:
        raise InvalidParameterError(f"resampling needs 0 <= k < T/2, got k={k}, T={T}")
    q = np.asarray(q, dtype=float)
    b = np.clip(np.ceil(q * T).astype(int), 1, T)
    out = (b - 1 + rng.random(q.shape)) / T
    if k > 0:
        lo = (T - k) / T
        joint = np.sort(lo + (1 - lo) * rng.random(q.shape + (k,)), axis=-1)
        pos = np.clip(b - (T - k) - 1, 0, k - 1)
        bottom = np.take_along_axis(joint, pos[..., None], axis=-1)[..., 0]
        out = np.where(b > T - k, bottom, out)
    return out


def run_resampling(
    env: StageEnvironment,
    stage_alg: StageAlgorithm | None,
    d_list: Sequence[QuantileDistribution],
    k: int,
    T: int,
    values=None,
    rng: np.random.Generator | None = None,
    *,
    quantiles=None,
    objective: str = "welfare",
) -> np.ndarray:
    """Resample every agent within its quantile bin, then top-promote and allocate."""
    if rng is None:
        raise InvalidParameterError("resampling needs an rng")
    q = _to_quantiles(d_list, values, quantiles)
    q_new = resample_quantiles(q, k, T, rng)
    out = _stage(env, stage_alg, d_list, top_promote_quantile(q_new, k, T), objective)
    return out[0] if np.ndim(values if values is not None else quantiles) == 1 else out


def bin_surrogates(d: QuantileDistribution, bp_row: Sequence[float], objective: str = "revenue") -> np.ndarray:
    """Average virtual value (revenue) or value (welfare) over each quantile bin."""
    edges = np.concatenate([[0.0], np.asarray(bp_row, dtype=float), [1.0]])
    if objective == "revenue":
        return np.asarray(d.conditional_virtual_value(edges[:-1], edges[1:]), dtype=float)
    if objective == "welfare":
        V = np.array([d.cumulative_value(e) for e in edges])
        return np.diff(V) / np.diff(edges)
    raise InvalidParameterError(f"unknown objective {objective!r}")


def bin_edge_values(d: QuantileDistribution, bp_row: Sequence[float]) -> np.ndarray:
    """Lower value edge of each bin: ``v(q^1), ..., v(q^(T-1)), v(1)``."""
    edges = np.concatenate([np.asarray(bp_row, dtype=float), [1.0]])
    return np.asarray(d.value_at(edges), dtype=float)


def binned_mechanism(
    env: StageEnvironment,
    psi: np.ndarray,
    thresholds: np.ndarray,
    floors: np.ndarray,
    values: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bin values against decreasing thresholds, maximize surrogate surplus, charge bin-edge payments.

    ``psi`` is ``(n, T)``, ``thresholds`` ``(n, T-1)`` value cut points, and
    ``floors`` ``(n,)`` the lower edge of the last bin. A served agent pays the
    lower value edge of the lowest bin in the contiguous run of winning bins
    that starts at its own bin. Returns ``(allocation, payments, bins)``.
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    m, n = values.shape
    T = psi.shape[1]
    bins = 1 + np.sum(values[:, :, None] < thresholds[None, :, :], axis=2)
    rows = np.arange(n)
    surr = psi[rows[None, :], bins - 1]
    alloc = env.surplus_max_batch(surr)
    pay = np.zeros((m, n))
    lower = np.concatenate([thresholds, floors[:, None]], axis=1)
    for i in range(n):
        served = alloc[:, i] > 0.5
        if not served.any():
            continue
        s = surr[served]
        wins = np.empty((s.shape[0], T), dtype=bool)
        for j in range(T):
            trial = s.copy()
            trial[:, i] = psi[i, j]
            wins[:, j] = env.surplus_max_batch(trial)[:, i] > 0.5
        own = bins[served, i] - 1
        cols = np.arange(T)[None, :]
        lose_below = (~wins) & (cols > own[:, None])
        first_loss = np.where(lose_below.any(axis=1), np.argmax(lose_below, axis=1), T)
        pay[served, i] = lower[i, first_loss - 1]
    return alloc, pay, bins


def run_optimal_binning(
    env: StageEnvironment,
    d_list: Sequence[QuantileDistribution],
    bp: np.ndarray,
    values,
    objective: str = "revenue",
) -> tuple[np.ndarray, np.ndarray]:
    """Surrogate binning with conditional virtual values on known quantile breakpoints.

    ``bp`` is ``(n, T-1)``. Returns allocations and truthful payments; for a
    single profile ``values`` may be a length-``n`` vector.
    """
    bp = np.atleast_2d(np.asarray(bp, dtype=float))
    psi = np.stack([bin_surrogates(d, bp[i], objective) for i, d in enumerate(d_list)])
    th = np.stack([np.asarray(d.value_at(bp[i]), dtype=float) for i, d in enumerate(d_list)])
    floors = np.array([float(d.value_at(1.0)) for d in d_list])
    alloc, pay, _ = binned_mechanism(env, psi, th, floors, values)
    if np.ndim(values) == 1:
        return alloc[0], pay[0]
    return alloc, pay


def uniform_breakpoints(n: int, T: int) -> np.ndarray:
    return np.tile(np.arange(1, T) / T, (n, 1))
