"""A revenue mechanism built from value samples.

Each population's value distribution is split into ``T`` bins of (estimated)
equal probability using empirical order statistics; each bin's surrogate is
the estimated conditional virtual value ``j v^j - (j-1) v^(j-1)``; stages are
allocated by surplus maximization over surrogates and winners pay the lower
value edge of the lowest bin in which they would still win.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .dist import QuantileDistribution
from .env import StageEnvironment
from .errors import InsufficientSamplesError, InvalidParameterError
from .transforms import bin_surrogates, binned_mechanism


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Per-population value draws with the seed that produced them."""

    values: tuple[np.ndarray, ...]
    seed: int | None = None

    def __post_init__(self):
        vals = tuple(np.asarray(v, dtype=float).ravel() for v in self.values)
        for v in vals:
            if v.size == 0:
                raise InvalidParameterError("every population needs at least one sample")
            if not np.all(np.isfinite(v)) or np.any(v < 0):
                raise InvalidParameterError("samples must be finite and non-negative")
        object.__setattr__(self, "values", vals)

    @property
    def n(self) -> int:
        return len(self.values)

    @classmethod
    def draw(cls, d_list: Sequence[QuantileDistribution], count: int, seed: int) -> "SampleSet":
        rng = np.random.default_rng(seed)
        return cls(tuple(d.sample(rng, count) for d in d_list), seed)


def estimate_breakpoints(samples: Sequence[Sequence[float]], T: int, m: int, index: str = "jm") -> np.ndarray:
    """Value cut points ``v^1 >= ... >= v^(T-1)`` per population from ``mT - 1`` samples each.

    ``v^j`` is the ``r``-th highest of the first ``mT - 1`` samples, with
    ``r = jm`` by default (its expected quantile is exactly ``j/T``) or
    ``r = jm - 1`` with ``index="jm-1"``.
    """
    if T < 1 or m < 1:
        raise InvalidParameterError("T and m must be positive")
    if index not in ("jm", "jm-1"):
        raise InvalidParameterError(f"unknown breakpoint index {index!r}")
    N = m * T - 1
    j = np.arange(1, T)
    r = j * m - (1 if index == "jm-1" else 0)
    if r.size and r.min() < 1:
        raise InvalidParameterError("index jm-1 needs m >= 2")
    rows = []
    for s in samples:
        s = np.asarray(s, dtype=float)
        if s.size < N:
            raise InsufficientSamplesError(f"need {N} samples per population, got {s.size}")
        desc = np.sort(s[:N])[::-1]
        rows.append(desc[r - 1] if T > 1 else np.empty(0))
    return np.array(rows, dtype=float).reshape(len(rows), T - 1)


def estimate_surrogates(breakpoints: np.ndarray, T: int) -> np.ndarray:
    """``psi^j = j v^j - (j-1) v^(j-1)`` with the bottom cut ``v^T = 0``."""
    bp = np.atleast_2d(np.asarray(breakpoints, dtype=float))
    if bp.shape[1] != T - 1:
        raise InvalidParameterError(f"expected {T - 1} breakpoints per population")
    v = np.concatenate([bp, np.zeros((bp.shape[0], 1))], axis=1)  # v^1..v^T
    j = np.arange(1, T + 1)
    prev = np.concatenate([np.zeros((bp.shape[0], 1)), v[:, :-1]], axis=1)
    return j * v - (j - 1) * prev


def sample_schedule(n: int, eps: float, c_T: float = 1.0, c_m: float | None = None,
                    budget: int | None = None) -> tuple[int, int]:
    """``(T, m)``: ``T = ceil(c_T n / eps^2)``; ``m`` from ``c_m`` or from a per-population sample budget."""
    if not 0 < eps < 1:
        raise InvalidParameterError("eps must lie in (0, 1)")
    T = max(1, math.ceil(c_T * n / eps**2 - 1e-9))
    if c_m is not None:
        m = math.ceil(c_m * n**4 / eps**6 * math.log(n / eps))
    elif budget is not None:
        m = (budget + 1) // T
    else:
        raise InvalidParameterError("give c_m or a sample budget")
    if m < 1:
        raise InsufficientSamplesError(f"budget {budget} is below T - 1 = {T - 1}")
    return T, m


def precondition_eps(n: int, T: int) -> float:
    """Largest breakpoint accuracy satisfying both the ``1/(2T)`` and ``min((nT)^-1/2, 1/T)`` requirements."""
    return min(1.0 / (2 * T), (n * T) ** -0.5, 1.0 / T)


@dataclass(frozen=True, eq=False)
class EstimatedMechanism:
    breakpoints: np.ndarray
    psi: np.ndarray
    env: StageEnvironment
    T: int
    m: int
    index: str = "jm"
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def inverted_rows(self) -> np.ndarray:
        """Populations whose surrogate row is not weakly decreasing."""
        return np.any(np.diff(self.psi, axis=1) > 0, axis=1)

    @property
    def degenerate(self) -> bool:
        return self.T == 1

    def evaluate(self, values) -> tuple[np.ndarray, np.ndarray]:
        """Allocations and payments for one ``(n,)`` profile or an ``(m, n)`` batch."""
        floors = np.zeros(self.psi.shape[0])
        alloc, pay, _ = binned_mechanism(self.env, self.psi, self.breakpoints, floors, values)
        if np.ndim(values) == 1:
            return alloc[0], pay[0]
        return alloc, pay

    def to_dict(self) -> dict[str, Any]:
        return {
            "T": self.T,
            "m": self.m,
            "index": self.index,
            "breakpoints": self.breakpoints.tolist(),
            "surrogates": self.psi.tolist(),
            "inverted_rows": self.inverted_rows.tolist(),
            "degenerate": self.degenerate,
            **self.meta,
        }


def build_sample_mechanism(
    samples: SampleSet,
    env: StageEnvironment,
    eps: float,
    *,
    c_T: float = 1.0,
    c_m: float | None = None,
    index: str = "jm",
) -> EstimatedMechanism:
    """Assemble the sample-based mechanism.

    Without ``c_m`` the number of samples per bin ``m`` is the largest one
    the supplied samples allow, ``floor((N + 1) / T)`` for the smallest
    population sample size ``N``.
    """
    n = samples.n
    if env.n != n:
        raise InvalidParameterError("environment and samples disagree on n")
    budget = min(len(v) for v in samples.values)
    T, m = sample_schedule(n, eps, c_T, c_m, budget=budget)
    bp = estimate_breakpoints(samples.values, T, m, index)
    psi = estimate_surrogates(bp, T)
    meta = {"eps": eps, "n": n, "precondition_eps": precondition_eps(n, T), "seed": samples.seed}
    return EstimatedMechanism(bp, psi, env, T, m, index, meta)


@dataclass(frozen=True)
class PropagationResult:
    rev_true: float
    rev_hat: float
    bound: float
    se: float
    gamma: np.ndarray

    @property
    def holds(self) -> bool:
        return self.rev_hat >= self.bound - 3.0 * self.se


def binned_virtual_surplus(psi_credit: np.ndarray, psi_used: np.ndarray, env: StageEnvironment,
                           bins: np.ndarray) -> np.ndarray:
    """Per-profile virtual surplus when allocating on ``psi_used`` and crediting ``psi_credit``."""
    rows = np.arange(psi_used.shape[0])
    x = env.surplus_max_batch(psi_used[rows[None, :], bins - 1])
    return np.sum(psi_credit[rows[None, :], bins - 1] * x, axis=1)


def binned_revenue_exact(psi_true: np.ndarray, psi_used: np.ndarray, env: StageEnvironment) -> float:
    """Expected revenue of uniform-bin surrogate binning by enumerating all ``T^n`` bin profiles."""
    n, T = psi_true.shape
    bins = np.stack(np.unravel_index(np.arange(T**n), (T,) * n), axis=1) + 1
    return float(binned_virtual_surplus(psi_true, psi_used, env, bins).mean())


def propagation_audit(
    psi_true: np.ndarray,
    psi_hat: np.ndarray,
    env: StageEnvironment,
    d_list: Sequence[QuantileDistribution] | None,
    trials: int,
    rng: np.random.Generator,
) -> PropagationResult:
    """Monte Carlo check of ``Rev(psi_hat) >= Rev(psi) - 2 sum_i gamma_i``.

    Both mechanisms bin agents on the true equal-probability bins and are
    scored by the true conditional virtual value of each bin (``psi_true``),
    sharing the same bin draws. ``d_list`` is only used to check that
    ``psi_true`` matches the distributions when given.
    """
    psi_true = np.atleast_2d(np.asarray(psi_true, dtype=float))
    psi_hat = np.atleast_2d(np.asarray(psi_hat, dtype=float))
    n, T = psi_true.shape
    if d_list is not None:
        for i, d in enumerate(d_list):
            ref = bin_surrogates(d, np.arange(1, T) / T, "revenue")
            if not np.allclose(ref, psi_true[i], atol=1e-8):
                raise InvalidParameterError(f"psi_true row {i} does not match its distribution")
    gamma = np.max(np.abs(psi_hat - psi_true), axis=1)
    bins = rng.integers(1, T + 1, size=(trials, n))
    a = binned_virtual_surplus(psi_true, psi_true, env, bins)
    b = binned_virtual_surplus(psi_true, psi_hat, env, bins)
    diff = b - a
    se = float(np.std(diff, ddof=1) / math.sqrt(trials)) if trials > 1 else math.inf
    return PropagationResult(float(a.mean()), float(b.mean()), float(a.mean() - 2 * gamma.sum()), se, gamma)
