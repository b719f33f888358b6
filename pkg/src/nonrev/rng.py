"""Seeded substreams and mergeable Monte Carlo accumulators."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


def substream(seed: int, index: int) -> np.random.Generator:
    """Independent generator for work item ``index`` under master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(index),)))


def child_seed(seed: int, index: int) -> int:
    """A derived integer seed, for APIs that want an int rather than a Generator."""
    ss = np.random.SeedSequence(seed, spawn_key=(int(index),))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass
class RunningStats:
    """Multivariate Welford accumulator (mean vector and co-moment matrix).

    ``merge`` is Chan's parallel update, so partial accumulators from
    independent chunks combine in any grouping.
    """

    dim: int = 1
    count: int = 0
    mean: np.ndarray = field(default=None)  # type: ignore[assignment]
    comoment: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.comoment is None:
            self.comoment = np.zeros((self.dim, self.dim))

    def update(self, x) -> "RunningStats":
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        if len(x) == 0:
            return self
        batch = RunningStats(self.dim, len(x), x.mean(axis=0))
        d = x - batch.mean
        batch.comoment = d.T @ d
        return self.merge(batch)

    def merge(self, other: "RunningStats") -> "RunningStats":
        if other.count == 0:
            return self
        if self.count == 0:
            self.count, self.mean, self.comoment = other.count, other.mean.copy(), other.comoment.copy()
            return self
        n = self.count + other.count
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.count / n)
        self.comoment = self.comoment + other.comoment + np.outer(delta, delta) * (self.count * other.count / n)
        self.count = n
        return self

    @property
    def var(self) -> np.ndarray:
        if self.count < 2:
            return np.zeros(self.dim)
        return np.diag(self.comoment) / (self.count - 1)

    @property
    def cov(self) -> np.ndarray:
        if self.count < 2:
            return np.zeros((self.dim, self.dim))
        return self.comoment / (self.count - 1)

    @property
    def se(self) -> np.ndarray:
        if self.count == 0:
            return np.full(self.dim, np.inf)
        return np.sqrt(self.var / self.count)

    def ratio(self, num: int = 0, den: int = 1) -> tuple[float, float]:
        """Ratio of two means with a delta-method standard error."""
        a, b = self.mean[num], self.mean[den]
        if b == 0:
            return math.nan, math.nan
        c = self.cov / max(self.count, 1)
        r = a / b
        var = (c[num, num] - 2 * r * c[num, den] + r * r * c[den, den]) / (b * b)
        return float(r), float(math.sqrt(max(var, 0.0)))

    def diff(self, a: int = 0, b: int = 1) -> tuple[float, float]:
        """Difference of two means with its standard error."""
        c = self.cov / max(self.count, 1)
        var = c[a, a] + c[b, b] - 2 * c[a, b]
        return float(self.mean[a] - self.mean[b]), float(math.sqrt(max(var, 0.0)))


TrialFn = Callable[[np.random.Generator, int], np.ndarray]


def run_trials(
    fn: TrialFn,
    trials: int,
    seed: int,
    *,
    chunk: int = 10_000,
    workers: int = 1,
    dim: int | None = None,
) -> RunningStats:
    """Evaluate ``fn(rng, size)`` over ``trials`` draws split into seeded chunks.

    ``fn`` returns a ``(size,)`` or ``(size, dim)`` array of per-trial
    outcomes. Chunk ``c`` always uses ``substream(seed, c)`` and chunks merge in
    index order, so the result does not depend on ``workers``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    sizes = [min(chunk, trials - s) for s in range(0, trials, chunk)]

    def job(c: int) -> np.ndarray:
        out = np.asarray(fn(substream(seed, c), sizes[c]), dtype=float)
        return out.reshape(sizes[c], -1)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, range(len(sizes))))
    else:
        parts = [job(c) for c in range(len(sizes))]
    stats = RunningStats(dim or parts[0].shape[1])
    for p in parts:
        stats.merge(RunningStats(stats.dim).update(p))
    return stats
