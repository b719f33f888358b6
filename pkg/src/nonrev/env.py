"""Stage feasibility environments and exact surplus maximization.

An environment is a set system X of 0/1 allocation vectors over n agents
(not necessarily downward closed). Small environments are materialized as an
allocation matrix so that surplus maximization over many weight profiles is a
single matrix product. Position environments are the exception: they assign
fractional service by assortative matching and are never enumerated.

Ties between allocations of equal surplus go to the allocation whose sorted
tuple of winner indices is lexicographically smallest; in particular the
empty allocation beats any non-empty one of equal surplus, and among
single-winner allocations the lowest index wins.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import InvalidParameterError, NotAWinnerError, TooLargeError

DEFAULT_BUDGET = 2**20
TIE_RTOL = 1e-12


def _winner_key(row: np.ndarray) -> tuple[int, ...]:
    return tuple(int(i) for i in np.flatnonzero(row))


def _sorted_allocations(rows: Iterable[Sequence[int]], n: int) -> np.ndarray:
    mat = np.asarray(list(rows), dtype=np.int8).reshape(-1, n)
    if mat.size and not np.all((mat == 0) | (mat == 1)):
        raise InvalidParameterError("allocations must be 0/1 vectors")
    uniq = {_winner_key(r): r for r in mat}
    keys = sorted(uniq)
    return np.array([uniq[k] for k in keys], dtype=np.int8).reshape(len(keys), n)


@dataclass(frozen=True, eq=False)
class StageEnvironment:
    """Feasible stage allocations for ``n`` agents.

    ``allocations`` is an ``(A, n)`` 0/1 matrix ordered by winner tuple, or
    ``None`` for position environments, which carry ``position_weights``.
    """

    n: int
    kind: str
    allocations: np.ndarray | None = None
    position_weights: np.ndarray | None = None
    params: Mapping[str, Any] = field(default_factory=dict)

    def __repr__(self) -> str:
        size = "assortative" if self.allocations is None else f"{len(self.allocations)} allocations"
        return f"StageEnvironment({self.kind}, n={self.n}, {size})"

    # -- constructors --------------------------------------------------------

    @classmethod
    def single_item(cls, n: int) -> "StageEnvironment":
        rows = [np.zeros(n, dtype=int)] + [np.eye(n, dtype=int)[i] for i in range(n)]
        return cls(n, "single_item", _sorted_allocations(rows, n))

    @classmethod
    def k_unit(cls, n: int, k: int, exact: bool = False, budget: int = DEFAULT_BUDGET) -> "StageEnvironment":
        """``k`` identical units; ``exact=True`` gives the non-downward-closed
        variant in which exactly ``k`` agents must be served."""
        if not 0 <= k <= n:
            raise InvalidParameterError(f"k_unit needs 0 <= k <= n, got k={k}, n={n}")
        sizes = [k] if exact else range(k + 1)
        count = sum(math.comb(n, s) for s in sizes)
        if count > budget:
            raise TooLargeError(f"k_unit({k}) over {n} agents has {count} allocations > budget {budget}")
        rows = []
        for s in sizes:
            for win in itertools.combinations(range(n), s):
                r = np.zeros(n, dtype=int)
                r[list(win)] = 1
                rows.append(r)
        return cls(n, "k_unit", _sorted_allocations(rows, n), params={"k": k, "exact": exact})

    @classmethod
    def position(cls, weights: Sequence[float]) -> "StageEnvironment":
        w = np.asarray(weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise InvalidParameterError("position weights must be a non-empty vector")
        if np.any(np.diff(w) > 0) or np.any(w < 0) or np.any(w > 1):
            raise InvalidParameterError("position weights must be weakly decreasing in [0, 1]")
        return cls(len(w), "position", None, w, params={"weights": w.tolist()})

    @classmethod
    def single_minded(cls, items: int, bundles: Sequence[Iterable[int]], budget: int = DEFAULT_BUDGET) -> "StageEnvironment":
        """Agent ``i`` wants bundle ``bundles[i]`` (1-based item labels in ``1..items``).

        Feasible winner sets are the independent sets of the bundle-conflict graph.
        """
        sets = [frozenset(int(x) for x in b) for b in bundles]
        for s in sets:
            if not s or min(s) < 1 or max(s) > items:
                raise InvalidParameterError(f"bundle {sorted(s)} is not a non-empty subset of 1..{items}")
        n = len(sets)
        masks = [sum(1 << (x - 1) for x in s) for s in sets]
        rows: list[np.ndarray] = []

        def grow(start: int, used: int, chosen: list[int]) -> None:
            if len(rows) >= budget:
                raise TooLargeError(f"single_minded enumeration exceeds budget {budget}")
            r = np.zeros(n, dtype=int)
            r[chosen] = 1
            rows.append(r)
            for i in range(start, n):
                if not masks[i] & used:
                    grow(i + 1, used | masks[i], chosen + [i])

        grow(0, 0, [])
        params = {"items": items, "bundles": [sorted(s) for s in sets]}
        return cls(n, "single_minded", _sorted_allocations(rows, n), params=params)

    @classmethod
    def explicit(cls, allocations: Sequence[Sequence[int]], max_agents: int = 20) -> "StageEnvironment":
        rows = [list(a) for a in allocations]
        if not rows:
            raise InvalidParameterError("explicit environment needs at least one allocation")
        n = len(rows[0])
        if n > max_agents:
            raise TooLargeError(f"explicit environments are limited to {max_agents} agents")
        if any(len(r) != n for r in rows):
            raise InvalidParameterError("explicit allocations have inconsistent lengths")
        return cls(n, "explicit", _sorted_allocations(rows, n))

    @classmethod
    def from_spec(cls, spec: Mapping[str, Any], n: int | None = None) -> "StageEnvironment":
        """Build from a config mapping, e.g. ``{"name": "k_unit", "k": 2}``."""
        spec = dict(spec)
        name = spec.pop("name", None)
        try:
            if name == "single_item":
                return cls.single_item(int(spec.get("n", n)))
            if name == "k_unit":
                return cls.k_unit(int(spec.get("n", n)), int(spec["k"]), bool(spec.get("exact", False)))
            if name == "position":
                return cls.position(spec["weights"])
            if name == "single_minded":
                return cls.single_minded(int(spec["items"]), spec["bundles"])
            if name == "explicit":
                return cls.explicit(spec["allocations"])
        except (KeyError, TypeError) as exc:
            raise InvalidParameterError(f"bad environment spec {name!r}: {exc}") from None
        raise InvalidParameterError(f"unknown environment {name!r}")

    # -- surplus maximization ------------------------------------------------

    def _check_weights(self, weights) -> np.ndarray:
        w = np.asarray(weights, dtype=float)
        if w.shape[-1] != self.n:
            raise InvalidParameterError(f"expected {self.n} weights, got shape {w.shape}")
        return w

    def surplus_max(self, weights) -> np.ndarray:
        """Feasible allocation maximizing ``sum_i weights_i x_i``."""
        w = self._check_weights(weights)
        return self.surplus_max_batch(w[None, :])[0]

    def surplus_max_batch(self, weights: np.ndarray) -> np.ndarray:
        """Row-wise ``surplus_max`` over an ``(m, n)`` weight matrix."""
        w = self._check_weights(weights)
        if w.ndim != 2:
            raise InvalidParameterError("batch weights must be a 2-d array")
        if self.allocations is None:
            order = np.argsort(-w, axis=1, kind="stable")
            out = np.empty_like(w)
            np.put_along_axis(out, order, np.broadcast_to(self.position_weights, w.shape), axis=1)
            return out
        A = self.allocations
        idx = self._best_index(w @ A.T.astype(float))
        return A[idx].astype(float)

    @staticmethod
    def _best_index(scores: np.ndarray) -> np.ndarray:
        best = scores.max(axis=1, keepdims=True)
        tol = TIE_RTOL * np.maximum(1.0, np.abs(best))
        return np.argmax(scores >= best - tol, axis=1)

    def surplus(self, weights, allocation) -> float:
        return float(np.dot(self._check_weights(weights), np.asarray(allocation, dtype=float)))

    def is_feasible(self, allocation) -> bool:
        x = np.asarray(allocation)
        if self.allocations is None:
            return bool(np.allclose(np.sort(x)[::-1], self.position_weights))
        return bool(np.any(np.all(self.allocations == x.astype(np.int8), axis=1)))

    # -- critical values -----------------------------------------------------

    def threshold_payment(self, weights, winner: int, method: str = "exact", tol: float = 1e-9) -> float:
        """Smallest weight for ``winner`` (others fixed) at which it is still served.

        ``method="exact"`` compares the best allocations with and without the
        winner; ``method="bisect"`` searches over the winner's weight. Returns
        ``-inf`` when every feasible allocation serves the winner.
        """
        w = self._check_weights(weights).astype(float)
        if self.allocations is None:
            raise InvalidParameterError("threshold payments are defined for 0/1 environments only")
        if not 0 <= winner < self.n:
            raise InvalidParameterError(f"agent index {winner} out of range")
        if self.surplus_max(w)[winner] < 0.5:
            raise NotAWinnerError(f"agent {winner} is not served at weights {w.tolist()}")
        if method == "exact":
            mask = np.zeros((1, self.n), dtype=bool)
            mask[0, winner] = True
            return float(self.threshold_payment_batch(w[None, :], mask)[0, winner])
        if method == "bisect":
            return self._threshold_bisect(w, winner, tol)
        raise InvalidParameterError(f"unknown threshold method {method!r}")

    def _threshold_bisect(self, w: np.ndarray, winner: int, tol: float) -> float:
        def served(b: float) -> bool:
            trial = w.copy()
            trial[winner] = b
            return self.surplus_max(trial)[winner] > 0.5

        hi = float(w[winner])
        step = max(1.0, float(np.sum(np.abs(w))))
        lo = hi - step
        while served(lo):
            step *= 2.0
            lo = hi - step
            if step > 1e15:
                return -math.inf
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if served(mid):
                hi = mid
            else:
                lo = mid
        return hi

    def threshold_payment_batch(self, weights: np.ndarray, served: np.ndarray) -> np.ndarray:
        """Critical weights for every served agent of every row; ``nan`` elsewhere."""
        w = self._check_weights(weights).astype(float)
        if self.allocations is None:
            raise InvalidParameterError("threshold payments are defined for 0/1 environments only")
        A = self.allocations.astype(bool)
        scores = w @ A.T.astype(float)
        out = np.full(w.shape, np.nan)
        for i in range(self.n):
            rows = np.flatnonzero(served[:, i])
            if rows.size == 0:
                continue
            has = A[:, i]
            s = scores[rows]
            without = np.where(has, -np.inf, s).max(axis=1) if (~has).any() else np.full(rows.size, -np.inf)
            with_rest = np.where(has, s - w[rows, i : i + 1], -np.inf).max(axis=1)
            out[rows, i] = without - with_rest
        return out
