"""Value distributions represented in quantile space.

A distribution is described by its value function ``v(q)``, where the
quantile ``q = 1 - F(v)`` is the probability that a fresh draw exceeds ``v``.
Everything downstream (revenue curves, virtual values, order statistics,
binning) is quantile-native, so sampling reduces to evaluating ``v`` at a
uniform draw.

Convention: ``v(1)`` is the infimum of the support.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy import optimize, stats

from .errors import (
    DivergentIntegralError,
    EmptyIntervalError,
    InvalidParameterError,
    NonDifferentiablePointError,
)
from .quadrature import adaptive_simpson

ArrayFn = Callable[[np.ndarray], np.ndarray]

# Smallest quantile ever fed to a value function that is infinite at 0.
Q_FLOOR = 1e-300
_KINK_TOL = 1e-12


def _as_quantile(q, *, open_interval: bool = False) -> np.ndarray:
    arr = np.asarray(q, dtype=float)
    lo_bad = arr <= 0.0 if open_interval else arr < 0.0
    hi_bad = arr >= 1.0 if open_interval else arr > 1.0
    if np.any(lo_bad | hi_bad | np.isnan(arr)):
        bounds = "(0, 1)" if open_interval else "[0, 1]"
        raise InvalidParameterError(f"quantile outside {bounds}: {q!r}")
    return arr


def _scalar_or_array(arr: np.ndarray, like):
    return float(arr) if np.ndim(like) == 0 else arr


@dataclass(frozen=True)
class OrderStatSpec:
    """The ``j``-th highest of ``T`` i.i.d. draws (``j = 1`` is the maximum)."""

    j: int
    T: int

    def __post_init__(self):
        if not (1 <= self.j <= self.T):
            raise InvalidParameterError(f"need 1 <= j <= T, got j={self.j}, T={self.T}")


@dataclass(frozen=True, eq=False)
class QuantileDistribution:
    """A value distribution given by a weakly decreasing value function of quantile.

    ``virtual_fn`` and ``revenue_fn`` are optional closed forms; without them
    virtual values are finite differences of ``R(q) = q v(q)``. ``kinks`` are
    quantiles where ``R`` is not differentiable. ``tail_exponent`` is the
    ``gamma`` in ``v(q) ~ q**-gamma`` near 0 (0 for bounded or logarithmic
    tails) and is what order-statistic expectations use to detect divergence.
    """

    value_fn: ArrayFn
    label: str
    support: tuple[float, float] | None = None
    virtual_fn: ArrayFn | None = None
    revenue_fn: ArrayFn | None = None
    quantile_fn: ArrayFn | None = None
    kinks: tuple[float, ...] = ()
    regular: bool = False
    tail_exponent: float = 0.0
    params: Mapping[str, Any] = field(default_factory=dict)

    def __repr__(self) -> str:
        return f"QuantileDistribution({self.label!r})"

    # -- pointwise quantities ------------------------------------------------

    def value_at(self, q):
        arr = _as_quantile(q)
        return _scalar_or_array(np.asarray(self.value_fn(arr), dtype=float), q)

    def revenue_curve(self, q):
        """``R(q) = q v(q)``, with ``R(0) = 0`` taken as a limit."""
        arr = _as_quantile(q)
        return _scalar_or_array(self._revenue(arr), q)

    def _revenue(self, arr: np.ndarray) -> np.ndarray:
        if self.revenue_fn is not None:
            return np.asarray(self.revenue_fn(arr), dtype=float)
        safe = np.maximum(arr, Q_FLOOR)
        out = safe * np.asarray(self.value_fn(safe), dtype=float)
        return np.where(arr <= 0.0, 0.0, out)

    def virtual_value_at(self, q, step: float = 1e-6):
        """``phi(q) = R'(q)``; closed form when registered, else a central difference."""
        arr = _as_quantile(q, open_interval=True)
        for k in self.kinks:
            if np.any(np.abs(arr - k) <= _KINK_TOL):
                raise NonDifferentiablePointError(f"{self.label}: R has a kink at q={k}")
        if self.virtual_fn is not None:
            out = np.asarray(self.virtual_fn(arr), dtype=float)
        else:
            lo = np.maximum(arr - step, 0.0)
            hi = np.minimum(arr + step, 1.0)
            out = (self._revenue(hi) - self._revenue(lo)) / (hi - lo)
        return _scalar_or_array(out, q)

    def _phi_clamped(self, arr: np.ndarray) -> np.ndarray:
        # evaluation for Monte Carlo draws; kinks are measure-zero and ignored
        safe = np.clip(arr, Q_FLOOR, 1.0 - 1e-12)
        if self.virtual_fn is not None:
            return np.asarray(self.virtual_fn(safe), dtype=float)
        h = 1e-6
        lo = np.maximum(safe - h, 0.0)
        hi = np.minimum(safe + h, 1.0)
        return (self._revenue(hi) - self._revenue(lo)) / (hi - lo)

    def score(self, q, objective: str) -> np.ndarray:
        """Per-draw contribution to welfare (value) or revenue (virtual value)."""
        arr = np.asarray(q, dtype=float)
        if objective == "welfare":
            return np.asarray(self.value_fn(np.maximum(arr, Q_FLOOR)), dtype=float)
        if objective == "revenue":
            return self._phi_clamped(arr)
        raise InvalidParameterError(f"unknown objective {objective!r}")

    def quantile_of(self, v):
        """``P(value > v)``, the quantile at which the value function crosses ``v``."""
        varr = np.asarray(v, dtype=float)
        if self.quantile_fn is not None:
            out = np.clip(np.asarray(self.quantile_fn(varr), dtype=float), 0.0, 1.0)
            return _scalar_or_array(out, v)
        lo = np.zeros_like(varr)
        hi = np.ones_like(varr)
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            above = np.asarray(self.value_fn(np.maximum(mid, Q_FLOOR))) > varr
            lo = np.where(above, mid, lo)
            hi = np.where(above, hi, mid)
        return _scalar_or_array(0.5 * (lo + hi), v)

    @property
    def sup_value(self) -> float:
        """Largest value in the support, or the value at ``Q_FLOOR`` if unbounded."""
        top = float(self.value_fn(np.asarray(0.0)))
        if math.isfinite(top):
            return top
        return float(self.value_fn(np.asarray(Q_FLOOR)))

    # -- integrals -----------------------------------------------------------

    def cumulative_value(self, q, rtol: float = 1e-9) -> float:
        """``V(q) = integral_0^q v(z) dz``."""
        q = float(_as_quantile(q))
        if self.tail_exponent >= 1.0:
            raise DivergentIntegralError(f"{self.label}: cumulative value diverges at q=0")
        f = lambda z: np.asarray(self.value_fn(np.maximum(z, Q_FLOOR)), dtype=float)
        return adaptive_simpson(f, 0.0, q, rtol=rtol, breakpoints=self.kinks)

    def mean(self, rtol: float = 1e-9) -> float:
        return self.cumulative_value(1.0, rtol=rtol)

    def expected_order_stat(self, spec: OrderStatSpec, of: str = "value", rtol: float = 1e-9) -> float:
        """Expectation of the value (or virtual value) of the ``j``-th highest of ``T`` draws.

        The ``j``-th highest draw sits at the ``j``-th smallest quantile, which
        is Beta(j, T - j + 1) distributed. Virtual values are integrated by
        parts against ``R`` so that kinks and atoms never need a derivative.
        """
        j, T = spec.j, spec.T
        a, b = j, T - j + 1
        pts = list(self.kinks)
        if T > 1:
            pts += list(stats.beta.ppf([1e-12, 1e-6, 1e-3, 0.1, 0.5, 0.9, 0.999, 1 - 1e-6], a, b))
        if of == "value":
            if self.tail_exponent >= j:
                raise DivergentIntegralError(
                    f"{self.label}: E[v] of order statistic {j} of {T} diverges"
                )
            f = lambda q: (
                np.asarray(self.value_fn(np.maximum(q, Q_FLOOR)), dtype=float)
                * stats.beta.pdf(q, a, b)
            )
            return adaptive_simpson(f, 0.0, 1.0, rtol=rtol, breakpoints=pts)
        if of == "virtual_value":
            if not self.regular:
                raise InvalidParameterError(f"{self.label}: virtual-value order statistics need a regular distribution")
            boundary = T * float(self._revenue(np.asarray(1.0))) if j == T else 0.0

            def dpdf(q):
                out = np.zeros_like(q)
                if a > 1:
                    out += stats.beta.pdf(q, a - 1, b)
                if b > 1:
                    out -= stats.beta.pdf(q, a, b - 1)
                return (a + b - 1) * out

            f = lambda q: self._revenue(q) * dpdf(q)
            return boundary - adaptive_simpson(f, 0.0, 1.0, rtol=rtol, breakpoints=pts)
        raise InvalidParameterError(f"unknown order-statistic target {of!r}")

    def conditional_virtual_value(self, q_lo, q_hi):
        """Average virtual value over the quantile interval ``[q_lo, q_hi]``."""
        lo = _as_quantile(q_lo)
        hi = _as_quantile(q_hi)
        if np.any(lo >= hi):
            raise EmptyIntervalError(f"empty quantile interval [{q_lo}, {q_hi}]")
        out = (self._revenue(hi) - self._revenue(lo)) / (hi - lo)
        return _scalar_or_array(out, q_lo if np.ndim(q_lo) else q_hi)

    def monopoly_revenue(self) -> float:
        """``R* = max_q R(q)``."""
        grid = np.concatenate([np.linspace(0.0, 1.0, 4001), np.asarray(self.kinks, dtype=float)])
        vals = self._revenue(grid)
        i = int(np.argmax(vals))
        best = float(vals[i])
        lo, hi = max(0.0, grid[i] - 2.5e-4), min(1.0, grid[i] + 2.5e-4)
        res = optimize.minimize_scalar(
            lambda z: -float(self._revenue(np.asarray(z))), bounds=(lo, hi), method="bounded",
            options={"xatol": 1e-12},
        )
        return max(best, -float(res.fun))

    # -- sampling ------------------------------------------------------------

    def sample_quantiles(self, rng: np.random.Generator, size=None):
        return rng.random(size)

    def sample(self, rng: np.random.Generator, size=None):
        """Inverse-quantile sampling: draw ``q ~ U[0, 1]`` and return ``v(q)``."""
        q = self.sample_quantiles(rng, size)
        return self.value_at(q)

    # -- checks --------------------------------------------------------------

    def check(self, grid: int = 1000, tol: float = 1e-12) -> None:
        """Raise if the value function is not weakly decreasing, or a flagged-regular
        distribution has a non-concave revenue curve."""
        q = np.linspace(0.0, 1.0, grid)
        v = np.asarray(self.value_fn(np.maximum(q, Q_FLOOR)), dtype=float)
        if np.any(np.diff(v) > tol * np.maximum(1.0, np.abs(v[1:]))):
            raise InvalidParameterError(f"{self.label}: value function is not weakly decreasing")
        if self.regular and not revenue_is_concave(self, grid):
            raise InvalidParameterError(f"{self.label}: flagged regular but R is not concave")


def revenue_is_concave(d: QuantileDistribution, grid: int = 1000, tol: float = 1e-9) -> bool:
    q = np.linspace(0.0, 1.0, grid)
    r = d._revenue(q)
    second = r[2:] - 2.0 * r[1:-1] + r[:-2]
    return bool(np.all(second <= tol * max(1.0, float(np.max(np.abs(r))))))


# -- built-in families ---------------------------------------------------------


def uniform(lo: float = 0.0, hi: float = 1.0) -> QuantileDistribution:
    if not hi > lo >= 0.0:
        raise InvalidParameterError(f"uniform needs 0 <= lo < hi, got [{lo}, {hi}]")
    w = hi - lo
    return QuantileDistribution(
        value_fn=lambda q: hi - w * q,
        label=f"uniform[{lo:g},{hi:g}]",
        support=(lo, hi),
        virtual_fn=lambda q: hi - 2.0 * w * q,
        revenue_fn=lambda q: q * (hi - w * q),
        quantile_fn=lambda v: (hi - v) / w,
        regular=True,
        params={"lo": lo, "hi": hi},
    )


def exponential(rate: float = 1.0) -> QuantileDistribution:
    if rate <= 0:
        raise InvalidParameterError("exponential rate must be positive")

    def value(q):
        with np.errstate(divide="ignore"):
            return -np.log(q) / rate

    def revenue(q):
        safe = np.maximum(q, Q_FLOOR)
        return np.where(q <= 0.0, 0.0, -safe * np.log(safe) / rate)

    return QuantileDistribution(
        value_fn=value,
        label=f"exponential({rate:g})",
        support=(0.0, math.inf),
        virtual_fn=lambda q: (-np.log(q) - 1.0) / rate,
        revenue_fn=revenue,
        quantile_fn=lambda v: np.exp(-rate * np.maximum(v, 0.0)),
        regular=True,
        params={"rate": rate},
    )


def equal_revenue(q_min: float = 0.01) -> QuantileDistribution:
    """``v(q) = 1/q`` truncated to ``1/q_min`` on ``[0, q_min]``.

    ``q_min = 0`` gives the untruncated distribution, whose mean and top
    order statistic are infinite.
    """
    if not 0.0 <= q_min < 1.0:
        raise InvalidParameterError("q_min must lie in [0, 1)")

    if q_min > 0:
        value = lambda q: 1.0 / np.maximum(q, q_min)
        revenue = lambda q: np.minimum(q / q_min, 1.0)
        virtual = lambda q: np.where(q < q_min, 1.0 / q_min, 0.0)
        top = 1.0 / q_min
        kinks: tuple[float, ...] = (q_min,)
        tail = 0.0
    else:
        def value(q):
            with np.errstate(divide="ignore"):
                return 1.0 / q
        revenue = lambda q: np.where(q > 0.0, 1.0, 0.0)
        virtual = lambda q: np.zeros_like(q)
        top = math.inf
        kinks = ()
        tail = 1.0

    return QuantileDistribution(
        value_fn=value,
        label=f"equal_revenue(q_min={q_min:g})",
        support=(1.0, top),
        virtual_fn=virtual,
        revenue_fn=revenue,
        quantile_fn=lambda v: np.where(v < top, np.minimum(1.0, 1.0 / np.maximum(v, 1e-300)), 0.0),
        kinks=kinks,
        regular=q_min > 0,
        tail_exponent=tail,
        params={"q_min": q_min},
    )


def make_worst_case(kind: str, k: int, n: int) -> QuantileDistribution:
    """Worst-case distributions for top-k-of-n versus k/n price posting.

    ``welfare``: mass ``k/n`` at value ``n/k``, the rest at 0 (so ``V(k/n) = 1``).
    ``revenue``: triangular revenue curve with apex ``(k/n, 1)``.
    """
    if not (isinstance(k, (int, np.integer)) and isinstance(n, (int, np.integer))) or not 1 <= k <= n - 1:
        raise InvalidParameterError(f"need integers 1 <= k <= n-1, got k={k}, n={n}")
    c = k / n
    top = n / k
    if kind == "welfare":
        return QuantileDistribution(
            value_fn=lambda q: np.where(q <= c, top, 0.0),
            label=f"worst_case(welfare,k={k},n={n})",
            support=(0.0, top),
            virtual_fn=lambda q: np.where(q < c, top, 0.0),
            revenue_fn=lambda q: np.where(q <= c, top * q, 0.0),
            quantile_fn=lambda v: np.where(v < top, np.where(v < 0.0, 1.0, c), 0.0),
            kinks=(c,),
            regular=False,
            params={"kind": kind, "k": k, "n": n},
        )
    if kind == "revenue":
        down = n / (n - k)

        def value(q):
            safe = np.maximum(q, Q_FLOOR)
            return np.where(q <= c, top, down * (1.0 - safe) / safe)

        return QuantileDistribution(
            value_fn=value,
            label=f"worst_case(revenue,k={k},n={n})",
            support=(0.0, top),
            virtual_fn=lambda q: np.where(q < c, top, -down),
            revenue_fn=lambda q: np.where(q <= c, top * q, down * (1.0 - q)),
            # v = down (1-q)/q  <=>  q = down / (v + down)
            quantile_fn=lambda v: np.where(v < top, np.minimum(1.0, down / (np.maximum(v, 0.0) + down)), 0.0),
            kinks=(c,),
            regular=True,
            params={"kind": kind, "k": k, "n": n},
        )
    raise InvalidParameterError(f"unknown worst-case kind {kind!r}")


def piecewise_value(breakpoints: Sequence[Sequence[float]]) -> QuantileDistribution:
    """Value function linearly interpolated through ``(q, v)`` points covering ``[0, 1]``."""
    pts = sorted((float(q), float(v)) for q, v in breakpoints)
    qs = np.array([p[0] for p in pts])
    vs = np.array([p[1] for p in pts])
    if len(qs) < 2 or qs[0] != 0.0 or qs[-1] != 1.0:
        raise InvalidParameterError("piecewise_value breakpoints must start at q=0 and end at q=1")
    if np.any(np.diff(qs) <= 0) or np.any(np.diff(vs) > 0) or np.any(vs < 0):
        raise InvalidParameterError("piecewise_value needs increasing q and non-increasing, non-negative v")
    d = QuantileDistribution(
        value_fn=lambda q: np.interp(q, qs, vs),
        label="piecewise_value",
        support=(float(vs[-1]), float(vs[0])),
        kinks=tuple(float(q) for q in qs[1:-1]),
        params={"breakpoints": [list(p) for p in pts]},
    )
    regular = revenue_is_concave(d, 2001)
    return QuantileDistribution(**{**d.__dict__, "regular": regular})


def from_spec(spec: Mapping[str, Any]) -> QuantileDistribution:
    """Build a distribution from a config mapping such as ``{"name": "uniform", "lo": 0, "hi": 2}``."""
    spec = dict(spec)
    name = spec.pop("name", None) or spec.pop("kind_name", None)
    builders = {
        "uniform": uniform,
        "exponential": exponential,
        "equal_revenue": equal_revenue,
        "piecewise_value": piecewise_value,
    }
    if name == "worst_case":
        return make_worst_case(spec["kind"], int(spec["k"]), int(spec["n"]))
    if name not in builders:
        raise InvalidParameterError(f"unknown distribution {name!r}")
    try:
        return builders[name](**spec)
    except TypeError as exc:
        raise InvalidParameterError(f"bad parameters for {name}: {exc}") from None
