"""Top-k versus price-posting approximation quantities and their oracles.

Ratio oracles integrate cumulative value ``V`` and the revenue curve ``R``
against ``-x'`` rather than values or virtual values against ``x``, so
distributions with atoms never need a derivative. The printed closed-form
loss sums are evaluated verbatim (exact rationals) purely for comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .dist import Q_FLOOR, QuantileDistribution, make_worst_case
from .errors import InvalidParameterError
from .quadrature import adaptive_simpson, adaptive_simpson_cells

# -- the top-k rule and printed expressions ------------------------------------


def _check_kn(k: int, n: int, allow_n: bool = False) -> None:
    hi = n if allow_n else n - 1
    if not (isinstance(k, (int, np.integer)) and isinstance(n, (int, np.integer))) or not 1 <= k <= hi:
        raise InvalidParameterError(f"need 1 <= k <= {'n' if allow_n else 'n-1'}, got k={k}, n={n}")


def topk_rule(k: int, n: int, q):
    """Probability that an agent at quantile ``q`` is among the ``k`` highest of ``n``."""
    _check_kn(k, n, allow_n=True)
    q = np.asarray(q, dtype=float)
    out = stats.binom.cdf(k - 1, n - 1, q) if k < n else np.ones_like(q)
    return float(out) if out.ndim == 0 else out


def topk_rule_slope(k: int, n: int, q):
    """``-x'(q)`` for the top-k rule: ``(n-1) C(n-2, k-1) q^(k-1) (1-q)^(n-1-k)``."""
    _check_kn(k, n, allow_n=True)
    q = np.asarray(q, dtype=float)
    if k == n:
        return np.zeros_like(q)
    return (n - 1) * stats.binom.pmf(k - 1, n - 2, q)


def rho(k: int, n: int) -> float:
    """Printed Stirling form of the welfare fraction."""
    _check_kn(k, n)
    return 1.0 - math.sqrt(n / (2.0 * math.pi * k * (n - k)))


def eta(k: int, n: int) -> float:
    """Printed Stirling form of the revenue fraction (negative, hence vacuous, at small scale)."""
    _check_kn(k, n)
    return 1.0 - (1.0 / math.sqrt(k)) * (n / (n - k)) ** 1.5


def _binom_term(n: int, i: int, k: int) -> Fraction:
    return math.comb(n, i) * Fraction(k, n) ** i * Fraction(n - k, n) ** (n - i)


def _log_binom_term(n: int, i: int, k: int) -> float:
    return (math.lgamma(n + 1) - math.lgamma(i + 1) - math.lgamma(n - i + 1)
            + i * math.log(k / n) + (n - i) * math.log((n - k) / n))


def loss_w_exact(k: int, n: int, exact: bool = False):
    """The printed welfare loss sum ``1 - sum_{i<k} C(n,i)(k/n)^i((n-k)/n)^(n-i)(k-i)``."""
    _check_kn(k, n)
    if n <= 60:
        val = 1 - sum(_binom_term(n, i, k) * (k - i) for i in range(k))
        return val if exact else float(val)
    return 1.0 - sum(math.exp(_log_binom_term(n, i, k)) * (k - i) for i in range(k))


def loss_r_exact(k: int, n: int, exact: bool = False):
    """The printed revenue loss sum ``n/(k(n-k)) sum_{i<=k} C(n,i)(k/n)^i((n-k)/n)^(n-i)(k-i)``."""
    _check_kn(k, n)
    if n <= 60:
        val = Fraction(n, k * (n - k)) * sum(_binom_term(n, i, k) * (k - i) for i in range(k + 1))
        return val if exact else float(val)
    s = sum(math.exp(_log_binom_term(n, i, k)) * (k - i) for i in range(k + 1))
    return n / (k * (n - k)) * s


def printed_bound_w(k: int, n: int) -> float:
    """``C(n,k) (k/n)^k ((n-k)/n)^(n-k)``."""
    _check_kn(k, n)
    if n <= 60:
        return float(_binom_term(n, k, k))
    return math.exp(_log_binom_term(n, k, k))


def printed_bound_r(k: int, n: int) -> float:
    return n / (n - k) * printed_bound_w(k, n)


# -- quadrature oracles --------------------------------------------------------


def cumulative_value_array(d: QuantileDistribution, q, rtol: float = 1e-11) -> np.ndarray:
    """``V`` at many quantiles from one pass of per-cell quadrature."""
    q = np.asarray(q, dtype=float)
    flat = q.ravel()
    order = np.argsort(flat)
    pts = np.concatenate([[0.0], flat[order]])
    f = lambda z: np.asarray(d.value_fn(np.maximum(z, Q_FLOOR)), dtype=float)
    # include kinks as extra cell edges so each cell is smooth
    kinks = np.asarray([k for k in d.kinks if 0.0 < k < 1.0], dtype=float)
    edges = np.unique(np.concatenate([pts, kinks]))
    cells = adaptive_simpson_cells(f, edges, rtol=rtol, initial=2)
    cum = np.concatenate([[0.0], np.cumsum(cells)])
    vals = cum[np.searchsorted(edges, flat[order])]
    out = np.empty_like(flat)
    out[order] = vals
    return out.reshape(q.shape)


def _curve(d: QuantileDistribution, objective: str) -> Callable[[np.ndarray], np.ndarray]:
    if objective == "welfare":
        if d.tail_exponent >= 1:
            raise InvalidParameterError("welfare oracle needs a finite mean")
        return lambda q: cumulative_value_array(d, q)
    if objective == "revenue":
        if not d.regular:
            raise InvalidParameterError("revenue oracle needs a regular distribution")
        return lambda q: d._revenue(np.asarray(q, dtype=float))
    raise InvalidParameterError(f"unknown objective {objective!r}")


def rule_surplus(d: QuantileDistribution, x1: float, slope: Callable[[np.ndarray], np.ndarray],
                 objective: str, rtol: float = 1e-10, breakpoints: Sequence[float] = ()) -> float:
    """``E[g(q) x(q)] = x(1) G(1) + integral_0^1 G(q) (-x'(q)) dq`` with ``G`` = ``V`` or ``R``."""
    G = _curve(d, objective)
    pts = list(d.kinks) + list(breakpoints)
    tail = x1 * float(G(np.asarray([1.0]))[0]) if x1 else 0.0
    return tail + adaptive_simpson(lambda q: G(q) * slope(q), 0.0, 1.0, rtol=rtol, breakpoints=pts)


def price_posting_surplus(d: QuantileDistribution, k: int, n: int, objective: str) -> float:
    """Per-agent surplus of the ``k/n`` price posting: ``G(k/n)``."""
    G = _curve(d, objective)
    return float(G(np.asarray([k / n]))[0])


def topk_surplus(d: QuantileDistribution, k: int, n: int, objective: str, rtol: float = 1e-10) -> float:
    """Per-agent surplus of allocating the top ``k`` of ``n``."""
    x1 = 1.0 if k == n else 0.0
    return rule_surplus(d, x1, lambda q: topk_rule_slope(k, n, q), objective, rtol, breakpoints=(k / n,))


def oracle_topk_vs_price(d: QuantileDistribution, k: int, n: int, objective: str = "welfare",
                         rtol: float = 1e-10) -> float:
    """Top-k-of-n surplus divided by ``k/n`` price-posting surplus, by quadrature."""
    _check_kn(k, n, allow_n=True)
    den = price_posting_surplus(d, k, n, objective)
    if den == 0:
        raise ZeroDivisionError("price-posting surplus is zero")
    if k == n:
        return 1.0
    return topk_surplus(d, k, n, objective, rtol) / den


def monte_carlo_topk_vs_price(d: QuantileDistribution, k: int, n: int, objective: str, trials: int,
                              rng: np.random.Generator, chunk: int = 50_000) -> tuple[float, float]:
    """Literal simulation of ``n`` agents; returns ``(ratio, se)``.

    Welfare is the sum of the top ``k`` values. Revenue is that of the
    ``(k+1)``-st price auction, ``k`` times the ``(k+1)``-st highest value,
    so no virtual value is evaluated.
    """
    _check_kn(k, n)
    den = price_posting_surplus(d, k, n, objective)
    s1 = s2 = 0.0
    for start in range(0, trials, chunk):
        m = min(chunk, trials - start)
        v = np.sort(d.sample(rng, (m, n)), axis=1)[:, ::-1]
        if objective == "welfare":
            per = v[:, :k].sum(axis=1) / n
        else:
            per = k * v[:, k] / n
        s1 += per.sum()
        s2 += (per**2).sum()
    mean = s1 / trials
    var = max(s2 / trials - mean**2, 0.0) * trials / max(trials - 1, 1)
    return mean / den, math.sqrt(var / trials) / den


def mixture_ratio(d: QuantileDistribution, weight_deltas: Sequence[tuple[int, float]], n: int,
                  objective: str = "welfare") -> float:
    """A mixture of top-k rules against the same mixture of ``k/n`` price postings."""
    probs = np.array([p for _, p in weight_deltas], dtype=float)
    if np.any(probs < -1e-12) or abs(probs.sum() - 1.0) > 1e-9:
        raise InvalidParameterError("mixture probabilities must be non-negative and sum to 1")
    num = den = 0.0
    for k, p in weight_deltas:
        if p == 0:
            continue
        _check_kn(int(k), n, allow_n=True)
        num += p * (price_posting_surplus(d, k, n, objective) if k == n else topk_surplus(d, k, n, objective))
        den += p * price_posting_surplus(d, k, n, objective)
    return num / den


def weights_to_mixture(w_row: Sequence[float]) -> list[tuple[int, float]]:
    """Decompose a decreasing weight row into ``(j, w^j - w^(j+1))`` top-j components."""
    w = np.concatenate([np.asarray(w_row, dtype=float), [0.0]])
    return [(j + 1, float(w[j] - w[j + 1])) for j in range(len(w) - 1)]


def mixture_rule(w_row: Sequence[float], q) -> np.ndarray:
    """Interim allocation of rank-based weights as the mixture of top-j-of-T rules."""
    T = len(w_row)
    return sum(p * topk_rule(j, T, q) for j, p in weights_to_mixture(w_row))


# -- allocation rules and the inverse-sandwich lemma ---------------------------


@dataclass(frozen=True, eq=False)
class AllocationRuleFn:
    """A weakly decreasing allocation rule ``x: [0, 1] -> [0, 1]``, linear between grid points."""

    q: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if q.shape != x.shape or q[0] != 0.0 or q[-1] != 1.0 or np.any(np.diff(q) < 0):
            raise InvalidParameterError("rule grid must run from 0 to 1")
        if np.any(np.diff(x) > 1e-12) or np.any(x < -1e-12) or np.any(x > 1 + 1e-12):
            raise InvalidParameterError("allocation rule must be decreasing with values in [0, 1]")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "x", np.clip(x, 0.0, 1.0))

    @classmethod
    def from_function(cls, f: Callable[[np.ndarray], np.ndarray], grid: int = 4001) -> "AllocationRuleFn":
        q = np.linspace(0.0, 1.0, grid)
        return cls(q, np.minimum.accumulate(np.clip(np.asarray(f(q), dtype=float), 0.0, 1.0)))

    def __call__(self, q):
        # right-continuous at a repeated grid point, i.e. a downward step
        return np.interp(q, self.q, self.x)

    def inverse(self, z) -> np.ndarray:
        """``x^{-1}(z) = |{q : x(q) >= z}|``, the length of the served quantile range."""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        qs, xs = self.q, self.x
        # xs is decreasing, so the number of grid points with x >= z locates the last one
        idx = len(xs) - np.searchsorted(xs[::-1], z, side="left") - 1
        idx = np.clip(idx, 0, len(xs) - 1)
        nxt = np.minimum(idx + 1, len(xs) - 1)
        drop = xs[idx] - xs[nxt]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(drop > 0, (xs[idx] - z) / drop, 0.0)
        out = qs[idx] + t * (qs[nxt] - qs[idx])
        out = np.where(z <= xs[-1], 1.0, out)
        return np.where(z > xs[0], 0.0, out)

    def breakpoints(self) -> np.ndarray:
        return np.unique(self.x)


@dataclass(frozen=True)
class ApxResult:
    status: str  # "holds", "fails" or "hypothesis-violated"
    lhs: float
    rhs: float
    detail: str = ""

    @property
    def holds(self) -> bool:
        return self.status == "holds"


def virtual_surplus_of_rule(R: Callable[[np.ndarray], np.ndarray], rule: AllocationRuleFn,
                            rtol: float = 1e-10) -> float:
    """``E[phi x] = integral_0^1 R(x^{-1}(z)) dz`` (horizontal slicing)."""
    zs = [z for z in rule.breakpoints() if 0.0 < z < 1.0]
    return adaptive_simpson(lambda z: R(rule.inverse(z)), 0.0, 1.0, rtol=rtol, breakpoints=zs)


def lemma_apx_check(x_tilde: AllocationRuleFn, x_hat: AllocationRuleFn, alpha: float,
                    d_or_R, grid: int = 2001, tol: float = 1e-9) -> ApxResult:
    """Check ``E[phi x_hat] >= E[phi x_tilde] / alpha`` under the inverse sandwich.

    Hypotheses (verified on a grid first): ``alpha >= 1``,
    ``R(q/alpha) >= R(q)/alpha`` and
    ``x_tilde^{-1}(z) >= x_hat^{-1}(z) >= x_tilde^{-1}(z)/alpha``.
    ``d_or_R`` is a distribution or a cumulative virtual value callable.
    """
    if isinstance(d_or_R, QuantileDistribution):
        R = lambda q: d_or_R._revenue(np.asarray(q, dtype=float))
    else:
        R = lambda q: np.asarray(d_or_R(np.asarray(q, dtype=float)), dtype=float)
    if alpha < 1.0:
        return ApxResult("hypothesis-violated", math.nan, math.nan, "alpha must be >= 1")
    q = np.linspace(0.0, 1.0, grid)
    rq = R(q)
    if np.any(R(q / alpha) < rq / alpha - tol * np.maximum(1.0, np.abs(rq))):
        return ApxResult("hypothesis-violated", math.nan, math.nan, "R(q/alpha) < R(q)/alpha somewhere")
    z = np.linspace(0.0, 1.0, grid)[1:]
    ti, hi = x_tilde.inverse(z), x_hat.inverse(z)
    if np.any(hi > ti + tol) or np.any(hi < ti / alpha - tol):
        return ApxResult("hypothesis-violated", math.nan, math.nan, "inverse sandwich fails")
    lhs = virtual_surplus_of_rule(R, x_hat)
    rhs = virtual_surplus_of_rule(R, x_tilde) / alpha
    status = "holds" if lhs >= rhs - tol * max(1.0, abs(rhs)) else "fails"
    return ApxResult(status, lhs, rhs)


# -- identities ------------------------------------------------------------------


def step_rule_surplus(d: QuantileDistribution, cuts: Sequence[float], levels: Sequence[float]) -> tuple[float, float]:
    """Welfare of a decreasing step rule two ways.

    ``levels[s]`` holds on ``(cuts[s-1], cuts[s]]`` with ``cuts[-1] == 1``.
    Returns ``(sum of drops * V(cut), integral of x v)``.
    """
    cuts = np.asarray(cuts, dtype=float)
    levels = np.asarray(levels, dtype=float)
    drops = levels - np.concatenate([levels[1:], [0.0]])
    via_V = float(np.sum(drops * cumulative_value_array(d, cuts)))
    f = lambda z: np.asarray(d.value_fn(np.maximum(z, Q_FLOOR)), dtype=float)
    fine = np.unique(np.concatenate([[0.0], cuts, [k for k in d.kinks if 0 < k < 1]]))
    cells = adaptive_simpson_cells(f, fine, rtol=1e-12, initial=4)
    mids = 0.5 * (fine[:-1] + fine[1:])
    lvl = levels[np.clip(np.searchsorted(cuts, mids), 0, len(levels) - 1)]
    return via_V, float(np.sum(lvl * cells))


def unallocation_identity(d: QuantileDistribution, rule: AllocationRuleFn, rtol: float = 1e-11) -> tuple[float, float]:
    """``E[phi x]`` against ``E[phi] + E[-phi(1-q) y(q)]`` with ``y(q) = 1 - x(1-q)``."""
    phi = lambda q: d._phi_clamped(q)
    pts = sorted(set(list(rule.q[1:-1]) + list(d.kinks)))
    lhs = adaptive_simpson(lambda q: phi(q) * rule(q), 0.0, 1.0, rtol=rtol, breakpoints=pts)
    mean_phi = float(d.revenue_curve(1.0))
    pts_y = sorted(set(1.0 - np.asarray(pts)))
    rhs = mean_phi + adaptive_simpson(lambda q: -phi(1.0 - q) * (1.0 - rule(1.0 - q)), 0.0, 1.0,
                                      rtol=rtol, breakpoints=pts_y)
    return lhs, rhs


def binned_average(rule: AllocationRuleFn, T: int) -> np.ndarray:
    """Average of ``x`` over each uniform bin ``[(j-1)/T, j/T]``."""
    edges = np.linspace(0.0, 1.0, T + 1)
    pts = sorted(set(rule.q.tolist()))
    return np.array([adaptive_simpson(rule, a, b, rtol=1e-12, breakpoints=pts) * T for a, b in zip(edges[:-1], edges[1:])])


def cumulative_allocation_margin(rule: AllocationRuleFn, T: int, k: int = 1, grid: int = 64) -> float:
    """Smallest ``Xbar(q) - j/(j+1) X(q)`` over bins ``[j/T, (j+1)/T]`` with ``j >= max(k, 1)``.

    ``X`` integrates the rule and ``Xbar`` its bin-averaged step version;
    a non-negative result confirms the multiplicative closeness on those bins.
    """
    avg = binned_average(rule, T)
    worst = math.inf
    Xb = np.concatenate([[0.0], np.cumsum(avg) / T])  # Xbar at bin edges
    for j in range(max(k, 1), T):
        q = np.linspace(j / T, (j + 1) / T, grid)
        X = np.array([adaptive_simpson(rule, 0.0, qi, rtol=1e-12, breakpoints=[p for p in rule.q if p < qi]) for qi in q])
        Xbar = Xb[j] + avg[j] * (q - j / T)
        worst = min(worst, float(np.min(Xbar - j / (j + 1) * X)))
    return worst


# -- worst-case optimality family ---------------------------------------------


def random_concave_V(rng: np.random.Generator, k: int, n: int, pieces: int = 6) -> QuantileDistribution:
    """Random piecewise-linear decreasing value function normalized so ``V(k/n) = 1``."""
    from .dist import piecewise_value

    qs = np.concatenate([[0.0], np.sort(rng.random(pieces - 1)), [1.0]])
    vs = np.sort(rng.random(pieces + 1) * rng.uniform(0.5, 5.0))[::-1]
    d = piecewise_value(list(zip(qs, vs)))
    scale = float(cumulative_value_array(d, np.asarray([k / n]))[0])
    return piecewise_value(list(zip(qs, vs / scale)))


def random_triangular_dominated_R(rng: np.random.Generator, k: int, n: int) -> QuantileDistribution:
    """Random regular distribution with concave ``R``, ``R(1) = 0`` and ``R(k/n) = 1``.

    ``R`` is a random concave piecewise-linear curve through ``(0,0)``,
    ``(k/n, 1)`` and ``(1, 0)``; the value function is ``R(q)/q``.
    """
    c = k / n
    # slopes decreasing: on [0,c] average slope 1/c, on [c,1] average slope -1/(1-c)
    kl = np.concatenate([[0.0], np.sort(rng.uniform(0, c, 2)), [c]])
    kr = np.concatenate([[c], np.sort(rng.uniform(c, 1, 2)), [1.0]])
    sl = np.sort(rng.uniform(0.2, 2.0, 3))[::-1]
    sr = np.sort(rng.uniform(0.2, 2.0, 3))
    sl = sl / np.sum(sl * np.diff(kl))  # rise to 1 over [0, c]
    sr = -sr / np.sum(sr * np.diff(kr))  # fall to 0 over [c, 1], steeper later
    # concavity across the apex is automatic (positive then negative slopes)
    knots = np.concatenate([kl, kr[1:]])
    slopes = np.concatenate([sl, sr])
    vals = np.concatenate([[0.0], np.cumsum(slopes * np.diff(knots))])

    def revenue(q):
        return np.interp(q, knots, vals)

    def value(q):
        safe = np.maximum(q, Q_FLOOR)
        return np.where(q <= knots[1], slopes[0], revenue(safe) / safe)

    return QuantileDistribution(
        value_fn=value,
        label=f"random_regular(k={k},n={n})",
        revenue_fn=revenue,
        kinks=tuple(float(x) for x in knots[1:-1]),
        regular=True,
    )


def adjudication_rows(n_max: int = 12) -> list[dict]:
    """Printed sums, oracle ratios and printed bounds side by side for every ``(k, n)``."""
    rows = []
    for n in range(2, n_max + 1):
        for k in range(1, n):
            for objective in ("welfare", "revenue"):
                d = make_worst_case(objective, k, n)
                ratio = oracle_topk_vs_price(d, k, n, objective)
                printed = loss_w_exact(k, n) if objective == "welfare" else loss_r_exact(k, n)
                bound = printed_bound_w(k, n) if objective == "welfare" else printed_bound_r(k, n)
                rows.append({
                    "k": k, "n": n, "objective": objective,
                    "printed_formula": printed, "printed_bound": bound,
                    "oracle_ratio": ratio, "oracle_loss": 1.0 - ratio,
                    "printed_matches_oracle": abs(printed - (1.0 - ratio)) < 1e-9,
                })
    return rows
