"""Experiment configuration, seeded Monte Carlo runners and CSV output."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.optimize import isotonic_regression

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import bounds as B
from .dist import OrderStatSpec, QuantileDistribution, from_spec as dist_from_spec, piecewise_value
from .env import StageEnvironment
from .equilibrium import (
    PositionAuctionSpec,
    best_response_gap,
    equilibrium_bid,
    expected_payment,
    expected_virtual_surplus,
)
from .errors import ConfigError, DegenerateProfileError, NonrevError
from .rng import RunningStats, run_trials, substream
from .samplemech import SampleSet, build_sample_mechanism
from .surrogate import SurrogateProfile, characteristic_weights, optimal_surrogates, run_sra_batch
from .transforms import run_resampling

KINDS = ("sra_convergence", "bounds_sweep", "samplemech", "equilibrium_audit", "inference_loop")


@dataclass
class ExperimentConfig:
    kind: str
    env: dict[str, Any] = field(default_factory=lambda: {"name": "single_item"})
    distributions: list[dict[str, Any]] = field(default_factory=lambda: [{"name": "uniform", "lo": 0, "hi": 1}])
    T: list[int] = field(default_factory=lambda: [4, 16, 64, 256])
    k_rule: str | int = "proof"
    objective: str = "welfare"
    trials: int = 10_000
    seed: int = 0
    out: str | None = None
    workers: int = 1
    options: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if int(self.trials) < 1:
            raise ConfigError("trials must be >= 1")
        if self.objective not in ("welfare", "revenue"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        try:
            self.dists()
            self.environment()
        except NonrevError as exc:
            raise ConfigError(str(exc)) from None

    def dists(self) -> list[QuantileDistribution]:
        return [dist_from_spec(s) for s in self.distributions]

    def environment(self) -> StageEnvironment:
        return StageEnvironment.from_spec(self.env, n=len(self.distributions))

    def digest(self) -> str:
        payload = {k: v for k, v in asdict(self).items() if k != "out"}
        return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        data = dict(data)
        known = {f for f in cls.__dataclass_fields__}
        options = dict(data.pop("options", {}))
        options.update({k: data.pop(k) for k in list(data) if k not in known})
        try:
            return cls(**data, options=options)
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from None

    @classmethod
    def from_toml(cls, path: str | Path) -> "ExperimentConfig":
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(data)


@dataclass
class ResultRow:
    experiment: str
    params: dict[str, Any]
    estimate: float
    se: float = 0.0
    oracle: float | None = None
    wall_clock: float = 0.0

    def __post_init__(self):
        if not self.se >= 0 and not math.isnan(self.se):
            raise ValueError("standard error must be non-negative")

    def as_dict(self) -> dict[str, Any]:
        return {"experiment": self.experiment, **self.params, "estimate": self.estimate,
                "se": self.se, "oracle": self.oracle}


def _fmt(x: Any) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if x is None:
        return ""
    return str(x)


def rows_to_csv(rows: Sequence[ResultRow], cfg: ExperimentConfig | None = None,
                rename: Mapping[str, str] | None = None) -> str:
    """CSV text with a leading ``# config_sha256=... seed=...`` comment.

    Wall-clock time is left out so identical configs give identical bytes.
    """
    buf = io.StringIO()
    if cfg is not None:
        buf.write(f"# config_sha256={cfg.digest()} seed={cfg.seed}\n")
    dicts = [r.as_dict() for r in rows]
    cols: list[str] = []
    for d in dicts:
        cols += [c for c in d if c not in cols]
    rename = dict(rename or {})
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([rename.get(c, c) for c in cols])
    for d in dicts:
        writer.writerow([_fmt(d.get(c)) for c in cols])
    return buf.getvalue()


def write_rows(rows, cfg, path=None, rename=None) -> str:
    text = rows_to_csv(rows, cfg, rename)
    if path:
        Path(path).write_text(text)
    return text


def default_k(n: int, T: int) -> int:
    """``round((n/T)^(2/3) T)`` clipped to ``[1, T/2 - 1]``."""
    k = round((n / T) ** (2 / 3) * T)
    return int(min(max(k, 1), max(1, math.ceil(T / 2) - 1)))


def _k_for(cfg: ExperimentConfig, n: int, T: int) -> int:
    return default_k(n, T) if cfg.k_rule == "proof" else int(cfg.k_rule)


def _scores(d_list, q, objective):
    return np.stack([d.score(q[..., i, :] if q.ndim == 3 else q[:, i], objective) for i, d in enumerate(d_list)],
                    axis=-2 if q.ndim == 3 else 1)


# -- SRA convergence -----------------------------------------------------------


def sra_ratio_trials(d_list, env, T, objective, profile, with_resampling_k=None):
    """Trial function for ``run_trials``: per batch, mechanism and benchmark surplus per stage."""
    n = len(d_list)

    def fn(rng: np.random.Generator, size: int) -> np.ndarray:
        q = rng.random((size, n, T))
        g = _scores(d_list, q, objective)  # (size, n, T)
        values = np.stack([d.value_at(q[:, i, :]) for i, d in enumerate(d_list)], axis=1)
        x = run_sra_batch(profile, env, values, rng)  # (size, T, n)
        mech = np.einsum("mnt,mtn->m", g, x) / T
        flat = g.transpose(0, 2, 1).reshape(size * T, n)
        best = np.sum(flat * env.surplus_max_batch(flat), axis=1).reshape(size, T).mean(axis=1)
        cols = [mech, best]
        if with_resampling_k is not None:
            qf = q.transpose(0, 2, 1).reshape(size * T, n)
            xr = run_resampling(env, None, d_list, with_resampling_k, T, quantiles=qf, rng=rng, objective=objective)
            cols.append(np.sum(flat * xr, axis=1).reshape(size, T).mean(axis=1))
        return np.stack(cols, axis=1)

    return fn


def fit_loss_exponent(n: int, Ts: Sequence[int], ratios: Sequence[float]) -> float:
    """Slope of ``log(1 - ratio)`` against ``log(n/T)``."""
    x = np.log(n / np.asarray(Ts, dtype=float))
    y = np.log(np.maximum(1.0 - np.asarray(ratios, dtype=float), 1e-300))
    return float(np.polyfit(x, y, 1)[0])


def run_sra_convergence(cfg: ExperimentConfig) -> list[ResultRow]:
    """Optimal surrogate ranking against the per-stage optimum for each ``T``, plus the fitted loss exponent."""
    d_list, env = cfg.dists(), cfg.environment()
    n = len(d_list)
    rows, ratios = [], []
    resample = bool(cfg.options.get("with_resampling", False))
    for idx, T in enumerate(cfg.T):
        t0 = time.perf_counter()
        profile = optimal_surrogates(d_list, T, cfg.objective)
        k = _k_for(cfg, n, T) if resample and T >= 4 else None
        batches = max(1, math.ceil(cfg.trials / T)) if cfg.options.get("trials_are_stages", True) else cfg.trials
        stats = run_trials(sra_ratio_trials(d_list, env, T, cfg.objective, profile, k), batches,
                           cfg.seed + idx, chunk=max(1, 20_000 // T), workers=cfg.workers)
        r, se = stats.ratio(0, 1)
        ratios.append(r)
        rows.append(ResultRow("sra_convergence", {"mechanism": "sra", "T": T, "objective": cfg.objective,
                                                  "n_over_T": n / T}, r, se, None, time.perf_counter() - t0))
        if k is not None:
            rr, rse = stats.ratio(2, 1)
            rows.append(ResultRow("sra_convergence", {"mechanism": f"resampling_k{k}", "T": T,
                                                      "objective": cfg.objective, "n_over_T": n / T}, rr, rse))
    if len(cfg.T) >= 2:
        slope = fit_loss_exponent(n, cfg.T, ratios)
        rows.append(ResultRow("sra_convergence", {"mechanism": "loglog_slope", "T": "", "objective": cfg.objective,
                                                  "n_over_T": ""}, slope, 0.0, 1 / 3))
    return rows


# -- bounds sweep ------------------------------------------------------------------


def run_bounds_sweep(cfg: ExperimentConfig) -> list[ResultRow]:
    """Printed formulas, quadrature oracle and literal Monte Carlo for every ``(k, n)``."""
    n_max = int(cfg.options.get("n_max", 12))
    rows = []
    idx = 0
    for n in range(2, n_max + 1):
        for k in range(1, n):
            for objective in ("welfare", "revenue"):
                d = B.make_worst_case(objective, k, n)
                oracle = B.oracle_topk_vs_price(d, k, n, objective)
                mc, se = B.monte_carlo_topk_vs_price(d, k, n, objective, cfg.trials, substream(cfg.seed, idx))
                idx += 1
                printed = B.loss_w_exact(k, n) if objective == "welfare" else B.loss_r_exact(k, n)
                bound = B.printed_bound_w(k, n) if objective == "welfare" else B.printed_bound_r(k, n)
                rows.append(ResultRow("bounds_sweep", {"k": k, "n": n, "objective": objective,
                                                       "printed_formula": printed, "printed_bound": bound},
                                      mc, se, oracle))
    return rows


BOUNDS_RENAME = {"estimate": "monte_carlo_ratio", "oracle": "oracle_ratio"}


# -- sample mechanism --------------------------------------------------------------


def samplemech_trials(mech, d_list):
    n = len(d_list)

    def fn(rng, size):
        q = rng.random((size, n))
        v = np.stack([d.value_at(q[:, i]) for i, d in enumerate(d_list)], axis=1)
        phi = _scores(d_list, q, "revenue")
        x, pay = mech.evaluate(v)
        opt = np.sum(phi * mech.env.surplus_max_batch(phi), axis=1)
        return np.stack([np.sum(phi * x, axis=1), opt, pay.sum(axis=1)], axis=1)

    return fn


def run_samplemech(cfg: ExperimentConfig) -> tuple[list[ResultRow], list[dict]]:
    """Revenue of the sample-built mechanism against the optimum for each sample budget.

    Budgets share one sample stream (smaller budgets use a prefix) and one
    evaluation stream. ``rev_hat`` is the virtual surplus of the induced
    allocation; ``rev_paid`` is what truthful bidders would pay.
    """
    d_list, env = cfg.dists(), cfg.environment()
    budgets = [int(b) for b in cfg.options.get("budgets", [1000, 10_000, 100_000])]
    eps = float(cfg.options.get("eps", 0.25))
    c_T = float(cfg.options.get("c_T", 1.0))
    index = str(cfg.options.get("index", "jm"))
    pool = SampleSet.draw(d_list, max(budgets), cfg.seed)
    rows, dumps = [], []
    for b in budgets:
        samples = SampleSet(tuple(v[:b] for v in pool.values), cfg.seed)
        mech = build_sample_mechanism(samples, env, eps, c_T=c_T, index=index)
        stats = run_trials(samplemech_trials(mech, d_list), cfg.trials, cfg.seed + 1, workers=cfg.workers)
        ratio, se = stats.ratio(0, 1)
        rows.append(ResultRow("samplemech", {"budget": b, "T": mech.T, "m": mech.m,
                                             "rev_hat": float(stats.mean[0]), "rev_opt": float(stats.mean[1]),
                                             "rev_paid": float(stats.mean[2]),
                                             "inverted_rows": int(mech.inverted_rows.sum())}, ratio, se))
        dumps.append({"budget": b, **mech.to_dict()})
    return rows, dumps


SAMPLEMECH_RENAME = {"estimate": "ratio"}


# -- equilibrium audit ---------------------------------------------------------------


def run_equilibrium_audit(cfg: ExperimentConfig) -> list[ResultRow]:
    """Best-response gap, revenue equivalence and payment-vs-virtual-surplus per (weights, distribution)."""
    weight_sets = cfg.options.get("weights", [[1.0, 0.0], [1.0, 0.5, 0.0]])
    grid = int(cfg.options.get("grid", 2048))
    rows = []
    idx = 0
    for w in weight_sets:
        for spec_d, d in zip(cfg.distributions, cfg.dists()):
            label = d.label
            spec = PositionAuctionSpec(w, d, "winner_pays_bid")
            aspec = spec.with_semantics("all_pay")
            b = equilibrium_bid(spec, grid)
            a = equilibrium_bid(aspec, grid)
            pay_w, pay_a = expected_payment(spec, b), expected_payment(aspec, a)
            vs = expected_virtual_surplus(spec)
            for sem, s, bf in (("winner_pays_bid", spec, b), ("all_pay", aspec, a)):
                gap, se = best_response_gap(s, bf, cfg.trials, rng=substream(cfg.seed, idx))
                idx += 1
                rows.append(ResultRow("equilibrium_audit", {"weights": json.dumps(list(map(float, w))),
                                                            "dist": label, "semantics": sem, "metric": "br_gap"},
                                      gap, se, 0.0))
            rows.append(ResultRow("equilibrium_audit", {"weights": json.dumps(list(map(float, w))), "dist": label,
                                                        "semantics": "both", "metric": "revenue_equivalence"},
                                  pay_w - pay_a, 0.0, 0.0))
            rows.append(ResultRow("equilibrium_audit", {"weights": json.dumps(list(map(float, w))), "dist": label,
                                                        "semantics": "winner_pays_bid", "metric": "payment"},
                                  pay_w, 0.0, vs))
    return rows


# -- inference loop --------------------------------------------------------------------


def _estimated_surrogates(values: np.ndarray, T: int, objective: str, points: int = 400) -> np.ndarray:
    """Surrogates from recovered values via their empirical quantile function.

    Revenue surrogates are made weakly decreasing by isotonic regression,
    which is exactly the ironing an irregular empirical curve needs.
    """
    v = np.sort(np.asarray(values, dtype=float))[::-1]
    N = len(v)
    qs = np.linspace(0.0, 1.0, points)
    vq = v[np.minimum((qs * N).astype(int), N - 1)]
    vq = np.minimum.accumulate(vq)
    d = piecewise_value(list(zip(qs, vq)))
    if objective == "welfare":
        row = [d.expected_order_stat(OrderStatSpec(j, T), "value", 1e-8) for j in range(1, T + 1)]
    else:
        d = QuantileDistribution(**{**d.__dict__, "regular": True})
        row = [d.expected_order_stat(OrderStatSpec(j, T), "virtual_value", 1e-8) for j in range(1, T + 1)]
    row = np.asarray(row)
    return isotonic_regression(row, increasing=False).x


def run_inference_loop(cfg: ExperimentConfig, initial: SurrogateProfile | None = None) -> list[ResultRow]:
    """Play the winner-pays-bid equilibrium of the current surrogates, infer values from bids, re-optimize.

    Round 0 starts from ``initial`` (default: evenly spaced surrogates from 1
    down to 0 in every population). Each round reports revenue per stage.
    """
    d_list, env = cfg.dists(), cfg.environment()
    n = len(d_list)
    T = int(cfg.T[0])
    rounds = int(cfg.options.get("rounds", 3))
    grid = int(cfg.options.get("grid", 512))
    profile = initial or SurrogateProfile.evenly_spaced(n, T)
    rows = []
    for r in range(rounds):
        cw = characteristic_weights(profile, env)
        if np.all(np.ptp(cw.w, axis=1) <= 1e-12):
            raise DegenerateProfileError("all characteristic weights are equal; bids reveal nothing")
        bid_fns = [equilibrium_bid(PositionAuctionSpec(np.clip(np.minimum.accumulate(cw.w[i]), 0, 1), d), grid)
                   for i, d in enumerate(d_list)]
        rng = substream(cfg.seed, r)
        batches = max(1, cfg.trials // T)
        q = rng.random((batches, n, T))
        values = np.stack([d.value_at(q[:, i, :]) for i, d in enumerate(d_list)], axis=1)
        bids = np.stack([bid_fns[i](values[:, i, :]) for i in range(n)], axis=1)
        x = run_sra_batch(profile, env, bids, rng)  # (batches, T, n)
        paid = np.einsum("mnt,mtn->m", bids, x) / T
        phi = _scores(d_list, q, "revenue")
        vsurplus = np.einsum("mnt,mtn->m", phi, x) / T
        stats = RunningStats(2).update(np.stack([paid, vsurplus], axis=1))
        rows.append(ResultRow("inference_loop", {"round": r, "T": T, "metric": "revenue"},
                              float(stats.mean[0]), float(stats.se[0]), float(stats.mean[1])))
        # analyst side: invert observed bids, re-estimate, rebuild
        recovered = [bid_fns[i].inverse(bids[:, i, :].ravel()) for i in range(n)]
        profile = SurrogateProfile(np.stack([_estimated_surrogates(recovered[i], T, "revenue") for i in range(n)]))
    return rows


def run_experiment(cfg: ExperimentConfig) -> str:
    """Run ``cfg`` and return (and optionally write) its CSV text."""
    if cfg.kind == "sra_convergence":
        return write_rows(run_sra_convergence(cfg), cfg, cfg.out)
    if cfg.kind == "bounds_sweep":
        return write_rows(run_bounds_sweep(cfg), cfg, cfg.out, BOUNDS_RENAME)
    if cfg.kind == "samplemech":
        rows, dumps = run_samplemech(cfg)
        text = write_rows(rows, cfg, cfg.out, SAMPLEMECH_RENAME)
        if cfg.out:
            Path(str(cfg.out) + ".mechanism.json").write_text(json.dumps(dumps, indent=1))
        return text
    if cfg.kind == "equilibrium_audit":
        return write_rows(run_equilibrium_audit(cfg), cfg, cfg.out)
    if cfg.kind == "inference_loop":
        return write_rows(run_inference_loop(cfg), cfg, cfg.out)
    raise ConfigError(f"unknown kind {cfg.kind}")
