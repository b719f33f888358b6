"""Simulation library for surrogate ranking and binning mechanisms in batched population models."""

from .dist import (
    OrderStatSpec,
    QuantileDistribution,
    equal_revenue,
    exponential,
    make_worst_case,
    piecewise_value,
    uniform,
)
from .env import StageEnvironment
from .errors import NonrevError
from .surrogate import (
    CharacteristicWeights,
    SelectionRule,
    SurrogateProfile,
    characteristic_weights,
    optimal_surrogates,
    run_sra,
    run_ssra,
    run_surrogate_binning,
)
from .equilibrium import BidFunction, PositionAuctionSpec, equilibrium_bid

__all__ = [
    "BidFunction",
    "CharacteristicWeights",
    "NonrevError",
    "OrderStatSpec",
    "PositionAuctionSpec",
    "QuantileDistribution",
    "SelectionRule",
    "StageEnvironment",
    "SurrogateProfile",
    "characteristic_weights",
    "equal_revenue",
    "equilibrium_bid",
    "exponential",
    "make_worst_case",
    "optimal_surrogates",
    "piecewise_value",
    "run_sra",
    "run_ssra",
    "run_surrogate_binning",
    "uniform",
]
