"""Risk-sensitive benchmarked portfolio control toolkit."""

from .model import (
    AffinePolicy,
    ConstantPolicy,
    ExplorationSchedule,
    MarketParams,
    StatePolicy,
    exploration_bound_ok,
    validate_params,
)

__version__ = "0.1.0"

__all__ = [
    "AffinePolicy",
    "ConstantPolicy",
    "ExplorationSchedule",
    "MarketParams",
    "StatePolicy",
    "exploration_bound_ok",
    "validate_params",
]
