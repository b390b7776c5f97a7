"""Deep policy iteration for portfolio choice under liquidity risk and proportional costs."""

__version__ = "0.1.0"

from .market import DomainError, ModelParams, UtilitySpec  # noqa: E402

__all__ = ["DomainError", "ModelParams", "UtilitySpec", "__version__"]
