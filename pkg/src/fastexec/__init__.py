"""Optimal liquidation under fast mean-reverting stochastic liquidity and volatility."""

__version__ = "0.1.0"
