"""Asymptotic utility-indifference prices and implied volatilities under
local-stochastic volatility."""

__version__ = "0.1.0"
