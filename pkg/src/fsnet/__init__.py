"""Online time-series forecasting with fast-and-slow learning networks."""

__version__ = "0.1.0"
