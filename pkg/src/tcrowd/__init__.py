"""Truth inference and task assignment for crowdsourced tabular data."""

__version__ = "0.1.0"
