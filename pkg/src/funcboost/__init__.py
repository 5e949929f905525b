"""Federated functional gradient boosting over empirical data measures."""

from . import cli, data, fedboost, functions, losses, measures, oracles  # noqa: F401

__version__ = "0.1.0"
