"""Hybrid CNN+GRU classifiers with Bayesian tuning, Deep Ensembles and sum-rule fusion."""

__version__ = "0.1.0"
