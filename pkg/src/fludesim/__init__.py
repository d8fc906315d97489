"""Deterministic simulator for dependability-aware federated learning.

Devices churn, get interrupted mid-training, and resume from a rolling local
cache; the server picks participants from Beta-posterior dependability
estimates, distributes the global model only where cached state is too stale,
and sizes each round against a communication budget.
"""

__version__ = "0.1.0"
