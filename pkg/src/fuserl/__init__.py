"""Offline actor-critic learning of multi-task score-fusion weights."""

__version__ = "0.1.0"
