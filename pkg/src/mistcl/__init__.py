"""Mutual-information-guided sparse tuning for continual learning on a frozen backbone."""

__version__ = "0.1.0"
