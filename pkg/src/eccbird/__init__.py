"""Multi-label bird sound classification with classifier chains over random forests."""

__version__ = "0.1.0"
