"""Desk-scale constrained auto-bidding: simulator, oracle, policy, trainer, eval."""

__version__ = "0.1.0"
