"""Spike-transformer offline RL: maze data, SNN and dense policies, training, evaluation."""

__version__ = "0.1.0"
