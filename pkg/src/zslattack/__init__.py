"""Adversarial attacks on attention-based zero-shot classifiers, at toy scale."""

__version__ = "0.1.0"
