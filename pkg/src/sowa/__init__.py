"""Windowed value-value attention adapters over a frozen backbone for
anomaly detection, plus the training, few-shot inference, metric, and
synthetic-data tooling around them."""

__version__ = "0.1.0"
