"""Grouped fine-tuning for k-shot transfer: filter clustering, group-averaged updates and group-count search."""

__version__ = "0.1.0"
