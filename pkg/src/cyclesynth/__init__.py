"""Unpaired MR/CT slice synthesis with a cycle-consistent adversarial model."""

__version__ = "0.1.0"
