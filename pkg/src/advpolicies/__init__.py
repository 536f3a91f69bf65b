"""Adversarial-policy workbench: self-play victims, black-box attacks, analysis."""

__version__ = "0.1.0"
