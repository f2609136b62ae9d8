"""Rationale extraction with an information bottleneck, adversarial calibration and a language-model regularizer."""

__version__ = "0.1.0"
