"""Adversarially robust collaborative detection with conformal uncertainty calibration."""

__version__ = "0.1.0"
