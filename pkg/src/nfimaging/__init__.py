"""Simulation and analysis of single-atom imaging along an optical nanofibre."""

from .core import ExperimentConfig, RandomStream, validate_config

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "RandomStream", "validate_config", "__version__"]
