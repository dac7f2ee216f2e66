"""Simulation and homogenisation toolkit for two-scale mean-field stochastic systems."""

__version__ = "0.1.0"

from .measure import EmpiricalMeasure, MeasureSummary, w2_distance
from .model import Dimensions, InitialLaw, Marginal, ModelSpec, instantiate, oracle_reference

__all__ = ["EmpiricalMeasure", "MeasureSummary", "w2_distance", "Dimensions", "InitialLaw",
           "Marginal", "ModelSpec", "instantiate", "oracle_reference", "__version__"]
