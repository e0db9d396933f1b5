"""Constitutive models and the pointwise local-solve contract."""

from .base import LocalStats, MaterialModel, descent_sweeps_numpy
from .lce import LiquidCrystalElastomer, step_length_sqrt, step_length_tensor
from .mooney_rivlin import MooneyRivlin
from .quadratic import QuadraticMaterial

__all__ = [
    "LiquidCrystalElastomer",
    "LocalStats",
    "MaterialModel",
    "MooneyRivlin",
    "QuadraticMaterial",
    "descent_sweeps_numpy",
    "step_length_sqrt",
    "step_length_tensor",
]
