"""Stochastic Nernst-Planck-Navier-Stokes simulations on the 2D torus and the unit square."""

from .errors import (BlowUpError, ConfigError, DomainMismatchError, PreconditionError, SnpnsError,
                     SolverError, StepRejectedError, UnderpoweredError)
from .fields import Domain, Grid, ScalarField, SpectralCoefficients, VectorField

__version__ = "0.1.0"

__all__ = [
    "Domain", "Grid", "ScalarField", "VectorField", "SpectralCoefficients",
    "SnpnsError", "DomainMismatchError", "PreconditionError", "SolverError",
    "StepRejectedError", "BlowUpError", "ConfigError", "UnderpoweredError", "__version__",
]
