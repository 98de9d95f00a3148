"""Spectral Galerkin simulation and statistical audits for a stochastic
surface-growth PDE on a periodic interval."""

__version__ = "0.1.0"

from .spectral import GridSpec, SpectralField

__all__ = ["GridSpec", "SpectralField", "__version__"]
