"""Deep-equilibrium hyperspectral unmixing."""

__version__ = "0.1.0"
