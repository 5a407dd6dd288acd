"""Numerical laboratory for a variable-coefficient nonlocal diffusion
equation: fractional-Laplacian discretization, exterior measurement maps,
the space-time Liouville reduction, and reconstruction experiments."""

__version__ = "0.1.0"
