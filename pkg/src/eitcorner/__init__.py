"""Local recovery of piecewise constant anisotropic conductivities on corner domains."""

__version__ = "0.1.0"
