"""Bayesian posterior contraction for metastable diffusions.

Simulation, ergodic quadrature, spectral constants, grid posteriors, explicit
bound curves and the Monte Carlo studies that check them.
"""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
