"""Multi-campaign Dirichlet-Multinomial crowd-label loss and scaling-law fitting."""

__version__ = "0.1.0"
