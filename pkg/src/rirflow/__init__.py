"""Training-free flow-matching solvers for room impulse response inverse problems."""

__version__ = "0.1.0"
