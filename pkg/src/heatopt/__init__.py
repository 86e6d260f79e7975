"""Time-optimal control of the 2D heat equation.

Space-time dG(0)/P1 discretization on the unit square, augmented
Lagrangian + trust-region semismooth Newton optimizer for the
time-transformed problem, and matrix-free verification of the
second-order sufficient condition.
"""

__version__ = "0.1.0"
