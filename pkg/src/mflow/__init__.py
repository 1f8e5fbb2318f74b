"""Desk-scale lab for distilling rectified-flow teachers into one/few-step
average-velocity students, verified end to end against analytic oracles."""

__version__ = "0.1.0"
