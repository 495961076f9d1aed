"""
ShiftGuard.

Certified policy adaptation under distribution shift: ReLU surrogates of
the deployment dynamics, semidefinite residual bounds and the closed loop
that applies the adapted actions.
"""

__version__ = "0.1.0"
