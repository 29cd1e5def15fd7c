"""Visual-inertial state estimation toolkit.

Inertial preintegration with covariance and bias-Jacobian propagation,
visual-inertial alignment, analytic measurement factors, sliding-window
optimization with Schur-complement marginalization, GPS pose-graph fusion,
and a deterministic simulator that provides ground truth for all of it.
"""

__version__ = "0.1.0"
