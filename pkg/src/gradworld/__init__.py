"""gradworld: desk-scale differentiable neural physics engine.

A learned object-centric dynamics core trained against an analytic oracle
simulator, with end-to-end gradients for policy optimization and
gradient-based system identification.
"""

__version__ = "0.1.0"
