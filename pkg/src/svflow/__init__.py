"""Score-based variational flows.

Mixture-family ODE flows whose velocity is a posterior-weighted average of
component scores, hybrid variational/task training with closed-form
gradients, and a toy spherical transformer read through the same lens.
"""

__version__ = "0.1.0"
