"""Differentiable planar rigid-body simulation with LCP contact.

Subpackages: ``lcp`` (problem containers and reference solvers), ``dantzig``
(pivoting solver), ``mechanics`` (generalized-coordinate models), ``collision``
(shapes, manifolds, continuous collision detection), ``stepping`` (forward
maps with tape recording), ``gradients`` (reverse pass and finite-difference
audit), ``scenes``/``experiments``/``cli`` (scene files and runners).
"""

__version__ = "0.1.0"
