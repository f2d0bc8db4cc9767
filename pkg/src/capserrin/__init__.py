"""Numerical laboratory for the partially overdetermined torsion problem in the half disk.

The mixed problem is ``Δu = 1`` in Ω ⊂ B²₊, ``u = 0`` on the interior
boundary Σ and ``∂_N u = u`` on the arc T of the unit circle.  Spherical caps
meeting the unit circle orthogonally carry an explicit solution whose normal
derivative is constant on Σ; the package checks that picture with P1 finite
elements, exact-lens quadrature and a volume-preserving shape flow.
"""

__version__ = "0.1.0"
