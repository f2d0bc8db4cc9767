"""Closed-form cap solution and quadrature references on the exact lens.

On the cap ``Ω = {|x - p| < r} ∩ B²₊`` the torsion function is
``u(x) = (|x - p|² - r²) / (2n)``.  Lens integrals are computed with adaptive
Gauss-Legendre quadrature in polar coordinates about ``p``: since ``|p|² =
1 + r²``, a ray from ``p`` at angle ``ψ`` off ``-p`` enters the unit disk at
``ρ₁(ψ) = d cos ψ - sqrt(d² cos² ψ - r²)`` and the lens is ``ρ₁ ≤ ρ ≤ r``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from typing import Callable

import numpy as np

from .geometry import CapSpec, ON_SPHERE_TOL, unit


class QuadratureError(RuntimeError):
    """Adaptive quadrature exceeded its subdivision budget."""


@dataclass(frozen=True)
class ExactCapSolution:
    n: int
    c: float
    a: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        if a.shape != (self.n,) or abs(np.linalg.norm(a) - 1.0) > 1e-12:
            raise ValueError("contact direction a must be a unit vector of length n")
        if self.c <= 0:
            raise ValueError("c must be positive")
        object.__setattr__(self, "a", a)

    @classmethod
    def from_spec(cls, spec: CapSpec) -> "ExactCapSolution":
        return cls(n=spec.n, c=spec.c, a=spec.direction)

    @property
    def radius(self) -> float:
        return self.n * self.c

    @property
    def center(self) -> np.ndarray:
        return self.a * math.sqrt(1.0 + self.radius**2)

    def value(self, x) -> np.ndarray:
        d = np.asarray(x, dtype=float) - self.center
        return (np.sum(d * d, axis=-1) - self.radius**2) / (2 * self.n)

    def gradient(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.center) / self.n

    def hessian(self) -> np.ndarray:
        return np.eye(self.n) / self.n


def eval(sol: ExactCapSolution, x):
    """Value, gradient and Hessian of the cap solution at ``x``."""
    x = np.asarray(x, dtype=float)
    hess = np.broadcast_to(sol.hessian(), x.shape[:-1] + (sol.n, sol.n))
    return sol.value(x), sol.gradient(x), hess


def p_value(sol: ExactCapSolution, x):
    """P-function ``|∇u|² - (2/n) u`` and its Laplacian.

    The Laplacian is evaluated from the Hessian as ``2|∇²u|² - (2/n) Δu``
    (the third-derivative term vanishes because ``Δu`` is constant).
    """
    u, g, _ = eval(sol, x)
    P = np.sum(g * g, axis=-1) - (2.0 / sol.n) * u
    H = sol.hessian()
    lap = 2.0 * np.sum(H * H) - (2.0 / sol.n) * np.trace(H)
    return P, np.full_like(np.asarray(P, dtype=float), lap)


def robin_defect_on_sphere(sol: ExactCapSolution, x):
    """``⟨∇u, x⟩ - u`` at unit-sphere points; raises for points off the sphere."""
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(np.linalg.norm(x, axis=-1) - 1.0) > ON_SPHERE_TOL):
        raise ValueError("robin_defect_on_sphere requires points on the unit sphere")
    u, g, _ = eval(sol, x)
    return np.sum(g * x, axis=-1) - u


def boundary_hessian_defect(sol: ExactCapSolution, x, e) -> np.ndarray:
    """``⟨(∇²u) x, e⟩`` for unit-sphere points ``x`` and tangent vectors ``e``."""
    x = np.asarray(x, dtype=float)
    return np.einsum("ij,...j,...i->...", sol.hessian(), x, np.asarray(e, dtype=float))


def halfball_eigenpair(n: int):
    """First mixed eigenvalues of B^n_+ and the common eigenfunction ``x ↦ x_n``."""
    if n < 2:
        raise ValueError("n must be at least 2")
    return 0.0, 1.0, (lambda x: np.asarray(x, dtype=float)[..., n - 1])


# -- adaptive Gauss-Legendre ----------------------------------------------------

_GL_ORDER = 10
_GL_X, _GL_W = np.polynomial.legendre.leggauss(_GL_ORDER)
_RADIAL_X, _RADIAL_W = np.polynomial.legendre.leggauss(24)


def _gl(f: Callable, a: float, b: float) -> float:
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    return half * float(np.dot(_GL_W, f(mid + half * _GL_X)))


def adaptive_gauss_legendre(
    f: Callable, a: float, b: float, tol: float, max_intervals: int = 20000
) -> tuple[float, int]:
    """Integrate a vectorized ``f`` on ``[a, b]`` to absolute error ``tol``.

    Global bisection: the interval with the largest local error estimate
    (panel vs. its two halves) is split until the summed estimate is below
    ``tol``.  Returns the integral and the number of panels used.
    """
    import heapq

    def panel(lo, hi):
        whole = _gl(f, lo, hi)
        mid = 0.5 * (lo + hi)
        left, right = _gl(f, lo, mid), _gl(f, mid, hi)
        return left + right, abs(left + right - whole)

    val, err = panel(a, b)
    heap = [(-err, a, b, val)]
    total_err, total = err, val
    count = 1
    while total_err > tol:
        if count >= max_intervals:
            raise QuadratureError(
                f"adaptive quadrature did not reach tol={tol:g} (estimate {total_err:g})"
            )
        neg_err, lo, hi, v = heapq.heappop(heap)
        mid = 0.5 * (lo + hi)
        lv, le = panel(lo, mid)
        rv, re = panel(mid, hi)
        total += lv + rv - v
        total_err += le + re + neg_err
        heapq.heappush(heap, (-le, lo, mid, lv))
        heapq.heappush(heap, (-re, mid, hi, rv))
        count += 1
    # Re-sum to shed accumulated round-off from the running updates.
    total = math.fsum(item[3] for item in heap)
    return total, count


def _lens_polar(spec: CapSpec):
    r = spec.radius
    p = spec.center
    dist = float(np.linalg.norm(p))
    e = -p / dist
    e_perp = np.array([-e[1], e[0]])
    psi_max = math.acos(r / dist)
    return r, p, dist, e, e_perp, psi_max


def lens_integral(spec: CapSpec, f: Callable, tol: float) -> tuple[float, int]:
    """``∫_Ω f(x) dx`` over the exact cap lens; ``f`` maps (..., 2) points to values.

    The outer angle uses ``ψ = ψ_max sin s`` to remove the square-root endpoint
    behaviour of ``ρ₁`` at the contact rays.
    """
    r, p, dist, e, e_perp, psi_max = _lens_polar(spec)

    def outer(s):
        s = np.atleast_1d(s)
        psi = psi_max * np.sin(s)
        dpsi = psi_max * np.cos(s)
        cos_psi = np.cos(psi)
        rho1 = dist * cos_psi - np.sqrt(np.maximum(dist * dist * cos_psi**2 - r * r, 0.0))
        w = np.cos(psi)[:, None] * e + np.sin(psi)[:, None] * e_perp
        mid, half = 0.5 * (rho1 + r), 0.5 * (r - rho1)
        rho = mid[:, None] + half[:, None] * _RADIAL_X[None, :]
        pts = p + rho[..., None] * w[:, None, :]
        inner = half * np.sum(_RADIAL_W * f(pts) * rho, axis=1)
        return inner * dpsi

    return adaptive_gauss_legendre(outer, -0.5 * math.pi, 0.5 * math.pi, tol)


def arc_integral(spec: CapSpec, f: Callable, tol: float) -> tuple[float, int]:
    """``∫_T f dA`` over the unit-circle arc of the cap."""
    lo, hi = spec.gamma_angles

    def g(phi):
        phi = np.atleast_1d(phi)
        return f(np.column_stack([np.cos(phi), np.sin(phi)]))

    return adaptive_gauss_legendre(g, lo, hi, tol)


@dataclass(frozen=True)
class TorsionReference:
    tau_by_volume: float
    tau_by_energy: float
    tol: float
    panels: int


def cap_torsion_reference(spec: CapSpec, tol: float = 1e-10) -> TorsionReference:
    """``τ̃`` of the exact cap as ``-∫u`` and as ``∫|∇u|² - ∫_T u²``."""
    spec.validate()
    sol = ExactCapSolution.from_spec(spec)
    vol, n1 = lens_integral(spec, lambda x: -sol.value(x), tol)
    grad_sq, n2 = lens_integral(spec, lambda x: np.sum(sol.gradient(x) ** 2, axis=-1), tol / 2)
    t_sq, n3 = arc_integral(spec, lambda x: sol.value(x) ** 2, tol / 2)
    ref = TorsionReference(vol, grad_sq - t_sq, tol, n1 + n2 + n3)
    if abs(ref.tau_by_volume - ref.tau_by_energy) > 10 * tol:
        raise QuadratureError("energy and volume forms of the cap torsion disagree")
    return ref


def pohozaev_quadrature(spec: CapSpec, tol: float = 1e-12, weight: Callable | None = None) -> float:
    """``∫_Ω w(x) P dx - c² ∫_Ω w(x) dx`` on the exact cap, default weight ``w = x₂``.

    The two integrals are computed separately so that the identity is tested
    rather than cancelled pointwise.
    """
    spec.validate()
    sol = ExactCapSolution.from_spec(spec)
    w = weight or (lambda x: x[..., 1])
    wp, _ = lens_integral(spec, lambda x: w(x) * p_value(sol, x)[0], tol)
    ww, _ = lens_integral(spec, w, tol)
    return wp - sol.c**2 * ww


def monte_carlo_lens(spec: CapSpec, f: Callable, samples: int, seed: int = 0) -> tuple[float, float]:
    """Plain Monte-Carlo estimate of a lens integral and its standard error."""
    rng = np.random.default_rng(seed)
    r, p = spec.radius, spec.center
    lo = p - r
    pts = lo + 2 * r * rng.random((samples, 2))
    inside = (np.sum((pts - p) ** 2, axis=1) < r * r) & (np.sum(pts * pts, axis=1) < 1.0)
    vals = np.where(inside, f(pts), 0.0) * (2 * r) ** 2
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(samples))


CANONICAL_SPECS = ((math.pi / 2, 0.25), (math.pi / 2, 0.1), (math.pi / 3, 0.15))


def load_references() -> dict:
    """Frozen quadrature references and calibration values shipped with the package."""
    text = resources.files("capserrin").joinpath("data/oracle_references.json").read_text()
    return json.loads(text)


def contact_point(spec: CapSpec, which: int) -> np.ndarray:
    return unit(spec.gamma_angles[which])


def build_references(tol: float = 1e-10) -> dict:
    """Quadrature references for the canonical caps (the content of the frozen fixture)."""
    caps = []
    for theta, c in CANONICAL_SPECS:
        spec = CapSpec(theta, c)
        ref = cap_torsion_reference(spec, tol)
        caps.append({
            "theta": theta,
            "c": c,
            "tau_ref": ref.tau_by_volume,
            "tau_by_energy": ref.tau_by_energy,
            "pohozaev": pohozaev_quadrature(spec),
            "tol": tol,
            "method": "adaptive Gauss-Legendre, polar lens parametrization",
        })
    return {"caps": caps}
