"""Torsional rigidity, P-function, Pohozaev residual, Serrin defect and the rigidity certificate."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

from .fem import (
    DiscreteField,
    SparseSystem,
    assemble,
    boundary_normal_derivative,
    integrate,
    solve_mixed_bvp,
)
from .geometry import DomainSpec
from .mesh import Tag, TriMesh, mesh_quality, triangulate, write_vtk

CAP_CONSISTENT = "CAP_CONSISTENT"
NOT_CAP = "NOT_CAP"


@dataclass(frozen=True)
class CertificateThresholds:
    """Calibration constants of the rigidity certificate (frozen after verified runs)."""

    c_rel: float = 0.05
    circle_residual: float = 1e-2
    orthogonality: float = 5e-2
    p_flatness: float = 0.25
    # Rank test for the circle fit: smallest/largest singular value of the
    # centred design matrix below this means Σ is (numerically) a line.
    degenerate_ratio: float = 1e-6


@dataclass
class TorsionSolution:
    """A solved domain: mesh, assembled system and the discrete field."""

    mesh: TriMesh
    system: SparseSystem
    u: DiscreteField
    h: float


@dataclass(frozen=True)
class SerrinDefect:
    c_mean: float
    c_std: float
    c_rel: float


@dataclass(frozen=True)
class SubharmonicityReport:
    """Weak-form values ``∫∇P·∇φ_i`` at interior vertices and those above tolerance."""

    vertices: np.ndarray
    values: np.ndarray
    tol: float
    violations: np.ndarray

    @property
    def max_value(self) -> float:
        return float(self.values.max()) if len(self.values) else 0.0

    @property
    def n_violations(self) -> int:
        return int(len(self.violations))


@dataclass
class TorsionReport:
    tau_by_volume: float
    tau_by_energy: float
    serrin_c_mean: float
    serrin_c_std: float
    serrin_c_rel: float
    pohozaev_residual: float
    max_u_interior: float
    p_min: float
    p_max: float
    h: float
    domain: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def solve_torsion(d: DomainSpec, h: float) -> TorsionSolution:
    m = triangulate(d, h)
    sys = assemble(m)
    return TorsionSolution(m, sys, solve_mixed_bvp(sys), h)


def tau_by_volume(u: DiscreteField) -> float:
    return -integrate(u)


def tau_by_energy(u: DiscreteField, sys: SparseSystem) -> float:
    return sys.energy(u.values)


def p_function(u: DiscreteField, n: int = 2) -> DiscreteField:
    """Nodal ``P = |∇u|² - (2/n) u`` from the recovered gradient."""
    P = np.sum(u.grad**2, axis=1) - (2.0 / n) * u.values
    return DiscreteField.from_values(u.mesh, P)


def pohozaev_residual(u: DiscreteField, c: float, n: int = 2) -> float:
    """``∫ x₂ (P - c²) dx``."""
    P = p_function(u, n)
    return integrate(P.values - c * c, u.mesh, weight="x2")


def serrin_defect(u: DiscreteField) -> SerrinDefect:
    """Arc-length weighted mean and standard deviation of ``∂_ν u`` on Σ."""
    ev = boundary_normal_derivative(u, Tag.SIGMA)
    total = float(np.sum(ev.lengths))
    if total <= 0.0:
        raise ValueError("sigma has zero length")
    mean = float(np.sum(ev.values * ev.lengths) / total)
    std = math.sqrt(float(np.sum(ev.lengths * (ev.values - mean) ** 2) / total))
    return SerrinDefect(mean, std, std / abs(mean) if mean != 0 else math.inf)


def weak_subharmonicity(
    P: DiscreteField, sys: SparseSystem, h: float, tol_factor: float = 1e-2
) -> SubharmonicityReport:
    """Check ``∫∇P·∇φ_i ≤ tol`` for every interior hat function ``φ_i``.

    For smooth ``P`` this is ``-∫ΔP φ_i``, so positive values flag ``ΔP < 0``.
    The tolerance ``tol_factor · h`` absorbs gradient-recovery noise.
    """
    interior = np.flatnonzero(P.mesh.vertex_tags == Tag.INTERIOR)
    vals = (sys.K @ P.values)[interior]
    tol = tol_factor * h
    return SubharmonicityReport(interior, vals, tol, interior[vals > tol])


def torsional_rigidity(d: DomainSpec, h: float) -> TorsionReport:
    return torsion_report(solve_torsion(d, h), d)


def torsion_report(sol: TorsionSolution, d: DomainSpec | None = None) -> TorsionReport:
    u, sys, m = sol.u, sol.system, sol.mesh
    tv, te = tau_by_volume(u), tau_by_energy(u, sys)
    sd = serrin_defect(u)
    P = p_function(u)
    free = m.vertex_tags == Tag.INTERIOR
    meta = {
        "n_vertices": m.n_vertices,
        "n_triangles": m.n_triangles,
        "area": m.area(),
        "sigma_kind": (d or m.domain).sigma_exact.kind,
        "t_arc": list((d or m.domain).t_arc),
        "mesh": mesh_quality(m).as_dict(),
    }
    return TorsionReport(
        tau_by_volume=tv,
        tau_by_energy=te,
        serrin_c_mean=sd.c_mean,
        serrin_c_std=sd.c_std,
        serrin_c_rel=sd.c_rel,
        pohozaev_residual=pohozaev_residual(u, sd.c_mean),
        max_u_interior=float(u.values[free].max()) if np.any(free) else 0.0,
        p_min=float(P.values.min()),
        p_max=float(P.values.max()),
        h=sol.h,
        domain=meta,
    )


# -- circle fit -----------------------------------------------------------------


@dataclass(frozen=True)
class CircleFit:
    center: np.ndarray
    radius: float
    residual: float
    degenerate: bool

    @property
    def orthogonality_defect(self) -> float:
        """``|p|² - r² - 1``; zero for circles meeting the unit circle orthogonally."""
        if self.degenerate:
            return math.inf
        return float(self.center @ self.center - self.radius**2 - 1.0)


def fit_circle(points: np.ndarray, degenerate_ratio: float = 1e-6) -> CircleFit:
    """Least-squares circle through ``points``.

    An algebraic (Kåsa) fit seeds a geometric Gauss-Newton refinement of the
    distances ``|x - p| - r``.  The residual is their RMS.  Collinear points are
    flagged as degenerate.
    """
    pts = np.asarray(points, dtype=float)
    if len(pts) < 3:
        raise ValueError("need at least three points to fit a circle")
    centred = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[-1] <= degenerate_ratio * sv[0]:
        return CircleFit(np.full(2, np.nan), math.inf, math.inf, True)
    A = np.column_stack([pts, np.ones(len(pts))])
    rhs = np.sum(pts * pts, axis=1)
    sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    c0 = 0.5 * sol[:2]
    r0 = math.sqrt(max(sol[2] + c0 @ c0, 0.0))

    def dist(z):
        return np.linalg.norm(pts - z[:2], axis=1) - z[2]

    res = least_squares(dist, np.r_[c0, r0], method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
    center, radius = res.x[:2], float(abs(res.x[2]))
    rms = math.sqrt(float(np.mean(dist(res.x) ** 2)))
    # A nearly straight Σ fits a huge circle; treat it as degenerate too.
    degenerate = radius > 1e6 * float(sv[0]) / math.sqrt(len(pts))
    return CircleFit(center, radius, rms, degenerate)


# -- certificate ----------------------------------------------------------------


@dataclass
class RigidityCertificate:
    verdict: str
    failures: list
    checks: dict
    fit: CircleFit
    report: TorsionReport

    def to_json(self) -> dict:
        fit = {
            "center": [float(x) for x in self.fit.center],
            "radius": self.fit.radius,
            "residual": self.fit.residual,
            "degenerate": self.fit.degenerate,
            "orthogonality_defect": self.fit.orthogonality_defect,
        }
        return {
            "verdict": self.verdict,
            "failures": list(self.failures),
            "checks": _finite(self.checks),
            "circle_fit": _finite(fit),
            "torsion": _finite(self.report.to_json()),
        }


def _finite(obj):
    """Replace non-finite floats by strings so the result is strict JSON."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def certify(sol: TorsionSolution, d: DomainSpec | None = None,
            thresholds: CertificateThresholds | None = None) -> RigidityCertificate:
    th = thresholds or CertificateThresholds()
    d = d or sol.mesh.domain
    rep = torsion_report(sol, d)
    fit = fit_circle(d.sigma_nodes, th.degenerate_ratio)
    P = p_function(sol.u)
    c2 = rep.serrin_c_mean**2
    flat = float(np.max(np.abs(P.values - c2)) / c2) if c2 > 0 else math.inf
    checks = {
        "c_rel": {"value": rep.serrin_c_rel, "threshold": th.c_rel},
        "circle_residual": {"value": fit.residual, "threshold": th.circle_residual},
        "orthogonality": {"value": abs(fit.orthogonality_defect), "threshold": th.orthogonality},
        "p_flatness": {"value": flat, "threshold": th.p_flatness},
    }
    failures = [k for k, v in checks.items() if not v["value"] <= v["threshold"]]
    if not rep.serrin_c_mean > 0:
        failures.append("c_positive")
    checks["c_positive"] = {"value": rep.serrin_c_mean, "threshold": 0.0}
    verdict = CAP_CONSISTENT if not failures else NOT_CAP
    return RigidityCertificate(verdict, failures, checks, fit, rep)


def rigidity_certificate(d: DomainSpec, h: float = 0.02,
                         thresholds: CertificateThresholds | None = None) -> RigidityCertificate:
    return certify(solve_torsion(d, h), d, thresholds)


# -- output ---------------------------------------------------------------------


def write_fields_vtk(sol: TorsionSolution, path: str | Path, title: str = "torsion") -> None:
    P = p_function(sol.u)
    write_vtk(sol.mesh, path, {"u": sol.u.values, "P": P.values,
                               "grad_mag": sol.u.grad_magnitude()}, title)


def write_report(obj, path: str | Path) -> None:
    data = obj.to_json() if hasattr(obj, "to_json") else obj
    Path(path).write_text(json.dumps(_finite(data), indent=2, sort_keys=True) + "\n")

