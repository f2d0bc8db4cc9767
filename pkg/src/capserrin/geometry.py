"""Cap-like planar domains in the upper half disk and the conformal Killing field.

A domain is bounded by an interior curve ``sigma`` (a polyline whose two
endpoints sit on the unit circle) and by the unit-circle arc ``T`` joining those
endpoints.  The boundary loop is counterclockwise: ``T`` runs from
``angle_start`` to ``angle_end`` and ``sigma`` returns from the point at
``angle_end`` to the point at ``angle_start``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ON_SPHERE_TOL = 1e-12
ENDPOINT_TOL = 1e-10


class GeometryError(ValueError):
    """Raised for invalid cap specifications or domain descriptions."""


def unit(angle: float) -> np.ndarray:
    return np.array([math.cos(angle), math.sin(angle)])


@dataclass(frozen=True)
class CapSpec:
    """Exact cap ``{|x - p| < r} ∩ B²₊`` with ``p = a sqrt(1 + r²)``, ``r = n c``.

    ``a_angle`` is the polar angle of the contact direction ``a`` and ``c`` the
    constant normal derivative of the cap solution on its spherical part.
    """

    a_angle: float
    c: float
    n: int = 2

    def __post_init__(self):
        if not (self.c > 0.0 and math.isfinite(self.c)):
            raise GeometryError(f"cap constant c must be positive, got {self.c}")
        if not 0.0 < self.a_angle < math.pi:
            raise GeometryError(f"a_angle must lie in (0, pi), got {self.a_angle}")

    @property
    def radius(self) -> float:
        return self.n * self.c

    @property
    def direction(self) -> np.ndarray:
        return unit(self.a_angle)

    @property
    def center(self) -> np.ndarray:
        return self.direction * math.sqrt(1.0 + self.radius**2)

    @property
    def half_opening(self) -> float:
        """Angular half-width (seen from the origin) of the contact set."""
        return math.acos(1.0 / math.sqrt(1.0 + self.radius**2))

    @property
    def gamma_angles(self) -> tuple[float, float]:
        beta = self.half_opening
        return self.a_angle - beta, self.a_angle + beta

    def validate(self) -> None:
        lo, hi = self.gamma_angles
        if self.radius >= 1.0:
            raise GeometryError(
                f"cap exits half disk: radius {self.radius:g} >= 1 engulfs the half disk"
            )
        # Σ is a hyperbolic geodesic, so the cap stays in {x2 > 0} iff Γ does.
        if lo <= 0.0 or hi >= math.pi:
            raise GeometryError(
                f"cap exits half disk: contact angles ({lo:.6f}, {hi:.6f}) leave (0, pi)"
            )


@dataclass(frozen=True)
class SigmaCurve:
    """Exact curve that ``sigma`` nodes live on; used for snapping."""

    kind: str = "polyline"
    center: tuple[float, float] | None = None
    radius: float | None = None

    def __post_init__(self):
        if self.kind not in ("circle", "polyline"):
            raise GeometryError(f"unknown sigma curve kind {self.kind!r}")
        if self.kind == "circle" and (self.center is None or self.radius is None):
            raise GeometryError("circle sigma curve needs center and radius")

    def snap(self, points: np.ndarray) -> np.ndarray:
        """Project points onto the exact curve (identity for polylines)."""
        if self.kind == "polyline":
            return np.asarray(points, dtype=float)
        q = np.asarray(self.center)
        d = np.asarray(points, dtype=float) - q
        return q + self.radius * d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass(frozen=True)
class DomainSpec:
    sigma_nodes: np.ndarray
    t_arc: tuple[float, float]
    sigma_exact: SigmaCurve = field(default_factory=SigmaCurve)

    def __post_init__(self):
        nodes = np.array(self.sigma_nodes, dtype=float)
        nodes.setflags(write=False)
        object.__setattr__(self, "sigma_nodes", nodes)
        object.__setattr__(self, "t_arc", (float(self.t_arc[0]), float(self.t_arc[1])))
        self.validate()

    @property
    def gamma(self) -> tuple[np.ndarray, np.ndarray]:
        """Contact points at ``angle_start`` and ``angle_end``."""
        return unit(self.t_arc[0]), unit(self.t_arc[1])

    @property
    def t_length(self) -> float:
        return self.t_arc[1] - self.t_arc[0]

    def validate(self) -> None:
        nodes = self.sigma_nodes
        if nodes.ndim != 2 or nodes.shape[1] != 2 or len(nodes) < 2:
            raise GeometryError("sigma_nodes must be an (m, 2) array with m >= 2")
        if not np.all(np.isfinite(nodes)):
            raise GeometryError("sigma_nodes contain non-finite entries")
        a0, a1 = self.t_arc
        if not 0.0 < a1 - a0 < 2.0 * math.pi:
            raise GeometryError("t_arc must satisfy 0 < angle_end - angle_start < 2 pi")
        g0, g1 = self.gamma
        if np.linalg.norm(nodes[-1] - g0) > ENDPOINT_TOL or np.linalg.norm(nodes[0] - g1) > ENDPOINT_TOL:
            raise GeometryError("sigma endpoints do not coincide with the t_arc endpoints")
        inner = nodes[1:-1]
        if len(inner) and np.max(np.linalg.norm(inner, axis=1)) >= 1.0:
            raise GeometryError("sigma nodes must lie strictly inside the unit disk")
        if np.min(nodes[:, 1]) < -ON_SPHERE_TOL:
            raise GeometryError("sigma crosses {x2 = 0}: domain leaves the upper half disk")
        if _polyline_self_intersects(nodes):
            raise GeometryError("sigma polyline is not simple")
        if enclosed_volume(self) <= 0.0:
            raise GeometryError("boundary loop encloses non-positive area (orientation)")

    def sigma_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.sigma_nodes, axis=0), axis=1)))

    def to_json(self) -> dict:
        exact = {"kind": self.sigma_exact.kind}
        if self.sigma_exact.kind == "circle":
            exact["center"] = list(map(float, self.sigma_exact.center))
            exact["radius"] = float(self.sigma_exact.radius)
        return {
            "sigma_nodes": self.sigma_nodes.tolist(),
            "sigma_exact": exact,
            "t_arc": {"angle_start": self.t_arc[0], "angle_end": self.t_arc[1]},
        }

    @classmethod
    def from_json(cls, data: dict) -> "DomainSpec":
        try:
            exact = data.get("sigma_exact", {"kind": "polyline"})
            curve = SigmaCurve(
                kind=exact.get("kind", "polyline"),
                center=tuple(exact["center"]) if "center" in exact else None,
                radius=exact.get("radius"),
            )
            arc = data["t_arc"]
            return cls(
                sigma_nodes=np.asarray(data["sigma_nodes"], dtype=float),
                t_arc=(arc["angle_start"], arc["angle_end"]),
                sigma_exact=curve,
            )
        except (AttributeError, KeyError, TypeError) as exc:
            raise GeometryError(f"malformed domain JSON: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "DomainSpec":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise GeometryError(f"cannot read domain file {path}: {exc}") from exc
        return cls.from_json(data)


def _polyline_self_intersects(nodes: np.ndarray) -> bool:
    """True if two non-adjacent segments of the open polyline intersect."""
    p = nodes[:-1]
    q = nodes[1:]
    m = len(p)
    if m < 3:
        return False

    def orient(a, b, c):
        return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (
            c[..., 0] - a[..., 0]
        )

    i, j = np.triu_indices(m, k=2)
    a, b, c, d = p[i], q[i], p[j], q[j]
    o1 = orient(a, b, c)
    o2 = orient(a, b, d)
    o3 = orient(c, d, a)
    o4 = orient(c, d, b)
    hits = (o1 * o2 < 0) & (o3 * o4 < 0)
    return bool(np.any(hits))


def make_cap_domain(spec: CapSpec, boundary_spacing: float) -> DomainSpec:
    """Sample the spherical part of an exact cap at roughly ``boundary_spacing``."""
    spec.validate()
    if spec.n != 2:
        raise GeometryError("meshed domains are planar (n = 2)")
    r = spec.radius
    if not 0.0 < boundary_spacing < r / 4.0:
        raise GeometryError(f"boundary_spacing must lie in (0, r/4) = (0, {r / 4:g})")
    p = spec.center
    lo, hi = spec.gamma_angles
    g_hi, g_lo = unit(hi), unit(lo)
    # Sweep around p from the Γ point at angle `hi` to the one at `lo` on the
    # side facing the origin.
    phi0 = math.atan2(*(g_hi - p)[::-1])
    phi1 = math.atan2(*(g_lo - p)[::-1])
    sweep = (phi1 - phi0) % (2.0 * math.pi)
    if sweep > math.pi:
        sweep -= 2.0 * math.pi
    k = max(2, math.ceil(abs(sweep) * r / boundary_spacing))
    phis = phi0 + sweep * np.linspace(0.0, 1.0, k + 1)
    nodes = p + r * np.column_stack([np.cos(phis), np.sin(phis)])
    nodes[0], nodes[-1] = g_hi, g_lo
    curve = SigmaCurve(kind="circle", center=(float(p[0]), float(p[1])), radius=r)
    return DomainSpec(sigma_nodes=nodes, t_arc=(lo, hi), sigma_exact=curve)


def make_half_disk(boundary_spacing: float = 0.05) -> DomainSpec:
    """B²₊ itself: sigma is the diameter, T the upper semicircle."""
    k = max(2, math.ceil(2.0 / boundary_spacing))
    x = np.linspace(-1.0, 1.0, k + 1)
    nodes = np.column_stack([x, np.zeros_like(x)])
    return DomainSpec(sigma_nodes=nodes, t_arc=(0.0, math.pi))


def _end_tangent(nodes: np.ndarray) -> np.ndarray:
    """Second-order tangent at ``nodes[0]`` from the circle through three nodes."""
    a, b, c = nodes[0], nodes[1], nodes[2]
    ab, ac = b - a, c - a
    cross = ab[0] * ac[1] - ab[1] * ac[0]
    if abs(cross) < 1e-14 * np.dot(ab, ab):
        t = ab
    else:
        # Circumcenter of (a, b, c); the tangent at a is perpendicular to a - center.
        d = 2.0 * cross
        ux = (ac[1] * ab.dot(ab) - ab[1] * ac.dot(ac)) / d
        uy = (ab[0] * ac.dot(ac) - ac[0] * ab.dot(ab)) / d
        radial = -np.array([ux, uy])
        t = np.array([-radial[1], radial[0]])
        if np.dot(t, ab) < 0:
            t = -t
    return t / np.linalg.norm(t)


def _sigma_end_tangents(d: DomainSpec) -> tuple[np.ndarray, np.ndarray]:
    nodes = d.sigma_nodes
    if d.sigma_exact.kind == "circle":
        q = np.asarray(d.sigma_exact.center)
        out = []
        for end, nxt in ((nodes[-1], nodes[-2]), (nodes[0], nodes[1])):
            rad = end - q
            t = np.array([-rad[1], rad[0]])
            out.append(t / np.linalg.norm(t) * np.sign(np.dot(t, nxt - end) or 1.0))
        return out[0], out[1]
    if len(nodes) < 3:
        seg = nodes[1] - nodes[0]
        seg = seg / np.linalg.norm(seg)
        return -seg, seg
    return _end_tangent(nodes[::-1]), _end_tangent(nodes)


def orthogonality_defect(d: DomainSpec) -> tuple[float, float]:
    """Angles between sigma and the radial direction at (start, end) contact points.

    Zero means sigma meets the unit circle orthogonally there.
    """
    out = []
    for tangent, g in zip(_sigma_end_tangents(d), d.gamma):
        cosang = min(1.0, abs(float(np.dot(tangent, g))))
        out.append(math.acos(cosang))
    return out[0], out[1]


def killing_field(x) -> tuple[np.ndarray, np.ndarray]:
    """``X = x_n x - (|x|² + 1) E_n / 2`` and its divergence ``n x_n``.

    Accepts a single point or a stack of points along the last axis.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    xn = x[..., -1:]
    X = xn * x
    X[..., -1] -= 0.5 * (np.sum(x * x, axis=-1) + 1.0)
    return X, n * x[..., -1]


def enclosed_volume(d: DomainSpec) -> float:
    """Area of the domain: shoelace over sigma plus the exact circular segment of T."""
    nodes = d.sigma_nodes
    x, y = nodes[:, 0], nodes[:, 1]
    # Closed polygon sigma_nodes[0..m-1] then the chord back to sigma_nodes[0].
    shoelace = 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))
    delta = d.t_length
    return shoelace + 0.5 * (delta - math.sin(delta))


def lens_area(radius: float) -> float:
    """Area of disk(p, r) ∩ unit disk for orthogonal circles, |p|² = 1 + r²."""
    r = radius
    dist = math.sqrt(1.0 + r * r)
    a1 = r * r * math.acos((dist * dist + r * r - 1.0) / (2.0 * dist * r))
    a2 = math.acos((dist * dist + 1.0 - r * r) / (2.0 * dist))
    tri = 0.5 * math.sqrt((-dist + r + 1) * (dist + r - 1) * (dist - r + 1) * (dist + r + 1))
    return a1 + a2 - tri


def cap_radius_for_area(area: float) -> float:
    """Radius of the orthogonal cap with the given area (lens area is increasing in r)."""
    from scipy.optimize import brentq

    if not 0.0 < area < math.pi / 2:
        raise GeometryError(f"no cap with area {area}")
    return brentq(lambda r: lens_area(r) - area, 1e-9, 1e3, xtol=1e-14)


def make_chord_domain(height: float, boundary_spacing: float = 0.05) -> DomainSpec:
    """Circular segment above the chord ``{x2 = height}``; a non-cap control domain.

    The chord meets the unit circle at angle ``asin(height)`` off the radial
    direction, so contact is not orthogonal for ``height > 0``.
    """
    if not 0.0 <= height < 1.0:
        raise GeometryError("chord height must lie in [0, 1)")
    half = math.sqrt(1.0 - height * height)
    k = max(2, math.ceil(2.0 * half / boundary_spacing))
    x = np.linspace(-half, half, k + 1)
    nodes = np.column_stack([x, np.full_like(x, height)])
    nodes[0], nodes[-1] = (-half, height), (half, height)
    a0 = math.asin(height)
    return DomainSpec(sigma_nodes=nodes, t_arc=(a0, math.pi - a0))


def radial_profile(s: np.ndarray, mode: int) -> np.ndarray:
    """Perturbation shape on ``s ∈ [0, 1]`` vanishing with zero slope at both ends, peak 1."""
    s = np.asarray(s, dtype=float)
    if mode == 1:
        return np.sin(np.pi * s) ** 2
    prof = np.sin(mode * np.pi * s) * np.sin(np.pi * s)
    grid = np.linspace(0.0, 1.0, 2001)
    peak = np.max(np.abs(np.sin(mode * np.pi * grid) * np.sin(np.pi * grid)))
    return prof / peak


def perturbed_cap_domain(
    spec: CapSpec, amplitude: float, mode: int = 2, boundary_spacing: float = 0.01
) -> DomainSpec:
    """Exact cap whose sigma is pushed radially (about the cap center) by ``amplitude·r·profile``.

    The profile vanishes to second order at Γ, so orthogonal contact is kept.
    """
    base = make_cap_domain(spec, boundary_spacing)
    p, r = spec.center, spec.radius
    nodes = base.sigma_nodes.copy()
    seg = np.linalg.norm(np.diff(nodes, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)]) / seg.sum()
    radial = (nodes - p) / r
    nodes[1:-1] += (amplitude * r * radial_profile(s, mode))[1:-1, None] * radial[1:-1]
    return DomainSpec(sigma_nodes=nodes, t_arc=base.t_arc)
