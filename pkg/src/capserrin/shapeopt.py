"""Volume-constrained ascent of the torsional rigidity driven by the Hadamard derivative.

The first variation of ``τ̃`` under a boundary velocity ``Y`` is
``∫_Σ (∂_ν u)² ⟨Y, ν⟩``; with the volume constraint the ascent direction is
``V = (∂_ν u)² - mean``, which vanishes exactly when ``∂_ν u`` is constant on
Σ.  Meshes follow the boundary by harmonic morphing (fixed topology), so that
``τ̃_h`` is a smooth function of the boundary nodes; a fresh triangulation is
made only when morphing degrades the elements.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse.linalg as spla
from scipy.optimize import brentq

from .fem import SolverError, assemble, boundary_normal_derivative, solve_mixed_bvp
from .geometry import DomainSpec, GeometryError, cap_radius_for_area, enclosed_volume
from .mesh import Tag, TriMesh, triangle_angles, triangulate, write_vtk
from .torsion import (
    RigidityCertificate,
    TorsionReport,
    TorsionSolution,
    p_function,
    rigidity_certificate,
    tau_by_volume,
    torsion_report,
)


class ShapeOptError(RuntimeError):
    """The flow cannot continue (mesh failure or exhausted backtracking)."""

    def __init__(self, msg: str, state: "ShapeState | None" = None):
        super().__init__(msg)
        self.state = state


class BoundaryConstraintError(ShapeOptError):
    """Σ tried to leave the upper half disk."""


@dataclass(frozen=True)
class ShapeOptions:
    h: float = 0.02
    tol: float = 0.02
    max_iter: int = 60
    smoothing: float = 0.25
    step_factor: float = 0.1
    backtrack: float = 0.5
    step_floor: float = 1e-6
    growth: float = 1.25
    remesh_angle: float = 15.0
    volume_tol: float = 1e-10
    trajectory_path: str | None = None
    vtk_dir: str | None = None


@dataclass
class ShapeState:
    domain: DomainSpec
    report: TorsionReport
    step_size: float
    iteration: int
    history: list = field(default_factory=list)
    mesh: TriMesh | None = None
    volume0: float = 0.0
    status: str = "running"
    remeshes: int = 0
    certificate: RigidityCertificate | None = None
    equivalent_cap_radius: float = math.nan


# -- boundary geometry helpers --------------------------------------------------


def polyline_normals(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Outward unit normals per edge and per node of a Σ chain, plus edge lengths.

    Σ runs from Γ_end to Γ_start, i.e. clockwise-outward orientation
    ``ν = (d_y, -d_x)/|d|`` for a counterclockwise boundary loop.
    """
    d = np.diff(x, axis=0)
    length = np.linalg.norm(d, axis=1)
    en = np.column_stack([d[:, 1], -d[:, 0]]) / length[:, None]
    nn = np.zeros_like(x)
    nn[:-1] += en
    nn[1:] += en
    nn /= np.linalg.norm(nn, axis=1, keepdims=True)
    return en, nn, length


def arclength_weights(length: np.ndarray) -> np.ndarray:
    """Trapezoid weights of the chain nodes."""
    w = np.zeros(len(length) + 1)
    w[:-1] += 0.5 * length
    w[1:] += 0.5 * length
    return w


def _edge_density(sol_u, m: TriMesh, chain: np.ndarray) -> np.ndarray:
    """``(∂_ν u_h)²`` on the Σ edges in chain order."""
    ev = boundary_normal_derivative(sol_u, Tag.SIGMA)
    edges = m.boundary_edges[ev.edge_ids]
    pos = {int(v): k for k, v in enumerate(chain)}
    order = np.array([pos[int(a)] for a in edges[:, 0]])
    out = np.empty(len(chain) - 1)
    out[order] = ev.values**2
    return out


def shape_gradient_from_solution(sol: TorsionSolution, smoothing: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    """Projected normal velocity ``V = g - ḡ`` at Σ chain nodes and the chain ids."""
    m = sol.mesh
    chain = m.sigma_chain()
    x = m.vertices[chain]
    _, _, length = polyline_normals(x)
    ge = _edge_density(sol.u, m, chain)
    g = np.empty(len(chain))
    g[0], g[-1] = ge[0], ge[-1]
    g[1:-1] = (length[:-1] * ge[:-1] + length[1:] * ge[1:]) / (length[:-1] + length[1:])
    w = arclength_weights(length)
    V = g - np.sum(w * g) / np.sum(w)
    if smoothing:
        lap = np.zeros_like(V)
        lap[1:-1] = V[:-2] - 2 * V[1:-1] + V[2:]
        V = V + smoothing * lap
        V -= np.sum(w * V) / np.sum(w)
    return V, chain


def shape_gradient(state: ShapeState, smoothing: float = 0.25) -> np.ndarray:
    """Per-Σ-node normal velocity (Γ nodes included at the chain ends)."""
    m = state.mesh if state.mesh is not None else triangulate(state.domain, state.report.h)
    sys = assemble(m)
    sol = TorsionSolution(m, sys, solve_mixed_bvp(sys), state.report.h)
    return shape_gradient_from_solution(sol, smoothing)[0]


def _tangent_speed(angle: float, normal: np.ndarray, floor: float = 0.3) -> float:
    """Factor turning a normal speed at Γ into an angular speed along the unit circle."""
    t = np.array([-math.sin(angle), math.cos(angle)])
    dot = float(t @ normal)
    if abs(dot) < floor:
        dot = math.copysign(floor, dot if dot != 0 else 1.0)
    return 1.0 / dot


def _reparametrize(x: np.ndarray) -> np.ndarray:
    """Equal-arclength redistribution of the chain nodes, endpoints fixed."""
    seg = np.linalg.norm(np.diff(x, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    target = np.linspace(0.0, s[-1], len(x))
    out = np.column_stack([np.interp(target, s, x[:, 0]), np.interp(target, s, x[:, 1])])
    out[0], out[-1] = x[0], x[-1]
    return out


def _offset(x: np.ndarray, angles: tuple[float, float], delta: float):
    """Uniform normal offset of Σ by ``delta``; Γ slides along the unit circle."""
    en, nn, _ = polyline_normals(x)
    y = x.copy()
    y[1:-1] += delta * nn[1:-1]
    a_end = angles[1] + delta * _tangent_speed(angles[1], en[0])
    a_start = angles[0] + delta * _tangent_speed(angles[0], en[-1])
    y[0] = (math.cos(a_end), math.sin(a_end))
    y[-1] = (math.cos(a_start), math.sin(a_start))
    return y, (a_start, a_end)


def _volume(x: np.ndarray, angles) -> float:
    shoelace = 0.5 * float(np.sum(x[:, 0] * np.roll(x[:, 1], -1) - np.roll(x[:, 0], -1) * x[:, 1]))
    delta = angles[1] - angles[0]
    return shoelace + 0.5 * (delta - math.sin(delta))


def _correct_volume(x, angles, target: float, h: float, rtol: float):
    f = lambda dl: _volume(*_offset(x, angles, dl)) - target
    lo, hi = -0.1 * h, 0.1 * h
    for _ in range(30):
        if f(lo) * f(hi) <= 0:
            break
        lo, hi = 2 * lo, 2 * hi
    else:
        raise ShapeOptError("volume correction could not be bracketed")
    dl = brentq(f, lo, hi, xtol=1e-16, rtol=4 * np.finfo(float).eps, maxiter=200)
    y, ang = _offset(x, angles, dl)
    if abs(_volume(y, ang) - target) > rtol * abs(target):
        raise ShapeOptError("volume correction failed to reach tolerance")
    return y, ang


# -- mesh morphing --------------------------------------------------------------


class _Morpher:
    """Harmonic extension of boundary displacements on a fixed mesh topology."""

    def __init__(self, m: TriMesh, sys=None):
        self.mesh = m
        K = (sys or assemble(m)).K.tocsr()
        self.inner = np.flatnonzero(m.vertex_tags == Tag.INTERIOR)
        self.bnd = np.flatnonzero(m.vertex_tags != Tag.INTERIOR)
        self.K_ib = K[self.inner][:, self.bnd]
        self.lu = spla.splu(K[self.inner][:, self.inner].tocsc())

    def move(self, new_boundary: dict[int, np.ndarray]) -> TriMesh:
        v = np.array(self.mesh.vertices)
        disp_b = np.zeros((len(self.bnd), 2))
        pos = {int(b): k for k, b in enumerate(self.bnd)}
        for vid, p in new_boundary.items():
            disp_b[pos[vid]] = p - v[vid]
        v[self.bnd] += disp_b
        rhs = -(self.K_ib @ disp_b)
        v[self.inner] += np.column_stack([self.lu.solve(rhs[:, 0]), self.lu.solve(rhs[:, 1])])
        return self.mesh.with_vertices(v)


def _morph_ok(m: TriMesh, min_angle: float) -> bool:
    if np.any(m.signed_areas() <= 0):
        return False
    return float(np.degrees(triangle_angles(m.vertices, m.triangles).min())) >= min_angle


def _domain_from_mesh(m: TriMesh) -> DomainSpec:
    chain = m.sigma_chain()
    x = m.vertices[chain]
    a_end = math.atan2(x[0, 1], x[0, 0])
    a_start = math.atan2(x[-1, 1], x[-1, 0])
    if a_end < a_start:
        a_end += 2 * math.pi
    return DomainSpec(sigma_nodes=x, t_arc=(a_start, a_end))


def _boundary_targets(m: TriMesh, x_sigma: np.ndarray, angles) -> dict[int, np.ndarray]:
    targets = {int(v): x_sigma[k] for k, v in enumerate(m.sigma_chain())}
    tc = m.t_chain()
    ang = np.linspace(angles[0], angles[1], len(tc))
    for k, v in enumerate(tc):
        targets[int(v)] = np.array([math.cos(ang[k]), math.sin(ang[k])])
    return targets


def _solve(m: TriMesh, h: float) -> TorsionSolution:
    sys = assemble(m)
    return TorsionSolution(m, sys, solve_mixed_bvp(sys), h)


# -- Hadamard check -------------------------------------------------------------


def bump(s: np.ndarray, center: float, width: float) -> np.ndarray:
    """Smooth compactly supported bump on arclength ``s`` with peak 1 at ``center``."""
    z = (np.asarray(s, dtype=float) - center) / width
    out = np.zeros_like(z)
    inside = np.abs(z) < 1
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - z[inside] ** 2))
    return out


def random_bump(rng: np.random.Generator):
    """A bump profile on normalized Σ arclength supported inside ``[0.1, 0.9]``."""
    width = rng.uniform(0.1, 0.25)
    center = rng.uniform(0.1 + width, 0.9 - width)
    amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0)
    return lambda s: amp * bump(s, center, width)


@dataclass(frozen=True)
class HadamardResult:
    fd_slope: float
    formula_value: float
    rel_err: float


def hadamard_check(d: DomainSpec, Y, t: float = 1e-3, h: float = 0.01) -> HadamardResult:
    """Centred difference of ``τ̃_h`` under ``Σ ↦ Σ ± tYν`` vs ``∫_Σ (∂_ν u)² ⟨Y,ν⟩``.

    ``Y`` maps normalized Σ arclength in ``[0, 1]`` to a normal speed and must
    vanish near both ends.  The deformed meshes are harmonic morphs of one
    triangulation.
    """
    m = triangulate(d, h)
    sys = assemble(m)
    sol = TorsionSolution(m, sys, solve_mixed_bvp(sys), h)
    chain = m.sigma_chain()
    x = m.vertices[chain]
    en, nn, length = polyline_normals(x)
    s = np.concatenate([[0.0], np.cumsum(length)]) / length.sum()
    y = np.asarray(Y(s), dtype=float)
    if abs(y[0]) > 0 or abs(y[-1]) > 0:
        raise GeometryError("the variation must vanish at Γ")
    g = _edge_density(sol.u, m, chain)
    # ⟨Y, ν_e⟩ is linear along each edge; two-point Gauss reduces to the mean.
    yn = (y[:-1] * np.sum(nn[:-1] * en, axis=1) + y[1:] * np.sum(nn[1:] * en, axis=1)) / 2
    formula = float(np.sum(length * g * yn))
    if not np.any(y):
        return HadamardResult(0.0, formula, 0.0)
    morph = _Morpher(m, sys)
    taus = []
    for sign in (1.0, -1.0):
        targets = {int(v): x[k] + sign * t * y[k] * nn[k] for k, v in enumerate(chain)}
        mt = morph.move(targets)
        if np.any(mt.signed_areas() <= 0):
            raise GeometryError("deformed domain is invalid (inverted elements)")
        taus.append(tau_by_volume(_solve(mt, h).u))
    fd = (taus[0] - taus[1]) / (2 * t)
    rel = abs(fd - formula) / max(abs(formula), 1e-300)
    return HadamardResult(fd, formula, rel)


# -- flow -----------------------------------------------------------------------


def _record(state: ShapeState, volume: float, remeshed: bool) -> dict:
    rec = {
        "iter": state.iteration,
        "tau": state.report.tau_by_volume,
        "volume": volume,
        "c_rel": state.report.serrin_c_rel,
        "step": state.step_size,
        "remeshed": remeshed,
    }
    state.history.append(rec)
    return rec


def optimize(d0: DomainSpec, opts: ShapeOptions | None = None) -> ShapeState:
    """Run the volume-preserving ascent from ``d0`` until ``c_rel ≤ opts.tol``."""
    opts = opts or ShapeOptions()
    h = opts.h
    m = triangulate(d0, h)
    sol = _solve(m, h)
    vol0 = enclosed_volume(d0)
    state = ShapeState(domain=d0, report=torsion_report(sol, d0), step_size=math.nan,
                       iteration=0, mesh=m, volume0=vol0)
    traj = open(opts.trajectory_path, "w") if opts.trajectory_path else None
    step0 = None

    def emit(remeshed=False):
        rec = _record(state, enclosed_volume(state.domain), remeshed)
        if traj:
            traj.write(json.dumps(rec) + "\n")
            traj.flush()
        if opts.vtk_dir:
            P = p_function(sol.u)
            write_vtk(state.mesh, Path(opts.vtk_dir) / f"field_{state.iteration:03d}.vtk",
                      {"u": sol.u.values, "P": P.values}, f"iteration {state.iteration}")

    try:
        emit()
        while True:
            if state.report.serrin_c_rel <= opts.tol:
                state.status = "converged"
                break
            if state.iteration >= opts.max_iter:
                state.status = "max_iter"
                break
            V, chain = shape_gradient_from_solution(sol, opts.smoothing)
            vmax = float(np.max(np.abs(V)))
            if vmax == 0.0:
                state.status = "stationary"
                break
            if step0 is None:
                step0 = opts.step_factor * h / vmax
                state.step_size = step0
            m = state.mesh
            x = m.vertices[chain]
            angles = state.domain.t_arc
            morph = _Morpher(m, sol.system)
            remeshed = False
            step = state.step_size
            while True:
                cand = _candidate(x, angles, V, step, vol0, h, opts.volume_tol)
                mc = morph.move(_boundary_targets(m, *cand))
                if not _morph_ok(mc, opts.remesh_angle):
                    if remeshed:
                        raise ShapeOptError("mesh quality lost even after remeshing", state)
                    # Re-baseline on a fresh triangulation of the current domain.
                    m = triangulate(state.domain, h)
                    sol = _solve(m, h)
                    state.mesh, state.report = m, torsion_report(sol, state.domain)
                    state.remeshes += 1
                    remeshed = True
                    V, chain = shape_gradient_from_solution(sol, opts.smoothing)
                    x = m.vertices[chain]
                    morph = _Morpher(m, sol.system)
                    continue
                try:
                    sol_c = _solve(mc, h)
                except SolverError:
                    sol_c = None
                if sol_c is not None and tau_by_volume(sol_c.u) > state.report.tau_by_volume:
                    break
                step *= opts.backtrack
                if step < opts.step_floor * step0:
                    state.status = "stalled"
                    raise ShapeOptError("backtracking exhausted: no ascent step found", state)
            sol = sol_c
            state.mesh = mc
            state.domain = _domain_from_mesh(mc)
            state.report = torsion_report(sol, state.domain)
            state.iteration += 1
            state.step_size = step
            emit(remeshed)
            state.step_size = step * opts.growth
    except ShapeOptError as exc:
        exc.state = exc.state or state
        if state.status == "running":
            state.status = "failed"
        raise
    finally:
        if traj:
            traj.close()

    state.certificate = rigidity_certificate(state.domain, h)
    try:
        state.equivalent_cap_radius = cap_radius_for_area(enclosed_volume(state.domain))
    except GeometryError:
        # The full half disk is the r -> infinity limit of the cap family.
        state.equivalent_cap_radius = math.inf
    return state


def _candidate(x, angles, V, step, vol0, h, volume_tol):
    """Move Σ by ``step·V`` along the normals, slide Γ, reparametrize, fix the volume."""
    en, nn, _ = polyline_normals(x)
    y = x.copy()
    y[1:-1] += step * V[1:-1, None] * nn[1:-1]
    a_end = angles[1] + step * V[0] * _tangent_speed(angles[1], en[0])
    a_start = angles[0] + step * V[-1] * _tangent_speed(angles[0], en[-1])
    y[0] = (math.cos(a_end), math.sin(a_end))
    y[-1] = (math.cos(a_start), math.sin(a_start))
    if np.min(y[:, 1]) < 0.0 or not a_start < a_end:
        raise BoundaryConstraintError("sigma crosses {x2 = 0}: the step leaves the upper half disk")
    y = _reparametrize(y)
    y, ang = _correct_volume(y, (a_start, a_end), vol0, h, volume_tol)
    if np.min(y[:, 1]) < 0.0:
        raise BoundaryConstraintError("sigma crosses {x2 = 0}: the step leaves the upper half disk")
    return y, ang
