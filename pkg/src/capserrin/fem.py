"""P1 assembly and solution of the mixed Dirichlet/Robin torsion problem.

Weak form: find ``u`` vanishing on Σ̄ with
``∫∇u·∇v - ∫_T u v = -∫ f v + ∫_T g v`` for all such ``v``.
The Robin term enters with a minus sign; ``K - M_T`` is still positive
definite on the free dofs for every domain strictly inside B²₊.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Tag, TriMesh


class SolverError(RuntimeError):
    pass


# Degree-5 seven-point rule on the reference triangle (barycentric, weights sum to 1).
_A1, _B1 = 0.059715871789770, 0.470142064105115
_A2, _B2 = 0.797426985353087, 0.101286507323456
_W0, _W1, _W2 = 0.225, 0.132394152788506, 0.125939180544827
TRI_BARY = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [_A1, _B1, _B1], [_B1, _A1, _B1], [_B1, _B1, _A1],
    [_A2, _B2, _B2], [_B2, _A2, _B2], [_B2, _B2, _A2],
])
TRI_W = np.array([_W0, _W1, _W1, _W1, _W2, _W2, _W2])
# Two-point Gauss on [0, 1].
EDGE_S = np.array([0.5 - 0.5 / math.sqrt(3.0), 0.5 + 0.5 / math.sqrt(3.0)])
EDGE_W = np.array([0.5, 0.5])


@dataclass
class SparseSystem:
    mesh: TriMesh
    K: sp.csr_matrix
    M: sp.csr_matrix
    M_T: sp.csr_matrix
    b: np.ndarray
    free: np.ndarray
    areas: np.ndarray = field(repr=False)
    grads: np.ndarray = field(repr=False)

    @property
    def A(self) -> sp.csr_matrix:
        """Matrix of the bilinear form B on all dofs."""
        return (self.K - self.M_T).tocsr()

    def restrict(self, mat) -> sp.csc_matrix:
        return mat[self.free][:, self.free].tocsc()

    def energy(self, v: np.ndarray) -> float:
        """``B[v, v]`` for a full nodal vector."""
        return float(v @ (self.K @ v) - v @ (self.M_T @ v))


def element_gradients(vertices: np.ndarray, triangles: np.ndarray):
    """Signed areas and gradients of the three hat functions per triangle."""
    p = vertices[triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    area = 0.5 * det
    # grad φ_k = rot90(opposite edge) / (2 area)
    opp = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    grads = np.stack([-opp[..., 1], opp[..., 0]], axis=-1) / det[:, None, None]
    return area, grads


def assemble(m: TriMesh) -> SparseSystem:
    area, grads = element_gradients(m.vertices, m.triangles)
    if np.any(area <= 0):
        raise SolverError("mesh has non-positive triangle areas")
    n = m.n_vertices
    t = m.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    ke = np.einsum("tid,tjd->tij", grads, grads) * area[:, None, None]
    me = (np.ones((3, 3)) + np.eye(3))[None] * (area / 12.0)[:, None, None]
    K = sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    M = sp.coo_matrix((me.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    K = ((K + K.T) * 0.5).tocsr()

    te = m.edges_with_tag(Tag.T_ARC)
    length = np.linalg.norm(m.vertices[te[:, 1]] - m.vertices[te[:, 0]], axis=1)
    # Exact P1 edge mass via two-point Gauss: [[2, 1], [1, 2]] L / 6.
    phi = np.stack([1 - EDGE_S, EDGE_S])
    local = np.einsum("iq,jq,q->ij", phi, phi, EDGE_W)
    mte = local[None] * length[:, None, None]
    er = np.repeat(te, 2, axis=1).ravel()
    ec = np.tile(te, (1, 2)).ravel()
    M_T = sp.coo_matrix((mte.ravel(), (er, ec)), shape=(n, n)).tocsr()

    b = np.asarray(M.sum(axis=1)).ravel()
    free = np.flatnonzero(~m.dirichlet_mask())
    return SparseSystem(m, K, M, M_T, b, free, area, grads)


@dataclass
class DiscreteField:
    mesh: TriMesh
    values: np.ndarray
    elem_grad: np.ndarray
    grad: np.ndarray

    @classmethod
    def from_values(cls, m: TriMesh, values: np.ndarray, sys: SparseSystem | None = None):
        if sys is not None:
            area, grads = sys.areas, sys.grads
        else:
            area, grads = element_gradients(m.vertices, m.triangles)
        values = np.asarray(values, dtype=float)
        eg = np.einsum("tkd,tk->td", grads, values[m.triangles])
        return cls(m, values, eg, recover_gradient(m, area, eg))

    def grad_magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.grad, axis=1)


def recover_gradient(m: TriMesh, area: np.ndarray, elem_grad: np.ndarray) -> np.ndarray:
    """Area-weighted average of element gradients at each vertex."""
    n = m.n_vertices
    acc = np.zeros((n, 2))
    wsum = np.zeros(n)
    for k in range(3):
        np.add.at(acc, m.triangles[:, k], elem_grad * area[:, None])
        np.add.at(wsum, m.triangles[:, k], area)
    return acc / wsum[:, None]


def solve_mixed_bvp(
    sys: SparseSystem,
    f: np.ndarray | float = 1.0,
    g: np.ndarray | float = 0.0,
    method: str = "direct",
) -> DiscreteField:
    """Solve ``Δu = f`` in Ω, ``u = 0`` on Σ̄, ``∂_N u = u + g`` on T.

    ``f`` and ``g`` are constants or nodal arrays (interpolated in P1).
    """
    m = sys.mesh
    if len(sys.free) == m.n_vertices:
        raise SolverError("no Dirichlet dofs: sigma is empty")
    n = m.n_vertices
    fvec = np.broadcast_to(np.asarray(f, dtype=float), (n,))
    gvec = np.broadcast_to(np.asarray(g, dtype=float), (n,))
    rhs_full = -(sys.M @ fvec) + sys.M_T @ gvec
    A = sys.restrict(sys.A)
    rhs = rhs_full[sys.free]
    if method == "direct":
        try:
            lu = spla.splu(A)
        except RuntimeError as exc:
            raise SolverError(
                "factorization broke down: the form is not coercive (domain too close to B+)"
            ) from exc
        x = lu.solve(rhs)
        for _ in range(3):
            r = rhs - A @ x
            if np.max(np.abs(r)) <= 1e-14 * (1.0 + np.max(np.abs(rhs))):
                break
            x += lu.solve(r)
    elif method == "cg":
        x, info = spla.cg(A, rhs, rtol=1e-13, maxiter=20 * len(rhs))
        if info != 0:
            raise SolverError(f"conjugate gradients did not converge (info={info})")
    else:
        raise ValueError(f"unknown method {method!r}")
    # Normwise backward error: near B+ the solution is large and the absolute
    # residual scales with ||A|| ||x||.
    residual = np.max(np.abs(A @ x - rhs))
    scale = np.max(np.abs(rhs)) + spla.norm(A, np.inf) * np.max(np.abs(x))
    if not residual <= 1e-10 * (1.0 + scale):
        raise SolverError(f"linear solve residual {residual:.3e} too large")
    if x @ (A @ x) <= 0.0 and np.any(rhs):
        raise SolverError("B[u, u] <= 0: the form is not coercive (domain too close to B+)")
    u = np.zeros(n)
    u[sys.free] = x
    return DiscreteField.from_values(m, u, sys)


@dataclass(frozen=True)
class EdgeValues:
    edge_ids: np.ndarray
    midpoints: np.ndarray
    lengths: np.ndarray
    normals: np.ndarray
    values: np.ndarray

    def weighted_mean(self) -> float:
        return float(np.sum(self.values * self.lengths) / np.sum(self.lengths))


def outward_edge_normals(m: TriMesh, edges: np.ndarray) -> np.ndarray:
    """Outward unit normals of straight boundary edges (boundary is counterclockwise)."""
    d = m.vertices[edges[:, 1]] - m.vertices[edges[:, 0]]
    nrm = np.column_stack([d[:, 1], -d[:, 0]])
    return nrm / np.linalg.norm(nrm, axis=1, keepdims=True)


def boundary_normal_derivative(u: DiscreteField, tag: Tag) -> EdgeValues:
    """Per-edge ``⟨∇u_h, ν⟩`` from the triangle adjacent to each boundary edge.

    SIGMA edges use the straight-edge outward normal, T_ARC edges the exact
    radial direction at the edge midpoint.
    """
    m = u.mesh
    ids = np.flatnonzero(m.edge_tags == tag)
    edges = m.boundary_edges[ids]
    tri_of = m.edge_triangles()[ids]
    mid = 0.5 * (m.vertices[edges[:, 0]] + m.vertices[edges[:, 1]])
    length = np.linalg.norm(m.vertices[edges[:, 1]] - m.vertices[edges[:, 0]], axis=1)
    if tag == Tag.T_ARC:
        normals = mid / np.linalg.norm(mid, axis=1, keepdims=True)
    else:
        normals = outward_edge_normals(m, edges)
    values = np.sum(u.elem_grad[tri_of] * normals, axis=1)
    return EdgeValues(ids, mid, length, normals, values)


def integrate(u: DiscreteField | np.ndarray, m: TriMesh | None = None, weight: str | int = 1) -> float:
    """``∫_Ω u_h w`` for the P1 interpolant and weight ``1`` or ``"x2"``."""
    if isinstance(u, DiscreteField):
        m, values = u.mesh, u.values
    else:
        values = np.asarray(u, dtype=float)
    tri = m.triangles
    pts = np.einsum("qk,tkd->tqd", TRI_BARY, m.vertices[tri])
    uq = values[tri] @ TRI_BARY.T
    if weight in (1, "1"):
        wq = 1.0
    elif weight in ("x2", "x_2"):
        wq = pts[..., 1]
    else:
        raise ValueError(f"unsupported weight {weight!r}")
    area = 0.5 * np.abs(
        (m.vertices[tri[:, 1], 0] - m.vertices[tri[:, 0], 0]) * (m.vertices[tri[:, 2], 1] - m.vertices[tri[:, 0], 1])
        - (m.vertices[tri[:, 1], 1] - m.vertices[tri[:, 0], 1]) * (m.vertices[tri[:, 2], 0] - m.vertices[tri[:, 0], 0])
    )
    return float(np.sum(area * ((uq * wq) @ TRI_W)))


def integrate_boundary_sq(u: DiscreteField | np.ndarray, m: TriMesh | None = None) -> float:
    """``∫_T u_h²`` over the T_ARC edges (two-point Gauss, exact for P1)."""
    if isinstance(u, DiscreteField):
        m, values = u.mesh, u.values
    else:
        values = np.asarray(u, dtype=float)
    e = m.edges_with_tag(Tag.T_ARC)
    length = np.linalg.norm(m.vertices[e[:, 1]] - m.vertices[e[:, 0]], axis=1)
    ua, ub = values[e[:, 0]], values[e[:, 1]]
    uq = ua[:, None] * (1 - EDGE_S) + ub[:, None] * EDGE_S
    return float(np.sum(length * ((uq * uq) @ EDGE_W)))


def error_norms(u: DiscreteField, exact_value, exact_grad) -> tuple[float, float]:
    """``‖u - u_h‖_{L²}`` and ``|u - u_h|_{H¹}`` over the mesh (degree-5 rule)."""
    m = u.mesh
    tri = m.triangles
    area = np.abs(m.signed_areas())
    pts = np.einsum("qk,tkd->tqd", TRI_BARY, m.vertices[tri])
    uq = u.values[tri] @ TRI_BARY.T
    e0 = (uq - exact_value(pts)) ** 2
    e1 = np.sum((u.elem_grad[:, None, :] - exact_grad(pts)) ** 2, axis=-1)
    l2 = math.sqrt(float(np.sum(area * (e0 @ TRI_W))))
    h1 = math.sqrt(float(np.sum(area * (e1 @ TRI_W))))
    return l2, h1


@dataclass(frozen=True)
class CornerProbe:
    gamma_vertex: int
    radii: np.ndarray
    max_grad: np.ndarray
    exponent: float


def corner_regularity_probe(u: DiscreteField, levels: int = 5) -> list[CornerProbe]:
    """Max recovered-gradient magnitude in shrinking annuli around each Γ vertex.

    The growth exponent ``α`` fits ``max|∇u| ~ ρ^{-α}``; bounded gradients give
    ``α ≈ 0``.  Diagnostic only.
    """
    m = u.mesh
    gmag = u.grad_magnitude()
    h = float(np.median(np.linalg.norm(np.diff(m.vertices[m.sigma_chain()], axis=0), axis=1)))
    out = []
    for g in m.gamma_vertices():
        dist = np.linalg.norm(m.vertices - m.vertices[g], axis=1)
        outer = 2.0 ** levels * h
        radii, maxima = [], []
        for k in range(levels):
            r_out = outer / 2.0**k
            sel = (dist <= r_out) & (dist >= r_out / 2) if k < levels - 1 else dist <= r_out
            if np.any(sel):
                radii.append(r_out)
                maxima.append(float(gmag[sel].max()))
        radii_a, max_a = np.array(radii), np.array(maxima)
        if len(radii_a) >= 2 and np.all(max_a > 0):
            slope = np.polyfit(np.log(radii_a), np.log(max_a), 1)[0]
        else:
            slope = 0.0
        out.append(CornerProbe(int(g), radii_a, max_a, float(-slope)))
    return out


def write_edge_csv(path, table: EdgeValues, tag: Tag) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["edge_id", "midpoint_x", "midpoint_y", "tag", "dnu"])
        for e, (x, y), v in zip(table.edge_ids, table.midpoints, table.values):
            w.writerow([int(e), f"{x:.12g}", f"{y:.12g}", tag.name, f"{v:.12g}"])
