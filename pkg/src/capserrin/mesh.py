"""Boundary-tagged triangulations of cap-like domains.

Interior filling uses Shewchuk's Triangle (constrained Delaunay with Ruppert
refinement) with boundary Steiner points disabled, so every boundary vertex is
one we placed on the exact curve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np
import triangle as tr

from .geometry import DomainSpec, GeometryError


class Tag(IntEnum):
    INTERIOR = 0
    SIGMA = 1
    T_ARC = 2
    GAMMA = 3


class MeshError(RuntimeError):
    """Mesh generation, refinement or validation failure."""


MIN_ANGLE_DEG = 20.0
SNAP_TOL = 1e-10


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    vertex_tags: np.ndarray
    boundary_edges: np.ndarray
    edge_tags: np.ndarray
    domain: DomainSpec | None = None

    def __post_init__(self):
        for name in ("vertices", "triangles", "vertex_tags", "boundary_edges", "edge_tags"):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def signed_areas(self) -> np.ndarray:
        return _signed_areas(self.vertices, self.triangles)

    def area(self) -> float:
        return float(self.signed_areas().sum())

    def edges_with_tag(self, tag: Tag) -> np.ndarray:
        return self.boundary_edges[self.edge_tags == tag]

    def dirichlet_mask(self) -> np.ndarray:
        return (self.vertex_tags == Tag.SIGMA) | (self.vertex_tags == Tag.GAMMA)

    def gamma_vertices(self) -> np.ndarray:
        return np.flatnonzero(self.vertex_tags == Tag.GAMMA)

    def edge_triangles(self) -> np.ndarray:
        """For each boundary edge, the triangle that contains it."""
        lookup = {}
        for t, tri in enumerate(self.triangles):
            for k in range(3):
                i, j = tri[k], tri[(k + 1) % 3]
                lookup[(i, j)] = t
        out = np.empty(len(self.boundary_edges), dtype=int)
        for e, (i, j) in enumerate(self.boundary_edges):
            t = lookup.get((i, j), lookup.get((j, i)))
            if t is None:
                raise MeshError(f"boundary edge {e} ({i}, {j}) has no triangle")
            out[e] = t
        return out

    def sigma_chain(self) -> np.ndarray:
        """Vertex ids of sigma in domain order: Γ at angle_end first, Γ at angle_start last."""
        return _chain(self, Tag.SIGMA)

    def t_chain(self) -> np.ndarray:
        """Vertex ids of T in counterclockwise order (angle_start to angle_end)."""
        return _chain(self, Tag.T_ARC)

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        return TriMesh(vertices, self.triangles, self.vertex_tags, self.boundary_edges,
                       self.edge_tags, self.domain)


def _signed_areas(v: np.ndarray, t: np.ndarray) -> np.ndarray:
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


def _chain(m: TriMesh, tag: Tag) -> np.ndarray:
    # Boundary edges are stored counterclockwise around Ω, so the chain of a
    # tag is a directed path between the two GAMMA vertices.
    edges = m.edges_with_tag(tag)
    nxt = {int(i): int(j) for i, j in edges}
    starts = set(nxt) - set(nxt.values())
    if len(starts) != 1:
        raise MeshError(f"{tag.name} boundary edges do not form a single open chain")
    v = starts.pop()
    out = [v]
    while v in nxt:
        v = nxt[v]
        out.append(v)
    return np.array(out)


def triangle_angles(v: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Interior angles (radians), shape (n_triangles, 3), angle k at vertex k."""
    p = v[t]
    out = np.empty(t.shape)
    for k in range(3):
        a = p[:, (k + 1) % 3] - p[:, k]
        b = p[:, (k + 2) % 3] - p[:, k]
        cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
        out[:, k] = np.arctan2(np.abs(cross), np.sum(a * b, axis=1))
    return out


def _sample_sigma(d: DomainSpec, h: float) -> np.ndarray:
    nodes = d.sigma_nodes
    if d.sigma_exact.kind == "circle":
        q = np.asarray(d.sigma_exact.center)
        r = d.sigma_exact.radius
        a0 = math.atan2(*(nodes[0] - q)[::-1])
        a1 = math.atan2(*(nodes[-1] - q)[::-1])
        sweep = (a1 - a0) % (2 * math.pi)
        if sweep > math.pi:
            sweep -= 2 * math.pi
        k = max(2, math.ceil(abs(sweep) * r / h))
        phis = a0 + sweep * np.linspace(0.0, 1.0, k + 1)
        pts = q + r * np.column_stack([np.cos(phis), np.sin(phis)])
        pts[0], pts[-1] = nodes[0], nodes[-1]
        return pts
    # Uniform arclength resampling between corners (turn > 10°) so the
    # boundary spacing is ~h regardless of how densely sigma was given.
    seg = np.diff(nodes, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    tang = seg / seg_len[:, None]
    turn = np.arccos(np.clip(np.sum(tang[:-1] * tang[1:], axis=1), -1.0, 1.0))
    breaks = [0, *(np.flatnonzero(turn > math.radians(10.0)) + 1).tolist(), len(nodes) - 1]
    pieces = [nodes[:1]]
    for i0, i1 in zip(breaks[:-1], breaks[1:]):
        length = cum[i1] - cum[i0]
        k = max(1, math.ceil(length / h - 1e-9))
        s = cum[i0] + length * np.linspace(0.0, 1.0, k + 1)[1:]
        pts = np.column_stack([np.interp(s, cum, nodes[:, 0]), np.interp(s, cum, nodes[:, 1])])
        pts[-1] = nodes[i1]
        pieces.append(pts)
    return np.vstack(pieces)


def _sample_t(d: DomainSpec, h: float) -> np.ndarray:
    a0, a1 = d.t_arc
    k = max(2, math.ceil((a1 - a0) / h))
    phis = np.linspace(a0, a1, k + 1)
    return np.column_stack([np.cos(phis), np.sin(phis)])


def _diameter(points: np.ndarray) -> float:
    d = points[:, None, :] - points[None, :, :]
    return float(np.sqrt(np.max(np.sum(d * d, axis=-1))))


def triangulate(d: DomainSpec, h: float, min_angle: float = MIN_ANGLE_DEG) -> TriMesh:
    """Quality triangulation with boundary spacing at most ``h``."""
    if not isinstance(d, DomainSpec):
        raise GeometryError("triangulate needs a DomainSpec")
    t_pts = _sample_t(d, h)
    diam = _diameter(np.vstack([d.sigma_nodes, t_pts]))
    if not 0.0 < h < diam / 4.0:
        raise MeshError(f"h must lie in (0, diameter/4) = (0, {diam / 4:.4g}); got {h}")
    s_pts = _sample_sigma(d, h)
    # Loop: T (start -> end) then sigma interior nodes; Γ points shared.
    loop = np.vstack([t_pts, s_pts[1:-1]])
    nt = len(t_pts)
    nb = len(loop)
    segs = np.column_stack([np.arange(nb), (np.arange(nb) + 1) % nb])
    # Quality target above the 20° contract; Triangle reads the area switch in
    # fixed-point only (an exponent would be parsed as further switches).
    target = max(min_angle + 8.0, 28.0)
    area = math.sqrt(3.0) / 4.0 * h * h
    out = tr.triangulate({"vertices": loop, "segments": segs}, f"pq{target:.1f}a{area:.15f}YQ")
    verts = np.array(out["vertices"], dtype=float)
    tris = np.array(out["triangles"], dtype=np.int64)
    if not np.allclose(verts[:nb], loop, atol=0.0, rtol=0.0):
        raise MeshError("triangulator moved boundary vertices")
    verts[:nb] = loop
    tags = np.full(len(verts), Tag.INTERIOR, dtype=np.int64)
    tags[1 : nt - 1] = Tag.T_ARC
    tags[nt:nb] = Tag.SIGMA
    tags[[0, nt - 1]] = Tag.GAMMA
    edge_tags = np.where(np.arange(nb) < nt - 1, Tag.T_ARC, Tag.SIGMA).astype(np.int64)
    areas = _signed_areas(verts, tris)
    neg = areas < 0
    tris[neg] = tris[neg][:, [0, 2, 1]]
    m = TriMesh(verts, tris, tags, segs, edge_tags, d)
    check_mesh(m, min_angle=min_angle)
    return m


def check_mesh(m: TriMesh, min_angle: float | None = MIN_ANGLE_DEG) -> None:
    """Raise MeshError if a TriMesh invariant is violated."""
    areas = m.signed_areas()
    if np.any(areas <= 0):
        raise MeshError(f"triangle {int(np.argmin(areas))} has non-positive area")
    if min_angle is not None:
        worst = math.degrees(float(triangle_angles(m.vertices, m.triangles).min()))
        if worst < min_angle - 1e-9:
            raise MeshError(f"minimum angle {worst:.2f} deg below {min_angle} deg")
    # Single closed boundary cycle, sigma and T chains joined at the GAMMA vertices.
    edges = m.boundary_edges
    succ = dict(zip(edges[:, 0].tolist(), edges[:, 1].tolist()))
    if len(succ) != len(edges):
        raise MeshError("boundary vertex with two outgoing edges")
    v, steps = int(edges[0, 0]), 0
    while True:
        v = succ.get(v)
        steps += 1
        if v is None:
            raise MeshError("boundary edges do not close")
        if v == edges[0, 0]:
            break
    if steps != len(edges):
        raise MeshError("boundary has more than one cycle")
    for g in m.gamma_vertices():
        touching = m.edge_tags[(edges[:, 0] == g) | (edges[:, 1] == g)]
        if sorted(touching.tolist()) != [Tag.SIGMA, Tag.T_ARC]:
            raise MeshError(f"GAMMA vertex {g} not between one SIGMA and one T_ARC edge")
    if len(m.gamma_vertices()) != 2:
        raise MeshError("mesh must have exactly two GAMMA vertices")
    on_t = (m.vertex_tags == Tag.T_ARC) | (m.vertex_tags == Tag.GAMMA)
    off = np.abs(np.linalg.norm(m.vertices[on_t], axis=1) - 1.0)
    if off.size and off.max() > SNAP_TOL:
        raise MeshError(f"T_ARC vertex off the unit circle by {off.max():.2e}")
    if m.domain is not None and m.domain.sigma_exact.kind == "circle":
        sig = m.vertex_tags == Tag.SIGMA
        snapped = m.domain.sigma_exact.snap(m.vertices[sig])
        dev = np.linalg.norm(snapped - m.vertices[sig], axis=1)
        if dev.size and dev.max() > SNAP_TOL:
            raise MeshError(f"SIGMA vertex off its circle by {dev.max():.2e}")


def _unique_edges(tris: np.ndarray):
    all_edges = np.vstack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    key = np.sort(all_edges, axis=1)
    uniq, inverse = np.unique(key, axis=0, return_inverse=True)
    return uniq, inverse.reshape(3, -1).T


def refine(m: TriMesh) -> TriMesh:
    """Red refinement; boundary midpoints are snapped back to the exact curves."""
    edges, tri_edge = _unique_edges(m.triangles)
    nv = m.n_vertices
    mids = 0.5 * (m.vertices[edges[:, 0]] + m.vertices[edges[:, 1]])
    mid_tags = np.full(len(edges), Tag.INTERIOR, dtype=np.int64)
    bkey = {tuple(sorted(e)): (k, int(t)) for k, (e, t) in enumerate(zip(m.boundary_edges.tolist(), m.edge_tags))}
    edge_index = {tuple(e): k for k, e in enumerate(edges.tolist())}
    for key, (_, tag) in bkey.items():
        k = edge_index[key]
        mid_tags[k] = tag
        if tag == Tag.T_ARC:
            mids[k] = mids[k] / np.linalg.norm(mids[k])
        elif m.domain is not None:
            mids[k] = m.domain.sigma_exact.snap(mids[k][None])[0]
    verts = np.vstack([m.vertices, mids])
    tags = np.concatenate([m.vertex_tags, mid_tags])
    a, b, c = m.triangles.T
    ab, bc, ca = (nv + tri_edge[:, k] for k in range(3))
    tris = np.vstack([
        np.column_stack([a, ab, ca]),
        np.column_stack([ab, b, bc]),
        np.column_stack([ca, bc, c]),
        np.column_stack([ab, bc, ca]),
    ])
    areas = _signed_areas(verts, tris)
    if np.any(areas <= 0):
        bad = int(np.argmin(areas)) % m.n_triangles
        raise MeshError(f"snapping inverts a child of triangle {bad} (area {areas.min():.3e})")
    new_edges = []
    new_tags = []
    for (i, j), tag in zip(m.boundary_edges.tolist(), m.edge_tags.tolist()):
        k = nv + edge_index[tuple(sorted((i, j)))]
        new_edges += [(i, k), (k, j)]
        new_tags += [tag, tag]
    out = TriMesh(verts, tris, tags, np.array(new_edges), np.array(new_tags), m.domain)
    check_mesh(out, min_angle=None)
    return out


@dataclass(frozen=True)
class MeshQuality:
    min_angle: float
    max_aspect: float
    h_max: float
    h_min: float
    n_vertices: int
    n_triangles: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def mesh_quality(m: TriMesh) -> MeshQuality:
    """Min angle (degrees), max aspect ratio R/(2ρ) (1 = equilateral), edge-length extremes."""
    p = m.vertices[m.triangles]
    lengths = np.stack([np.linalg.norm(p[:, (k + 1) % 3] - p[:, k], axis=1) for k in range(3)], axis=1)
    area = np.abs(m.signed_areas())
    s = lengths.sum(axis=1) / 2
    inradius = area / s
    circumradius = lengths.prod(axis=1) / (4 * area)
    return MeshQuality(
        min_angle=math.degrees(float(triangle_angles(m.vertices, m.triangles).min())),
        max_aspect=float(np.max(circumradius / (2 * inradius))),
        h_max=float(lengths.max()),
        h_min=float(lengths.min()),
        n_vertices=m.n_vertices,
        n_triangles=m.n_triangles,
    )


# -- I/O ------------------------------------------------------------------------

NATIVE_HEADER = "capserrin-mesh v1"


def write_native(m: TriMesh, path: str | Path) -> None:
    lines = [NATIVE_HEADER, str(m.n_vertices)]
    lines += [f"{x:.17g} {y:.17g} {int(t)}" for (x, y), t in zip(m.vertices, m.vertex_tags)]
    lines.append(str(m.n_triangles))
    lines += [f"{i} {j} {k}" for i, j, k in m.triangles]
    lines.append(str(len(m.boundary_edges)))
    lines += [f"{i} {j} {int(t)}" for (i, j), t in zip(m.boundary_edges, m.edge_tags)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_native(path: str | Path, domain: DomainSpec | None = None) -> TriMesh:
    rows = Path(path).read_text().split("\n")
    if rows[0].strip() != NATIVE_HEADER:
        raise MeshError(f"not a {NATIVE_HEADER!r} file")
    pos = 1

    def block(ncols, dtype):
        nonlocal pos
        count = int(rows[pos])
        data = np.array([r.split() for r in rows[pos + 1 : pos + 1 + count]], dtype=float).reshape(count, ncols)
        pos += 1 + count
        return data.astype(dtype) if dtype is not float else data

    verts = block(3, float)
    tris = block(3, np.int64)
    edges = block(3, np.int64)
    return TriMesh(verts[:, :2], tris, verts[:, 2].astype(np.int64), edges[:, :2], edges[:, 2], domain)


def write_vtk(m: TriMesh, path: str | Path, point_data: dict[str, np.ndarray] | None = None,
              title: str = "capserrin") -> None:
    """Legacy ASCII VTK unstructured grid with optional POINT_DATA scalars."""
    out = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID"]
    out.append(f"POINTS {m.n_vertices} double")
    out += [f"{x:.17g} {y:.17g} 0" for x, y in m.vertices]
    out.append(f"CELLS {m.n_triangles} {4 * m.n_triangles}")
    out += [f"3 {i} {j} {k}" for i, j, k in m.triangles]
    out.append(f"CELL_TYPES {m.n_triangles}")
    out += ["5"] * m.n_triangles
    out.append(f"POINT_DATA {m.n_vertices}")
    fields = {"tag": m.vertex_tags.astype(float)}
    fields.update(point_data or {})
    for name, values in fields.items():
        values = np.asarray(values, dtype=float)
        if values.shape != (m.n_vertices,):
            raise ValueError(f"point field {name!r} has shape {values.shape}")
        out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        out += [f"{v:.17g}" for v in values]
    Path(path).write_text("\n".join(out) + "\n")


def read_vtk_points(path: str | Path) -> tuple[np.ndarray, np.ndarray, dict[str, np.ndarray]]:
    """Minimal reader for files produced by :func:`write_vtk` (used in round-trip tests)."""
    tokens = Path(path).read_text().split("\n")
    pts = cells = None
    fields = {}
    i = 0
    while i < len(tokens):
        line = tokens[i].split()
        if line[:1] == ["POINTS"]:
            n = int(line[1])
            pts = np.array([tokens[i + 1 + k].split() for k in range(n)], dtype=float)[:, :2]
            i += n
        elif line[:1] == ["CELLS"]:
            n = int(line[1])
            cells = np.array([tokens[i + 1 + k].split()[1:] for k in range(n)], dtype=np.int64)
            i += n
        elif line[:1] == ["SCALARS"]:
            name = line[1]
            n = len(pts)
            fields[name] = np.array(tokens[i + 2 : i + 2 + n], dtype=float)
            i += n + 1
        i += 1
    return pts, cells, fields
