"""Triangular meshes from quad-split block grids, plus per-element geometry.

Two generators: a perturbed square (checkerboard diagonal split of a regular
quad grid, every vertex jittered by a counter-based RNG) and a ring built
from 8 angular patches. A line-oriented text format supports lossless
save/load round trips.

Vertex jitter uses SplitMix64 keyed by (seed, vertex index, coordinate,
retry), so displacements do not depend on traversal order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DegenerateElement",
    "MeshParseError",
    "ConnectivityError",
    "Mesh",
    "ElementGeometry",
    "EdgeGeometry",
    "build_square_mesh",
    "build_ring_mesh",
    "compute_geometry",
    "load_mesh",
    "save_mesh",
]

DIRICHLET = 1


class DegenerateElement(ValueError):
    """Triangle with non-positive Jacobian determinant."""


class MeshParseError(ValueError):
    """Malformed mesh file; message carries the line number."""


class ConnectivityError(ValueError):
    """Non-manifold or inconsistent triangle connectivity."""


@dataclass
class Edge:
    v0: int
    v1: int
    left: int
    left_local: int
    right: int = -1
    right_local: int = -1
    marker: int = 0

    @property
    def is_boundary(self) -> bool:
        return self.right < 0


@dataclass
class Mesh:
    vertices: np.ndarray  # (N, 2) float64, meters
    triangles: np.ndarray  # (M, 3) int, counterclockwise
    edges: list[Edge] = field(default_factory=list)
    boundary_markers: dict[tuple[int, int], int] = field(default_factory=dict)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)


def _build_edges(mesh: Mesh) -> None:
    """Populate edge connectivity; local edge j is opposite local vertex j."""
    lookup: dict[tuple[int, int], Edge] = {}
    edges: list[Edge] = []
    for t, (a0, a1, a2) in enumerate(mesh.triangles):
        for local, (u, v) in enumerate(((a1, a2), (a2, a0), (a0, a1))):
            key = (min(u, v), max(u, v))
            hit = lookup.get(key)
            if hit is None:
                e = Edge(v0=int(u), v1=int(v), left=t, left_local=local)
                lookup[key] = e
                edges.append(e)
            else:
                if hit.right >= 0:
                    raise ConnectivityError(
                        f"edge {key} shared by more than two triangles"
                    )
                if (hit.v0, hit.v1) == (u, v):
                    raise ConnectivityError(
                        f"triangles {hit.left} and {t} traverse edge {key} in the "
                        "same direction (inconsistent orientation)"
                    )
                hit.right = t
                hit.right_local = local
    for e in edges:
        if e.is_boundary:
            e.marker = mesh.boundary_markers.get((min(e.v0, e.v1), max(e.v0, e.v1)),
                                                 DIRICHLET)
    mesh.edges = edges


def _signed_dets(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    return (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (
        c[:, 0] - a[:, 0]
    )


def _splitmix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer; maps uint64 keys to well-mixed uint64."""
    with np.errstate(over="ignore"):
        z = (x + np.uint64(0x9E3779B97F4A7C15)).astype(np.uint64)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def _jitter_unit(seed: int, vertex_ids: np.ndarray, coord: int, retry: int) -> np.ndarray:
    """Deterministic uniforms in [-1, 1) keyed by (seed, vertex, coord, retry)."""
    key = (
        np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        ^ _splitmix64(vertex_ids.astype(np.uint64) * np.uint64(4) + np.uint64(coord))
        ^ _splitmix64(np.uint64(retry) + np.uint64(0x5DEECE66D))
    )
    bits = _splitmix64(key)
    return bits.astype(np.float64) / 2.0**63 - 1.0


def build_square_mesh(level: int, perturb: float = 0.0, seed: int = 0) -> Mesh:
    """Quad-split triangulation of [0, 1000]^2 with random vertex jitter.

    Each quad of the regular (2^level)^2 grid is split along a diagonal that
    alternates in a checkerboard pattern. Every vertex (boundary included)
    is displaced by independent uniform offsets in [-perturb*h, perturb*h]
    per coordinate.
    """
    if level < 1 or level > 8:
        raise ValueError("level must be in 1..8")
    if not 0.0 <= perturb <= 0.2:
        raise ValueError("perturb must be in [0, 0.2]")
    n = 2**level
    h = 1000.0 / n
    xs = np.linspace(0.0, 1000.0, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="ij")  # vertex id = i*(n+1) + j
    base = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return i * (n + 1) + j

    tris = []
    for i in range(n):
        for j in range(n):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v11, v01 = vid(i + 1, j + 1), vid(i, j + 1)
            if (i + j) % 2 == 0:  # SW-NE diagonal
                tris.append((v00, v10, v11))
                tris.append((v00, v11, v01))
            else:  # NW-SE diagonal
                tris.append((v00, v10, v01))
                tris.append((v10, v11, v01))
    triangles = np.array(tris, dtype=np.int64)

    vertices = base.copy()
    if perturb > 0.0:
        ids = np.arange(len(base), dtype=np.uint64)
        retry = np.zeros(len(base), dtype=np.int64)
        for _round in range(100):
            for c in (0, 1):
                u = np.empty(len(base))
                for r in np.unique(retry):
                    sel = retry == r
                    u[sel] = _jitter_unit(seed, ids[sel], c, int(r))
                vertices[:, c] = base[:, c] + perturb * h * u
            dets = _signed_dets(vertices, triangles)
            bad = dets <= 0.0
            if not bad.any():
                break
            retry[np.unique(triangles[bad])] += 1
        else:
            raise DegenerateElement(
                "perturbation produced a degenerate triangle after 100 retries"
            )

    mesh = Mesh(vertices=vertices, triangles=triangles)
    _build_edges(mesh)
    return mesh


def build_ring_mesh(level: int) -> Mesh:
    """Annulus 500 <= r <= 1000 built from 8 x (2^level)^2 quads, split."""
    if level < 1 or level > 8:
        raise ValueError("level must be in 1..8")
    n = 2**level
    n_ang = 8 * n  # angular cells over the full circle (periodic)
    n_rad = n
    thetas = np.linspace(0.0, 2.0 * np.pi, n_ang, endpoint=False)
    radii = np.linspace(500.0, 1000.0, n_rad + 1)

    def vid(a, ri):
        return (a % n_ang) * (n_rad + 1) + ri

    verts = np.empty((n_ang * (n_rad + 1), 2))
    for a in range(n_ang):
        for ri in range(n_rad + 1):
            verts[vid(a, ri)] = (
                radii[ri] * np.cos(thetas[a]),
                radii[ri] * np.sin(thetas[a]),
            )

    tris = []
    for a in range(n_ang):
        for ri in range(n_rad):
            # corners in physical counterclockwise order
            p1 = vid(a, ri)
            p2 = vid(a, ri + 1)
            p3 = vid(a + 1, ri + 1)
            p4 = vid(a + 1, ri)
            if (a + ri) % 2 == 0:
                tris.append((p1, p2, p3))
                tris.append((p1, p3, p4))
            else:
                tris.append((p1, p2, p4))
                tris.append((p2, p3, p4))
    triangles = np.array(tris, dtype=np.int64)

    mesh = Mesh(vertices=verts, triangles=triangles)
    _build_edges(mesh)
    return mesh


@dataclass
class ElementGeometry:
    """Affine maps of all elements, vectorized over the mesh."""

    B: np.ndarray        # (E, 2, 2)
    detB: np.ndarray     # (E,)
    sqrt_detB: np.ndarray
    a1: np.ndarray       # (E, 2) first vertex of each triangle


@dataclass
class EdgeGeometry:
    """Flat arrays over mesh edges, aligned with mesh.edges."""

    normal: np.ndarray   # (NE, 2) outward unit normal of the left triangle
    length: np.ndarray   # (NE,)


def compute_geometry(mesh: Mesh) -> tuple[ElementGeometry, EdgeGeometry]:
    v = mesh.vertices
    t = mesh.triangles
    a1 = v[t[:, 0]]
    B = np.stack([v[t[:, 1]] - a1, v[t[:, 2]] - a1], axis=2)  # columns
    detB = B[:, 0, 0] * B[:, 1, 1] - B[:, 0, 1] * B[:, 1, 0]
    if (detB <= 0.0).any():
        bad = int(np.argmax(detB <= 0.0))
        raise DegenerateElement(f"triangle {bad} has detB = {detB[bad]:.3e}")

    ne = len(mesh.edges)
    normal = np.empty((ne, 2))
    length = np.empty(ne)
    for idx, e in enumerate(mesh.edges):
        d = v[e.v1] - v[e.v0]
        ln = float(np.hypot(d[0], d[1]))
        length[idx] = ln
        # left triangle traverses v0 -> v1 counterclockwise, so its outward
        # normal is the direction rotated clockwise
        normal[idx] = (d[1] / ln, -d[0] / ln)
    return (
        ElementGeometry(B=B, detB=detB, sqrt_detB=np.sqrt(detB), a1=a1),
        EdgeGeometry(normal=normal, length=length),
    )


FORMAT_HEADER = "ghoddess-mesh 1"


def save_mesh(mesh: Mesh, path: str | Path) -> None:
    path = Path(path)
    lines = [FORMAT_HEADER]
    lines.append(f"vertices {mesh.n_vertices}")
    for x, y in mesh.vertices:
        lines.append(f"{x:.17g} {y:.17g}")
    lines.append(f"triangles {mesh.n_triangles}")
    for a, b, c in mesh.triangles:
        lines.append(f"{a} {b} {c}")
    bnd = [e for e in mesh.edges if e.is_boundary]
    lines.append(f"boundary {len(bnd)}")
    for e in bnd:
        lines.append(f"{e.v0} {e.v1} {e.marker}")
    path.write_text("\n".join(lines) + "\n")


def load_mesh(path: str | Path) -> Mesh:
    path = Path(path)
    raw = path.read_text().splitlines()
    rows = [
        (no + 1, line.split("#", 1)[0].strip())
        for no, line in enumerate(raw)
    ]
    rows = [(no, text) for no, text in rows if text]
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(rows):
            raise MeshParseError(f"line {len(raw)}: unexpected end of file")
        item = rows[pos]
        pos += 1
        return item

    no, text = take()
    if text != FORMAT_HEADER:
        raise MeshParseError(f"line {no}: expected header {FORMAT_HEADER!r}")

    def section(keyword):
        no, text = take()
        parts = text.split()
        if len(parts) != 2 or parts[0] != keyword or not parts[1].isdigit():
            raise MeshParseError(f"line {no}: expected '{keyword} <count>'")
        return int(parts[1])

    nv = section("vertices")
    vertices = np.empty((nv, 2))
    for i in range(nv):
        no, text = take()
        parts = text.split()
        try:
            vertices[i] = (float(parts[0]), float(parts[1]))
            assert len(parts) == 2
        except (ValueError, IndexError, AssertionError):
            raise MeshParseError(f"line {no}: expected 'x y'") from None

    nt = section("triangles")
    triangles = np.empty((nt, 3), dtype=np.int64)
    for i in range(nt):
        no, text = take()
        parts = text.split()
        try:
            triangles[i] = [int(p) for p in parts]
            assert len(parts) == 3
        except (ValueError, AssertionError):
            raise MeshParseError(f"line {no}: expected 'v0 v1 v2'") from None
        if (triangles[i] < 0).any() or (triangles[i] >= nv).any():
            raise MeshParseError(f"line {no}: vertex index out of range")

    nb = section("boundary")
    markers = {}
    for i in range(nb):
        no, text = take()
        parts = text.split()
        try:
            v0, v1, marker = (int(p) for p in parts)
            assert len(parts) == 3
        except (ValueError, AssertionError):
            raise MeshParseError(f"line {no}: expected 'v0 v1 marker'") from None
        if not (0 <= v0 < nv and 0 <= v1 < nv):
            raise MeshParseError(f"line {no}: vertex index out of range")
        markers[(min(v0, v1), max(v0, v1))] = marker

    mesh = Mesh(vertices=vertices, triangles=triangles, boundary_markers=markers)
    _build_edges(mesh)
    return mesh
