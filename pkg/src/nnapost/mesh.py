"""Conforming triangulations with newest-vertex-bisection refinement.

Storage convention: every triangle ``(a, b, c)`` is counter-clockwise and its
first vertex ``a`` is the *newest vertex*; the opposite edge ``(b, c)`` is the
refinement edge.  Local edge ``i`` is the edge opposite local vertex ``i``, so
local edge 0 is always the refinement edge.

Meshes are immutable: :func:`refine_nvb` returns a new :class:`Mesh`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable

import numpy as np

__all__ = [
    "Mesh",
    "make_crisscross_unit_square",
    "make_lshape_rotated",
    "make_boundary_layer_mesh",
    "refine_nvb",
    "refine_uniform",
    "mesh_size",
    "mesh_to_text",
    "mesh_from_text",
]

# local edge i is opposite local vertex i
_LOCAL_EDGES = np.array([[1, 2], [2, 0], [0, 1]])


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming 2D triangulation.

    Attributes
    ----------
    vertices : ndarray, shape (nv, 2)
    triangles : ndarray, shape (nt, 3)
        Counter-clockwise vertex triples, newest vertex first.
    generation : ndarray, shape (nt,)
        Number of bisections separating each triangle from the initial mesh.
    parent : ndarray or None
        Index of the containing triangle in the mesh this one was refined from.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    generation: np.ndarray
    parent: np.ndarray | None = field(default=None)

    def __post_init__(self):
        for arr in (self.vertices, self.triangles, self.generation, self.parent):
            if arr is not None:
                arr.setflags(write=False)

    @classmethod
    def from_arrays(cls, vertices, triangles) -> "Mesh":
        """Build a mesh from raw arrays, fixing orientation and seeding refinement edges.

        The refinement edge of each triangle is its longest edge; ties are
        broken by the smallest opposite-vertex index.
        """
        vertices = np.asarray(vertices, dtype=float)
        tri = np.array(triangles, dtype=np.int64)
        area2 = _signed_area2(vertices, tri)
        flip = area2 < 0
        tri[flip] = tri[flip][:, [0, 2, 1]]
        p = vertices[tri]
        lengths = np.stack(
            [np.linalg.norm(p[:, j] - p[:, i], axis=1) for i, j in _LOCAL_EDGES], axis=1
        )
        longest = lengths.max(axis=1, keepdims=True)
        # equal within roundoff counts as a tie
        tie = lengths >= longest * (1.0 - 1e-12)
        key = np.where(tie, tri, np.iinfo(np.int64).max)
        newest = np.argmin(key, axis=1)
        rows = np.arange(len(tri))[:, None]
        order = (newest[:, None] + np.arange(3)[None, :]) % 3
        tri = tri[rows, order]
        return cls(vertices, tri, np.zeros(len(tri), dtype=np.int64))

    # ------------------------------------------------------------------ geometry

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.triangles)

    def areas(self) -> np.ndarray:
        return 0.5 * _signed_area2(self.vertices, self.triangles)

    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    def diameters(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return np.max(
            [np.linalg.norm(p[:, j] - p[:, i], axis=1) for i, j in _LOCAL_EDGES], axis=0
        )

    # ----------------------------------------------------------------- topology

    @cached_property
    def _topology(self):
        nt = self.n_elements
        local = self.triangles[:, _LOCAL_EDGES]  # (nt, 3, 2)
        keys = np.sort(local.reshape(-1, 2), axis=1)
        edges, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(nt, 3)
        edge_tri = -np.ones((len(edges), 2), dtype=np.int64)
        flat_t = np.repeat(np.arange(nt), 3)
        flat_e = inverse.ravel()
        # first and second incident triangle of every edge
        order = np.lexsort((flat_t, flat_e))
        fe, ft = flat_e[order], flat_t[order]
        first = np.ones(len(fe), dtype=bool)
        first[1:] = fe[1:] != fe[:-1]
        edge_tri[fe[first], 0] = ft[first]
        edge_tri[fe[~first], 1] = ft[~first]
        for arr in (edges, inverse, edge_tri):
            arr.setflags(write=False)
        return edges, inverse, edge_tri

    @property
    def edges(self) -> np.ndarray:
        """Unique edges as ascending vertex pairs, shape (ne, 2)."""
        return self._topology[0]

    @property
    def element_edges(self) -> np.ndarray:
        """Global edge index of local edge ``i`` (opposite vertex ``i``), shape (nt, 3)."""
        return self._topology[1]

    @property
    def edge_triangles(self) -> np.ndarray:
        """Triangles incident to each edge, ``-1`` in the second slot on the boundary."""
        return self._topology[2]

    @cached_property
    def _boundary(self):
        edges, t2e, edge_tri = self._topology
        bnd_edges = np.flatnonzero(edge_tri[:, 1] < 0)
        parents = edge_tri[bnd_edges, 0]
        # orient each facet as it runs counter-clockwise inside its parent
        facets = np.empty((len(bnd_edges), 2), dtype=np.int64)
        for k, (e, t) in enumerate(zip(bnd_edges, parents)):
            i = int(np.flatnonzero(t2e[t] == e)[0])
            facets[k] = self.triangles[t, _LOCAL_EDGES[i]]
        # chain into closed loops
        start_of = {int(a): k for k, a in enumerate(facets[:, 0])}
        visited = np.zeros(len(facets), dtype=bool)
        order = []
        for k0 in range(len(facets)):
            if visited[k0]:
                continue
            k = k0
            while not visited[k]:
                visited[k] = True
                order.append(k)
                k = start_of[int(facets[k, 1])]
        order = np.array(order, dtype=np.int64)
        facets = facets[order]
        parents = parents[order]
        bnd_edges = bnd_edges[order]
        d = self.vertices[facets[:, 1]] - self.vertices[facets[:, 0]]
        normals = np.stack([d[:, 1], -d[:, 0]], axis=1) / np.linalg.norm(d, axis=1)[:, None]
        for arr in (facets, parents, bnd_edges, normals):
            arr.setflags(write=False)
        return facets, parents, bnd_edges, normals

    @property
    def boundary_facets(self) -> np.ndarray:
        """Boundary facets as vertex pairs, chained into closed counter-clockwise loops."""
        return self._boundary[0]

    @property
    def boundary_parents(self) -> np.ndarray:
        """Element containing each boundary facet."""
        return self._boundary[1]

    @property
    def boundary_edges(self) -> np.ndarray:
        """Global edge index of each boundary facet."""
        return self._boundary[2]

    @property
    def boundary_normals(self) -> np.ndarray:
        """Outward unit normal of each boundary facet."""
        return self._boundary[3]

    def boundary_lengths(self) -> np.ndarray:
        d = self.vertices[self.boundary_facets[:, 1]] - self.vertices[self.boundary_facets[:, 0]]
        return np.linalg.norm(d, axis=1)

    def boundary_tangents(self) -> np.ndarray:
        d = self.vertices[self.boundary_facets[:, 1]] - self.vertices[self.boundary_facets[:, 0]]
        return d / np.linalg.norm(d, axis=1)[:, None]

    def boundary_vertex_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.boundary_facets.ravel()] = True
        return mask

    def domain_area(self) -> float:
        return float(self.areas().sum())


def _signed_area2(vertices, tri):
    p = vertices[tri]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    return e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]


def mesh_size(mesh: Mesh) -> np.ndarray:
    """Element diameters ``h_T`` (longest edge)."""
    return mesh.diameters()


# --------------------------------------------------------------------- builders


def _crisscross(x0, y0, n, size):
    """Vertices and triangles of an n-by-n crisscross grid on a square."""
    xs = x0 + size * np.arange(n + 1) / n
    ys = y0 + size * np.arange(n + 1) / n
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
    cx = x0 + size * (np.arange(n) + 0.5) / n
    cy = y0 + size * (np.arange(n) + 0.5) / n
    mx, my = np.meshgrid(cx, cy, indexing="xy")
    centers = np.stack([mx.ravel(), my.ravel()], axis=1)
    vertices = np.vstack([grid, centers])
    tris = []
    for j in range(n):
        for i in range(n):
            p0 = j * (n + 1) + i
            p1 = p0 + 1
            p2 = p1 + n + 1
            p3 = p0 + n + 1
            c = (n + 1) ** 2 + j * n + i
            tris += [(c, p0, p1), (c, p1, p2), (c, p2, p3), (c, p3, p0)]
    return vertices, np.array(tris, dtype=np.int64)


def _merge_vertices(vertices, triangles, decimals=12):
    keys = np.round(vertices, decimals)
    uniq, index, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(index)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    return vertices[index[order]], remap[inverse.ravel()][triangles]


def make_crisscross_unit_square(n: int) -> Mesh:
    """Unit square cut into ``n x n`` squares, each split by its diagonals into 4 triangles."""
    if n < 1:
        raise ValueError("n must be positive")
    vertices, tris = _crisscross(0.0, 0.0, n, 1.0)
    return Mesh.from_arrays(vertices, tris)


def make_lshape_rotated(refinements: int = 2) -> Mesh:
    """L-shape ``(-1,1)^2 \\ [-1,0]^2`` rotated 45 degrees clockwise.

    The three unit squares are triangulated criss-cross (12 triangles) and
    uniformly refined ``refinements`` times; the default gives 192 elements.
    The re-entrant corner sits at the origin and the removed wedge points
    along the negative x-axis.
    """
    parts = [_crisscross(x0, y0, 1, 1.0) for x0, y0 in [(0.0, 0.0), (-1.0, 0.0), (0.0, -1.0)]]
    verts, tris, offset = [], [], 0
    for v, t in parts:
        verts.append(v)
        tris.append(t + offset)
        offset += len(v)
    vertices, triangles = _merge_vertices(np.vstack(verts), np.vstack(tris))
    c = s = np.sqrt(0.5)
    rot = np.array([[c, s], [-s, c]])
    vertices = vertices @ rot.T
    vertices[np.abs(vertices) < 1e-15] = 0.0
    mesh = Mesh.from_arrays(vertices, triangles)
    for _ in range(refinements):
        mesh = refine_uniform(mesh)
    return mesh


def make_boundary_layer_mesh(eps: float = 1e-2, grading: float = 0.8, base: int = 4) -> Mesh:
    """Unit-square mesh graded towards the edge ``x = 0``.

    Starting from the ``base`` crisscross mesh, every element with
    ``h_T > grading * max(eps, min_{x in T} x)`` is bisected (NVB) until none is
    left.  With the defaults the mesh has 3164 elements and ``h_min = 1/128``.
    """
    mesh = make_crisscross_unit_square(base)
    while True:
        h = mesh.diameters()
        xmin = mesh.vertices[mesh.triangles][:, :, 0].min(axis=1)
        marked = np.flatnonzero(h > grading * np.maximum(eps, xmin))
        if len(marked) == 0:
            return mesh
        mesh = refine_nvb(mesh, marked)


# ------------------------------------------------------------------- refinement


def refine_nvb(mesh: Mesh, marked: Iterable[int]) -> Mesh:
    """Refine every marked triangle into 4 children by newest vertex bisection.

    All three edges of a marked element are flagged; the closure then flags the
    refinement edge of every element carrying a flagged edge until stable.  Each
    element is bisected along its refinement edge and its children along any
    further flagged edges, so marked elements receive two bisection levels.
    The result is conforming; unaffected elements keep their vertices, order of
    appearance, and generation.
    """
    marked = np.unique(np.asarray(list(marked) if not isinstance(marked, np.ndarray) else marked, dtype=np.int64))
    if marked.size and (marked.min() < 0 or marked.max() >= mesh.n_elements):
        raise IndexError("marked element index out of range")
    if marked.size == 0:
        return mesh

    edges, t2e = mesh.edges, mesh.element_edges
    flag = np.zeros(len(edges), dtype=bool)
    flag[t2e[marked].ravel()] = True
    while True:
        need = flag[t2e].any(axis=1) & ~flag[t2e[:, 0]]
        if not need.any():
            break
        flag[t2e[need, 0]] = True

    nv = mesh.n_vertices
    mid = -np.ones(len(edges), dtype=np.int64)
    flagged = np.flatnonzero(flag)
    mid[flagged] = nv + np.arange(len(flagged))
    new_vertices = np.vstack([mesh.vertices, mesh.vertices[edges[flagged]].mean(axis=1)])

    tri = mesh.triangles
    gen = mesh.generation
    out_tri, out_gen, out_parent = [], [], []
    for t in range(mesh.n_elements):
        a, b, c = tri[t]
        e0, e1, e2 = t2e[t]
        g = gen[t]
        if not flag[e0]:
            out_tri.append((a, b, c))
            out_gen.append(g)
            out_parent.append(t)
            continue
        m = mid[e0]
        # children (m, a, b) and (m, c, a); their refinement edges are ab and ca
        if flag[e2]:
            p = mid[e2]
            out_tri += [(p, m, a), (p, b, m)]
            out_gen += [g + 2, g + 2]
        else:
            out_tri.append((m, a, b))
            out_gen.append(g + 1)
        if flag[e1]:
            q = mid[e1]
            out_tri += [(q, m, c), (q, a, m)]
            out_gen += [g + 2, g + 2]
        else:
            out_tri.append((m, c, a))
            out_gen.append(g + 1)
        out_parent += [t] * (len(out_tri) - len(out_parent))
    return Mesh(
        new_vertices,
        np.array(out_tri, dtype=np.int64),
        np.array(out_gen, dtype=np.int64),
        np.array(out_parent, dtype=np.int64),
    )


def refine_uniform(mesh: Mesh) -> Mesh:
    """Mark every element once; each triangle becomes 4."""
    return refine_nvb(mesh, np.arange(mesh.n_elements))


# ------------------------------------------------------------------------- I/O


def mesh_to_text(mesh: Mesh) -> str:
    """Plain-text export.

    Header ``vertices <n> triangles <m> facets <k>``, then one line per vertex
    (``x y``), triangle (``a b c generation``) and boundary facet
    (``a b parent nx ny``).  Reals use 17 significant digits.
    """
    lines = [f"vertices {mesh.n_vertices} triangles {mesh.n_elements} facets {len(mesh.boundary_facets)}"]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.vertices]
    lines += [f"{a} {b} {c} {g}" for (a, b, c), g in zip(mesh.triangles, mesh.generation)]
    for (a, b), t, (nx, ny) in zip(mesh.boundary_facets, mesh.boundary_parents, mesh.boundary_normals):
        lines.append(f"{a} {b} {t} {nx:.17g} {ny:.17g}")
    return "\n".join(lines) + "\n"


def mesh_from_text(text: str) -> Mesh:
    """Inverse of :func:`mesh_to_text`; facets are recomputed and checked."""
    rows = [ln.split() for ln in text.strip().splitlines()]
    head = rows[0]
    if len(head) != 6 or head[0] != "vertices" or head[2] != "triangles" or head[4] != "facets":
        raise ValueError("malformed mesh header")
    nv, nt, nf = int(head[1]), int(head[3]), int(head[5])
    if len(rows) != 1 + nv + nt + nf:
        raise ValueError("mesh file length does not match header")
    vertices = np.array([[float(x) for x in r] for r in rows[1 : 1 + nv]])
    tdata = np.array([[int(x) for x in r] for r in rows[1 + nv : 1 + nv + nt]], dtype=np.int64)
    mesh = Mesh(vertices, tdata[:, :3].copy(), tdata[:, 3].copy())
    if len(mesh.boundary_facets) != nf:
        raise ValueError("facet count does not match triangulation")
    return mesh
