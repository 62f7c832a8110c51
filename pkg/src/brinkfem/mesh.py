"""Conforming triangulations: builders, refinement, edge topology.

Meshes are immutable bags of numpy arrays. Triangles are counter-clockwise;
the local edge ``k`` of a triangle is the edge opposite its local vertex
``k``, so edge 2 connects the first two vertices. Bisection refinement always
splits edge 2 (the triangle ordering carries the newest-vertex state), and
the builders order every triangle with its longest edge first.
"""

from __future__ import annotations

import numpy as np

# boundary markers assigned by the builders
MARKER_LEFT = 1
MARKER_RIGHT = 2
MARKER_BOTTOM = 3
MARKER_TOP = 4
MARKER_INNER_VERTICAL = 5    # L-shape segment {0} x [-1,0]
MARKER_INNER_HORIZONTAL = 6  # L-shape segment [-1,0] x {0}

_DEDUP_TOL = 1e-12


class MeshError(ValueError):
    pass


class Mesh:
    """Triangulation with edge connectivity and boundary markers.

    Attributes
    ----------
    vertices : (V, 2) float array
    triangles : (T, 3) int array, counter-clockwise
    edges : (E, 2) int array of sorted vertex pairs
    tri_edges : (T, 3) int array, global edge opposite each local vertex
    edge_tris : (E, 2) int array, incident triangles (-1 in slot 1 on boundary)
    edge_markers : (E,) int array, 0 on interior edges
    """

    def __init__(self, vertices, triangles, boundary_markers):
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise MeshError("vertices must be (V, 2)")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise MeshError("triangles must be (T, 3)")
        if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise MeshError("triangle vertex index out of range")
        self.vertices = vertices
        self.triangles = triangles

        self._check_duplicates()
        self._build_geometry()
        self._build_edges()
        self._assign_markers(boundary_markers)
        for arr in (self.vertices, self.triangles, self.edges, self.tri_edges,
                    self.edge_tris, self.edge_markers, self.areas,
                    self.tri_diameters, self.edge_lengths):
            arr.setflags(write=False)

    # -- construction helpers -------------------------------------------------

    def _check_duplicates(self):
        quant = np.round(self.vertices / _DEDUP_TOL).astype(np.int64)
        if len(np.unique(quant, axis=0)) != len(self.vertices):
            raise MeshError("duplicate vertices (closer than dedup tolerance)")

    def _build_geometry(self):
        p = self.vertices[self.triangles]          # (T, 3, 2)
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        signed = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        if np.any(signed <= 0.0):
            bad = int(np.argmin(signed))
            raise MeshError(f"triangle {bad} has non-positive area {signed[bad]:g}")
        self.areas = signed
        lens = np.stack([
            np.linalg.norm(p[:, 2] - p[:, 1], axis=1),   # edge 0
            np.linalg.norm(p[:, 0] - p[:, 2], axis=1),   # edge 1
            np.linalg.norm(p[:, 1] - p[:, 0], axis=1),   # edge 2
        ], axis=1)
        self._local_edge_lengths = lens
        self.tri_diameters = lens.max(axis=1)

    def _build_edges(self):
        t = self.triangles
        pairs = np.concatenate([t[:, [1, 2]], t[:, [2, 0]], t[:, [0, 1]]])
        pairs = np.sort(pairs, axis=1)
        edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
        self.edges = edges
        self.tri_edges = inverse.reshape(3, -1).T.copy()

        ntri = len(t)
        edge_tris = np.full((len(edges), 2), -1, dtype=np.int64)
        counts = np.zeros(len(edges), dtype=np.int64)
        order = np.argsort(inverse, kind="stable")
        tri_of_entry = np.tile(np.arange(ntri), 3)[order]
        edge_sorted = inverse[order]
        boundaries_first = np.searchsorted(edge_sorted, np.arange(len(edges)))
        counts = np.diff(np.append(boundaries_first, len(edge_sorted)))
        if counts.max(initial=0) > 2:
            raise MeshError("edge shared by more than two triangles")
        edge_tris[:, 0] = tri_of_entry[boundaries_first]
        two = counts == 2
        edge_tris[two, 1] = tri_of_entry[boundaries_first[two] + 1]
        # orient pair so slot 0 holds the lower triangle index
        swap = two & (edge_tris[:, 0] > edge_tris[:, 1])
        edge_tris[swap] = edge_tris[swap][:, ::-1]
        self.edge_tris = edge_tris
        self.edge_lengths = np.linalg.norm(
            self.vertices[edges[:, 1]] - self.vertices[edges[:, 0]], axis=1)

    def _assign_markers(self, boundary_markers):
        markers = np.zeros(len(self.edges), dtype=np.int64)
        on_boundary = self.edge_tris[:, 1] < 0
        idx = np.nonzero(on_boundary)[0]
        if callable(boundary_markers):
            mids = 0.5 * (self.vertices[self.edges[idx, 0]]
                          + self.vertices[self.edges[idx, 1]])
            markers[idx] = boundary_markers(mids)
        else:
            for i in idx:
                key = (int(self.edges[i, 0]), int(self.edges[i, 1]))
                markers[i] = boundary_markers[key]
        if np.any(markers[idx] <= 0):
            raise MeshError("unmarked boundary edge")
        self.edge_markers = markers

    # -- queries ---------------------------------------------------------------

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_triangles(self):
        return len(self.triangles)

    @property
    def num_edges(self):
        return len(self.edges)

    @property
    def h(self):
        """Largest triangle diameter."""
        return float(self.tri_diameters.max())

    @property
    def boundary_edge_mask(self):
        return self.edge_tris[:, 1] < 0

    def centroids(self):
        return self.vertices[self.triangles].mean(axis=1)

    def min_angle(self):
        """Smallest interior angle over all triangles, in radians."""
        p = self.vertices[self.triangles]
        angles = []
        for k in range(3):
            a = p[:, (k + 1) % 3] - p[:, k]
            b = p[:, (k + 2) % 3] - p[:, k]
            cosang = (a * b).sum(axis=1) / (
                np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            angles.append(np.arccos(np.clip(cosang, -1.0, 1.0)))
        return float(np.min(angles))

    def edge_topology(self):
        """Classify edges into interior and boundary sets with normals.

        Interior normals point from the lower-index triangle toward the
        higher one; boundary normals point outward.
        """
        interior = np.nonzero(~self.boundary_edge_mask)[0]
        boundary = np.nonzero(self.boundary_edge_mask)[0]
        tang = (self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]])
        normals = np.stack([tang[:, 1], -tang[:, 0]], axis=1)
        normals /= np.linalg.norm(normals, axis=1)[:, None]

        cent = self.centroids()
        mids = 0.5 * (self.vertices[self.edges[:, 0]] + self.vertices[self.edges[:, 1]])
        n_int = normals[interior]
        to_minus = cent[self.edge_tris[interior, 1]] - cent[self.edge_tris[interior, 0]]
        flip = (n_int * to_minus).sum(axis=1) < 0
        n_int[flip] *= -1.0
        n_bnd = normals[boundary]
        inward = cent[self.edge_tris[boundary, 0]] - mids[boundary]
        flip = (n_bnd * inward).sum(axis=1) > 0
        n_bnd[flip] *= -1.0
        return EdgeTopology(
            interior_edges=interior,
            tri_plus=self.edge_tris[interior, 0],
            tri_minus=self.edge_tris[interior, 1],
            interior_normals=n_int,
            boundary_edges=boundary,
            boundary_tri=self.edge_tris[boundary, 0],
            boundary_markers=self.edge_markers[boundary],
            boundary_normals=n_bnd,
        )


class EdgeTopology:
    def __init__(self, **kw):
        self.__dict__.update(kw)


# -- builders ------------------------------------------------------------------

def _square_marker_classifier(lo, hi):
    def classify(mids):
        m = np.zeros(len(mids), dtype=np.int64)
        m[np.isclose(mids[:, 0], lo[0])] = MARKER_LEFT
        m[np.isclose(mids[:, 0], hi[0])] = MARKER_RIGHT
        m[np.isclose(mids[:, 1], lo[1])] = MARKER_BOTTOM
        m[np.isclose(mids[:, 1], hi[1])] = MARKER_TOP
        return m
    return classify


def _lshape_marker_classifier():
    def classify(mids):
        m = np.zeros(len(mids), dtype=np.int64)
        x, y = mids[:, 0], mids[:, 1]
        m[np.isclose(x, -1.0)] = MARKER_LEFT
        m[np.isclose(x, 1.0)] = MARKER_RIGHT
        m[np.isclose(y, -1.0)] = MARKER_BOTTOM
        m[np.isclose(y, 1.0)] = MARKER_TOP
        m[np.isclose(x, 0.0) & (y < 0.0)] = MARKER_INNER_VERTICAL
        m[np.isclose(y, 0.0) & (x < 0.0)] = MARKER_INNER_HORIZONTAL
        return m
    return classify


def _longest_edge_first(vertices, triangles):
    """Cyclically rotate each triangle so edge (t0, t1) is its longest."""
    p = vertices[triangles]
    lens = np.stack([
        ((p[:, 2] - p[:, 1]) ** 2).sum(axis=1),   # edge 0 = (t1, t2)
        ((p[:, 0] - p[:, 2]) ** 2).sum(axis=1),   # edge 1 = (t2, t0)
        ((p[:, 1] - p[:, 0]) ** 2).sum(axis=1),   # edge 2 = (t0, t1)
    ], axis=1)
    longest = lens.argmax(axis=1)
    out = triangles.copy()
    sel = longest == 0   # want (t1, t2, t0)
    out[sel] = triangles[sel][:, [1, 2, 0]]
    sel = longest == 1   # want (t2, t0, t1)
    out[sel] = triangles[sel][:, [2, 0, 1]]
    return out


def _structured_cells(n, lo, hi):
    xs = np.linspace(lo[0], hi[0], n + 1)
    ys = np.linspace(lo[1], hi[1], n + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    vertices = np.stack([X.ravel(), Y.ravel()], axis=1)

    def vid(i, j):
        return i * (n + 1) + j

    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    i, j = i.ravel(), j.ravel()
    v00, v10 = vid(i, j), vid(i + 1, j)
    v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
    # diagonal v00-v11 for every cell; diagonal is the refinement edge
    lower = np.stack([v11, v00, v10], axis=1)
    upper = np.stack([v00, v11, v01], axis=1)
    triangles = np.concatenate([lower, upper])
    cell_center = np.stack([i, j], axis=1)
    return vertices, triangles, np.concatenate([cell_center, cell_center])


def build_structured_square(n, lo=(-1.0, -1.0), hi=(1.0, 1.0)):
    """Uniform n-by-n grid of cells, each split along the SW-NE diagonal."""
    if n < 1:
        raise MeshError("n must be at least 1")
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if not np.all(lo < hi):
        raise MeshError("lo must be strictly below hi componentwise")
    vertices, triangles, _ = _structured_cells(n, lo, hi)
    return Mesh(vertices, triangles, _square_marker_classifier(lo, hi))


def build_lshape(n):
    """Structured mesh of ]-1,1[^2 with the cells in ]-1,0[^2 removed."""
    if n < 2 or n % 2 != 0:
        raise MeshError("n must be even and at least 2")
    vertices, triangles, cells = _structured_cells(n, (-1.0, -1.0), (1.0, 1.0))
    keep = ~((cells[:, 0] < n // 2) & (cells[:, 1] < n // 2))
    triangles = triangles[keep]
    used = np.unique(triangles)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return Mesh(vertices[used], remap[triangles], _lshape_marker_classifier())


# -- refinement ------------------------------------------------------------------

def _child_marker_dict(mesh, split_edge_mask, midpoint_of_edge):
    markers = {}
    for e in np.nonzero(mesh.boundary_edge_mask)[0]:
        a, b = int(mesh.edges[e, 0]), int(mesh.edges[e, 1])
        tag = int(mesh.edge_markers[e])
        if split_edge_mask[e]:
            m = int(midpoint_of_edge[e])
            markers[tuple(sorted((a, m)))] = tag
            markers[tuple(sorted((m, b)))] = tag
        else:
            markers[(a, b)] = tag
    return markers


def refine_uniform(mesh):
    """Split every triangle into four similar children at edge midpoints."""
    V = mesh.num_vertices
    mid_xy = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
    vertices = np.concatenate([mesh.vertices, mid_xy])

    t = mesh.triangles
    m0 = V + mesh.tri_edges[:, 0]   # midpoint of (t1, t2)
    m1 = V + mesh.tri_edges[:, 1]   # midpoint of (t2, t0)
    m2 = V + mesh.tri_edges[:, 2]   # midpoint of (t0, t1)
    children = np.concatenate([
        np.stack([t[:, 0], m2, m1], axis=1),
        np.stack([m2, t[:, 1], m0], axis=1),
        np.stack([m1, m0, t[:, 2]], axis=1),
        np.stack([m2, m0, m1], axis=1),
    ])
    children = _longest_edge_first(vertices, children)
    parents = np.tile(np.arange(mesh.num_triangles), 4)
    markers = _child_marker_dict(mesh, np.ones(mesh.num_edges, bool),
                                 V + np.arange(mesh.num_edges))
    refined = Mesh(vertices, children, markers)
    refined.parent_triangles = parents
    return refined


def refine_bisect(mesh, marked):
    """Newest-vertex bisection of the marked triangles plus conforming closure."""
    marked = np.asarray(marked, dtype=np.int64)
    if marked.size == 0:
        raise MeshError("marked set is empty")
    if marked.min() < 0 or marked.max() >= mesh.num_triangles:
        raise MeshError("marked triangle index out of range")

    split = np.zeros(mesh.num_edges, dtype=bool)
    split[mesh.tri_edges[marked, 2]] = True
    while True:
        has_split = split[mesh.tri_edges].any(axis=1)
        need = has_split & ~split[mesh.tri_edges[:, 2]]
        if not need.any():
            break
        split[mesh.tri_edges[need, 2]] = True

    V = mesh.num_vertices
    midpoint_of_edge = np.full(mesh.num_edges, -1, dtype=np.int64)
    which = np.nonzero(split)[0]
    midpoint_of_edge[which] = V + np.arange(len(which))
    mid_xy = 0.5 * (mesh.vertices[mesh.edges[which, 0]]
                    + mesh.vertices[mesh.edges[which, 1]])
    vertices = np.concatenate([mesh.vertices, mid_xy])

    t = mesh.triangles
    s = split[mesh.tri_edges]                      # (T, 3) which local edges split
    mid = midpoint_of_edge[mesh.tri_edges]         # (T, 3) midpoint ids (-1 unsplit)
    tri_ids = np.arange(mesh.num_triangles)

    chunks, parent_chunks = [], []

    def emit(mask, *tris):
        for tri in tris:
            chunks.append(np.stack([c[mask] for c in tri], axis=1))
            parent_chunks.append(tri_ids[mask])

    none = ~s.any(axis=1)
    emit(none, (t[:, 0], t[:, 1], t[:, 2]))

    b1 = s[:, 2] & ~s[:, 0] & ~s[:, 1]
    emit(b1, (t[:, 2], t[:, 0], mid[:, 2]),
             (t[:, 1], t[:, 2], mid[:, 2]))

    b2l = s[:, 2] & s[:, 1] & ~s[:, 0]     # also split edge (t2, t0)
    emit(b2l, (mid[:, 2], t[:, 2], mid[:, 1]),
              (t[:, 0], mid[:, 2], mid[:, 1]),
              (t[:, 1], t[:, 2], mid[:, 2]))

    b2r = s[:, 2] & s[:, 0] & ~s[:, 1]     # also split edge (t1, t2)
    emit(b2r, (t[:, 2], t[:, 0], mid[:, 2]),
              (mid[:, 2], t[:, 1], mid[:, 0]),
              (t[:, 2], mid[:, 2], mid[:, 0]))

    b3 = s.all(axis=1)
    emit(b3, (mid[:, 2], t[:, 2], mid[:, 1]),
             (t[:, 0], mid[:, 2], mid[:, 1]),
             (mid[:, 2], t[:, 1], mid[:, 0]),
             (t[:, 2], mid[:, 2], mid[:, 0]))

    children = np.concatenate(chunks)
    parents = np.concatenate(parent_chunks)
    markers = _child_marker_dict(mesh, split, midpoint_of_edge)
    refined = Mesh(vertices, children, markers)
    refined.parent_triangles = parents
    return refined


class StructuredGridLocator:
    """Point location on a structured-square mesh by index arithmetic."""

    def __init__(self, mesh, n, lo, hi):
        self.mesh = mesh
        self.n = n
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self.cell = (self.hi - self.lo) / n
        # builders emit all lower triangles first, then all upper ones
        self._lower_offset = 0
        self._upper_offset = n * n

    def locate(self, points):
        """Return (triangle index, barycentric coordinates) per point."""
        pts = np.asarray(points, dtype=float)
        rel = (pts - self.lo) / self.cell
        ij = np.clip(np.floor(rel).astype(np.int64), 0, self.n - 1)
        frac = rel - ij
        # lower triangle of the cell lies below the SW-NE diagonal
        lower = frac[:, 1] <= frac[:, 0]
        flat = ij[:, 0] * self.n + ij[:, 1]
        tri = np.where(lower, self._lower_offset + flat, self._upper_offset + flat)
        bary = barycentric_coordinates(self.mesh, tri, pts)
        return tri, bary


def barycentric_coordinates(mesh, tri, points):
    """Barycentric coordinates of physical points inside given triangles."""
    p = mesh.vertices[mesh.triangles[tri]]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    rhs = points - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    l1 = (rhs[:, 0] * d2[:, 1] - rhs[:, 1] * d2[:, 0]) / det
    l2 = (d1[:, 0] * rhs[:, 1] - d1[:, 1] * rhs[:, 0]) / det
    return np.stack([1.0 - l1 - l2, l1, l2], axis=1)
