"""Conforming triangle meshes with newest-vertex bisection refinement.

Element storage convention: row (v0, v1, v2) is counterclockwise, the
refinement edge is (v0, v1) and v2 is the newest vertex. Bisection inserts
the midpoint m of (v0, v1) and produces children (v2, v0, m) and (v1, v2, m),
so each child's refinement edge is an original edge of the parent.

Meshes are immutable after construction; `refine` returns a new mesh carrying
`parent_elements` and `new_vertex_edges` so solutions and controls can be
transferred between levels.
"""
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray          # (nv, 2) float
    elements: np.ndarray          # (ne, 3) int
    generation: np.ndarray        # (ne,) int
    domain: str                   # 'disk' | 'square' | 'polygon'
    parent_elements: np.ndarray | None = field(default=None, compare=False)
    new_vertex_edges: np.ndarray | None = field(default=None, compare=False)

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_elements(self):
        return self.elements.shape[0]

    @cached_property
    def element_coords(self):
        return self.vertices[self.elements]  # (ne, 3, 2)

    @cached_property
    def areas(self):
        c = self.element_coords
        d1 = c[:, 1] - c[:, 0]
        d2 = c[:, 2] - c[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def diameters(self):
        c = self.element_coords
        l0 = np.linalg.norm(c[:, 1] - c[:, 0], axis=1)
        l1 = np.linalg.norm(c[:, 2] - c[:, 1], axis=1)
        l2 = np.linalg.norm(c[:, 0] - c[:, 2], axis=1)
        return np.maximum(l0, np.maximum(l1, l2))

    @cached_property
    def centroids(self):
        return self.element_coords.mean(axis=1)

    @cached_property
    def sizes(self):
        # h_T = |T|^(1/2) in 2d
        return np.sqrt(self.areas)

    @cached_property
    def _edge_data(self):
        ne = self.num_elements
        # local edges: 0 = (v0,v1) refinement edge, 1 = (v1,v2), 2 = (v2,v0)
        e = self.elements
        raw = np.concatenate([e[:, [0, 1]], e[:, [1, 2]], e[:, [2, 0]]])
        key = np.sort(raw, axis=1)
        edges, inv, counts = np.unique(key, axis=0, return_inverse=True,
                                       return_counts=True)
        elem_edges = inv.reshape(3, ne).T
        return edges, elem_edges, counts

    @property
    def edges(self):
        return self._edge_data[0]

    @property
    def elem_edges(self):
        return self._edge_data[1]

    @property
    def edge_counts(self):
        return self._edge_data[2]

    @cached_property
    def boundary_edges(self):
        return self.edge_counts == 1

    @cached_property
    def boundary_vertices(self):
        mask = np.zeros(self.num_vertices, dtype=bool)
        mask[self.edges[self.boundary_edges].ravel()] = True
        return mask

    @cached_property
    def interior_vertices(self):
        return np.nonzero(~self.boundary_vertices)[0]

    @property
    def num_interior(self):
        return self.interior_vertices.size

    @cached_property
    def vertex_elements(self):
        """CSR-style vertex -> incident element lists."""
        e = self.elements.ravel()
        order = np.argsort(e, kind="stable")
        elems = np.repeat(np.arange(self.num_elements), 3)[order]
        starts = np.searchsorted(e[order], np.arange(self.num_vertices + 1))
        return elems, starts

    @cached_property
    def grads(self):
        """Barycentric gradients, shape (ne, 3, 2); grads[t, i] = grad lambda_i."""
        c = self.element_coords
        g = np.empty((self.num_elements, 3, 2))
        two_a = 2.0 * self.areas
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            ek = c[:, k] - c[:, j]
            # rotate edge opposite vertex i to point inward
            g[:, i, 0] = -ek[:, 1] / two_a
            g[:, i, 1] = ek[:, 0] / two_a
        return g

    def locate(self, points, tol=1e-12):
        """Containing element id per point (-1 outside); brute-force barycentric."""
        points = np.atleast_2d(points)
        out = np.full(points.shape[0], -1, dtype=np.int64)
        g = self.grads
        # lambda_i(x) = lambda_i(v0) + grad_i . (x - v0); lambda(v0) = (1,0,0)
        base = np.zeros((self.num_elements, 3))
        base[:, 0] = 1.0
        base -= np.einsum("tid,td->ti", g, self.element_coords[:, 0])
        for p in range(points.shape[0]):
            lam = base + g @ points[p]
            ok = np.nonzero((lam >= -tol).all(axis=1))[0]
            if ok.size:
                out[p] = ok[0]
        return out


def _normalize_refinement_edges(verts, elems):
    """Rotate each element so its longest edge sits in slots (0, 1)."""
    c = verts[elems]
    lens = np.stack([
        np.linalg.norm(c[:, 1] - c[:, 0], axis=1),
        np.linalg.norm(c[:, 2] - c[:, 1], axis=1),
        np.linalg.norm(c[:, 0] - c[:, 2], axis=1),
    ], axis=1)
    longest = np.argmax(np.round(lens / lens.max() * 1e12), axis=1)
    out = elems.copy()
    r1 = longest == 1
    out[r1] = elems[r1][:, [1, 2, 0]]
    r2 = longest == 2
    out[r2] = elems[r2][:, [2, 0, 1]]
    return out


def initial_mesh(domain, resolution):
    """Coarse mesh of the unit disk or the square (-1, 1)^2.

    Square: a 2r x 2r grid of cells, two triangles each. Disk: hexagonal
    rings projected onto circles of radius j/r; all boundary vertices end up
    exactly on the unit circle.
    """
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    if domain == "square":
        n = 2 * resolution
        xs = np.linspace(-1.0, 1.0, n + 1)
        X, Y = np.meshgrid(xs, xs, indexing="ij")
        verts = np.column_stack([X.ravel(), Y.ravel()])
        vid = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
        v00 = vid[:-1, :-1].ravel()
        v10 = vid[1:, :-1].ravel()
        v01 = vid[:-1, 1:].ravel()
        v11 = vid[1:, 1:].ravel()
        t1 = np.column_stack([v00, v11, v01])
        t2 = np.column_stack([v11, v00, v10])
        elems = np.vstack([t1, t2])
    elif domain == "disk":
        r = resolution
        verts = [np.zeros(2)]
        ring_ids = [np.array([0])]
        for j in range(1, r + 1):
            ang = np.arange(6 * j) * (2.0 * np.pi / (6 * j))
            ring = (j / r) * np.column_stack([np.cos(ang), np.sin(ang)])
            ids = len(verts) + np.arange(6 * j)
            verts.extend(ring)
            ring_ids.append(ids)
        verts = np.array(verts)
        elems = []
        for j in range(1, r + 1):
            outer, inner = ring_ids[j], ring_ids[j - 1]
            no, ni = outer.size, inner.size
            for s in range(6):
                for i in range(j):
                    o0 = outer[(s * j + i) % no]
                    o1 = outer[(s * j + i + 1) % no]
                    i0 = inner[(s * (j - 1) + i) % ni]
                    elems.append((i0, o0, o1))
                    if i < j - 1:
                        i1 = inner[(s * (j - 1) + i + 1) % ni]
                        elems.append((o1, i1, i0))
        elems = np.array(elems)
    else:
        raise ValueError(f"unsupported domain descriptor: {domain!r}")
    elems = _normalize_refinement_edges(verts, elems)
    mesh = Mesh(verts, elems.astype(np.int64), np.zeros(len(elems), dtype=np.int64),
                domain)
    assert (mesh.areas > 0).all()
    return mesh


def refine(mesh, marked):
    """Bisect the marked elements, restoring conformity by closure.

    Every marked element is bisected at least once; an element is touched only
    if one of its edges is a refinement edge forced by the closure. Children
    are appended in parent order, making the result deterministic.
    """
    marked = np.asarray(list(marked), dtype=np.int64)
    if marked.size == 0:
        return mesh
    edges = mesh.edges
    elem_edges = mesh.elem_edges
    edge_marked = np.zeros(edges.shape[0], dtype=bool)
    edge_marked[elem_edges[marked, 0]] = True
    while True:
        any_marked = edge_marked[elem_edges].any(axis=1)
        need = any_marked & ~edge_marked[elem_edges[:, 0]]
        if not need.any():
            break
        edge_marked[elem_edges[need, 0]] = True

    split = np.nonzero(edge_marked)[0]
    mid_of = np.full(edges.shape[0], -1, dtype=np.int64)
    mid_of[split] = mesh.num_vertices + np.arange(split.size)
    mids = 0.5 * (mesh.vertices[edges[split, 0]] + mesh.vertices[edges[split, 1]])
    if mesh.domain == "disk":
        on_bnd = mesh.boundary_edges[split]
        norms = np.linalg.norm(mids[on_bnd], axis=1)
        mids[on_bnd] = mids[on_bnd] / norms[:, None]
    new_verts = np.vstack([mesh.vertices, mids])

    elems = mesh.elements
    em = edge_marked[elem_edges]  # (ne, 3) local marked flags
    new_elems, new_gen, new_parent = [], [], []
    for t in range(mesh.num_elements):
        v0, v1, v2 = elems[t]
        g = mesh.generation[t]
        if not em[t, 0]:
            new_elems.append((v0, v1, v2))
            new_gen.append(g)
            new_parent.append(t)
            continue
        m0 = mid_of[elem_edges[t, 0]]
        # children of (v0, v1, v2): refinement edges (v2, v0) and (v1, v2)
        for child, local in (((v2, v0, m0), 2), ((v1, v2, m0), 1)):
            if em[t, local]:
                mc = mid_of[elem_edges[t, local]]
                a, b, c = child
                new_elems.append((c, a, mc))
                new_elems.append((b, c, mc))
                new_gen += [g + 2, g + 2]
                new_parent += [t, t]
            else:
                new_elems.append(child)
                new_gen.append(g + 1)
                new_parent.append(t)
    return Mesh(new_verts, np.array(new_elems, dtype=np.int64),
                np.array(new_gen, dtype=np.int64), mesh.domain,
                parent_elements=np.array(new_parent, dtype=np.int64),
                new_vertex_edges=edges[split].copy())


def uniform_refine(mesh, rounds=1):
    for _ in range(rounds):
        mesh = refine(mesh, np.arange(mesh.num_elements))
    return mesh


def element_patch(mesh, t, k):
    """k-th order element patch: closure-intersection neighbourhood of element t."""
    if not 0 <= t < mesh.num_elements:
        raise ValueError(f"invalid element id {t}")
    if k not in (0, 1, 2, 3):
        raise ValueError("patch order must be in {0, 1, 2, 3}")
    patch = np.array([t], dtype=np.int64)
    elems_at, starts = mesh.vertex_elements
    for _ in range(k):
        vs = np.unique(mesh.elements[patch])
        nxt = np.concatenate([elems_at[starts[v]:starts[v + 1]] for v in vs])
        patch = np.unique(nxt)
    return patch


def _point_segment_distance(points, a, b):
    """Distances from points (n,2) to segments a->b ((m,2) each), result (n,m)."""
    d = b - a
    l2 = np.maximum((d * d).sum(axis=1), 1e-300)
    ap = points[:, None, :] - a[None, :, :]
    t = np.clip((ap * d[None, :, :]).sum(axis=2) / l2[None, :], 0.0, 1.0)
    proj = a[None, :, :] + t[:, :, None] * d[None, :, :]
    return np.linalg.norm(points[:, None, :] - proj, axis=2)


def skeleton_distance(mesh, x):
    """Distance from x to the union of all element edges."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    a = mesh.vertices[mesh.edges[:, 0]]
    b = mesh.vertices[mesh.edges[:, 1]]
    d = _point_segment_distance(x, a, b).min(axis=1)
    return d[0] if d.size == 1 else d


def element_boundary_distance(mesh, elem_ids, points):
    """Distance from each point to its own element's boundary (the skeleton,
    for points inside that element)."""
    c = mesh.element_coords[elem_ids]
    d = np.full(points.shape[0], np.inf)
    for i in range(3):
        a, b = c[:, i], c[:, (i + 1) % 3]
        e = b - a
        l2 = np.maximum((e * e).sum(axis=1), 1e-300)
        t = np.clip(((points - a) * e).sum(axis=1) / l2, 0.0, 1.0)
        proj = a + t[:, None] * e
        d = np.minimum(d, np.linalg.norm(points - proj, axis=1))
    return d


def local_mesh_width(mesh, x, s, elem=None):
    """Weighted local mesh width h~^s at x: h^s for s <= 1/2, else
    h^(s-beta) * omega^beta with beta = s - 1/2 and omega the skeleton distance."""
    x = np.asarray(x, dtype=float)
    if elem is None:
        elem = int(mesh.locate(x)[0])
        if elem < 0:
            raise ValueError("point outside the mesh")
    h = mesh.sizes[elem]
    if s <= 0.5:
        return h ** s
    beta = s - 0.5
    omega = float(skeleton_distance(mesh, x))
    return h ** (s - beta) * omega ** beta


def local_width_at(mesh, elem_ids, points, s):
    """Vectorized h~^s at points living in given elements."""
    h = mesh.sizes[elem_ids]
    if s <= 0.5:
        return h ** s
    beta = s - 0.5
    omega = element_boundary_distance(mesh, elem_ids, points)
    return h ** (s - beta) * omega ** beta


def shape_regularity(mesh):
    """max over elements of diam(T) / |T|^(1/2)."""
    if mesh.num_elements == 0:
        raise ValueError("empty mesh")
    return float((mesh.diameters / mesh.sizes).max())


@dataclass(frozen=True)
class AuxiliaryShell:
    """Triangulated annulus B(0, R) \\ Omega used for complement integrals."""
    vertices: np.ndarray
    triangles: np.ndarray
    radius: float
    inner_vertex_ids: np.ndarray  # mesh vertex ids matched by shell vertices 0..n-1

    @cached_property
    def coords(self):
        return self.vertices[self.triangles]

    @cached_property
    def areas(self):
        c = self.coords
        d1 = c[:, 1] - c[:, 0]
        d2 = c[:, 2] - c[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def diameters(self):
        c = self.coords
        return np.maximum.reduce([np.linalg.norm(c[:, 1] - c[:, 0], axis=1),
                                  np.linalg.norm(c[:, 2] - c[:, 1], axis=1),
                                  np.linalg.norm(c[:, 0] - c[:, 2], axis=1)])


DEFAULT_SHELL_RADIUS = {"disk": 1.5, "square": 2.5}


def auxiliary_shell(mesh, radius=None, layers=4, ratio=1.8):
    """Extrude the boundary radially into geometrically graded layers.

    Inner shell vertices coincide with the mesh's boundary vertices; each
    boundary edge produces 2 * layers shell triangles reaching |x| = radius.
    """
    if radius is None:
        radius = DEFAULT_SHELL_RADIUS.get(mesh.domain, 2.0)
    if layers < 1:
        raise ValueError("layers must be >= 1")
    rmax = np.linalg.norm(mesh.vertices, axis=1).max()
    if radius <= rmax + 1e-12:
        raise ValueError(f"shell radius {radius} does not contain the domain")

    bvid = np.nonzero(mesh.boundary_vertices)[0]
    pos_in_shell = np.full(mesh.num_vertices, -1, dtype=np.int64)
    pos_in_shell[bvid] = np.arange(bvid.size)
    base = mesh.vertices[bvid]
    r0 = np.linalg.norm(base, axis=1)
    geo = ratio ** np.arange(layers)
    frac = np.cumsum(geo) / geo.sum()            # layer radial fractions
    verts = [base]
    for f in frac:
        rr = r0 + f * (radius - r0)
        verts.append(base * (rr / r0)[:, None])
    verts = np.vstack(verts)

    n = bvid.size
    tris = []
    # boundary edges oriented so the interior is on the left
    for t in range(mesh.num_elements):
        v = mesh.elements[t]
        for i in range(3):
            eidx = mesh.elem_edges[t, i]
            if mesh.boundary_edges[eidx]:
                a, b = v[i], v[(i + 1) % 3]
                pa, pb = pos_in_shell[a], pos_in_shell[b]
                # the interior lies left of a->b, so extrusion goes right;
                # (a0, a1, b1) / (a0, b1, b0) keeps children counterclockwise
                for l in range(layers):
                    a0, b0 = pa + l * n, pb + l * n
                    a1, b1 = pa + (l + 1) * n, pb + (l + 1) * n
                    tris.append((a0, a1, b1))
                    tris.append((a0, b1, b0))
    shell = AuxiliaryShell(verts, np.array(tris, dtype=np.int64), float(radius),
                           bvid)
    assert (shell.areas > 0).all()
    return shell


def save_mesh(path, mesh):
    """Plain-text dump: header, vertex lines (x y bflag), element lines
    (v0 v1 v2 refedge gen)."""
    with open(path, "w") as f:
        f.write(f"{mesh.num_vertices} {mesh.num_elements} {mesh.domain}\n")
        bnd = mesh.boundary_vertices
        for i, (x, y) in enumerate(mesh.vertices):
            f.write(f"{x:.17g} {y:.17g} {int(bnd[i])}\n")
        for t in range(mesh.num_elements):
            v0, v1, v2 = mesh.elements[t]
            f.write(f"{v0} {v1} {v2} 0 {mesh.generation[t]}\n")


def load_mesh(path):
    with open(path) as f:
        nv, ne, domain = f.readline().split()
        nv, ne = int(nv), int(ne)
        verts = np.empty((nv, 2))
        for i in range(nv):
            x, y, _ = f.readline().split()
            verts[i] = float(x), float(y)
        elems = np.empty((ne, 3), dtype=np.int64)
        gen = np.empty(ne, dtype=np.int64)
        for t in range(ne):
            parts = f.readline().split()
            ref = int(parts[3])
            tri = [int(parts[(ref + k) % 3]) for k in range(3)]
            elems[t] = tri
            gen[t] = int(parts[4])
    return Mesh(verts, elems, gen, domain)
