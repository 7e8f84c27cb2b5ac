"""Assembly of the nonlocal bilinear form, coefficient mass matrices and loads.

The bilinear form splits as

    a(u, v) = (C/2) * [Omega x Omega pair sum] + C * int_Omega u v rho dx,

where rho(x) integrates the kernel over the complement (zero extension).
Element pairs are classified as identical / edge / vertex / near / far.
Identical pairs reduce exactly through the triangle covariogram
|T intersect (T+z)| = |T| (1 - c(phi) r)^2_+, leaving a smooth angular
integral. Touching and near pairs use a graded Duffy-type map on the w-side
triangle and exact radial (polar) integration on the x-side. Far pairs go
through blocked tensor quadrature with the kernel evaluated in bulk.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .quadrature import (tri_rule, gauss01, collapsed_rule, graded_edge_rule,
                         graded_vertex_rule)


def kernel_constant(s, d=2):
    """Normalization C(d, s) = 2^(2s) s Gamma(s + d/2) / (pi^(d/2) Gamma(1-s))."""
    return (2.0 ** (2 * s) * s * math.gamma(s + d / 2)
            / (math.pi ** (d / 2) * math.gamma(1.0 - s)))


@dataclass(frozen=True)
class KernelParams:
    s: float
    d: int = 2
    const: float = None

    def __post_init__(self):
        if not 0.0 < self.s < 1.0:
            raise ValueError("s must lie in (0, 1)")
        if self.d != 2:
            raise ValueError("only d = 2 is supported")
        if self.const is None:
            object.__setattr__(self, "const", kernel_constant(self.s, self.d))


@dataclass(frozen=True)
class QuadratureConfig:
    touching_order: int = 5        # Gauss points per graded (Duffy) direction
    disjoint_order: int = 3        # tensor points per triangle, far pairs
    escalated_order: int = 6       # outer order for near (escalated) pairs
    escalation_threshold: float = 1.0   # near iff dist < thr * max(diam)
    tail_points: int = 32          # angular points for the complement tail
    arc_points: int = 8            # angular Gauss points per silhouette arc
    self_angular: int = 12         # angular points per covariogram sector

    def __post_init__(self):
        for name in ("touching_order", "disjoint_order", "escalated_order",
                     "arc_points", "tail_points", "self_angular"):
            if getattr(self, name) < 2:
                raise ValueError(f"{name} must be >= 2")


DEFAULT_CONFIG = QuadratureConfig()


# ---------------------------------------------------------------------------
# geometry helpers

def _point_seg_dist(p, a, b):
    d = b - a
    l2 = np.maximum((d * d).sum(axis=-1), 1e-300)
    t = np.clip(((p - a) * d).sum(axis=-1) / l2, 0.0, 1.0)
    proj = a + t[..., None] * d
    return np.linalg.norm(p - proj, axis=-1)


def triangle_pair_distance(c1, c2):
    """Distance between triangle pairs; c1, c2 are (P, 3, 2)."""
    out = np.full(c1.shape[0], np.inf)
    for i in range(3):
        a1, b1 = c1[:, i], c1[:, (i + 1) % 3]
        for j in range(3):
            a2, b2 = c2[:, j], c2[:, (j + 1) % 3]
            for p, a, b in ((a1, a2, b2), (b1, a2, b2), (a2, a1, b1), (b2, a1, b1)):
                out = np.minimum(out, _point_seg_dist(p, a, b))
    return out


def point_triangle_distance(pts, tris):
    """Distance from pts (P,2) to matched triangles (P,3,2); 0 inside."""
    d = np.full(pts.shape[0], np.inf)
    for i in range(3):
        d = np.minimum(d, _point_seg_dist(pts, tris[:, i], tris[:, (i + 1) % 3]))
    # inside test via signed areas (triangles are counterclockwise)
    inside = np.ones(pts.shape[0], dtype=bool)
    for i in range(3):
        a, b = tris[:, i], tris[:, (i + 1) % 3]
        cr = ((b[:, 0] - a[:, 0]) * (pts[:, 1] - a[:, 1])
              - (b[:, 1] - a[:, 1]) * (pts[:, 0] - a[:, 0]))
        inside &= cr >= 0.0
    d[inside] = 0.0
    return d


def classify_pairs(mesh, cfg=DEFAULT_CONFIG):
    """Split unordered element pairs into edge / vertex / near classes.

    Returns (edge_pairs, vertex_pairs, near_pairs, special_ordered) where the
    last is a sorted array of ordered pair codes i * ne + j covering both
    orders of every touching/near pair plus the diagonal.
    """
    ne = mesh.num_elements
    elems = mesh.elements

    inter = np.nonzero(mesh.edge_counts == 2)[0]
    owners = {}
    for t in range(ne):
        for e in mesh.elem_edges[t]:
            owners.setdefault(e, []).append(t)
    edge_pairs = np.array([sorted(owners[e]) for e in inter], dtype=np.int64) \
        if inter.size else np.empty((0, 2), dtype=np.int64)

    elems_at, starts = mesh.vertex_elements
    vp = set()
    for v in range(mesh.num_vertices):
        star = elems_at[starts[v]:starts[v + 1]]
        for i in range(star.size):
            for j in range(i + 1, star.size):
                a, b = star[i], star[j]
                vp.add((a, b) if a < b else (b, a))
    ep = {tuple(p) for p in edge_pairs}
    vertex_pairs = np.array(sorted(vp - ep), dtype=np.int64) \
        if vp - ep else np.empty((0, 2), dtype=np.int64)

    # near pairs: disjoint but closer than thr * max(diam); coarse prefilter
    # by centroid distance, then exact triangle distance
    cen, dia = mesh.centroids, mesh.diameters
    rad = np.linalg.norm(mesh.element_coords - cen[:, None, :], axis=2).max(axis=1)
    touching = ep | {tuple(p) for p in vertex_pairs}
    near = []
    block = 512
    thr = cfg.escalation_threshold
    for i0 in range(0, ne, block):
        i1 = min(i0 + block, ne)
        d = np.linalg.norm(cen[i0:i1, None, :] - cen[None, :, :], axis=2)
        lim = thr * np.maximum(dia[i0:i1, None], dia[None, :]) \
            + rad[i0:i1, None] + rad[None, :]
        ii, jj = np.nonzero(d < lim)
        ii += i0
        keep = ii < jj
        ii, jj = ii[keep], jj[keep]
        if ii.size:
            dist = triangle_pair_distance(mesh.element_coords[ii],
                                          mesh.element_coords[jj])
            ok = dist < thr * np.maximum(dia[ii], dia[jj])
            for a, b in zip(ii[ok], jj[ok]):
                if (a, b) not in touching:
                    near.append((a, b))
    near_pairs = np.array(near, dtype=np.int64) if near else \
        np.empty((0, 2), dtype=np.int64)

    allp = np.vstack([edge_pairs, vertex_pairs, near_pairs])
    codes = [np.arange(ne, dtype=np.int64) * ne + np.arange(ne)]
    if allp.size:
        codes.append(allp[:, 0] * ne + allp[:, 1])
        codes.append(allp[:, 1] * ne + allp[:, 0])
    special = np.unique(np.concatenate(codes))
    return edge_pairs, vertex_pairs, near_pairs, special


# ---------------------------------------------------------------------------
# radial moments: exact integration along rays through a triangle

def _radial_io(r0, r1, s):
    return (r0 ** (-2 * s) - r1 ** (-2 * s)) / (2 * s)


def _radial_i1(r0, r1, s):
    if abs(s - 0.5) < 1e-13:
        return np.log(r1 / r0)
    return (r0 ** (1 - 2 * s) - r1 ** (1 - 2 * s)) / (2 * s - 1)


def _radial_i2(r0, r1, s):
    return (r1 ** (2 - 2 * s) - r0 ** (2 - 2 * s)) / (2 - 2 * s)


def silhouette_moments(x, tris, s, n_arc, inside=False, r_inner=None):
    """Moments of the kernel over matched triangles as seen from x.

    I0 = int r^(-1-2s) dr dphi, I1 = int e r^(-2s) dr dphi,
    I2 = int e e^T r^(1-2s) dr dphi, integrated over the part of each triangle
    with radial distance in [r0(phi), r1(phi)] from x. For x outside the
    triangle the radial window is the chord; for x inside, [r_inner, exit].
    Returns (I0, I1, I2); I0 is None when inside and r_inner is None.
    """
    P = x.shape[0]
    rel = tris - x[:, None, :]
    theta = np.arctan2(rel[:, :, 1], rel[:, :, 0])  # (P, 3)

    if inside:
        ts = np.sort(theta, axis=1)
        starts = np.stack([ts[:, 0], ts[:, 1], ts[:, 2]], axis=1)
        ends = np.stack([ts[:, 1], ts[:, 2], ts[:, 0] + 2 * np.pi], axis=1)
    else:
        ts = np.sort(theta, axis=1)
        gaps = np.stack([ts[:, 1] - ts[:, 0], ts[:, 2] - ts[:, 1],
                         ts[:, 0] + 2 * np.pi - ts[:, 2]], axis=1)
        k = np.argmax(gaps, axis=1)
        idx = np.arange(P)
        # order the three angles starting after the largest gap
        a0 = ts[idx, (k + 1) % 3]
        a1 = ts[idx, (k + 2) % 3]
        a2 = ts[idx, k]
        a1 = np.where(a1 < a0, a1 + 2 * np.pi, a1)
        a2 = np.where(a2 < a1, a2 + 2 * np.pi, a2)
        starts = np.stack([a0, a1], axis=1)
        ends = np.stack([a1, a2], axis=1)

    gx, gw = gauss01(n_arc)
    phi = starts[:, :, None] + (ends - starts)[:, :, None] * gx  # (P, arcs, n)
    wphi = (ends - starts)[:, :, None] * gw
    na = phi.shape[1] * n_arc
    phi = phi.reshape(P, na)
    wphi = wphi.reshape(P, na)
    e = np.stack([np.cos(phi), np.sin(phi)], axis=2)  # (P, na, 2)

    # ray-edge intersections against all three edges
    tmin = np.full((P, na), np.inf)
    tmax = np.full((P, na), -np.inf)
    nhit = np.zeros((P, na), dtype=np.int8)
    for i in range(3):
        A = tris[:, i]
        D = tris[:, (i + 1) % 3] - tris[:, i]
        m = A - x  # (P, 2)
        den = e[:, :, 0] * D[:, None, 1] - e[:, :, 1] * D[:, None, 0]
        cross_md = m[:, None, 0] * D[:, None, 1] - m[:, None, 1] * D[:, None, 0]
        cross_me = m[:, None, 0] * e[:, :, 1] - m[:, None, 1] * e[:, :, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = cross_md / den
            u = cross_me / den
        ok = (np.abs(den) > 1e-14) & (u >= -1e-10) & (u <= 1.0 + 1e-10) \
            & (t > 1e-14) & np.isfinite(t)
        tmin = np.where(ok, np.minimum(tmin, t), tmin)
        tmax = np.where(ok, np.maximum(tmax, t), tmax)
        nhit += ok.astype(np.int8)

    if inside:
        r1 = np.where(nhit > 0, tmin, 1.0)
        valid = nhit > 0
        r0 = np.broadcast_to(np.asarray(r_inner)[:, None], r1.shape) \
            if r_inner is not None else None
    else:
        valid = nhit >= 2
        r0 = np.where(valid, tmin, 1.0)
        r1 = np.where(valid, tmax, 1.0)
        r0 = np.maximum(r0, 1e-300)

    w = np.where(valid, wphi, 0.0)
    if inside and r_inner is None:
        I0 = None
    else:
        I0 = (w * _radial_io(r0, r1, s)).sum(axis=1)
    f1 = w * _radial_i1(r0, r1, s)
    I1 = np.stack([(f1 * e[:, :, 0]).sum(axis=1),
                   (f1 * e[:, :, 1]).sum(axis=1)], axis=1)
    f2 = w * _radial_i2(r0, r1, s)
    exx = (f2 * e[:, :, 0] * e[:, :, 0]).sum(axis=1)
    exy = (f2 * e[:, :, 0] * e[:, :, 1]).sum(axis=1)
    eyy = (f2 * e[:, :, 1] * e[:, :, 1]).sum(axis=1)
    I2 = np.stack([np.stack([exx, exy], axis=1),
                   np.stack([exy, eyy], axis=1)], axis=1)
    return I0, I1, I2


# ---------------------------------------------------------------------------
# identical pairs via the covariogram

def self_moment_matrices(mesh, idx, s, n_ang=12):
    """M(T) = int_T int_T (x-w)(x-w)^T |x-w|^(-2-2s) dx dw, exactly reduced.

    Uses |T intersect (T+z)| = |T| (1 - sum_i max(0, g_i . z))^2_+ with g_i the
    barycentric gradients; the radial integral is a Beta function and the
    angular integrand is analytic per sector.
    """
    g = mesh.grads[idx]            # (P, 3, 2)
    area = mesh.areas[idx]
    P = idx.size
    ang = np.arctan2(g[:, :, 1], g[:, :, 0])
    bounds = np.concatenate([ang + 0.5 * np.pi, ang - 0.5 * np.pi], axis=1)
    bounds = np.mod(bounds, 2 * np.pi)
    bounds = np.sort(bounds, axis=1)  # (P, 6)
    starts = bounds
    ends = np.concatenate([bounds[:, 1:], bounds[:, :1] + 2 * np.pi], axis=1)

    gx, gw = gauss01(n_ang)
    phi = starts[:, :, None] + (ends - starts)[:, :, None] * gx
    wphi = ((ends - starts)[:, :, None] * gw).reshape(P, -1)
    phi = phi.reshape(P, -1)
    c = np.zeros_like(phi)
    cos, sin = np.cos(phi), np.sin(phi)
    for i in range(3):
        c += np.maximum(0.0, g[:, i, 0, None] * cos + g[:, i, 1, None] * sin)
    beta = 2.0 / ((2 - 2 * s) * (3 - 2 * s) * (4 - 2 * s))
    f = wphi * c ** (2 * s - 2.0)
    M = np.empty((P, 2, 2))
    M[:, 0, 0] = (f * cos * cos).sum(axis=1)
    M[:, 0, 1] = M[:, 1, 0] = (f * cos * sin).sum(axis=1)
    M[:, 1, 1] = (f * sin * sin).sum(axis=1)
    return M * (beta * area)[:, None, None]


# ---------------------------------------------------------------------------
# touching / near pairs: graded outer rule + polar inner integration

def _reorder_for_pair(mesh, pairs, kind):
    """w-side vertex order: shared feature first (edge -> slots 0,1;
    vertex -> slot 0); returns reordered vertex ids (P, 3)."""
    e0 = mesh.elements[pairs[:, 0]]
    e1 = mesh.elements[pairs[:, 1]]
    P = pairs.shape[0]
    out = np.empty((P, 3), dtype=np.int64)
    if kind == "near":
        return e1.copy()
    shared = np.zeros((P, 3), dtype=bool)
    for a in range(3):
        for b in range(3):
            shared[:, b] |= e1[:, b] == e0[:, a]
    if kind == "edge":
        # two shared, one private
        priv = np.argmin(shared, axis=1)
        idx = np.arange(P)
        out[:, 2] = e1[idx, priv]
        out[:, 0] = e1[idx, (priv + 1) % 3]
        out[:, 1] = e1[idx, (priv + 2) % 3]
    else:
        sh = np.argmax(shared, axis=1)
        idx = np.arange(P)
        out[:, 0] = e1[idx, sh]
        out[:, 1] = e1[idx, (sh + 1) % 3]
        out[:, 2] = e1[idx, (sh + 2) % 3]
    return out


def _union_slot_data(mesh, pairs, wverts, wpts):
    """Per-slot data for the global hat differences psi_u(x, w).

    Slots 0-2 hold T's vertices, slots 3-5 hold T''s vertices with shared
    vertices deactivated (zero function) so every global hat appears once.
    psi_u(x, w) = A_u(w) + B_u . (x - w) with A_u the mismatch between the
    affine extension of phi_u|_T and the actual hat value at w; all A_u
    vanish on the shared feature, keeping every pair integral finite.
    Returns A (P, Q, 6), B (P, 6, 2), slot_ids (P, 6).
    """
    P, Q = wpts.shape[:2]
    tx = pairs[:, 0]
    xverts = mesh.elements[tx]
    xtri = mesh.element_coords[tx]
    gT = mesh.grads[tx]

    # affine extensions of T's hats evaluated at the w-points
    lam0 = np.zeros((P, 3))
    lam0[:, 0] = 1.0
    lam0 -= np.einsum("pad,pd->pa", gT, xtri[:, 0])
    ext = lam0[:, None, :] + np.einsum("pad,pqd->pqa", gT, wpts)

    # barycentric coordinates of the w-points in T' (in wverts order)
    wtri = mesh.vertices[wverts]
    gW = np.empty((P, 3, 2))
    two_a = (wtri[:, 1, 0] - wtri[:, 0, 0]) * (wtri[:, 2, 1] - wtri[:, 0, 1]) \
        - (wtri[:, 1, 1] - wtri[:, 0, 1]) * (wtri[:, 2, 0] - wtri[:, 0, 0])
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        ek = wtri[:, k] - wtri[:, j]
        gW[:, i, 0] = -ek[:, 1] / two_a
        gW[:, i, 1] = ek[:, 0] / two_a
    lw0 = np.zeros((P, 3))
    lw0[:, 0] = 1.0
    lw0 -= np.einsum("pad,pd->pa", gW, wtri[:, 0])
    lamW = lw0[:, None, :] + np.einsum("pad,pqd->pqa", gW, wpts)

    A = np.zeros((P, Q, 6))
    B = np.zeros((P, 6, 2))
    A[:, :, :3] = ext
    B[:, :3] = gT
    for a in range(3):
        for b in range(3):
            sh = xverts[:, a] == wverts[:, b]
            if sh.any():
                A[sh, :, a] -= lamW[sh][:, :, b]
    for b in range(3):
        dead = (wverts[:, b, None] == xverts).any(axis=1)
        A[~dead, :, 3 + b] = -lamW[~dead][:, :, b]
    slot_ids = np.concatenate([xverts, wverts], axis=1)
    return A, B, slot_ids


def pair_interactions(mesh, pairs, kind, params, cfg=DEFAULT_CONFIG):
    """Pair integrals of global hat differences for touching or near pairs.

    Returns (F, slot_ids) with F (P, 6, 6) holding
    int_{T x T'} psi_p psi_q |x-w|^(-2-2s) dx dw for the union hats.
    The w-side integral uses a Duffy-type rule graded toward the shared
    feature; the x-side integral is exact in the radial direction.
    """
    s = params.s
    if kind == "edge":
        bary, wts = graded_edge_rule(cfg.touching_order, 3.0)
    elif kind == "vertex":
        bary, wts = graded_vertex_rule(cfg.touching_order, 2.0)
    else:
        bary, wts = collapsed_rule(cfg.escalated_order)
    wverts = _reorder_for_pair(mesh, pairs, kind)
    Q = bary.shape[0]
    P = pairs.shape[0]

    wcoords = mesh.vertices[wverts]
    wpts = np.einsum("qk,pkd->pqd", bary, wcoords)
    wq = mesh.areas[pairs[:, 1]][:, None] * wts

    A, B, slot_ids = _union_slot_data(mesh, pairs, wverts, wpts)

    flat_tri = np.repeat(mesh.element_coords[pairs[:, 0]], Q, axis=0)
    I0, I1, I2 = silhouette_moments(wpts.reshape(-1, 2), flat_tri, s,
                                    cfg.arc_points, inside=False)
    I0 = I0.reshape(P, Q)
    I1 = I1.reshape(P, Q, 2)
    I2 = I2.reshape(P, Q, 2, 2)

    WA = wq[:, :, None] * A
    F = np.einsum("pqi,pq,pqj->pij", WA, I0, A)
    BI1 = np.einsum("pid,pqd->pqi", B, I1)
    F += np.einsum("pqi,pqj->pij", wq[:, :, None] * BI1, A)
    F += np.einsum("pqi,pqj->pij", WA, BI1)
    I2w = np.einsum("pq,pqde->pde", wq, I2)
    F += np.einsum("pid,pde,pje->pij", B, I2w, B)
    return F, slot_ids


def pair_interactions_tensor(mesh, pairs, n, params):
    """Plain tensor-product Gauss pair integrals for well separated pairs."""
    s = params.s
    bary, wts = collapsed_rule(n)
    Q = bary.shape[0]
    P = pairs.shape[0]
    wverts = mesh.elements[pairs[:, 1]].copy()
    cw = mesh.vertices[wverts]
    xp = np.einsum("qk,pkd->pqd", bary, mesh.element_coords[pairs[:, 0]])
    wp = np.einsum("qk,pkd->pqd", bary, cw)
    wx = mesh.areas[pairs[:, 0]][:, None] * wts
    ww = mesh.areas[pairs[:, 1]][:, None] * wts
    A, B, ids = _union_slot_data(mesh, pairs, wverts, wp)
    # psi_p(x, w) = A_p(w) + B_p . (x - w)
    diff = xp[:, :, None, :] - wp[:, None, :, :]
    r2 = (diff ** 2).sum(axis=3)
    K = r2 ** (-(1.0 + s)) * (wx[:, :, None] * ww[:, None, :])
    psi = A[:, None, :, :] + np.einsum("pid,pqrd->pqri", B, diff)  # (P,Qx,Qw,6)
    F = np.einsum("pqri,pqr,pqrj->pij", psi, K, psi)
    return F, ids


def pair_interaction(mesh, t1, t2, params, cfg=DEFAULT_CONFIG):
    """Pair contribution matrix: rows are T1's vertices, columns T2's.

    Entry (a, b) is (C/2) int_{T1 x T2} (phi_ia(x) - phi_ia(w))
    (phi_jb(x) - phi_jb(w)) |x - w|^(-2-2s) dx dw with global hat functions.
    """
    if mesh.areas[t1] <= 0 or mesh.areas[t2] <= 0:
        raise ValueError("degenerate element")
    half_c = 0.5 * params.const
    v1, v2 = mesh.elements[t1], mesh.elements[t2]
    if t1 == t2:
        M = self_moment_matrices(mesh, np.array([t1]), params.s,
                                 cfg.self_angular)[0]
        g = mesh.grads[t1]
        return half_c * (g @ M @ g.T)
    shared = len(set(v1) & set(v2))
    pairs = np.array([[t1, t2]], dtype=np.int64)
    if shared == 2:
        G, ids = pair_interactions(mesh, pairs, "edge", params, cfg)
    elif shared == 1:
        G, ids = pair_interactions(mesh, pairs, "vertex", params, cfg)
    else:
        dist = triangle_pair_distance(mesh.element_coords[[t1]],
                                      mesh.element_coords[[t2]])[0]
        lim = cfg.escalation_threshold * max(mesh.diameters[t1],
                                             mesh.diameters[t2])
        if dist < lim:
            G, ids = pair_interactions(mesh, pairs, "near", params, cfg)
        else:
            G, ids = pair_interactions_tensor(mesh, pairs, cfg.disjoint_order,
                                              params)
    G, ids = G[0], ids[0]
    out = np.zeros((3, 3))
    for a in range(3):
        rows = [p for p in range(6) if ids[p] == v1[a]]
        for b in range(3):
            cols = [q for q in range(6) if ids[q] == v2[b]]
            out[a, b] = sum(G[p, q] for p in rows for q in cols)
    return half_c * out


# ---------------------------------------------------------------------------
# complement density

def _tail_density(pts, radius, s, n_ang):
    """(1/2s) int_0^{2pi} r_b(x, phi)^(-2s) dphi over the exterior of B(0, R)."""
    ang = (np.arange(n_ang) + 0.5) * (2 * np.pi / n_ang)
    e = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    xe = pts @ e.T                                    # (P, n_ang)
    disc = xe ** 2 + radius ** 2 - (pts ** 2).sum(axis=1)[:, None]
    rb = -xe + np.sqrt(disc)
    return (2 * np.pi / n_ang) * (rb ** (-2 * s)).sum(axis=1) / (2 * s)


def complement_density_points(pts, shell, params, cfg=DEFAULT_CONFIG):
    """rho(x) = int over the complement of Omega of |x-w|^(-2-2s) dw for
    interior points: Gauss over shell triangles (polar-exact for the nearby
    ones) plus the analytic radial tail beyond the shell radius."""
    s = params.s
    P = pts.shape[0]
    bary, wts = tri_rule(2)
    spts = np.einsum("qk,tkd->tqd", bary, shell.coords).reshape(-1, 2)
    swts = (shell.areas[:, None] * wts).ravel()
    rho = np.zeros(P)
    block = max(1, int(2e6) // max(spts.shape[0], 1))
    for i0 in range(0, P, block):
        i1 = min(i0 + block, P)
        d2 = ((pts[i0:i1, None, :] - spts[None, :, :]) ** 2).sum(axis=2)
        rho[i0:i1] = (d2 ** (-(1.0 + s))) @ swts

    # polar correction for shell triangles close to x
    cen = shell.coords.mean(axis=1)
    rad = np.linalg.norm(shell.coords - cen[:, None, :], axis=2).max(axis=1)
    qn = bary.shape[0]
    corr_i, corr_t = [], []
    block = max(1, int(2e6) // max(cen.shape[0], 1))
    for i0 in range(0, P, block):
        i1 = min(i0 + block, P)
        d = np.linalg.norm(pts[i0:i1, None, :] - cen[None, :, :], axis=2)
        ii, tt = np.nonzero(d < 2.0 * shell.diameters[None, :] + rad[None, :])
        corr_i.append(ii + i0)
        corr_t.append(tt)
    ii = np.concatenate(corr_i) if corr_i else np.empty(0, dtype=np.int64)
    tt = np.concatenate(corr_t) if corr_t else np.empty(0, dtype=np.int64)
    if ii.size:
        tris = shell.coords[tt]
        exact = point_triangle_distance(pts[ii], tris)
        keep = exact < 2.0 * shell.diameters[tt]
        ii, tt, tris = ii[keep], tt[keep], tris[keep]
    if ii.size:
        I0, _, _ = silhouette_moments(pts[ii], tris, s, cfg.arc_points,
                                      inside=False)
        # swap the plain-Gauss value of those triangles for the exact one
        spq = np.einsum("qk,tkd->tqd", bary, shell.coords[tt])
        d2 = ((pts[ii, None, :] - spq) ** 2).sum(axis=2)
        crude = (d2 ** (-(1.0 + s)) * (shell.areas[tt][:, None] * wts)).sum(axis=1)
        np.add.at(rho, ii, I0 - crude)
    rho += _tail_density(pts, shell.radius, s, cfg.tail_points)
    return rho


def complement_density(x, mesh, shell, params, cfg=DEFAULT_CONFIG):
    """Kernel mass of the complement seen from one interior point."""
    x = np.asarray(x, dtype=float).reshape(1, 2)
    if mesh.locate(x)[0] < 0:
        raise ValueError("point outside the domain")
    bnd = np.nonzero(mesh.boundary_edges)[0]
    a = mesh.vertices[mesh.edges[bnd, 0]]
    b = mesh.vertices[mesh.edges[bnd, 1]]
    if _point_seg_dist(x[0], a, b).min() < 1e-14:
        raise ValueError("point too close to the boundary")
    return float(complement_density_points(x, shell, params, cfg)[0])


# ---------------------------------------------------------------------------
# stiffness assembly

@dataclass(frozen=True)
class StiffnessMatrix:
    """Dense nonlocal stiffness over interior nodes, N = interior count."""
    matrix: np.ndarray
    mesh: object = field(compare=False)
    params: KernelParams = field(compare=False)
    asymmetry: float = field(default=0.0, compare=False)

    @property
    def n(self):
        return self.matrix.shape[0]


def _far_field(mesh, params, cfg, special, block_elems=96):
    """Omega x Omega sum over ordered non-special pairs, blocked tensor rule."""
    s = params.s
    ne, nv = mesh.num_elements, mesh.num_vertices
    bary, wts = collapsed_rule(cfg.disjoint_order)
    q = bary.shape[0]
    pts = np.einsum("qk,tkd->tqd", bary, mesh.element_coords)
    ptw = mesh.areas[:, None] * wts
    flat = pts.reshape(-1, 2)
    nrm = (flat ** 2).sum(axis=1)
    rhoW = np.zeros(ne * q)
    AX = np.zeros((nv, nv))
    elems = mesh.elements

    B = block_elems
    nb = (ne + B - 1) // B
    for bi in range(nb):
        i0, i1 = bi * B, min((bi + 1) * B, ne)
        BI = i1 - i0
        PI = flat[i0 * q:i1 * q]
        WI = ptw[i0:i1].ravel()
        Ycols = np.zeros((nv, BI * 3))
        for bj in range(nb):
            j0, j1 = bj * B, min((bj + 1) * B, ne)
            BJ = j1 - j0
            PJ = flat[j0 * q:j1 * q]
            WJ = ptw[j0:j1].ravel()
            r2 = nrm[i0 * q:i1 * q, None] + nrm[None, j0 * q:j1 * q] \
                - 2.0 * (PI @ PJ.T)
            # mask special ordered pairs (touching/near/identical)
            base = np.arange(i0, i1, dtype=np.int64) * ne
            cand = base[:, None] + np.arange(j0, j1, dtype=np.int64)[None, :]
            pos = np.searchsorted(special, cand.ravel())
            pos = np.minimum(pos, special.size - 1)
            hit = special[pos] == cand.ravel()
            if hit.any():
                ei, ej = np.nonzero(hit.reshape(BI, BJ))
                r4 = r2.reshape(BI, q, BJ, q)
                r4[ei, :, ej, :] = 1.0
            np.maximum(r2, 1e-300, out=r2)
            K = r2 ** (-(1.0 + s))
            if hit.any():
                K4 = K.reshape(BI, q, BJ, q)
                K4[ei, :, ej, :] = 0.0
            K *= WJ[None, :]
            K *= WI[:, None]
            rhoW[i0 * q:i1 * q] += K.sum(axis=1)
            Kq = K.reshape(BI, q, BJ, q)
            t = np.tensordot(Kq, bary, axes=([3], [0]))      # (BI,q,BJ,3)
            Mx = np.tensordot(bary, t, axes=([0], [1]))      # (3,BI,BJ,3)
            Mflat = Mx.transpose(1, 0, 2, 3).reshape(BI * 3, BJ * 3)
            np.add.at(Ycols, elems[j0:j1].ravel(), Mflat.T)
        np.add.at(AX, elems[i0:i1].ravel(), Ycols.T)

    # fold the row-sum (mass-like) part per element
    blocks = np.einsum("qa,tq,qb->tab", bary, rhoW.reshape(ne, q), bary)
    Afold = np.zeros((nv, nv))
    vid = elems
    np.add.at(Afold, (vid[:, :, None], vid[:, None, :]), blocks)
    return 2.0 * (Afold - AX)


def assemble_stiffness(mesh, shell, params, cfg=DEFAULT_CONFIG,
                       block_elems=96):
    """A_ij = a(phi_i, phi_j) over interior nodes: pair sum plus complement."""
    ne, nv = mesh.num_elements, mesh.num_vertices
    if (mesh.areas <= 0).any():
        raise ValueError("degenerate element in mesh")
    edge_p, vert_p, near_p, special = classify_pairs(mesh, cfg)
    A = _far_field(mesh, params, cfg, special, block_elems)

    # identical pairs (exact covariogram reduction)
    M = self_moment_matrices(mesh, np.arange(ne), params.s, cfg.self_angular)
    g = mesh.grads
    blocks = np.einsum("tad,tde,tbe->tab", g, M, g)
    np.add.at(A, (mesh.elements[:, :, None], mesh.elements[:, None, :]), blocks)

    for pairs, kind in ((edge_p, "edge"), (vert_p, "vertex"), (near_p, "near")):
        if pairs.shape[0] == 0:
            continue
        chunk = 20000
        for c0 in range(0, pairs.shape[0], chunk):
            G, ids = pair_interactions(mesh, pairs[c0:c0 + chunk], kind,
                                       params, cfg)
            np.add.at(A, (ids[:, :, None], ids[:, None, :]), 2.0 * G)

    A *= 0.5 * params.const

    # complement term C * int phi_i phi_j rho
    interior_rule = tri_rule(4)
    bnd_rule = tri_rule(8)
    touches_bnd = mesh.boundary_vertices[mesh.elements].any(axis=1)
    for rule, sel in ((interior_rule, ~touches_bnd), (bnd_rule, touches_bnd)):
        idx = np.nonzero(sel)[0]
        if idx.size == 0:
            continue
        bary, wts = rule
        pts = np.einsum("qk,tkd->tqd", bary, mesh.element_coords[idx])
        rho = complement_density_points(pts.reshape(-1, 2), shell, params,
                                        cfg).reshape(idx.size, -1)
        wq = mesh.areas[idx][:, None] * wts * rho
        blocks = params.const * np.einsum("qa,tq,qb->tab", bary, wq, bary)
        vid = mesh.elements[idx]
        np.add.at(A, (vid[:, :, None], vid[:, None, :]), blocks)

    asym = float(np.abs(A - A.T).max() / max(np.abs(A).max(), 1e-300))
    A = 0.5 * (A + A.T)
    ii = mesh.interior_vertices
    return StiffnessMatrix(A[np.ix_(ii, ii)].copy(), mesh, params, asym)


# ---------------------------------------------------------------------------
# local (weighted mass / load) assembly

def evaluate_field(f, mesh, elem_ids, points, bary=None):
    """Evaluate a coefficient at physical quadrature points.

    Accepts scalars, callables of an (n, 2) array, or objects exposing
    values_at(mesh, elem_ids, points, bary)."""
    if np.isscalar(f):
        return np.full(points.shape[0], float(f))
    if hasattr(f, "values_at"):
        return f.values_at(mesh, elem_ids, points, bary)
    return np.asarray(f(points), dtype=float)


def assemble_weighted_mass(mesh, u, degree=4):
    """M_ij = int_Omega u phi_i phi_j dx over all vertices; u must be >= 0."""
    bary, wts = tri_rule(degree)
    ne, nv = mesh.num_elements, mesh.num_vertices
    pts = np.einsum("qk,tkd->tqd", bary, mesh.element_coords)
    elem_ids = np.repeat(np.arange(ne), bary.shape[0])
    vals = evaluate_field(u, mesh, elem_ids, pts.reshape(-1, 2),
                          np.tile(bary, (ne, 1))).reshape(ne, -1)
    if vals.min() < -1e-12:
        raise ValueError("negative coefficient in weighted mass")
    wq = mesh.areas[:, None] * wts * vals
    blocks = np.einsum("qa,tq,qb->tab", bary, wq, bary)
    M = np.zeros((nv, nv))
    np.add.at(M, (mesh.elements[:, :, None], mesh.elements[:, None, :]), blocks)
    return M


def assemble_load(mesh, f, degree=8):
    """F_i = int_Omega f phi_i dx over all vertices."""
    bary, wts = tri_rule(degree)
    ne = mesh.num_elements
    pts = np.einsum("qk,tkd->tqd", bary, mesh.element_coords)
    elem_ids = np.repeat(np.arange(ne), bary.shape[0])
    vals = evaluate_field(f, mesh, elem_ids, pts.reshape(-1, 2),
                          np.tile(bary, (ne, 1))).reshape(ne, -1)
    wq = mesh.areas[:, None] * wts * vals
    F = np.zeros(mesh.num_vertices)
    np.add.at(F, mesh.elements, np.einsum("tq,qa->ta", wq, bary))
    return F


def dump_matrix(path, A):
    """Plain-text dense dump, one row per line."""
    np.savetxt(path, np.atleast_2d(A))
