"""Independent brute-force references used by the test suite.

These deliberately avoid the library's quadrature machinery: pair integrals
use adaptive quadtree subdivision with plain Gauss on separated sub-pairs;
the pointwise fractional Laplacian uses dense polar sampling with an even
angular grid (which cancels the odd singular part exactly) plus an analytic
far tail.
"""
import numpy as np

_GB, _GW = None, None


def _gauss_tri():
    # degree-4 six-point rule, written out independently of the package
    global _GB, _GW
    if _GB is None:
        a1, w1 = 0.445948490915965, 0.223381589678011
        a2, w2 = 0.091576213509771, 0.109951743655322
        pts = []
        wts = []
        for a, w in ((a1, w1), (a2, w2)):
            b = 1 - 2 * a
            pts += [(b, a, a), (a, b, a), (a, a, b)]
            wts += [w, w, w]
        _GB, _GW = np.array(pts), np.array(wts)
    return _GB, _GW


def _split4(tris):
    """Midpoint subdivision: (n,3,2) -> (4n,3,2)."""
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    ab, bc, ca = 0.5 * (a + b), 0.5 * (b + c), 0.5 * (c + a)
    return np.concatenate([
        np.stack([a, ab, ca], axis=1),
        np.stack([ab, b, bc], axis=1),
        np.stack([ca, bc, c], axis=1),
        np.stack([ab, bc, ca], axis=1),
    ])


def _touching(t1, t2):
    """Exact shared-vertex test (subdivision keeps shared coordinates bitwise)."""
    eq = (t1[:, :, None, 0] == t2[:, None, :, 0]) & \
         (t1[:, :, None, 1] == t2[:, None, :, 1])
    return eq.any(axis=(1, 2))


def pair_integral_brute(tri1, tri2, funcs, s, max_level=11,
                        max_pairs=4_000_000):
    """n x n matrix of int int psi_p psi_q |x-w|^(-2-2s) over tri1 x tri2.

    funcs: list of ((ax, gxx, gxy), (aw, gwx, gwy)) affine pairs defining
    psi_p(x, w) = (ax + gx . x) - (aw + gw . w); for global hats the two
    parts are the restrictions to tri1 and tri2 (zero where unsupported).
    """
    t1 = np.asarray(tri1, dtype=float)[None]
    t2 = np.asarray(tri2, dtype=float)[None]
    bary, bw = _gauss_tri()
    n = len(funcs)
    G = np.zeros((n, n))
    npairs = 0

    def eval_batch(b1, b2):
        nonlocal G, npairs
        npairs += b1.shape[0] * bary.shape[0] ** 2
        x = np.einsum("qk,pkd->pqd", bary, b1)
        w = np.einsum("qk,pkd->pqd", bary, b2)
        a1 = 0.5 * np.abs(np.cross(b1[:, 1] - b1[:, 0], b1[:, 2] - b1[:, 0]))
        a2 = 0.5 * np.abs(np.cross(b2[:, 1] - b2[:, 0], b2[:, 2] - b2[:, 0]))
        wx = a1[:, None] * bw
        ww = a2[:, None] * bw
        d = x[:, :, None, :] - w[:, None, :, :]
        K = ((d ** 2).sum(axis=3)) ** (-(1.0 + s)) * \
            (wx[:, :, None] * ww[:, None, :])
        psi = []
        for (ax, gxx, gxy), (aw, gwx, gwy) in funcs:
            px = ax + gxx * x[..., 0] + gxy * x[..., 1]
            pw = aw + gwx * w[..., 0] + gwy * w[..., 1]
            psi.append(px[:, :, None] - pw[:, None, :])
        for p in range(n):
            for q in range(p, n):
                v = (K * psi[p] * psi[q]).sum()
                G[p, q] += v
                if q != p:
                    G[q, p] += v

    cur1, cur2 = t1, t2
    if not _touching(t1, t2)[0]:
        eval_batch(t1, t2)
        return G
    for level in range(max_level):
        # children pairs: for each parent pair p, the 4 x 4 combinations;
        # _split4 groups output as [child0 of all parents, child1 of all, ...]
        npar = cur1.shape[0]
        k1 = _split4(cur1)
        k2 = _split4(cur2)
        ci, cj, pp = np.meshgrid(np.arange(4), np.arange(4), np.arange(npar),
                                 indexing="ij")
        c1 = k1[(ci * npar + pp).ravel()]
        c2 = k2[(cj * npar + pp).ravel()]
        touch = _touching(c1, c2)
        far1, far2 = c1[~touch], c2[~touch]
        if far1.shape[0]:
            eval_batch(far1, far2)
        cur1, cur2 = c1[touch], c2[touch]
        if cur1.shape[0] == 0 or npairs > max_pairs:
            break
    return G


def hat_slots(tri):
    """Affine data (a, gx, gy) of the three nodal hats on a triangle."""
    T = np.asarray(tri, dtype=float)
    out = []
    for i in range(3):
        A = np.array([[T[0, 0], T[0, 1], 1.0],
                      [T[1, 0], T[1, 1], 1.0],
                      [T[2, 0], T[2, 1], 1.0]])
        rhs = np.zeros(3)
        rhs[i] = 1.0
        gx, gy, a = np.linalg.solve(A, rhs)
        out.append((a, gx, gy))
    return out


def frac_laplacian_brute(v, x, s, const, outer=3.0, n_ang=2048, r_min=1e-8,
                         ratio=1.08):
    """C * p.v. integral of (v(x) - v(w)) |x-w|^(-2-2s) over the plane.

    v: callable on (n, 2) arrays, zero outside its support; outer must exceed
    the distance from x to any support point. Even angular grids cancel the
    odd (gradient) part of the singularity, so the inner truncation only
    drops curvature terms of order r_min^(2-2s).
    """
    x = np.asarray(x, dtype=float)
    vx = float(v(x[None])[0])
    n_r = int(np.ceil(np.log(outer / r_min) / np.log(ratio)))
    edges = r_min * ratio ** np.arange(n_r + 1)
    edges[-1] = outer
    g = np.array([0.5 - 0.5 / np.sqrt(3), 0.5 + 0.5 / np.sqrt(3)])
    r = (edges[:-1, None] + (edges[1:] - edges[:-1])[:, None] * g).ravel()
    wr = np.repeat(0.5 * (edges[1:] - edges[:-1]), 2)
    ang = (np.arange(n_ang) + 0.5) * (2 * np.pi / n_ang)
    e = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    pts = x[None, None, :] + r[:, None, None] * e[None, :, :]
    vals = v(pts.reshape(-1, 2)).reshape(r.size, n_ang)
    integrand = (vx - vals).sum(axis=1) * (2 * np.pi / n_ang)
    inner = (integrand * wr * r ** (-1.0 - 2 * s)).sum()
    tail = vx * 2 * np.pi * outer ** (-2 * s) / (2 * s)
    return const * (inner + tail)


def p1_callable(mesh, coeffs_full):
    """Pointwise evaluator of a P1 function (zero outside the mesh)."""
    def v(pts):
        pts = np.atleast_2d(pts)
        out = np.zeros(pts.shape[0])
        ids = mesh.locate(pts)
        ok = ids >= 0
        if ok.any():
            t = ids[ok]
            g = mesh.grads[t]
            c0 = mesh.element_coords[t][:, 0]
            lam = np.zeros((t.size, 3))
            lam[:, 0] = 1.0
            lam += np.einsum("pad,pd->pa", g, pts[ok] - c0)
            out[ok] = (coeffs_full[mesh.elements[t]] * lam).sum(axis=1)
        return out
    return v


def dorfler_min_cardinality(eta2, theta):
    """Exhaustive minimal bulk set size for small indicator vectors."""
    n = eta2.size
    total = eta2.sum()
    best = None
    for mask in range(1 << n):
        sel = [(mask >> i) & 1 for i in range(n)]
        ssum = sum(e for e, m in zip(eta2, sel) if m)
        if ssum >= theta ** 2 * total - 1e-12:
            k = sum(sel)
            if best is None or k < best:
                best = k
    return best
