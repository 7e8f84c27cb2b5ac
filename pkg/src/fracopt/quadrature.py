"""Quadrature rules on triangles.

Conventions: points are barycentric rows (n, 3); weights sum to 1, so
integral over T of f is approximated by |T| * w @ f(points mapped to T).
"""
import numpy as np
from numpy.polynomial.legendre import leggauss


def _orbit3(a, w):
    # symmetric orbit (a, a, 1 - 2a)
    b = 1.0 - 2.0 * a
    return [(b, a, a), (a, b, a), (a, a, b)], [w] * 3


def _orbit6(a, b, w):
    c = 1.0 - a - b
    pts = [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)]
    return pts, [w] * 6


def _rule(groups):
    pts, wts = [], []
    for g in groups:
        if len(g) == 2:
            p, w = _orbit3(*g)
        elif len(g) == 3:
            p, w = _orbit6(*g)
        else:  # centroid
            p, w = [(1 / 3, 1 / 3, 1 / 3)], [g[0]]
        pts += p
        wts += w
    return np.array(pts), np.array(wts)


# Dunavant rules; keys are polynomial degrees integrated exactly.
_TRI_RULES = {
    1: _rule([(1.0,)]),
    2: _rule([(1 / 6, 1 / 3)]),
    4: _rule([(0.445948490915965, 0.223381589678011),
              (0.091576213509771, 0.109951743655322)]),
    6: _rule([(0.063089014491502, 0.050844906370207),
              (0.249286745170910, 0.116786275726379),
              (0.310352451033785, 0.053145049844816, 0.082851075618374)]),
    8: _rule([(0.144315607677787,),
              (0.459292588292723, 0.095091634413923),
              (0.170569307751760, 0.103217370534718),
              (0.050547228317031, 0.032458497623198),
              (0.263112829634638, 0.008394777409958, 0.027230314174435)]),
}


def tri_rule(degree):
    """Smallest tabulated symmetric rule exact for polynomials of `degree`."""
    for d in sorted(_TRI_RULES):
        if d >= degree:
            return _TRI_RULES[d]
    raise ValueError(f"no triangle rule of degree {degree}")


def gauss01(n):
    """n-point Gauss-Legendre nodes/weights on [0, 1]."""
    x, w = leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def collapsed_rule(n):
    """n x n tensor Gauss rule on the triangle via the collapsed-square map.

    Points cluster toward the first vertex; weights sum to 1.
    """
    x, w = gauss01(n)
    U, V = np.meshgrid(x, x, indexing="ij")
    WU, WV = np.meshgrid(w, w, indexing="ij")
    xi = (U * (1.0 - V)).ravel()
    eta = (U * V).ravel()
    wts = (2.0 * WU * WV * U).ravel()  # Duffy Jacobian u, ref area 1/2
    pts = np.column_stack([1.0 - xi - eta, xi, eta])
    return pts, wts


def graded_edge_rule(n, gamma):
    """Tensor rule on the triangle graded toward the edge between vertices 0 and 1.

    Map w = (1-t)((1-xi) V0 + xi V1) + t V2 with t = tau**gamma; returns
    barycentric points and weights (sum 1) with the grading Jacobian folded in.
    """
    x, w = gauss01(n)
    XI, TAU = np.meshgrid(x, x, indexing="ij")
    WXI, WTAU = np.meshgrid(w, w, indexing="ij")
    t = TAU ** gamma
    dt = gamma * TAU ** (gamma - 1.0)
    lam2 = t.ravel()
    lam1 = ((1.0 - t) * XI).ravel()
    lam0 = 1.0 - lam1 - lam2
    wts = (2.0 * WXI * WTAU * (1.0 - t) * dt).ravel()
    return np.column_stack([lam0, lam1, lam2]), wts


def graded_vertex_rule(n, gamma):
    """Tensor rule on the triangle graded toward vertex 0.

    Map w = V0 + t((1-xi)(V1-V0) + xi(V2-V0)) with t = tau**gamma.
    """
    x, w = gauss01(n)
    XI, TAU = np.meshgrid(x, x, indexing="ij")
    WXI, WTAU = np.meshgrid(w, w, indexing="ij")
    t = TAU ** gamma
    dt = gamma * TAU ** (gamma - 1.0)
    lam1 = (t * (1.0 - XI)).ravel()
    lam2 = (t * XI).ravel()
    lam0 = 1.0 - lam1 - lam2
    wts = (2.0 * WXI * WTAU * t * dt).ravel()
    return np.column_stack([lam0, lam1, lam2]), wts
