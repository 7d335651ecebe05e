"""Fixed symmetric quadrature rules on the reference tetrahedron and triangle.

One volume rule and one surface rule are used for every integral in the
package.  Both have positive weights, which keeps quadrature approximations
of ``int |f|`` an upper bound for ``|int f|``.
"""

import numpy as np

__all__ = ["tet_rule", "tri_rule"]


def _tet_points_weights():
    # Symmetric 14-point rule, exact for polynomials of total degree <= 5.
    # Orbits: two 4-point (a,a,a,b) orbits and one 6-point (c,c,d,d) orbit.
    # Weights are relative to the reference tetrahedron volume 1/6.
    a1, w1 = 0.31088591926330056, 0.018781320953002645
    a2, w2 = 0.09273525031089096, 0.012248840519393582
    c, w3 = 0.045503704125651155, 0.007091003462847132
    bary = []
    weights = []
    for a, w in ((a1, w1), (a2, w2)):
        b = 1.0 - 3.0 * a
        for k in range(4):
            p = [a, a, a, a]
            p[k] = b
            bary.append(p)
            weights.append(w)
    d = 0.5 - c
    for i in range(3):
        for j in range(i + 1, 4):
            p = [c, c, c, c]
            p[i] = d
            p[j] = d
            bary.append(p)
            weights.append(w3)
    return np.asarray(bary), np.asarray(weights)


def _tri_points_weights():
    # Symmetric 6-point rule on the reference triangle, exact to degree 4.
    # Weights are relative to the reference triangle area 1/2.
    a1, w1 = 0.445948490915965, 0.111690794839005
    a2, w2 = 0.091576213509771, 0.054975871827661
    bary = []
    weights = []
    for a, w in ((a1, w1), (a2, w2)):
        b = 1.0 - 2.0 * a
        for k in range(3):
            p = [a, a, a]
            p[k] = b
            bary.append(p)
            weights.append(w)
    return np.asarray(bary), np.asarray(weights)


_TET_BARY, _TET_W = _tet_points_weights()
_TRI_BARY, _TRI_W = _tri_points_weights()


def tet_rule():
    """Barycentric points ``(nq, 4)`` and weights summing to 1/6."""
    return _TET_BARY, _TET_W


def tri_rule():
    """Barycentric points ``(nq, 3)`` and weights summing to 1/2."""
    return _TRI_BARY, _TRI_W
