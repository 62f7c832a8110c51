"""Symmetric Gauss quadrature on the reference triangle and unit interval.

Rules are stored in barycentric coordinates with weights summing to 1/2
(the reference-triangle area). Degrees 1-3 are classical closed-form rules,
degrees 4-10 use tabulated symmetric rules whose orbit parameters were
polished to machine precision against the monomial moments, and higher
degrees fall back to a symmetrized conical-product construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import roots_jacobi

MAX_DEGREE = 16


@dataclass(frozen=True)
class TriangleRule:
    degree: int
    bary: np.ndarray      # (nq, 3)
    weights: np.ndarray   # (nq,), sum 1/2

    @property
    def npoints(self):
        return len(self.weights)

    @property
    def points(self):
        """Reference (x, y) coordinates: x = bary1, y = bary2."""
        return self.bary[:, 1:]


def _centroid(w):
    return [np.full(1, w)], [np.full((1, 3), 1.0 / 3.0)]


def _orbit3(w, a):
    b = 1.0 - 2.0 * a
    pts = np.array([[b, a, a], [a, b, a], [a, a, b]])
    return [np.full(3, w)], [pts]


def _orbit6(w, a, b):
    c = 1.0 - a - b
    pts = np.array([[c, a, b], [c, b, a], [a, c, b],
                    [b, c, a], [a, b, c], [b, a, c]])
    return [np.full(6, w)], [pts]


def _assemble(*groups):
    weights, points = [], []
    for w, p in groups:
        weights.extend(w)
        points.extend(p)
    w = np.concatenate(weights) * 0.5   # orbit weights are given in units of 1
    return np.vstack(points), w


def _rule_deg1():
    return _assemble(_centroid(1.0))


def _rule_deg2():
    a = 0.5
    pts = np.array([[a, a, 0.0], [0.0, a, a], [a, 0.0, a]])
    return pts, np.full(3, 1.0 / 6.0)


def _rule_deg3():
    return _assemble(_centroid(-27.0 / 48.0), _orbit3(25.0 / 48.0, 0.2))


def _rule_deg4():
    return _assemble(
        _orbit3(0.22338158967801133, 0.4459484909159648),
        _orbit3(0.10995174365532200, 0.09157621350977078),
    )


def _rule_deg5():
    s15 = np.sqrt(15.0)
    return _assemble(
        _centroid(9.0 / 40.0),
        _orbit3((155.0 + s15) / 1200.0, (6.0 + s15) / 21.0),
        _orbit3((155.0 - s15) / 1200.0, (6.0 - s15) / 21.0),
    )


def _rule_deg6():
    return _assemble(
        _orbit3(0.11678627572637357, 0.24928674517091380),
        _orbit3(0.05084490637020662, 0.06308901449150220),
        _orbit6(0.08285107561837660, 0.31035245103378270, 0.63650249912139780),
    )


def _rule_deg8():
    return _assemble(
        _centroid(0.1443156076777548),
        _orbit3(0.09509163426730458, 0.4592925882927021),
        _orbit3(0.10321737053472839, 0.17056930775173557),
        _orbit3(0.032458497623201896, 0.050547228317032546),
        _orbit6(0.027230314174423443, 0.26311282963471644, 0.7284923929553644),
    )


def _rule_deg10():
    return _assemble(
        _centroid(0.09081799038277683),
        _orbit3(0.03672595775657870, 0.48557763338357784),
        _orbit3(0.04532105943556492, 0.10948157548502614),
        _orbit6(0.07275791684537723, 0.14170721941493974, 0.30793983876399716),
        _orbit6(0.02832724253102868, 0.02500353476260362, 0.72832390459744380),
        _orbit6(0.00942166696372612, 0.00954081540031395, 0.92365593358753210),
    )


def _conical_rule(degree):
    """Conical-product Gauss rule, symmetrized over cyclic vertex rotations."""
    m = (degree + 2) // 2
    # Gauss-Jacobi with weight (1-s) on [0,1]
    xj, wj = roots_jacobi(m, 1.0, 0.0)
    s = 0.5 * (xj + 1.0)
    ws = 0.25 * wj
    xl, wl = np.polynomial.legendre.leggauss(m)
    t = 0.5 * (xl + 1.0)
    wt = 0.5 * wl
    S, T = np.meshgrid(s, t, indexing="ij")
    x = S.ravel()
    y = (T * (1.0 - S)).ravel()
    w = np.outer(ws, wt).ravel()
    bary = np.stack([1.0 - x - y, x, y], axis=1)
    # average over the three cyclic rotations to restore symmetry
    pts = np.concatenate([bary, bary[:, [1, 2, 0]], bary[:, [2, 0, 1]]])
    return pts, np.tile(w / 3.0, 3)


_TABLE = {
    1: _rule_deg1,
    2: _rule_deg2,
    3: _rule_deg3,
    4: _rule_deg4,
    5: _rule_deg5,
    6: _rule_deg6,
    7: _rule_deg8,
    8: _rule_deg8,
    9: _rule_deg10,
    10: _rule_deg10,
}

_cache: dict[int, TriangleRule] = {}


def triangle_rule(degree):
    """Quadrature rule exact for polynomials up to the requested degree."""
    if not 1 <= degree <= MAX_DEGREE:
        raise ValueError(f"unsupported quadrature degree {degree}")
    if degree not in _cache:
        if degree in _TABLE:
            bary, w = _TABLE[degree]()
        else:
            bary, w = _conical_rule(degree)
        bary = np.ascontiguousarray(bary)
        w = np.ascontiguousarray(w)
        bary.setflags(write=False)
        w.setflags(write=False)
        _cache[degree] = TriangleRule(degree=degree, bary=bary, weights=w)
    return _cache[degree]


def edge_rule(degree):
    """Gauss-Legendre points and weights on [0, 1] (weights sum to 1)."""
    m = degree // 2 + 1
    x, w = np.polynomial.legendre.leggauss(m)
    return 0.5 * (x + 1.0), 0.5 * w
