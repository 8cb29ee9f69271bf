"""Quadrature rules on the reference triangle and the unit interval.

Triangle rules use barycentric-free reference coordinates ``(x, y)`` on the
triangle with vertices ``(0, 0), (1, 0), (0, 1)``; their weights sum to the
reference area ``1/2``.  Segment rules live on ``[0, 1]`` with weights summing
to one.  The two symmetric triangle rules are fully symmetric with positive
weights; their nodes were computed by Newton iteration on the moment
equations in 40-digit arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "QuadRule",
    "tri_rule",
    "seg_rule",
    "volume_points",
    "boundary_points",
    "integrate",
]


@dataclass(frozen=True)
class QuadRule:
    """Fixed quadrature rule on a reference element.

    Attributes
    ----------
    points : ndarray
        ``(nq, 2)`` reference coordinates for triangles, ``(nq,)`` for segments.
    weights : ndarray
        ``(nq,)`` weights, summing to the reference measure.
    degree : int
        Polynomial degree integrated exactly.
    entity : str
        ``"triangle"`` or ``"segment"``.
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int
    entity: str

    @property
    def npoints(self) -> int:
        return len(self.weights)


def _orbit_s2(w, a):
    b = 1.0 - 2.0 * a
    return [(a, a), (a, b), (b, a)], [w] * 3


def _orbit_s3(w, a, b):
    c = 1.0 - a - b
    return [(a, b), (b, a), (a, c), (c, a), (b, c), (c, b)], [w] * 6


def _build(orbits, degree):
    pts, wts = [], []
    for p, w in orbits:
        pts.extend(p)
        wts.extend(w)
    rule = QuadRule(np.array(pts, dtype=float), np.array(wts, dtype=float), degree, "triangle")
    rule.points.setflags(write=False)
    rule.weights.setflags(write=False)
    return rule


_TRI_STANDARD = _build(
    [
        _orbit_s2(0.11169079483900573285, 0.44594849091596488632),
        _orbit_s2(0.054975871827660933819, 0.09157621350977074346),
    ],
    4,
)

_TRI_HIGH = _build(
    [
        ([(1.0 / 3.0, 1.0 / 3.0)], [0.072157803838893584126]),
        _orbit_s2(0.047545817133642312397, 0.45929258829272315603),
        _orbit_s2(0.051608685267359125141, 0.17056930775176020662),
        _orbit_s2(0.016229248811599040155, 0.050547228317030975458),
        _orbit_s3(0.013615157087217497132, 0.0083947774099576053372, 0.26311282963463811342),
    ],
    8,
)


def tri_rule(kind: str = "standard") -> QuadRule:
    """Return the 6-point degree-4 (``standard``) or 16-point degree-8 (``high``) rule."""
    if kind == "standard":
        return _TRI_STANDARD
    if kind == "high":
        return _TRI_HIGH
    raise ValueError(f"unknown triangle rule kind {kind!r}")


def _gauss_segment(n: int) -> QuadRule:
    x, w = np.polynomial.legendre.leggauss(n)
    rule = QuadRule(0.5 * (x + 1.0), 0.5 * w, 2 * n - 1, "segment")
    rule.points.setflags(write=False)
    rule.weights.setflags(write=False)
    return rule


_SEG_STANDARD = _gauss_segment(4)
_SEG_HIGH = _gauss_segment(8)


def seg_rule(kind: str = "standard") -> QuadRule:
    """Return the 4-point (``standard``) or 8-point (``high``) Gauss-Legendre rule on [0, 1]."""
    if kind == "standard":
        return _SEG_STANDARD
    if kind == "high":
        return _SEG_HIGH
    raise ValueError(f"unknown segment rule kind {kind!r}")


def volume_points(mesh, rule: QuadRule):
    """Map a triangle rule to every element of ``mesh``.

    Returns
    -------
    points : ndarray, shape (nt, nq, 2)
    weights : ndarray, shape (nt, nq)
        Physical weights (reference weight times ``2 |T|``).
    """
    if rule.entity != "triangle":
        raise ValueError("volume quadrature needs a triangle rule")
    v = mesh.vertices[mesh.triangles]  # (nt, 3, 2)
    e1 = v[:, 1] - v[:, 0]
    e2 = v[:, 2] - v[:, 0]
    xi, eta = rule.points[:, 0], rule.points[:, 1]
    pts = v[:, None, 0] + xi[None, :, None] * e1[:, None] + eta[None, :, None] * e2[:, None]
    weights = 2.0 * mesh.areas()[:, None] * rule.weights[None, :]
    return pts, weights


def boundary_points(mesh, rule: QuadRule):
    """Map a segment rule to every boundary facet of ``mesh``.

    Returns
    -------
    points : ndarray, shape (nf, nq, 2)
    weights : ndarray, shape (nf, nq)
        Physical weights (reference weight times facet length).
    """
    if rule.entity != "segment":
        raise ValueError("boundary quadrature needs a segment rule")
    a = mesh.vertices[mesh.boundary_facets[:, 0]]
    b = mesh.vertices[mesh.boundary_facets[:, 1]]
    s = rule.points
    pts = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
    lengths = np.linalg.norm(b - a, axis=1)
    weights = lengths[:, None] * rule.weights[None, :]
    return pts, weights


def integrate(mesh, rule: QuadRule, f: Callable[[np.ndarray], np.ndarray], per_element: bool = False):
    """Integrate ``f`` over the domain (triangle rule) or its boundary (segment rule).

    ``f`` is called once with an ``(n, 2)`` array of points and must return ``(n,)`` values.
    With ``per_element=True`` one value per element (or boundary facet) is returned.
    """
    if rule.entity == "triangle":
        pts, wts = volume_points(mesh, rule)
    else:
        pts, wts = boundary_points(mesh, rule)
    vals = np.asarray(f(pts.reshape(-1, 2)), dtype=float).reshape(wts.shape)
    local = np.sum(vals * wts, axis=1)
    return local if per_element else float(np.sum(local))
