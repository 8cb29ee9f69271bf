"""Discrete test spaces, Riesz (Gram) matrices, dual norms and local projections.

Four space kinds are supported:

``lagrange_h10_p1``
    continuous P1 hat functions of the interior vertices, norm ``||grad v||``;
``bubble_enriched_p1_b0``
    the above plus one cubic bubble ``27 l0 l1 l2`` per element, same norm;
``broken_pk``
    discontinuous P0 or P1, broken ``H^1`` norm, block-diagonal Gram matrix;
``rt0``
    lowest-order Raviart-Thomas, one function per edge, ``H(div)`` norm.

The dual norm of a residual vector ``r`` (``r_j`` = functional applied to basis
function ``j``) is ``sqrt(r . P^{-1} r)`` with ``P`` the Gram matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh
from .quadrature import QuadRule, tri_rule, volume_points

__all__ = [
    "DofMap",
    "RieszSystem",
    "RieszError",
    "build_space",
    "assemble_riesz",
    "dual_norm",
    "barycentric_gradients",
    "scalar_tables",
    "rt_tables",
    "residual_operator",
    "ElementProjection",
    "project_values",
    "project_pk",
    "project_p0_facet",
]

SPACE_KINDS = ("lagrange_h10_p1", "bubble_enriched_p1_b0", "broken_pk", "rt0")


class RieszError(RuntimeError):
    """The Gram matrix could not be factorized."""


@dataclass(frozen=True, eq=False)
class DofMap:
    """Local-to-global numbering of a discrete space.

    ``element_dofs[t, i]`` is the global index of local basis function ``i`` on
    element ``t`` or ``-1`` if that function is excluded (Dirichlet vertex).
    ``signs`` orients RT0 functions and is all ones otherwise.
    """

    kind: str
    dim: int
    element_dofs: np.ndarray
    signs: np.ndarray
    degree: int = 1

    @property
    def n_local(self) -> int:
        return self.element_dofs.shape[1]


def build_space(mesh: Mesh, kind: str, k: int = 1) -> DofMap:
    """Enumerate the basis of a test space on ``mesh``.

    ``k`` selects the polynomial degree of ``broken_pk`` (0 or 1).
    """
    nt = mesh.n_elements
    if kind in ("lagrange_h10_p1", "bubble_enriched_p1_b0"):
        interior = ~mesh.boundary_vertex_mask()
        number = -np.ones(mesh.n_vertices, dtype=np.int64)
        number[interior] = np.arange(interior.sum())
        dofs = number[mesh.triangles]
        dim = int(interior.sum())
        if kind == "bubble_enriched_p1_b0":
            dofs = np.hstack([dofs, (dim + np.arange(nt))[:, None]])
            dim += nt
        return DofMap(kind, dim, dofs, np.ones(dofs.shape))
    if kind == "broken_pk":
        if k not in (0, 1):
            raise ValueError("broken_pk supports k in {0, 1}")
        nloc = 1 if k == 0 else 3
        dofs = np.arange(nt * nloc).reshape(nt, nloc)
        return DofMap(kind, nt * nloc, dofs, np.ones(dofs.shape), degree=k)
    if kind == "rt0":
        t2e = mesh.element_edges
        edges = mesh.edges
        # global normal of edge (a, b), a < b: (b - a) rotated clockwise
        tri = mesh.triangles
        signs = np.empty(t2e.shape)
        for i, (p, q) in enumerate([(1, 2), (2, 0), (0, 1)]):
            # local edge runs p -> q counter-clockwise, outward normal is its clockwise rotation
            signs[:, i] = np.where(tri[:, p] == edges[t2e[:, i], 0], 1.0, -1.0)
        return DofMap(kind, len(edges), t2e.copy(), signs, degree=0)
    raise ValueError(f"unknown space kind {kind!r}")


# ------------------------------------------------------------------ basis data


def barycentric_gradients(mesh: Mesh) -> np.ndarray:
    """Constant gradients of the barycentric coordinates, shape (nt, 3, 2)."""
    p = mesh.vertices[mesh.triangles]
    area2 = 2.0 * mesh.areas()
    grads = np.empty((mesh.n_elements, 3, 2))
    for i, (j, k) in enumerate([(1, 2), (2, 0), (0, 1)]):
        e = p[:, k] - p[:, j]
        grads[:, i, 0] = -e[:, 1] / area2
        grads[:, i, 1] = e[:, 0] / area2
    return grads


def _ref_barycentric(rule: QuadRule) -> np.ndarray:
    xi, eta = rule.points[:, 0], rule.points[:, 1]
    return np.stack([1.0 - xi - eta, xi, eta], axis=1)


def scalar_tables(space: DofMap, mesh: Mesh, rule: QuadRule):
    """Values ``(nt, nq, nloc)`` and gradients ``(nt, nq, nloc, 2)`` of the local basis."""
    lam = _ref_barycentric(rule)  # (nq, 3)
    nt, nq = mesh.n_elements, rule.npoints
    dl = barycentric_gradients(mesh)  # (nt, 3, 2)
    if space.kind == "broken_pk" and space.degree == 0:
        return np.ones((nt, nq, 1)), np.zeros((nt, nq, 1, 2))
    vals = np.broadcast_to(lam, (nt, nq, 3))
    grads = np.broadcast_to(dl[:, None], (nt, nq, 3, 2))
    if space.kind == "bubble_enriched_p1_b0":
        b = 27.0 * lam[:, 0] * lam[:, 1] * lam[:, 2]
        coef = 27.0 * np.stack(
            [lam[:, 1] * lam[:, 2], lam[:, 0] * lam[:, 2], lam[:, 0] * lam[:, 1]], axis=1
        )  # (nq, 3)
        db = np.einsum("qi,tid->tqd", coef, dl)
        vals = np.concatenate([vals, np.broadcast_to(b[None, :, None], (nt, nq, 1))], axis=2)
        grads = np.concatenate([grads, db[:, :, None, :]], axis=2)
    return np.ascontiguousarray(vals), np.ascontiguousarray(grads)


def rt_tables(space: DofMap, mesh: Mesh, rule: QuadRule):
    """RT0 values ``(nt, nq, 3, 2)`` and divergences ``(nt, 3)``.

    Local function ``i`` is ``s_i |E_i| / (2|T|) (x - p_i)`` with ``E_i``
    opposite vertex ``p_i``; its normal component on ``E_i`` is ``s_i``.
    """
    pts, _ = volume_points(mesh, rule)
    p = mesh.vertices[mesh.triangles]
    area = mesh.areas()
    lengths = np.stack(
        [np.linalg.norm(p[:, k] - p[:, j], axis=1) for j, k in [(1, 2), (2, 0), (0, 1)]], axis=1
    )
    scale = space.signs * lengths / (2.0 * area[:, None])  # (nt, 3)
    vals = scale[:, None, :, None] * (pts[:, :, None, :] - p[:, None, :, :])
    div = 2.0 * scale
    return vals, div


# --------------------------------------------------------------------- Riesz


@dataclass(eq=False)
class RieszSystem:
    """Gram matrix of a test space together with its factorization.

    ``structure`` is ``"global_sparse"`` (``matrix`` is CSC) or
    ``"element_block_diagonal"`` (``blocks`` holds one dense block per element).
    """

    structure: str
    dim: int
    matrix: sp.spmatrix | None = None
    blocks: np.ndarray | None = None
    element_blocks: np.ndarray | None = None
    element_dofs: np.ndarray | None = None
    _lu: object = field(default=None, repr=False)
    _block_chol: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.structure == "global_sparse":
            try:
                self._lu = spla.splu(self.matrix.tocsc(), permc_spec="MMD_AT_PLUS_A")
            except RuntimeError as exc:
                raise RieszError(str(exc)) from exc
        elif self.structure == "element_block_diagonal":
            try:
                self._block_chol = np.linalg.cholesky(self.blocks)
            except np.linalg.LinAlgError as exc:
                raise RieszError(str(exc)) from exc
        else:
            raise ValueError(f"unknown structure {self.structure!r}")

    def solve(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if r.shape[0] != self.dim:
            raise ValueError(f"residual has length {r.shape[0]}, space has dimension {self.dim}")
        if self.structure == "global_sparse":
            return self._lu.solve(r)
        nt, n, _ = self.blocks.shape
        rb = r.reshape(nt, n)
        L = self._block_chol
        y = _batched_triangular(L, rb, lower=True)
        return _batched_triangular(np.swapaxes(L, 1, 2), y, lower=False).reshape(-1)

    def dense(self) -> np.ndarray:
        if self.structure == "global_sparse":
            return self.matrix.toarray()
        return sp.block_diag(list(self.blocks)).toarray()

    def element_energies(self, coeffs: np.ndarray) -> np.ndarray:
        """Per-element squared test norm of the discrete function with ``coeffs``.

        The values sum to ``coeffs . P coeffs``; this is how the Riesz
        representative of a residual is localized.
        """
        dofs = self.element_dofs
        c = np.where(dofs >= 0, np.asarray(coeffs)[np.maximum(dofs, 0)], 0.0)
        return np.einsum("ti,tij,tj->t", c, self.element_blocks, c)

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.structure == "global_sparse":
            return self.matrix @ x
        nt, n, _ = self.blocks.shape
        return np.einsum("tij,tj->ti", self.blocks, x.reshape(nt, n)).reshape(-1)


def _batched_triangular(L, b, lower):
    n = L.shape[1]
    x = np.empty_like(b)
    rng = range(n) if lower else range(n - 1, -1, -1)
    for i in rng:
        if lower:
            s = np.einsum("tj,tj->t", L[:, i, :i], x[:, :i])
        else:
            s = np.einsum("tj,tj->t", L[:, i, i + 1:], x[:, i + 1:])
        x[:, i] = (b[:, i] - s) / L[:, i, i]
    return x


def _element_gram(space: DofMap, mesh: Mesh) -> np.ndarray:
    # every Gram integrand is a polynomial of degree <= 4
    rule = tri_rule("standard")
    _, wts = volume_points(mesh, rule)
    if space.kind == "rt0":
        vals, div = rt_tables(space, mesh, rule)
        mass = np.einsum("tq,tqid,tqjd->tij", wts, vals, vals)
        area = mesh.areas()
        return mass + area[:, None, None] * div[:, :, None] * div[:, None, :]
    vals, grads = scalar_tables(space, mesh, rule)
    stiff = np.einsum("tq,tqid,tqjd->tij", wts, grads, grads)
    if space.kind == "broken_pk":
        return stiff + np.einsum("tq,tqi,tqj->tij", wts, vals, vals)
    return stiff


def assemble_riesz(space: DofMap, mesh: Mesh) -> RieszSystem:
    """Gram matrix of ``space`` in its test norm, factorized."""
    local = _element_gram(space, mesh)
    if space.kind == "broken_pk":
        return RieszSystem(
            "element_block_diagonal", space.dim, blocks=local,
            element_blocks=local, element_dofs=space.element_dofs,
        )
    dofs = space.element_dofs
    nloc = dofs.shape[1]
    rows = np.repeat(dofs, nloc, axis=1).ravel()
    cols = np.tile(dofs, (1, nloc)).ravel()
    vals = local.reshape(len(dofs), -1).ravel()
    keep = (rows >= 0) & (cols >= 0)
    P = sp.coo_matrix((vals[keep], (rows[keep], cols[keep])), shape=(space.dim, space.dim)).tocsc()
    P.sum_duplicates()
    return RieszSystem(
        "global_sparse", space.dim, matrix=P, element_blocks=local, element_dofs=dofs,
    )


def dual_norm(riesz: RieszSystem, r: np.ndarray, return_representative: bool = False):
    """``sqrt(r . P^{-1} r)``; optionally also the coefficients ``P^{-1} r``."""
    r = np.asarray(r, dtype=float)
    phi = riesz.solve(r)
    value = float(np.sqrt(max(float(np.dot(r, phi)), 0.0)))
    return (value, phi) if return_representative else value


def residual_operator(space: DofMap, mesh: Mesh, rule: QuadRule) -> sp.csr_matrix:
    """Sparse ``B`` with ``(B s)_j = sum_q w_q s(x_q) v_j(x_q)``.

    ``s`` is a pointwise field sampled at the volume quadrature points of
    ``rule`` in element-major order.  Only scalar spaces are supported.
    """
    vals, _ = scalar_tables(space, mesh, rule)
    _, wts = volume_points(mesh, rule)
    nt, nq, nloc = vals.shape
    data = (wts[:, :, None] * vals).ravel()
    rows = np.broadcast_to(space.element_dofs[:, None, :], (nt, nq, nloc)).ravel()
    cols = np.broadcast_to(np.arange(nt * nq).reshape(nt, nq, 1), (nt, nq, nloc)).ravel()
    keep = rows >= 0
    return sp.csr_matrix((data[keep], (rows[keep], cols[keep])), shape=(space.dim, nt * nq))


# ---------------------------------------------------------------- projections


def project_values(values: np.ndarray, weights: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Element-wise weighted L2 projection of sampled values.

    Parameters
    ----------
    values, weights : ndarray, shape (nt, nq)
    basis : ndarray, shape (nq, nb) or (nt, nq, nb)
        Local polynomial basis sampled at the quadrature points.

    Returns
    -------
    ndarray, shape (nt, nq)
        The projection sampled at the same points.
    """
    if basis.ndim == 2:
        basis = np.broadcast_to(basis, (values.shape[0],) + basis.shape)
    if basis.shape[2] == 1:
        mean = np.sum(weights * values, axis=1) / np.sum(weights, axis=1)
        return np.broadcast_to(mean[:, None], values.shape).copy()
    M = np.einsum("tq,tqi,tqj->tij", weights, basis, basis)
    rhs = np.einsum("tq,tq,tqi->ti", weights, values, basis)
    coef = np.linalg.solve(M, rhs[..., None])[..., 0]
    return np.einsum("ti,tqi->tq", coef, basis)


def poly_basis(rule: QuadRule, k: int) -> np.ndarray:
    """P^k basis on the reference triangle sampled at the rule's points."""
    if k == 0:
        return np.ones((rule.npoints, 1))
    if k == 1:
        return _ref_barycentric(rule)
    raise ValueError("only k in {0, 1} is supported")


@dataclass
class ElementProjection:
    """Result of an element-wise ``P^k`` projection, sampled at quadrature points."""

    k: int
    values: np.ndarray  # f at the quadrature points, (nt, nq)
    projected: np.ndarray  # pi^k f, (nt, nq)
    weights: np.ndarray

    @property
    def remainder(self) -> np.ndarray:
        """``(1 - pi^k) f`` at the quadrature points."""
        return self.values - self.projected

    def element_norms2(self, which: str = "remainder") -> np.ndarray:
        v = self.remainder if which == "remainder" else self.projected
        return np.sum(self.weights * v**2, axis=1)


def project_pk(mesh: Mesh, rule: QuadRule, f: Callable | np.ndarray, k: int) -> ElementProjection:
    """L2 projection onto ``P^k(T)`` for every element, computed with ``rule``."""
    pts, wts = volume_points(mesh, rule)
    vals = np.asarray(f(pts.reshape(-1, 2)) if callable(f) else f, dtype=float).reshape(wts.shape)
    proj = project_values(vals, wts, poly_basis(rule, k))
    return ElementProjection(k, vals, proj, wts)


def project_p0_facet(mesh: Mesh, rule: QuadRule, f: Callable | np.ndarray) -> ElementProjection:
    """Facet means of ``f`` on the boundary facets, computed with a segment rule."""
    from .quadrature import boundary_points

    pts, wts = boundary_points(mesh, rule)
    vals = np.asarray(f(pts.reshape(-1, 2)) if callable(f) else f, dtype=float).reshape(wts.shape)
    mean = np.sum(wts * vals, axis=1) / np.sum(wts, axis=1)
    return ElementProjection(0, vals, np.broadcast_to(mean[:, None], vals.shape).copy(), wts)
