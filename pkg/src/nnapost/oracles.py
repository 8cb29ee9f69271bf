"""Slow reference computations used to cross-check the fast code paths.

Nothing here shares code with the assembly in :mod:`nnapost.fespace`: local
bases are obtained by solving small Vandermonde systems and every matrix is
dense.
"""

from __future__ import annotations

import numpy as np

from .mesh import Mesh
from .quadrature import QuadRule, seg_rule, tri_rule
from .trialfn import ProblemData, residual

__all__ = [
    "conformity_violations",
    "is_conforming",
    "dense_dual_norm",
    "dense_volume_eta",
    "dense_boundary_eta",
]


# ---------------------------------------------------------------- conformity


def conformity_violations(mesh: Mesh, tol: float = 1e-12) -> list[str]:
    """Exhaustive pairwise check; an empty list means the mesh is conforming.

    Checks: positive orientation, no duplicate vertices, no vertex in the
    relative interior of any edge (hanging node), no two edges crossing in
    their interiors, every edge shared by at most two triangles, and the
    triangle areas summing to the area enclosed by the boundary.
    """
    out = []
    V, T = mesh.vertices, mesh.triangles
    p = V[T]
    area2 = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    if np.any(area2 <= 0):
        out.append(f"{int(np.sum(area2 <= 0))} triangles with non-positive area")
    d = np.linalg.norm(V[:, None] - V[None], axis=2)
    np.fill_diagonal(d, np.inf)
    if np.any(d < tol):
        out.append("duplicate vertices")

    segs = np.concatenate([T[:, [1, 2]], T[:, [2, 0]], T[:, [0, 1]]])
    segs = np.unique(np.sort(segs, axis=1), axis=0)
    A, B = V[segs[:, 0]], V[segs[:, 1]]
    L = np.linalg.norm(B - A, axis=1)

    # hanging nodes: vertex strictly inside a segment
    AB = B - A
    AP = V[None, :, :] - A[:, None, :]
    cross = AB[:, None, 0] * AP[..., 1] - AB[:, None, 1] * AP[..., 0]
    t = np.einsum("sd,svd->sv", AB, AP) / (L[:, None] ** 2)
    on = (np.abs(cross) <= tol * L[:, None]) & (t > tol) & (t < 1 - tol)
    if on.any():
        out.append(f"{int(on.sum())} hanging vertex/edge incidences")

    # proper crossings between segments
    def orient(P, Q, R):
        return (Q[..., 0] - P[..., 0]) * (R[..., 1] - P[..., 1]) - (Q[..., 1] - P[..., 1]) * (R[..., 0] - P[..., 0])

    a, b = A[:, None], B[:, None]
    c, e = A[None], B[None]
    o1, o2 = orient(a, b, c), orient(a, b, e)
    o3, o4 = orient(c, e, a), orient(c, e, b)
    scale = L[:, None] * L[None]
    crossing = (o1 * o2 < -tol * scale**2) & (o3 * o4 < -tol * scale**2)
    if crossing.any():
        out.append(f"{int(crossing.sum() // 2)} crossing edge pairs")

    keys, counts = np.unique(
        np.sort(np.concatenate([T[:, [1, 2]], T[:, [2, 0]], T[:, [0, 1]]]), axis=1), axis=0, return_counts=True
    )
    if np.any(counts > 2):
        out.append("edge shared by more than two triangles")
    boundary = keys[counts == 1]
    # shoelace over boundary edges oriented as in their triangle
    oriented = np.concatenate([T[:, [1, 2]], T[:, [2, 0]], T[:, [0, 1]]])
    key_or = np.sort(oriented, axis=1)
    bset = {tuple(k) for k in boundary}
    enclosed = 0.0
    for (i, j), k in zip(oriented, key_or):
        if tuple(k) in bset:
            enclosed += V[i, 0] * V[j, 1] - V[j, 0] * V[i, 1]
    if abs(0.5 * enclosed - 0.5 * area2.sum()) > 1e-12 * max(1.0, abs(enclosed)):
        out.append("triangle areas do not add up to the enclosed area")
    return out


def is_conforming(mesh: Mesh) -> bool:
    return not conformity_violations(mesh)


def _cross2(a, b):
    return a[0] * b[1] - a[1] * b[0]


# ----------------------------------------------------------------- dual norms


def _map(p, rule: QuadRule):
    xi = rule.points
    return p[0] + xi[:, :1] * (p[1] - p[0]) + xi[:, 1:] * (p[2] - p[0])


def _p1_coefficients(p):
    """Columns are ``(c0, cx, cy)`` of the three nodal P1 functions."""
    Vm = np.column_stack([np.ones(3), p])
    return np.linalg.inv(Vm)


def _scalar_basis(kind, p, x):
    """Values (nq, nb) and gradients (nq, nb, 2) of the local basis at points ``x``."""
    C = _p1_coefficients(p)
    lam = np.column_stack([np.ones(len(x)), x]) @ C
    dlam = C[1:].T  # (3, 2)
    vals = [lam[:, i] for i in range(3)]
    grads = [np.broadcast_to(dlam[i], (len(x), 2)) for i in range(3)]
    if kind == "bubble":
        prod = lam[:, 0] * lam[:, 1] * lam[:, 2]
        # normalize so the maximum (at the centroid) is 1
        vals.append(prod * 27.0)
        g = (lam[:, 1] * lam[:, 2])[:, None] * dlam[0] + (lam[:, 0] * lam[:, 2])[:, None] * dlam[1] \
            + (lam[:, 0] * lam[:, 1])[:, None] * dlam[2]
        grads.append(27.0 * g)
    if kind == "p0":
        return np.ones((len(x), 1)), np.zeros((len(x), 1, 2))
    return np.stack(vals, axis=1), np.stack(grads, axis=1)


def dense_dual_norm(P: np.ndarray, r: np.ndarray) -> float:
    return float(np.sqrt(max(r @ np.linalg.solve(P, r), 0.0)))


def dense_volume_eta(problem: ProblemData, w, mesh: Mesh, kind: str, rule: QuadRule | None = None) -> float:
    """Dense-matrix volume ``eta`` for ``kind`` in {lagrange, bubble, broken_p0, broken_p1}.

    The residual functional tests ``r = f + div(A grad w) - beta . grad w - c w``
    against the basis.
    """
    rule = rule or tri_rule("standard")
    gram_rule = tri_rule("high")
    V, T = mesh.vertices, mesh.triangles
    boundary = mesh.boundary_vertex_mask()
    nt = len(T)
    if kind in ("lagrange", "bubble"):
        ids = -np.ones(len(V), dtype=int)
        ids[~boundary] = np.arange((~boundary).sum())
        nv = int((~boundary).sum())
        dim = nv + (nt if kind == "bubble" else 0)

        def dofs(t):
            d = list(ids[T[t]])
            return d + ([nv + t] if kind == "bubble" else [])

        local_kind, broken = kind, False
    else:
        k = int(kind[-1])
        nloc = 1 if k == 0 else 3
        dim = nt * nloc

        def dofs(t):
            return list(range(t * nloc, (t + 1) * nloc))

        local_kind, broken = ("p0" if k == 0 else "p1"), True
    P = np.zeros((dim, dim))
    r = np.zeros(dim)
    for t in range(nt):
        p = V[T[t]]
        area = 0.5 * abs(_cross2(p[1] - p[0], p[2] - p[0]))
        xg = _map(p, gram_rule)
        wg = 2 * area * gram_rule.weights
        vals, grads = _scalar_basis(local_kind, p, xg)
        K = np.einsum("q,qid,qjd->ij", wg, grads, grads)
        if broken:
            K = K + np.einsum("q,qi,qj->ij", wg, vals, vals)
        xr = _map(p, rule)
        wr = 2 * area * rule.weights
        vr, _ = _scalar_basis(local_kind, p, xr)
        res = residual(problem, w(xr), xr)
        rl = np.einsum("q,q,qi->i", wr, res, vr)
        d = dofs(t)
        for a, da in enumerate(d):
            if da < 0:
                continue
            r[da] += rl[a]
            for b, db in enumerate(d):
                if db >= 0:
                    P[da, db] += K[a, b]
    return dense_dual_norm(P, r)


def _rt_local(p):
    """Affine RT0 functions ``a + b x`` with unit outward flux density on their own edge.

    Returns a list of ``(a, b)`` with ``a`` a 2-vector and ``b`` a scalar,
    ordered by the edge opposite each vertex, plus the outward normals.
    """
    edges = [(1, 2), (2, 0), (0, 1)]
    normals, mids = [], []
    for i, j in edges:
        d = p[j] - p[i]
        n = np.array([d[1], -d[0]]) / np.linalg.norm(d)
        normals.append(n)
        mids.append(0.5 * (p[i] + p[j]))
    M = np.array([[n[0], n[1], n @ m] for n, m in zip(normals, mids)])
    coef = np.linalg.solve(M, np.eye(3))
    return [(coef[:2, i], coef[2, i]) for i in range(3)], normals


def dense_boundary_eta(problem: ProblemData, w, mesh: Mesh, rule_seg: QuadRule | None = None) -> float:
    """Dense-matrix ``eta_gamma`` on RT0 with edges oriented from low to high vertex index."""
    rule_seg = rule_seg or seg_rule("standard")
    gram_rule = tri_rule("high")
    V, T = mesh.vertices, mesh.triangles
    edge_index = {}
    for t in range(len(T)):
        for i, j in [(1, 2), (2, 0), (0, 1)]:
            key = tuple(sorted((int(T[t, i]), int(T[t, j]))))
            edge_index.setdefault(key, len(edge_index))
    dim = len(edge_index)
    P = np.zeros((dim, dim))
    r = np.zeros(dim)
    boundary_keys = {tuple(sorted(map(int, f))) for f in mesh.boundary_facets}
    for t in range(len(T)):
        p = V[T[t]]
        area = 0.5 * abs(_cross2(p[1] - p[0], p[2] - p[0]))
        funcs, normals = _rt_local(p)
        signs, ids = [], []
        for (i, j), n in zip([(1, 2), (2, 0), (0, 1)], normals):
            a, b = int(T[t, i]), int(T[t, j])
            key = tuple(sorted((a, b)))
            ids.append(edge_index[key])
            # global normal: rotate (high - low) clockwise
            d = V[key[1]] - V[key[0]]
            gn = np.array([d[1], -d[0]])
            signs.append(1.0 if gn @ n > 0 else -1.0)
        x = _map(p, gram_rule)
        wq = 2 * area * gram_rule.weights
        vals = np.stack([s * (a[None, :] + bb * x) for s, (a, bb) in zip(signs, funcs)], axis=1)
        divs = np.array([s * 2.0 * bb for s, (a, bb) in zip(signs, funcs)])
        G = np.einsum("q,qid,qjd->ij", wq, vals, vals) + area * np.outer(divs, divs)
        for a in range(3):
            for b in range(3):
                P[ids[a], ids[b]] += G[a, b]
        for k, (i, j) in enumerate([(1, 2), (2, 0), (0, 1)]):
            key = tuple(sorted((int(T[t, i]), int(T[t, j]))))
            if key not in boundary_keys:
                continue
            A, B = V[T[t, i]], V[T[t, j]]
            xs = A + rule_seg.points[:, None] * (B - A)
            ws = np.linalg.norm(B - A) * rule_seg.weights
            tn = (funcs[k][0][None, :] + funcs[k][1] * xs) @ normals[k] * signs[k]
            e = w(xs).value - problem.g(xs)
            r[ids[k]] += np.sum(ws * e * tn)
    return dense_dual_norm(P, r)
