"""Computable error estimator pairs (eta, rho) for smooth trial functions.

Volume part, by formulation:

``weak_lagrange``
    ``eta`` is the dual norm of the residual on continuous P1 functions with
    zero trace, ``rho^2 = sum_T h_T^2 ||r||_T^2``.
``weak_bubble``
    same with the P1 space enriched by element bubbles,
    ``rho^2 = sum_T h_T^2 ||(1 - pi^0) r||_T^2``.
``broken``
    dual norm on discontinuous ``P^k`` in the broken ``H^1`` norm,
    ``rho^2 = sum_T h_T^2 ||(1 - pi^k) r||_T^2``.
``strong``
    ``eta = ||pi^k r||``, ``rho = ||(1 - pi^k) r||``.

Here ``r = f + div(A grad w) - beta . grad w - c w``.  Trial functions are
globally smooth, so the flux-jump terms of ``rho`` vanish and are not computed.

Boundary part: ``eta_gamma`` is the dual norm of ``tau -> <w - g, tau . n>``
on lowest-order Raviart-Thomas fields in the ``H(div)`` norm and
``rho_gamma^2 = sum_F h_F ||d_t (w - g)||_F^2``.

:class:`EstimatorContext` caches everything that only depends on the mesh,
the rules and the problem, and can return cotangents of a weighted sum of
squared parts with respect to the jets of ``w`` (used for training).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fespace import (
    assemble_riesz,
    build_space,
    poly_basis,
    project_values,
    scalar_tables,
)
from .mesh import Mesh
from .quadrature import QuadRule, boundary_points, seg_rule, tri_rule, volume_points
from .trialfn import CoefficientSamples, Jet, ProblemData

__all__ = [
    "FORMULATIONS",
    "EstimatorReport",
    "EstimatorContext",
    "eta_omega_weak",
    "rho_omega_weak",
    "eta_omega_broken",
    "eta_omega_broken_equiv",
    "rho_omega_broken",
    "eta_rho_strong",
    "eta_gamma_hdiv",
    "rho_gamma",
    "pinn_boundary_bound",
    "localize",
    "mesh_digest",
]

FORMULATIONS = ("weak_lagrange", "weak_bubble", "broken", "strong")
PARTS = ("eta_omega", "rho_omega", "eta_gamma", "rho_gamma")

_SPACE_OF = {
    "weak_lagrange": "lagrange_h10_p1",
    "weak_bubble": "bubble_enriched_p1_b0",
    "broken": "broken_pk",
}


def mesh_digest(mesh: Mesh) -> str:
    """Short content hash identifying a mesh."""
    h = hashlib.sha1()
    h.update(np.ascontiguousarray(mesh.vertices).tobytes())
    h.update(np.ascontiguousarray(mesh.triangles).tobytes())
    return h.hexdigest()[:16]


@dataclass
class EstimatorReport:
    """Global estimator parts and their per-element squared contributions.

    ``per_element[t]`` holds ``(eta_omega^2, rho_omega^2, eta_gamma^2,
    rho_gamma^2)`` restricted to element ``t``; each column sums to the square
    of the corresponding global value.
    """

    eta_omega: float
    rho_omega: float
    eta_gamma: float
    rho_gamma: float
    per_element: np.ndarray
    formulation: str = ""
    mesh_id: str = ""
    quadrature: str = ""

    def parts(self) -> np.ndarray:
        return np.array([self.eta_omega, self.rho_omega, self.eta_gamma, self.rho_gamma])

    @property
    def eta(self) -> float:
        return float(np.hypot(self.eta_omega, self.eta_gamma))

    @property
    def rho(self) -> float:
        return float(np.hypot(self.rho_omega, self.rho_gamma))

    def weighted_sum(self, weights=(1.0, 1.0, 1.0, 1.0)) -> float:
        return float(np.dot(weights, self.parts() ** 2))

    def element_sum(self, weights=(1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
        return self.per_element @ np.asarray(weights, dtype=float)

    def to_dict(self) -> dict:
        return {
            "eta_omega": float(self.eta_omega),
            "rho_omega": float(self.rho_omega),
            "eta_gamma": float(self.eta_gamma),
            "rho_gamma": float(self.rho_gamma),
            "formulation": self.formulation,
            "mesh_id": self.mesh_id,
            "quadrature": self.quadrature,
            "per_element": [
                {
                    "element": int(t),
                    "eta_omega2": float(row[0]),
                    "rho_omega2": float(row[1]),
                    "eta_gamma2": float(row[2]),
                    "rho_gamma2": float(row[3]),
                }
                for t, row in enumerate(self.per_element)
            ],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


@dataclass
class Cotangents:
    """Cotangents of a scalar with respect to the trial-function jets."""

    volume: Jet
    boundary: Jet


@dataclass(eq=False)
class EstimatorContext:
    """Cached geometry, test spaces and Riesz factorizations for one setting.

    Parameters
    ----------
    problem : ProblemData
    mesh : Mesh
    formulation : {"weak_lagrange", "weak_bubble", "broken", "strong"}
    volume_rule, boundary_rule : QuadRule
        Rules used for residual functionals and norms.
    k : int, optional
        Polynomial degree of the broken space or of the strong projection.
        Defaults to 1 for ``broken`` and 0 for ``strong``.
    weak_form : {"ibp", "weak"}
        How the weak residual functional is evaluated.  ``"ibp"`` tests the
        pointwise residual against ``v``; ``"weak"`` uses
        ``<f, v> - <A grad w, grad v> - <beta . grad w + c w, v>``.  Both agree
        for smooth ``w`` up to quadrature error.
    """

    problem: ProblemData
    mesh: Mesh
    formulation: str = "weak_bubble"
    volume_rule: QuadRule = field(default_factory=lambda: tri_rule("standard"))
    boundary_rule: QuadRule = field(default_factory=lambda: seg_rule("standard"))
    k: int | None = None
    weak_form: str = "ibp"

    def __post_init__(self):
        if self.formulation not in FORMULATIONS:
            raise ValueError(f"unknown formulation {self.formulation!r}")
        if self.weak_form not in ("ibp", "weak"):
            raise ValueError(f"unknown weak_form {self.weak_form!r}")
        if self.k is None:
            self.k = 1 if self.formulation == "broken" else 0
        mesh, vrule, brule = self.mesh, self.volume_rule, self.boundary_rule
        self.n_elements = mesh.n_elements
        self.mesh_id = mesh_digest(mesh)

        pts, wts = volume_points(mesh, vrule)
        self.volume_shape = wts.shape
        self.volume_x = pts.reshape(-1, 2)
        self.volume_w = wts
        self.h2 = mesh.diameters() ** 2
        self.coef = CoefficientSamples.sample(self.problem, self.volume_x)

        if self.formulation == "strong":
            self.proj_basis = poly_basis(vrule, self.k)
        elif self.formulation == "weak_lagrange":
            self.proj_basis = None
        else:
            self.proj_basis = poly_basis(vrule, 0 if self.formulation == "weak_bubble" else self.k)

        if self.formulation != "strong":
            self.space = build_space(mesh, _SPACE_OF[self.formulation], k=self.k)
            self.riesz = assemble_riesz(self.space, mesh)
            self._B, self._Bgrad = _volume_operators(self.space, mesh, vrule, wts)

        bpts, bwts = boundary_points(mesh, brule)
        self.boundary_shape = bwts.shape
        self.boundary_x = bpts.reshape(-1, 2)
        self.boundary_w = bwts
        self.facet_h = mesh.boundary_lengths()
        self.facet_t = mesh.boundary_tangents()
        self.facet_parent = mesh.boundary_parents
        self.g = np.asarray(self.problem.g(self.boundary_x), dtype=float)
        self.g_grad = np.asarray(self.problem.dirichlet_grad(self.boundary_x), dtype=float)
        self.rt_space = build_space(mesh, "rt0")
        self.rt_riesz = assemble_riesz(self.rt_space, mesh)
        self._Bb = _trace_operator(self.rt_space, mesh, bwts)

    # ------------------------------------------------------------ quadrature
    @property
    def n_volume_points(self) -> int:
        return len(self.volume_x)

    @property
    def n_boundary_points(self) -> int:
        return len(self.boundary_x)

    @property
    def quadrature_tag(self) -> str:
        return f"tri{self.volume_rule.npoints}_seg{self.boundary_rule.npoints}"

    def points(self) -> np.ndarray:
        """Volume points followed by boundary points, for one batched evaluation."""
        return np.vstack([self.volume_x, self.boundary_x])

    def split(self, jet: Jet) -> tuple[Jet, Jet]:
        vol, bnd = jet.split([self.n_volume_points, self.n_boundary_points])
        return vol, bnd

    # ------------------------------------------------------------ evaluation
    def evaluate_field(self, w, weights=None):
        """Evaluate on a smooth field ``w`` (callable returning a :class:`Jet`)."""
        return self.evaluate(w(self.volume_x), w(self.boundary_x), weights)

    def evaluate(self, vol: Jet, bnd: Jet, weights=None):
        """Compute the report; with ``weights`` also the cotangents.

        ``weights`` are the factors ``a_i`` of ``sum_i a_i part_i^2``; the
        returned :class:`Cotangents` are derivatives of that sum with respect to
        the jets ``vol`` and ``bnd``.
        """
        nt = self.n_elements
        shape = self.volume_shape
        wts = self.volume_w
        per = np.zeros((nt, 4))
        want = weights is not None
        if want:
            a = np.asarray(weights, dtype=float)
            sbar = np.zeros(shape)

        r = self.coef.residual(vol).reshape(shape)
        weak = self.formulation in ("weak_lagrange", "weak_bubble") and self.weak_form == "weak"

        # ---- volume eta
        if self.formulation == "strong":
            pr = project_values(r, wts, self.proj_basis)
            per[:, 0] = np.sum(wts * pr**2, axis=1)
            if want:
                sbar += 2.0 * a[0] * wts * pr
        else:
            if weak:
                coef = self.coef
                s0 = coef.f - np.sum(coef.beta * vol.grad, axis=1) - coef.c * vol.value
                flux = -np.einsum("nij,nj->ni", coef.A, vol.grad)
                rvec = self._B @ s0 + self._Bgrad[0] @ flux[:, 0] + self._Bgrad[1] @ flux[:, 1]
            else:
                rvec = self._B @ r.ravel()
            phi = self.riesz.solve(rvec)
            per[:, 0] = self.riesz.element_energies(phi)
            if want:
                back = 2.0 * a[0] * (self._B.T @ phi)
                if weak:
                    s0bar = back
                    fbar = 2.0 * a[0] * np.stack(
                        [self._Bgrad[0].T @ phi, self._Bgrad[1].T @ phi], axis=1
                    )
                else:
                    sbar += back.reshape(shape)

        # ---- volume rho
        if self.proj_basis is None:
            rem = r
        else:
            rem = r - project_values(r, wts, self.proj_basis)
        hw = wts if self.formulation == "strong" else self.h2[:, None] * wts
        per[:, 1] = np.sum(hw * rem**2, axis=1)
        if want:
            sbar += 2.0 * a[1] * hw * rem

        # ---- boundary
        e = bnd.value - self.g
        evec = self._Bb @ e
        psi = self.rt_riesz.solve(evec)
        per[:, 2] = self.rt_riesz.element_energies(psi)
        bshape = self.boundary_shape
        dt = np.einsum("fqd,fd->fq", (bnd.grad - self.g_grad).reshape(bshape + (2,)), self.facet_t)
        hb = self.facet_h[:, None] * self.boundary_w
        per[:, 3] = np.bincount(self.facet_parent, np.sum(hb * dt**2, axis=1), minlength=nt)

        per = np.maximum(per, 0.0)
        totals = per.sum(axis=0)
        report = EstimatorReport(
            *np.sqrt(totals).tolist(),
            per_element=per,
            formulation=self.formulation,
            mesh_id=self.mesh_id,
            quadrature=self.quadrature_tag,
        )
        if not want:
            return report

        vbar = self.coef.adjoint(sbar.ravel())
        if weak:
            coef = self.coef
            vbar = vbar + Jet(
                -coef.c * s0bar,
                -coef.beta * s0bar[:, None] - np.einsum("nij,nj->ni", coef.A, fbar),
                np.zeros_like(vbar.hess),
            )
        bvalue = 2.0 * a[2] * (self._Bb.T @ psi)
        bgrad = (2.0 * a[3] * hb * dt)[..., None] * self.facet_t[:, None, :]
        bbar = Jet(bvalue, bgrad.reshape(-1, 2), np.zeros((len(bvalue), 3)))
        return report, Cotangents(vbar, bbar)




# ------------------------------------------------------------- operators


def _volume_operators(space, mesh: Mesh, rule: QuadRule, wts: np.ndarray):
    """Sparse maps from point samples to residual vectors.

    ``B @ s`` gives ``sum_q w_q s_q v_j(x_q)``; ``Bgrad[d] @ g`` gives
    ``sum_q w_q g_q d_d v_j(x_q)``.
    """
    vals, grads = scalar_tables(space, mesh, rule)
    nt, nq, nloc = vals.shape
    rows = np.broadcast_to(space.element_dofs[:, None, :], (nt, nq, nloc)).ravel()
    cols = np.broadcast_to(np.arange(nt * nq).reshape(nt, nq, 1), (nt, nq, nloc)).ravel()
    keep = rows >= 0
    shape = (space.dim, nt * nq)

    def build(data):
        return sp.csr_matrix((data.ravel()[keep], (rows[keep], cols[keep])), shape=shape)

    B = build(wts[:, :, None] * vals)
    Bgrad = tuple(build(wts[:, :, None] * grads[..., d]) for d in range(2))
    return B, Bgrad


def _trace_operator(rt_space, mesh: Mesh, bwts: np.ndarray) -> sp.csr_matrix:
    """Sparse ``Bb`` with ``(Bb @ e)_j = <e, tau_j . n>`` over the boundary.

    The normal component of an RT0 function on its own edge is its
    orientation sign, constant along the edge.
    """
    nf, nq = bwts.shape
    parents = mesh.boundary_parents
    edges = mesh.boundary_edges
    local = np.argmax(mesh.element_edges[parents] == edges[:, None], axis=1)
    sign = rt_space.signs[parents, local]
    rows = np.repeat(edges, nq)
    cols = np.arange(nf * nq)
    return sp.csr_matrix(((sign[:, None] * bwts).ravel(), (rows, cols)), shape=(rt_space.dim, nf * nq))


# ------------------------------------------------------- functional interface


def _context(problem, mesh, rule, formulation, seg=None, **kw) -> EstimatorContext:
    return EstimatorContext(
        problem, mesh, formulation, volume_rule=rule,
        boundary_rule=seg if seg is not None else seg_rule("standard"), **kw,
    )


def eta_omega_weak(problem, w, mesh, rule, space: str = "bubble", weak_form: str = "ibp"):
    """Weak-form volume ``eta`` and the coefficients of its Riesz representative.

    ``space`` is ``"lagrange"`` (P1 with zero trace) or ``"bubble"``.
    """
    ctx = _context(problem, mesh, rule, "weak_" + space, weak_form=weak_form)
    return _volume_dual(ctx, w)


def _volume_dual(ctx: EstimatorContext, w):
    vol = w(ctx.volume_x)
    r = ctx.coef.residual(vol)
    if ctx.weak_form == "weak" and ctx.formulation != "broken":
        coef = ctx.coef
        s0 = coef.f - np.sum(coef.beta * vol.grad, axis=1) - coef.c * vol.value
        flux = -np.einsum("nij,nj->ni", coef.A, vol.grad)
        rvec = ctx._B @ s0 + ctx._Bgrad[0] @ flux[:, 0] + ctx._Bgrad[1] @ flux[:, 1]
    else:
        rvec = ctx._B @ r
    phi = ctx.riesz.solve(rvec)
    return float(np.sqrt(max(float(rvec @ phi), 0.0))), phi


def _pointwise_residual(problem, w, mesh, rule):
    pts, wts = volume_points(mesh, rule)
    x = pts.reshape(-1, 2)
    r = CoefficientSamples.sample(problem, x).residual(w(x)).reshape(wts.shape)
    return r, wts


def rho_omega_weak(problem, w, mesh, rule, variant: str = "bubble") -> float:
    """``rho_Omega`` of the weak formulations (flux jumps vanish for smooth ``w``)."""
    r, wts = _pointwise_residual(problem, w, mesh, rule)
    if variant == "bubble":
        r = r - project_values(r, wts, poly_basis(rule, 0))
    elif variant != "lagrange":
        raise ValueError(f"unknown variant {variant!r}")
    h2 = mesh.diameters() ** 2
    return float(np.sqrt(np.sum(h2[:, None] * wts * r**2)))


def eta_omega_broken(problem, w, mesh, rule, k: int = 1):
    """Broken-form volume ``eta`` and the coefficients of its Riesz representative."""
    return _volume_dual(_context(problem, mesh, rule, "broken", k=k), w)


def eta_omega_broken_equiv(problem, w, mesh, rule, k: int = 1):
    """The two computable terms ``(||pi^0 r||, ||h (1 - pi^0) pi^k r||)``."""
    r, wts = _pointwise_residual(problem, w, mesh, rule)
    p0 = project_values(r, wts, poly_basis(rule, 0))
    pk = project_values(r, wts, poly_basis(rule, k))
    h2 = mesh.diameters() ** 2
    first = np.sqrt(np.sum(wts * p0**2))
    second = np.sqrt(np.sum(h2[:, None] * wts * (pk - p0) ** 2))
    return float(first), float(second)


def rho_omega_broken(problem, w, mesh, rule, k: int = 1) -> float:
    r, wts = _pointwise_residual(problem, w, mesh, rule)
    rem = r - project_values(r, wts, poly_basis(rule, k))
    h2 = mesh.diameters() ** 2
    return float(np.sqrt(np.sum(h2[:, None] * wts * rem**2)))


def eta_rho_strong(problem, w, mesh, rule, k: int = 0):
    """``(||pi^k r||, ||(1 - pi^k) r||)``."""
    r, wts = _pointwise_residual(problem, w, mesh, rule)
    pr = project_values(r, wts, poly_basis(rule, k))
    return float(np.sqrt(np.sum(wts * pr**2))), float(np.sqrt(np.sum(wts * (r - pr) ** 2)))


def _trace_error(problem, w, mesh, rule_seg):
    pts, wts = boundary_points(mesh, rule_seg)
    x = pts.reshape(-1, 2)
    jet = w(x)
    e = (jet.value - problem.g(x)).reshape(wts.shape)
    dg = (jet.grad - problem.dirichlet_grad(x)).reshape(wts.shape + (2,))
    dt = np.einsum("fqd,fd->fq", dg, mesh.boundary_tangents())
    return e, dt, wts


def eta_gamma_hdiv(problem, w, mesh, rule_seg, rt_riesz=None):
    """Boundary ``eta`` in the ``H(div)`` dual norm and its representative.

    ``rt_riesz`` may be passed to reuse a factorized RT0 Gram matrix.
    """
    space = build_space(mesh, "rt0")
    if rt_riesz is None:
        rt_riesz = assemble_riesz(space, mesh)
    e, _, wts = _trace_error(problem, w, mesh, rule_seg)
    rvec = _trace_operator(space, mesh, wts) @ e.ravel()
    psi = rt_riesz.solve(rvec)
    return float(np.sqrt(max(float(rvec @ psi), 0.0))), psi


def rho_gamma(problem, w, mesh, rule_seg) -> float:
    """``||h_F^(1/2) d_t (w - g)||_Gamma``."""
    _, dt, wts = _trace_error(problem, w, mesh, rule_seg)
    h = mesh.boundary_lengths()
    return float(np.sqrt(np.sum(h[:, None] * wts * dt**2)))


def pinn_boundary_bound(problem, w, mesh, rule_seg, per_facet: bool = False):
    """Squared weighted trace bound ``||h^(-1/2)(w-g)||^2 + ||h^(1/2) d_t(w-g)||^2``."""
    e, dt, wts = _trace_error(problem, w, mesh, rule_seg)
    h = mesh.boundary_lengths()[:, None]
    facet = np.sum(wts * (e**2 / h + h * dt**2), axis=1)
    return facet if per_facet else float(facet.sum())


def localize(problem, w, mesh, formulation: str = "weak_bubble", rule=None, rule_seg=None, **kw):
    """Full :class:`EstimatorReport` with per-element contributions."""
    ctx = _context(
        problem, mesh, rule if rule is not None else tri_rule("standard"), formulation, seg=rule_seg, **kw
    )
    return ctx.evaluate_field(w)
