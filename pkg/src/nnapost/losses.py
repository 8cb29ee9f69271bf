"""Training losses built from the estimators, and the classical sampled PINN loss.

``wb``
    weak bubble formulation, ``eta_O^2 + rho_O^2 + eta_G^2 + rho_G^2``;
``br``
    broken formulation with ``k = 1``, same four parts;
``pmod``
    strong formulation with ``k = 0``, same four parts;
``wb_eta_only``
    weak bubble formulation, ``eta_O^2 + eta_G^2``;
``pinn``
    ``|Omega|/N sum |r(x_j)|^2 + alpha/M sum |w(y_k) - g(y_k)|^2`` over
    uniformly sampled points, ``alpha = M`` by default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .estimators import EstimatorContext, EstimatorReport
from .mesh import Mesh
from .network import MlpParams, backward, forward_jet, forward_jet_cached, forward_value_grad
from .quadrature import QuadRule, seg_rule, tri_rule, volume_points
from .trialfn import CoefficientSamples, Jet, ProblemData

__all__ = [
    "LOSS_KINDS",
    "LossSpec",
    "SampleReport",
    "Loss",
    "evaluate",
    "ratio",
    "ErrorEvaluator",
    "UNDEFINED_RATIO",
    "mask_pullback",
]

LOSS_KINDS = ("wb", "br", "pmod", "pinn", "wb_eta_only")
UNDEFINED_RATIO = float("nan")

_FORMULATION = {"wb": "weak_bubble", "wb_eta_only": "weak_bubble", "br": "broken", "pmod": "strong"}
_DEFAULT_K = {"wb": 0, "wb_eta_only": 0, "br": 1, "pmod": 0}


@dataclass(frozen=True)
class LossSpec:
    """Which loss to train with and its parameters.

    ``k`` defaults to 0 for ``wb``/``pmod`` and 1 for ``br``; the bubble degree
    ``m`` and the Raviart-Thomas degree ``p`` are fixed at 0.  ``alpha``,
    ``seed``, ``n_interior`` and ``n_boundary`` only affect ``pinn``; the
    sample counts default to the number of quadrature nodes of the mesh.
    """

    kind: str = "wb"
    k: int | None = None
    m: int = 0
    p: int = 0
    alpha: float | None = None
    seed: int = 0
    n_interior: int | None = None
    n_boundary: int | None = None
    weak_form: str = "ibp"

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.m != 0 or self.p != 0:
            raise ValueError("only m = 0 and p = 0 are supported")

    @property
    def estimator_based(self) -> bool:
        return self.kind != "pinn"

    @property
    def formulation(self) -> str:
        return _FORMULATION[self.kind]

    @property
    def degree(self) -> int:
        return _DEFAULT_K[self.kind] if self.k is None else self.k

    @property
    def weights(self) -> tuple[float, float, float, float]:
        """Factors of ``(eta_O^2, rho_O^2, eta_G^2, rho_G^2)`` in the loss."""
        return (1.0, 0.0, 1.0, 0.0) if self.kind == "wb_eta_only" else (1.0, 1.0, 1.0, 1.0)


@dataclass
class SampleReport:
    """Parts of the sampled PINN loss."""

    interior: float
    boundary: float
    n_interior: int
    n_boundary: int


def mask_pullback(mask: Jet, vbar: Jet) -> Jet:
    """Cotangent of ``u`` given the cotangent of the product ``mask * u``."""
    gx, gy = mask.grad[:, 0], mask.grad[:, 1]
    hb = vbar.hess
    value = mask.value * vbar.value + np.sum(mask.grad * vbar.grad, axis=1) + np.sum(mask.hess * hb, axis=1)
    grad = mask.value[:, None] * vbar.grad
    grad[:, 0] += 2.0 * gx * hb[:, 0] + gy * hb[:, 1]
    grad[:, 1] += gx * hb[:, 1] + 2.0 * gy * hb[:, 2]
    return Jet(value, grad, mask.value[:, None] * hb)


class Loss:
    """A loss functional bound to a problem, a mesh and quadrature rules.

    This is the gradient hook used by training: :meth:`value_and_grad` returns
    the loss and its exact parameter gradient.  With ``mask`` the trained
    field is ``mask * u_theta`` (exact product-rule jets).
    """

    def __init__(
        self,
        spec: LossSpec,
        problem: ProblemData,
        mesh: Mesh,
        volume_rule: QuadRule | None = None,
        boundary_rule: QuadRule | None = None,
        mask=None,
    ):
        self.spec = spec
        self.problem = problem
        self.mesh = mesh
        self.volume_rule = volume_rule or tri_rule("standard")
        self.boundary_rule = boundary_rule or seg_rule("standard")
        self.mask = mask
        self.last_report = None
        if spec.estimator_based:
            self.context = EstimatorContext(
                problem, mesh, spec.formulation, self.volume_rule, self.boundary_rule,
                k=spec.degree, weak_form=spec.weak_form,
            )
            self.points = self.context.points()
            self.n_volume = self.context.n_volume_points
            self.n_boundary = self.context.n_boundary_points
        else:
            self.context = None
            self.n_volume = spec.n_interior or mesh.n_elements * self.volume_rule.npoints
            self.n_boundary = spec.n_boundary or len(mesh.boundary_facets) * self.boundary_rule.npoints
            self.alpha = float(self.n_boundary if spec.alpha is None else spec.alpha)
            self._rng = np.random.default_rng(spec.seed)
            self._areas = mesh.areas()
            self._lengths = mesh.boundary_lengths()
            self.resample()
        self._mask_jet = mask(self.points) if mask is not None else None

    # ----------------------------------------------------------- sampling
    def resample(self) -> None:
        """Draw fresh PINN collocation points (no-op for estimator losses)."""
        if self.context is not None:
            return
        rng, mesh = self._rng, self.mesh
        t = rng.choice(mesh.n_elements, size=self.n_volume, p=self._areas / self._areas.sum())
        r1, r2 = rng.random(self.n_volume), rng.random(self.n_volume)
        s = np.sqrt(r1)
        p = mesh.vertices[mesh.triangles[t]]
        xi = (1 - s)[:, None] * p[:, 0] + (s * (1 - r2))[:, None] * p[:, 1] + (s * r2)[:, None] * p[:, 2]
        f = rng.choice(len(self._lengths), size=self.n_boundary, p=self._lengths / self._lengths.sum())
        u = rng.random(self.n_boundary)[:, None]
        ab = mesh.vertices[mesh.boundary_facets[f]]
        xb = ab[:, 0] + u * (ab[:, 1] - ab[:, 0])
        self.points = np.vstack([xi, xb])
        self._coef = CoefficientSamples.sample(self.problem, xi)
        self._g = np.asarray(self.problem.g(xb), dtype=float)
        if self.mask is not None:
            self._mask_jet = self.mask(self.points)

    @property
    def domain_area(self) -> float:
        return self.mesh.domain_area()

    # --------------------------------------------------------- evaluation
    def _field_jet(self, params: MlpParams):
        u = forward_jet(params, self.points)
        return u if self._mask_jet is None else self._mask_jet * u

    def _core(self, jet: Jet, want: bool):
        nv = self.n_volume
        vol, bnd = jet.split([nv, len(jet) - nv])
        if self.context is not None:
            w = self.spec.weights
            if want:
                report, cot = self.context.evaluate(vol, bnd, w)
                return report.weighted_sum(w), report, Jet.concat([cot.volume, cot.boundary])
            report = self.context.evaluate(vol, bnd)
            return report.weighted_sum(w), report, None
        r = self._coef.residual(vol)
        e = bnd.value - self._g
        c_int = self.domain_area / nv
        c_bnd = self.alpha / len(e)
        interior, boundary = c_int * float(r @ r), c_bnd * float(e @ e)
        report = SampleReport(interior, boundary, nv, len(e))
        if not want:
            return interior + boundary, report, None
        vbar = self._coef.adjoint(2.0 * c_int * r)
        bbar = Jet(2.0 * c_bnd * e, np.zeros((len(e), 2)), np.zeros((len(e), 3)))
        return interior + boundary, report, Jet.concat([vbar, bbar])

    def evaluate(self, params: MlpParams):
        """``(value, report)``; the report is an :class:`EstimatorReport` or :class:`SampleReport`."""
        jet = self._field_jet(params)
        value, report, _ = self._core(jet, want=False)
        self.last_report = report
        return value, report

    def evaluate_field(self, w):
        """Loss value and report for an arbitrary smooth field (no network)."""
        jet = w(self.points)
        if self._mask_jet is not None:
            jet = self._mask_jet * jet
        value, report, _ = self._core(jet, want=False)
        return value, report

    def value_and_grad(self, params: MlpParams):
        u, cache = forward_jet_cached(params, self.points)
        jet = u if self._mask_jet is None else self._mask_jet * u
        value, report, cot = self._core(jet, want=True)
        if self._mask_jet is not None:
            cot = mask_pullback(self._mask_jet, cot)
        self.last_report = report
        return value, backward(params, self.points, cot, cache=cache)

    def flat_objective(self, template: MlpParams):
        """``theta -> (loss, gradient)`` for the optimizer."""
        return lambda theta: self.value_and_grad(template.with_flat(theta))


def evaluate(spec: LossSpec, problem: ProblemData, params: MlpParams, mesh: Mesh, rules=None, mask=None):
    """Loss value, report, and the :class:`Loss` object serving as gradient hook.

    ``rules`` is an optional ``(volume_rule, boundary_rule)`` pair.
    """
    vrule, brule = rules if rules is not None else (None, None)
    loss = Loss(spec, problem, mesh, vrule, brule, mask=mask)
    value, report = loss.evaluate(params)
    return value, report, loss


# ---------------------------------------------------------------- errors


@dataclass(eq=False)
class ErrorEvaluator:
    """``H^1`` error of a network against the exact solution on a fixed fine rule.

    The exact solution is sampled once; each call costs one first-order
    forward pass.
    """

    problem: ProblemData
    mesh: Mesh
    rule: QuadRule = field(default_factory=lambda: tri_rule("high"))
    mask: object = None

    def __post_init__(self):
        if self.problem.exact is None:
            raise ValueError("problem has no exact solution")
        pts, wts = volume_points(self.mesh, self.rule)
        self.x = pts.reshape(-1, 2)
        self.w = wts.ravel()
        u = self.problem.exact(self.x)
        self.u, self.du = u.value, u.grad
        self._mask = self.mask(self.x) if self.mask is not None else None

    def __call__(self, params: MlpParams) -> float:
        v, dv = forward_value_grad(params, self.x)
        if self._mask is not None:
            m = self._mask
            v, dv = m.value * v, m.value[:, None] * dv + v[:, None] * m.grad
        return self.of_values(v, dv)

    def of_values(self, v, dv) -> float:
        e2 = (self.u - v) ** 2 + np.sum((self.du - dv) ** 2, axis=1)
        return float(np.sqrt(np.dot(self.w, e2)))

    def of_field(self, w) -> float:
        jet = w(self.x)
        return self.of_values(jet.value, jet.grad)


def ratio_value(loss_value: float, error: float) -> float:
    """``sqrt(loss) / error`` or :data:`UNDEFINED_RATIO` when the error vanishes."""
    if error < 1e-14:
        return UNDEFINED_RATIO
    return math.sqrt(max(loss_value, 0.0)) / error


def ratio(spec: LossSpec, problem: ProblemData, params, mesh: Mesh, rules=None, error_mesh: Mesh | None = None,
          mask=None) -> float:
    """``sqrt(L) / ||u - u_theta||_{H^1}``; ``params`` may also be a smooth field."""
    vrule, brule = rules if rules is not None else (None, None)
    loss = Loss(spec, problem, mesh, vrule, brule, mask=mask)
    err = ErrorEvaluator(problem, error_mesh if error_mesh is not None else mesh, mask=mask)
    if isinstance(params, MlpParams):
        value, _ = loss.evaluate(params)
        return ratio_value(value, err(params))
    value, _ = loss.evaluate_field(params)
    field_fn = params if mask is None else (lambda x: mask(x) * params(x))
    return ratio_value(value, err.of_field(field_fn))
