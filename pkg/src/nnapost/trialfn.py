"""Smooth scalar fields with exact second derivatives, model problems, exact errors.

A :class:`Jet` carries value, gradient and Hessian of a field at a batch of
points.  The Hessian is stored by its three independent entries
``(xx, xy, yy)`` so it is symmetric by construction.  Any callable mapping an
``(n, 2)`` point array to a :class:`Jet` is a *smooth field*.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .quadrature import QuadRule, volume_points

__all__ = [
    "Jet",
    "ProblemData",
    "CoefficientSamples",
    "manufactured",
    "residual",
    "residual_adjoint",
    "h1_error",
    "h1_norm_squared_parts",
    "bubble_mask",
    "masked",
]

SmoothField = Callable[[np.ndarray], "Jet"]


@dataclass
class Jet:
    """Value ``(n,)``, gradient ``(n, 2)`` and Hessian entries ``(n, 3)``."""

    value: np.ndarray
    grad: np.ndarray
    hess: np.ndarray

    def __len__(self):
        return len(self.value)

    def laplacian(self) -> np.ndarray:
        return self.hess[:, 0] + self.hess[:, 2]

    def hess_matrix(self) -> np.ndarray:
        h = self.hess
        return np.stack([np.stack([h[:, 0], h[:, 1]], -1), np.stack([h[:, 1], h[:, 2]], -1)], -2)

    def __add__(self, other: "Jet") -> "Jet":
        return Jet(self.value + other.value, self.grad + other.grad, self.hess + other.hess)

    def __sub__(self, other: "Jet") -> "Jet":
        return Jet(self.value - other.value, self.grad - other.grad, self.hess - other.hess)

    def scale(self, s: float) -> "Jet":
        return Jet(s * self.value, s * self.grad, s * self.hess)

    def __mul__(self, other: "Jet") -> "Jet":
        """Product rule."""
        u, v = self, other
        value = u.value * v.value
        grad = u.value[:, None] * v.grad + v.value[:, None] * u.grad
        hess = u.value[:, None] * v.hess + v.value[:, None] * u.hess
        hess = hess + np.stack(
            [
                2 * u.grad[:, 0] * v.grad[:, 0],
                u.grad[:, 0] * v.grad[:, 1] + u.grad[:, 1] * v.grad[:, 0],
                2 * u.grad[:, 1] * v.grad[:, 1],
            ],
            axis=1,
        )
        return Jet(value, grad, hess)

    @staticmethod
    def zeros(n: int) -> "Jet":
        return Jet(np.zeros(n), np.zeros((n, 2)), np.zeros((n, 3)))

    def split(self, sizes) -> list["Jet"]:
        idx = np.cumsum(sizes)[:-1]
        return [Jet(v, g, h) for v, g, h in zip(
            np.split(self.value, idx), np.split(self.grad, idx), np.split(self.hess, idx))]

    @staticmethod
    def concat(jets) -> "Jet":
        return Jet(
            np.concatenate([j.value for j in jets]),
            np.concatenate([j.grad for j in jets]),
            np.concatenate([j.hess for j in jets]),
        )


def _const(c):
    return lambda x: np.full(len(x), float(c))


def _identity(x):
    n = len(x)
    a = np.zeros((n, 2, 2))
    a[:, 0, 0] = a[:, 1, 1] = 1.0
    return a


@dataclass
class ProblemData:
    """Data of ``-div(A grad u) + beta . grad u + c u = f`` in the domain, ``u = g`` on its boundary.

    All coefficients are vectorized callables of an ``(n, 2)`` point array.
    ``div_diffusion`` returns the divergence of the rows of ``A``, i.e. the
    vector ``sum_i d_i A_ij``, so that ``div(A grad w) = A : D^2 w + div_diffusion . grad w``.
    ``dirichlet_grad`` is the gradient of a smooth extension of ``g``; only its
    tangential component is used.
    """

    f: Callable
    g: Callable
    dirichlet_grad: Callable
    diffusion: Callable = _identity
    div_diffusion: Callable = lambda x: np.zeros((len(x), 2))
    advection: Callable = lambda x: np.zeros((len(x), 2))
    div_advection: Callable = _const(0.0)
    reaction: Callable = _const(0.0)
    exact: Optional[SmoothField] = None
    name: str = "custom"

    def check_coercivity(self, points: np.ndarray, lower: float = 1e-8) -> bool:
        """Sampled check of ``lambda_min(A) >= lower`` and ``-div(beta)/2 + c >= 0``."""
        eig = np.linalg.eigvalsh(self.diffusion(points))
        sign = -0.5 * self.div_advection(points) + self.reaction(points)
        return bool(np.all(eig[:, 0] >= lower) and np.all(sign >= 0.0))

    def scaled(self, s: float) -> "ProblemData":
        """Same operator with data ``s f``, ``s g`` and exact solution ``s u``."""
        exact = None if self.exact is None else (lambda x, e=self.exact: e(x).scale(s))
        return ProblemData(
            f=lambda x: s * self.f(x),
            g=lambda x: s * self.g(x),
            dirichlet_grad=lambda x: s * self.dirichlet_grad(x),
            diffusion=self.diffusion,
            div_diffusion=self.div_diffusion,
            advection=self.advection,
            div_advection=self.div_advection,
            reaction=self.reaction,
            exact=exact,
            name=self.name,
        )


# ------------------------------------------------------------ manufactured data


def _sine_bump(x):
    px, py = np.pi * x[:, 0], np.pi * x[:, 1]
    sx, cx, sy, cy = np.sin(px), np.cos(px), np.sin(py), np.cos(py)
    p2 = np.pi**2
    return Jet(
        sx * sy,
        np.stack([np.pi * cx * sy, np.pi * sx * cy], axis=1),
        np.stack([-p2 * sx * sy, p2 * cx * cy, -p2 * sx * sy], axis=1),
    )


def _layer(eps):
    def u(x):
        X, Y = x[:, 0], x[:, 1]
        e = np.exp(-X / eps)
        a, a1, a2 = 1.0 - e, e / eps, -e / eps**2
        b = 1.0 - X
        p = a * b
        p1 = a1 * b - a
        p2 = a2 * b - 2.0 * a1
        s, c = np.sin(np.pi * Y), np.cos(np.pi * Y)
        return Jet(
            p * s,
            np.stack([p1 * s, np.pi * p * c], axis=1),
            np.stack([p2 * s, np.pi * p1 * c, -np.pi**2 * p * s], axis=1),
        )

    return u


def _corner(x):
    z = x[:, 0] + 1j * x[:, 1]
    if np.any(np.abs(z) == 0.0):
        raise ValueError("the corner singularity cannot be evaluated at the origin")
    # principal branch: the rotated L-shape occupies |arg z| < 3 pi / 4
    w = z ** (2.0 / 3.0)
    dw = (2.0 / 3.0) * z ** (-1.0 / 3.0)
    d2w = -(2.0 / 9.0) * z ** (-4.0 / 3.0)
    # for holomorphic F: u_x - i u_y = F', u_xx - i u_xy = F''
    return Jet(
        w.real,
        np.stack([dw.real, -dw.imag], axis=1),
        np.stack([d2w.real, -d2w.imag, -d2w.real], axis=1),
    )


def _poisson_from_exact(u, name):
    return ProblemData(
        f=lambda x: -u(x).laplacian(),
        g=lambda x: u(x).value,
        dirichlet_grad=lambda x: u(x).grad,
        exact=u,
        name=name,
    )


def manufactured(case: str, eps: float = 1e-2) -> ProblemData:
    """Poisson problems with known solution.

    ``smooth_square``
        ``u = sin(pi x) sin(pi y)`` on the unit square.
    ``boundary_layer``
        ``u = (1 - exp(-x/eps)) (1 - x) sin(pi y)`` on the unit square.
    ``lshape_singular``
        ``u = r^(2/3) cos(2 phi / 3)`` on the rotated L-shape, ``f = 0``.
    """
    if case in ("smooth_square", "boundary_layer"):
        prob = _poisson_from_exact(_sine_bump if case == "smooth_square" else _layer(eps), case)
        # both solutions vanish on the boundary; exact zeros keep masked trial functions exact there
        prob.g = lambda x: np.zeros(len(x))
        prob.dirichlet_grad = lambda x: np.zeros((len(x), 2))
        return prob
    if case == "lshape_singular":
        prob = _poisson_from_exact(_corner, case)
        prob.f = lambda x: np.zeros(len(x))
        return prob
    raise ValueError(f"unknown manufactured case {case!r}")


# ------------------------------------------------------------------- residuals


@dataclass
class CoefficientSamples:
    """Problem coefficients sampled once at a fixed point set.

    Training evaluates the residual at the same quadrature points many times;
    sampling ``f, A, div A, beta, c`` once makes each evaluation a few array
    operations.
    """

    f: np.ndarray
    A: np.ndarray
    div_A: np.ndarray
    beta: np.ndarray
    c: np.ndarray

    @property
    def transport(self) -> np.ndarray:
        """``div A - beta``, the first-order coefficient of the strong operator."""
        return self.div_A - self.beta

    @classmethod
    def sample(cls, problem: ProblemData, points: np.ndarray) -> "CoefficientSamples":
        return cls(
            f=np.asarray(problem.f(points), dtype=float),
            A=np.asarray(problem.diffusion(points), dtype=float),
            div_A=np.asarray(problem.div_diffusion(points), dtype=float),
            beta=np.asarray(problem.advection(points), dtype=float),
            c=np.asarray(problem.reaction(points), dtype=float),
        )

    def operator(self, jet: Jet) -> np.ndarray:
        """``div(A grad w) - beta . grad w - c w`` (no source)."""
        A, h = self.A, jet.hess
        a_h = A[:, 0, 0] * h[:, 0] + 2.0 * A[:, 0, 1] * h[:, 1] + A[:, 1, 1] * h[:, 2]
        return a_h + np.sum(self.transport * jet.grad, axis=1) - self.c * jet.value

    def residual(self, jet: Jet) -> np.ndarray:
        return self.f + self.operator(jet)

    def adjoint(self, rbar: np.ndarray) -> Jet:
        """Pull a cotangent of the pointwise residual back to the jet of ``w``."""
        A = self.A
        return Jet(
            -self.c * rbar,
            self.transport * rbar[:, None],
            np.stack([A[:, 0, 0] * rbar, 2.0 * A[:, 0, 1] * rbar, A[:, 1, 1] * rbar], axis=1),
        )


def residual(problem: ProblemData, jet: Jet, points: np.ndarray) -> np.ndarray:
    """Pointwise ``f + div(A grad w) - beta . grad w - c w`` from the jet of ``w``."""
    return CoefficientSamples.sample(problem, points).residual(jet)


def residual_adjoint(problem: ProblemData, points: np.ndarray, rbar: np.ndarray) -> Jet:
    """Pull a cotangent of the pointwise residual back to the jet of ``w``."""
    return CoefficientSamples.sample(problem, points).adjoint(rbar)


def h1_norm_squared_parts(problem: ProblemData, w: SmoothField, mesh, rule: QuadRule):
    """Return ``(||grad(u - w)||^2, ||u - w||^2)`` by quadrature."""
    if problem.exact is None:
        raise ValueError("problem has no exact solution")
    pts, wts = volume_points(mesh, rule)
    x = pts.reshape(-1, 2)
    u = problem.exact(x)
    v = w(x)
    de = (u.grad - v.grad) ** 2
    e = (u.value - v.value) ** 2
    wf = wts.ravel()
    return float(np.dot(wf, de.sum(axis=1))), float(np.dot(wf, e))


def h1_error(problem: ProblemData, w: SmoothField, mesh, rule: QuadRule) -> float:
    """``sqrt(||grad(u - w)||^2 + ||u - w||^2)`` by quadrature."""
    g2, l2 = h1_norm_squared_parts(problem, w, mesh, rule)
    return float(np.sqrt(g2 + l2))


# --------------------------------------------------------------- boundary masks


def bubble_mask(x: np.ndarray) -> Jet:
    """``phi = x (1 - x) y (1 - y)``, vanishing on the unit-square boundary."""
    X, Y = x[:, 0], x[:, 1]
    a, a1 = X * (1 - X), 1 - 2 * X
    b, b1 = Y * (1 - Y), 1 - 2 * Y
    return Jet(a * b, np.stack([a1 * b, a * b1], axis=1), np.stack([-2 * b, a1 * b1, -2 * a], axis=1))


def masked(mask: SmoothField, field: SmoothField) -> SmoothField:
    """The field ``mask * field`` with product-rule jets."""
    return lambda x: mask(x) * field(x)
