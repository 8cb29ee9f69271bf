from functools import lru_cache

import numpy as np
import pytest
import sympy as sp
from hypothesis import given
from hypothesis import strategies as st

from nnapost.mesh import make_crisscross_unit_square, make_lshape_rotated
from nnapost.quadrature import tri_rule
from nnapost.trialfn import (
    CoefficientSamples,
    Jet,
    ProblemData,
    bubble_mask,
    h1_error,
    manufactured,
    masked,
    residual,
    residual_adjoint,
)

X, Y = sp.symbols("x y")

EXACT = {
    "smooth_square": sp.sin(sp.pi * X) * sp.sin(sp.pi * Y),
    "boundary_layer": (1 - sp.exp(-X / sp.Rational(1, 100))) * (1 - X) * sp.sin(sp.pi * Y),
}


def _sym_jet(expr, pts):
    fns = [expr, expr.diff(X), expr.diff(Y), expr.diff(X, 2), expr.diff(X, Y), expr.diff(Y, 2)]
    vals = [np.broadcast_to(sp.lambdify((X, Y), f, "numpy")(pts[:, 0], pts[:, 1]), (len(pts),)) for f in fns]
    return Jet(vals[0], np.stack(vals[1:3], 1), np.stack(vals[3:], 1))


@pytest.mark.parametrize("case", ["smooth_square", "boundary_layer"])
def test_manufactured_jets_match_symbolic(case, rng):
    """[DERIVED] sympy differentiation of the closed-form solutions."""
    pts = rng.uniform(0, 1, (200, 2))
    prob = manufactured(case)
    ref = _sym_jet(EXACT[case], pts)
    got = prob.exact(pts)
    scale = np.abs(ref.hess).max()
    assert np.allclose(got.value, ref.value, atol=1e-13)
    assert np.allclose(got.grad, ref.grad, atol=1e-12 * scale)
    assert np.allclose(got.hess, ref.hess, atol=1e-12 * scale)
    assert np.allclose(prob.f(pts), -ref.laplacian(), atol=1e-12 * scale)


def test_corner_singularity_harmonic_and_symbolic(rng):
    r, phi = sp.sqrt(X**2 + Y**2), sp.atan2(Y, X)
    expr = r ** sp.Rational(2, 3) * sp.cos(2 * phi / 3)
    pts = rng.uniform(-1, 1, (200, 2))
    pts = pts[np.abs(np.arctan2(pts[:, 1], pts[:, 0])) < 0.75 * np.pi]
    ref = _sym_jet(expr, pts)
    got = manufactured("lshape_singular").exact(pts)
    assert np.allclose(got.value, ref.value, atol=1e-13)
    assert np.allclose(got.grad, ref.grad, rtol=1e-11, atol=1e-12)
    assert np.allclose(got.hess, ref.hess, rtol=1e-10, atol=1e-10)
    assert np.allclose(got.laplacian(), 0.0, atol=1e-10)


def test_corner_solution_vanishes_on_edges_through_origin():
    # the rotated L has its re-entrant edges along arg z = +-3 pi / 4
    t = np.linspace(0.1, 1.0, 7)
    for ang in (0.75 * np.pi - 1e-15, -0.75 * np.pi + 1e-15):
        pts = np.column_stack([t * np.cos(ang), t * np.sin(ang)])
        assert np.allclose(manufactured("lshape_singular").exact(pts).value, 0.0, atol=1e-12)
    with pytest.raises(ValueError):
        manufactured("lshape_singular").exact(np.zeros((1, 2)))


def test_boundary_data_is_trace_of_exact_solution():
    for case, mesh in (("smooth_square", make_crisscross_unit_square(2)), ("lshape_singular", make_lshape_rotated(0))):
        prob = manufactured(case)
        a = mesh.vertices[mesh.boundary_facets[:, 0]]
        b = mesh.vertices[mesh.boundary_facets[:, 1]]
        pts = 0.3 * a + 0.7 * b
        assert np.allclose(prob.g(pts), prob.exact(pts).value)


@lru_cache(maxsize=None)
def _product_oracle():
    a = sp.symbols("a0:6")
    b = sp.symbols("b0:3")
    p = a[0] + a[1] * X + a[2] * Y + a[3] * X**2 + a[4] * X * Y + a[5] * Y**2
    q = sp.sin(b[0] * X + b[1] * Y) * sp.exp(b[2] * X)

    def jet_fn(expr):
        parts = [expr, expr.diff(X), expr.diff(Y), expr.diff(X, 2), expr.diff(X, Y), expr.diff(Y, 2)]
        return sp.lambdify((X, Y, a, b), parts, "numpy")

    return jet_fn(p), jet_fn(q), jet_fn(p * q)


def _as_jet(values, n):
    v = [np.broadcast_to(np.asarray(t, dtype=float), (n,)) for t in values]
    return Jet(v[0], np.stack(v[1:3], 1), np.stack(v[3:], 1))


@given(st.integers(0, 2**32 - 1))
def test_jet_product_rule(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=6), rng.normal(size=3)
    pts = rng.uniform(-1, 1, (20, 2))
    fp, fq, fpq = _product_oracle()
    got = _as_jet(fp(pts[:, 0], pts[:, 1], a, b), 20) * _as_jet(fq(pts[:, 0], pts[:, 1], a, b), 20)
    ref = _as_jet(fpq(pts[:, 0], pts[:, 1], a, b), 20)
    for u, v in ((got.value, ref.value), (got.grad, ref.grad), (got.hess, ref.hess)):
        assert np.allclose(u, v, rtol=1e-11, atol=1e-11)


def test_jet_algebra_and_split():
    j = Jet(np.arange(4.0), np.ones((4, 2)), np.zeros((4, 3)))
    both = Jet.concat([j, j.scale(2.0)])
    first, second = both.split([4, 4])
    assert np.array_equal((second - first).value, j.value)
    assert np.array_equal((first + first).grad, second.grad)
    assert len(Jet.zeros(3)) == 3
    assert Jet(np.zeros(1), np.zeros((1, 2)), np.array([[1.0, 2.0, 3.0]])).hess_matrix()[0].tolist() == [[1, 2], [2, 3]]


def test_bubble_mask_vanishes_on_boundary_and_jets_exact(rng):
    s = np.linspace(0, 1, 9)
    edge = np.concatenate([np.column_stack([s, 0 * s]), np.column_stack([s, 1 + 0 * s]),
                           np.column_stack([0 * s, s]), np.column_stack([1 + 0 * s, s])])
    assert np.all(bubble_mask(edge).value == 0.0)
    pts = rng.uniform(0, 1, (50, 2))
    ref = _sym_jet(X * (1 - X) * Y * (1 - Y), pts)
    got = bubble_mask(pts)
    assert np.allclose(got.value, ref.value) and np.allclose(got.grad, ref.grad) and np.allclose(got.hess, ref.hess)
    field = masked(bubble_mask, manufactured("smooth_square").exact)
    assert np.all(field(edge).value == 0.0)


@lru_cache(maxsize=None)
def _general_problem():
    """Variable coefficients with a symbolic oracle for the strong operator."""
    A = sp.Matrix([[2 + X, sp.Rational(1, 2) * Y], [sp.Rational(1, 2) * Y, 1 + X * Y]])
    beta = sp.Matrix([X, -Y**2])
    c = 1 + X**2
    lam = lambda e: sp.lambdify((X, Y), e, "numpy")
    bc = lambda f: (lambda x: np.broadcast_to(lam(f)(x[:, 0], x[:, 1]), (len(x),)).astype(float))

    def diffusion(x):
        out = np.empty((len(x), 2, 2))
        for i in range(2):
            for j in range(2):
                out[:, i, j] = bc(A[i, j])(x)
        return out

    prob = ProblemData(
        f=bc(sp.Integer(1)),
        g=bc(sp.Integer(0)),
        dirichlet_grad=lambda x: np.zeros((len(x), 2)),
        diffusion=diffusion,
        div_diffusion=lambda x: np.stack([bc(A[0, 0].diff(X) + A[1, 0].diff(Y))(x),
                                          bc(A[0, 1].diff(X) + A[1, 1].diff(Y))(x)], 1),
        advection=lambda x: np.stack([bc(beta[0])(x), bc(beta[1])(x)], 1),
        div_advection=bc(beta[0].diff(X) + beta[1].diff(Y)),
        reaction=bc(c),
    )
    return prob, A, beta, c


def test_residual_matches_symbolic_operator(rng):
    prob, A, beta, c = _general_problem()
    w = sp.sin(X + 2 * Y) * sp.exp(X * Y)
    grad = sp.Matrix([w.diff(X), w.diff(Y)])
    flux = A * grad
    strong = 1 + flux[0].diff(X) + flux[1].diff(Y) - (beta.T * grad)[0] - c * w
    pts = rng.uniform(0, 1, (40, 2))
    ref = sp.lambdify((X, Y), strong, "numpy")(pts[:, 0], pts[:, 1])
    assert np.allclose(residual(prob, _sym_jet(w, pts), pts), ref, rtol=1e-12, atol=1e-12)
    assert prob.check_coercivity(pts)


@given(st.integers(0, 2**32 - 1))
def test_residual_adjoint_is_transpose(seed):
    rng = np.random.default_rng(seed)
    prob, *_ = _general_problem()
    pts = rng.uniform(0, 1, (30, 2))
    jet = Jet(rng.normal(size=30), rng.normal(size=(30, 2)), rng.normal(size=(30, 3)))
    rbar = rng.normal(size=30)
    coef = CoefficientSamples.sample(prob, pts)
    lhs = np.dot(rbar, coef.operator(jet))
    adj = residual_adjoint(prob, pts, rbar)
    rhs = np.sum(adj.value * jet.value) + np.sum(adj.grad * jet.grad) + np.sum(adj.hess * jet.hess)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_scaled_problem_scales_everything(rng):
    prob = manufactured("smooth_square").scaled(3.0)
    pts = rng.uniform(0, 1, (10, 2))
    base = manufactured("smooth_square")
    assert np.allclose(prob.f(pts), 3 * base.f(pts))
    assert np.allclose(prob.exact(pts).grad, 3 * base.exact(pts).grad)
    assert np.allclose(residual(prob, prob.exact(pts), pts), 0.0, atol=1e-12)


def test_h1_error_of_exact_solution_and_of_zero():
    prob = manufactured("smooth_square")
    mesh = make_crisscross_unit_square(8)
    assert h1_error(prob, prob.exact, mesh, tri_rule("high")) == 0.0
    zero = lambda x: Jet.zeros(len(x))
    # [DERIVED] ||sin(pi x) sin(pi y)||_H1^2 = 1/4 + pi^2/2
    assert h1_error(prob, zero, mesh, tri_rule("high")) == pytest.approx(np.sqrt(0.25 + np.pi**2 / 2), rel=1e-6)


def test_unknown_case_rejected():
    with pytest.raises(ValueError):
        manufactured("nope")
