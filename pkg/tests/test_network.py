import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnapost.losses import Loss, LossSpec
from nnapost.mesh import make_crisscross_unit_square
from nnapost.network import (
    MlpParams,
    as_field,
    backward,
    forward_jet,
    forward_value,
    forward_value_grad,
    init,
    load_checkpoint,
    n_params,
    param_gradient,
    save_checkpoint,
)
from nnapost.trialfn import Jet, manufactured


def _randomized(L, N, seed):
    """Initial weights with nonzero biases so that every code path is exercised."""
    rng = np.random.default_rng(seed + 1)
    p = init(L, N, seed)
    for b in p.biases:
        b[:] = rng.normal(scale=0.5, size=b.shape)
    return p


@pytest.mark.parametrize("L,N,count", [(5, 30, 3841), (8, 20, 3021), (1, 1, 5), (5, 20, 1761)])
def test_parameter_counts(L, N, count):
    assert n_params(L, N) == count == init(L, N).size
    assert n_params(L, N) == 3 * N + (L - 1) * (N * N + N) + N + 1


def test_flat_round_trip_and_depth():
    p = _randomized(3, 6, 0)
    q = MlpParams.from_flat(p.widths, p.flat())
    assert np.array_equal(q.flat(), p.flat())
    assert p.depth == 3
    assert p.with_flat(np.zeros(p.size)).flat().sum() == 0.0
    with pytest.raises(ValueError):
        p.with_flat(np.zeros(p.size + 1))


def test_init_is_deterministic_and_seed_dependent():
    assert np.array_equal(init(4, 7, 3).flat(), init(4, 7, 3).flat())
    assert not np.array_equal(init(4, 7, 3).flat(), init(4, 7, 4).flat())
    assert all(np.all(b == 0.0) for b in init(4, 7, 3).biases)


def test_zero_weights_give_constant_output():
    p = _randomized(3, 5, 0)
    p = p.with_flat(np.concatenate([np.zeros(p.size - 1), [0.75]]))
    jet = forward_jet(p, np.random.default_rng(0).uniform(size=(10, 2)))
    assert np.all(jet.value == 0.75) and np.all(jet.grad == 0.0) and np.all(jet.hess == 0.0)


def test_input_independent_hidden_layer_gives_zero_hessian():
    # with zero input weights only the linear output layer acts on a constant
    p = init(1, 1, 0)
    p.weights[0][:] = 0.0
    jet = forward_jet(p, np.random.default_rng(0).uniform(size=(5, 2)))
    assert np.all(jet.hess == 0.0)


@pytest.mark.parametrize("L,N", [(1, 3), (3, 10), (5, 20)])
def test_jets_match_finite_differences(L, N):
    p = _randomized(L, N, 7)
    x = np.random.default_rng(0).uniform(0.05, 0.95, size=(50, 2))
    jet = forward_jet(p, x)
    h = 1e-4
    f = lambda y: forward_value(p, y)
    ex, ey = np.array([h, 0.0]), np.array([0.0, h])
    fd_grad = np.stack([(f(x + ex) - f(x - ex)) / (2 * h), (f(x + ey) - f(x - ey)) / (2 * h)], 1)
    fd_lap = (f(x + ex) + f(x - ex) + f(x + ey) + f(x - ey) - 4 * f(x)) / h**2
    fd_xy = (f(x + ex + ey) - f(x + ex - ey) - f(x - ex + ey) + f(x - ex - ey)) / (4 * h * h)
    assert np.max(np.abs(fd_grad - jet.grad)) <= 1e-5 * np.max(np.abs(jet.grad))
    assert np.max(np.abs(fd_lap - jet.laplacian())) <= 1e-5 * np.max(np.abs(jet.laplacian()))
    assert np.max(np.abs(fd_xy - jet.hess[:, 1])) <= 1e-5 * np.max(np.abs(jet.hess))
    v, g = forward_value_grad(p, x)
    assert np.allclose(v, jet.value, rtol=0, atol=1e-15) and np.allclose(g, jet.grad, rtol=0, atol=1e-14)


def test_point_loss_gradient_matches_finite_differences():
    p = _randomized(2, 3, 1)
    x = np.array([[0.3, 0.6]])
    fn = lambda jet: (float(jet.value[0] ** 2), Jet(2 * jet.value, np.zeros((1, 2)), np.zeros((1, 3))))
    value, grad = param_gradient(p, x, fn)
    theta = p.flat()
    fd = np.array([(forward_value(p.with_flat(theta + 1e-6 * e), x)[0] ** 2
                    - forward_value(p.with_flat(theta - 1e-6 * e), x)[0] ** 2) / 2e-6 for e in np.eye(p.size)])
    assert value == pytest.approx(forward_value(p, x)[0] ** 2)
    assert np.allclose(grad, fd, rtol=1e-6, atol=1e-9)


def test_constant_loss_has_zero_gradient():
    p = _randomized(2, 3, 1)
    x = np.zeros((4, 2))
    _, grad = param_gradient(p, x, lambda jet: (1.0, Jet.zeros(len(jet))))
    assert np.all(grad == 0.0)


@settings(max_examples=10)
@given(st.integers(0, 2**32 - 1))
def test_backward_is_adjoint_of_directional_derivative(seed):
    """<cotangent, d jet[theta + t v]/dt> equals <backward(cotangent), v> for every jet component."""
    rng = np.random.default_rng(seed)
    p = _randomized(3, 5, int(seed % 1000))
    x = rng.uniform(0, 1, size=(12, 2))
    cot = Jet(rng.normal(size=12), rng.normal(size=(12, 2)), rng.normal(size=(12, 3)))
    v = rng.normal(size=p.size)
    pair = lambda th: (lambda j: np.sum(cot.value * j.value) + np.sum(cot.grad * j.grad)
                       + np.sum(cot.hess * j.hess))(forward_jet(p.with_flat(th), x))
    t = 1e-6
    fd = (pair(p.flat() + t * v) - pair(p.flat() - t * v)) / (2 * t)
    assert np.dot(backward(p, x, cot), v) == pytest.approx(fd, rel=1e-6, abs=1e-8)


def test_loss_wb_parameter_gradient_componentwise():
    p = _randomized(2, 4, 3)
    obj = Loss(LossSpec("wb"), manufactured("smooth_square"), make_crisscross_unit_square(1)).flat_objective(p)
    theta = p.flat()
    _, g = obj(theta)
    fd = np.array([(obj(theta + 1e-6 * e)[0] - obj(theta - 1e-6 * e)[0]) / 2e-6 for e in np.eye(p.size)])
    big = np.abs(g) > 1e-8
    assert np.all(np.abs(fd - g)[big] <= 1e-4 * np.abs(g)[big])


def test_as_field_and_hessian_symmetry():
    p = _randomized(2, 4, 3)
    x = np.random.default_rng(0).uniform(size=(6, 2))
    jet = as_field(p)(x)
    H = jet.hess_matrix()
    assert np.array_equal(H, np.swapaxes(H, 1, 2))
    assert np.array_equal(jet.value, forward_jet(p, x).value)


def test_checkpoint_round_trip(tmp_path):
    p = _randomized(3, 4, 9)
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, p, seed=9, iteration=12, note="hello")
    q, header = load_checkpoint(path)
    assert np.array_equal(q.flat(), p.flat()) and q.widths == p.widths
    assert header["seed"] == 9 and header["iteration"] == 12 and header["note"] == "hello"
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(path)
    (tmp_path / "junk").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "junk")
