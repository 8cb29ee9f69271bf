"""Fully connected tanh network R^2 -> R with exact input derivatives.

The forward pass carries, for every layer, a stack of six rows per point:
the value, the two first derivatives and the three independent second
derivatives ``(xx, xy, yy)`` with respect to the input point.  Affine layers
act on all rows linearly (the bias only enters the value row); tanh layers
apply the first- and second-order chain rule.  The reverse pass runs the
same recursion backwards to give parameter gradients of any scalar that
depends on these jets.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .trialfn import Jet

__all__ = [
    "MlpParams",
    "init",
    "n_params",
    "forward_jet",
    "forward_jet_cached",
    "forward_value",
    "forward_value_grad",
    "backward",
    "param_gradient",
    "as_field",
    "save_checkpoint",
    "load_checkpoint",
]

# pairs (i, j) of the stored Hessian entries
_HESS_PAIRS = ((0, 0), (0, 1), (1, 1))
_MAGIC = b"NNAPOST-CKPT 1\n"


def n_params(L: int, N: int) -> int:
    """Parameter count of an ``L``-hidden-layer network of width ``N``."""
    return (2 * N + N) + (L - 1) * (N * N + N) + (N + 1)


@dataclass
class MlpParams:
    """Weights ``W[l]`` of shape ``(out, in)`` and biases ``b[l]`` of shape ``(out,)``.

    The flat vector lists layers in order; within a layer, the row-major
    weights come before the bias.
    """

    widths: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def size(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    @property
    def depth(self) -> int:
        """Number of hidden layers."""
        return len(self.widths) - 2

    def flat(self) -> np.ndarray:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts += [W.ravel(), b]
        return np.concatenate(parts)

    def with_flat(self, theta: np.ndarray) -> "MlpParams":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got shape {theta.shape}")
        weights, biases, pos = [], [], 0
        for W, b in zip(self.weights, self.biases):
            weights.append(theta[pos:pos + W.size].reshape(W.shape).copy())
            pos += W.size
            biases.append(theta[pos:pos + b.size].copy())
            pos += b.size
        return MlpParams(self.widths, weights, biases)

    @staticmethod
    def from_flat(widths, theta) -> "MlpParams":
        widths = tuple(int(w) for w in widths)
        shell = MlpParams(
            widths,
            [np.zeros((o, i)) for i, o in zip(widths[:-1], widths[1:])],
            [np.zeros(o) for o in widths[1:]],
        )
        return shell.with_flat(theta)


def init(L: int, N: int, seed: int = 0) -> MlpParams:
    """Glorot-uniform weights and zero biases, reproducible from ``seed``."""
    if L < 1 or N < 1:
        raise ValueError("need L >= 1 and N >= 1")
    widths = (2,) + (N,) * L + (1,)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(widths, weights, biases)


def _input_stack(x: np.ndarray) -> np.ndarray:
    """Jet of the coordinate map, component-major: ``(6, n, 2)``."""
    n = len(x)
    S = np.zeros((6, n, 2))
    S[0] = x
    S[1, :, 0] = 1.0
    S[2, :, 1] = 1.0
    return S


def _tanh_jet(Z: np.ndarray):
    """Apply tanh to a stacked jet ``(6, n, w)``; also return ``tanh``, ``tanh'`` and ``tanh''``."""
    a = np.tanh(Z[0])
    s = 1.0 - a * a
    d = -2.0 * a * s
    out = np.empty_like(Z)
    out[0] = a
    np.multiply(s, Z[1:], out=out[1:])
    for k, (i, j) in enumerate(_HESS_PAIRS):
        out[3 + k] += d * Z[1 + i] * Z[1 + j]
    return out, (a, s, d)


def _forward(params: MlpParams, x: np.ndarray, keep: bool):
    """Stacked output jet ``(6, n)`` and, with ``keep``, the per-layer cache for :func:`backward`."""
    S = _input_stack(np.asarray(x, dtype=float))
    cache = []
    last = len(params.weights) - 1
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        Z = S @ W.T
        Z[0] += b
        if l == last:
            if keep:
                cache.append((S, Z, None))
            S = Z
        else:
            A, act = _tanh_jet(Z)
            if keep:
                cache.append((S, Z, act))
            S = A
    return S[:, :, 0], cache


def forward_jet(params: MlpParams, x: np.ndarray) -> Jet:
    """Value, gradient and Hessian of the network output at points ``x`` (n, 2)."""
    out, _ = _forward(params, x, keep=False)
    return _as_jet(out)


def _as_jet(out: np.ndarray) -> Jet:
    return Jet(out[0].copy(), out[1:3].T.copy(), out[3:6].T.copy())


def forward_jet_cached(params: MlpParams, x: np.ndarray):
    """:func:`forward_jet` plus the cache that lets :func:`backward` skip the forward pass."""
    out, cache = _forward(params, x, keep=True)
    return _as_jet(out), cache


def forward_value(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Plain forward pass (value only), for error evaluation."""
    a = np.asarray(x, dtype=float)
    last = len(params.weights) - 1
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        a = a @ W.T + b
        if l != last:
            a = np.tanh(a)
    return a[:, 0]


def forward_value_grad(params: MlpParams, x: np.ndarray):
    """Value ``(n,)`` and input gradient ``(n, 2)``; cheaper than the full jet."""
    S = _input_stack(np.asarray(x, dtype=float))[:3]
    last = len(params.weights) - 1
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        S = S @ W.T
        S[0] += b
        if l != last:
            a = np.tanh(S[0])
            S[0] = a
            S[1:] *= 1.0 - a * a
    return S[0, :, 0].copy(), S[1:, :, 0].T.copy()


def backward(params: MlpParams, x: np.ndarray, cotangent: Jet, cache=None) -> np.ndarray:
    """Flat parameter gradient of ``<cotangent, forward_jet(params, x)>``.

    ``cache`` from :func:`forward_jet_cached` at the same parameters and
    points avoids recomputing the forward pass.
    """
    if cache is None:
        _, cache = _forward(params, x, keep=True)
    n = len(cotangent.value)
    G = np.empty((6, n, 1))
    G[0, :, 0] = cotangent.value
    G[1:3, :, 0] = cotangent.grad.T
    G[3:6, :, 0] = cotangent.hess.T
    grads = []
    last = len(params.weights) - 1
    for l in range(last, -1, -1):
        S, Z, act = cache[l]
        W = params.weights[l]
        if l != last:
            G = _tanh_backward(Z, act, G)
        gW = G.reshape(-1, G.shape[2]).T @ S.reshape(-1, S.shape[2])
        gb = G[0].sum(axis=0)
        grads.append((gW, gb))
        if l > 0:
            G = G @ W
    parts = []
    for gW, gb in reversed(grads):
        parts += [gW.ravel(), gb]
    return np.concatenate(parts)


def _tanh_backward(Z: np.ndarray, act, Abar: np.ndarray) -> np.ndarray:
    """Pull the cotangent of a tanh layer's output stack back to its input stack."""
    a, s, d = act
    Zbar = s * Abar
    sbar = np.einsum("knw,knw->nw", Abar[1:], Z[1:])
    dbar = np.zeros_like(a)
    for k, (i, j) in enumerate(_HESS_PAIRS):
        hb = Abar[3 + k]
        dhb = d * hb
        dbar += hb * Z[1 + i] * Z[1 + j]
        Zbar[1 + i] += dhb * Z[1 + j]
        Zbar[1 + j] += dhb * Z[1 + i]
    # a' = s, s' = -2 a s = d, d' = -2 (s s + a d)
    Zbar[0] = Abar[0] * s + sbar * d - 2.0 * dbar * (s * s + a * d)
    return Zbar


def param_gradient(params: MlpParams, x: np.ndarray, loss_fn):
    """Value and flat parameter gradient of ``loss_fn(forward_jet(params, x))``.

    ``loss_fn`` maps the output :class:`Jet` to ``(value, cotangent)`` where
    the cotangent is the derivative of the value with respect to that jet.
    """
    value, cot = loss_fn(forward_jet(params, x))
    return value, backward(params, x, cot)


def as_field(params: MlpParams):
    """The network as a smooth field ``x -> Jet``."""
    return lambda x: forward_jet(params, x)


# -------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: MlpParams, seed: int | None = None, iteration: int = 0, **extra):
    """Write a one-line JSON header followed by the flat float64 parameters."""
    header = {"widths": list(params.widths), "seed": seed, "iteration": int(iteration),
              "n_params": params.size, "dtype": "<f8"}
    header.update(extra)
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(json.dumps(header).encode() + b"\n")
    buf.write(params.flat().astype("<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Return ``(params, header)`` from :func:`save_checkpoint` output."""
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path} is not a checkpoint file")
    rest = raw[len(_MAGIC):]
    line_end = rest.index(b"\n")
    header = json.loads(rest[:line_end].decode())
    theta = np.frombuffer(rest[line_end + 1:], dtype="<f8")
    if theta.size != header["n_params"]:
        raise ValueError("checkpoint is truncated")
    return MlpParams.from_flat(header["widths"], theta.copy()), header
