"""Limited-memory BFGS with a backtracking Armijo line search."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = ["LbfgsState", "step", "minimize"]

LossAndGrad = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass
class LbfgsState:
    """Curvature history and cached loss/gradient at the current iterate.

    Attributes
    ----------
    memory : int
        Maximal number of stored ``(s, y)`` pairs.
    c1 : float
        Armijo sufficient-decrease constant.
    max_trials : int
        Step halvings before the line search gives up.
    """

    memory: int = 10
    c1: float = 1e-4
    max_trials: int = 30
    s: deque = field(default_factory=deque)
    y: deque = field(default_factory=deque)
    f: float | None = None
    g: np.ndarray | None = None
    iteration: int = 0
    n_evals: int = 0
    n_skipped: int = 0
    last_trials: int = 0
    failed: bool = False

    def reset(self) -> None:
        """Forget the history and the cached loss (the objective has changed)."""
        self.s.clear()
        self.y.clear()
        self.f = None
        self.g = None

    def direction(self, g: np.ndarray) -> np.ndarray:
        """Two-loop recursion: approximate ``-H^{-1} g``."""
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(self.s), reversed(self.y)):
            rho = 1.0 / np.dot(y, s)
            a = rho * np.dot(s, q)
            q -= a * y
            alphas.append((rho, a))
        if self.s:
            s, y = self.s[-1], self.y[-1]
            q *= np.dot(s, y) / np.dot(y, y)
        else:
            q /= max(np.linalg.norm(g), 1.0)
        for (s, y), (rho, a) in zip(zip(self.s, self.y), reversed(alphas)):
            b = rho * np.dot(y, q)
            q += (a - b) * s
        return -q


def step(state: LbfgsState, x: np.ndarray, loss_and_grad: LossAndGrad):
    """One L-BFGS iteration.

    Returns
    -------
    x_new : ndarray
    state : LbfgsState
        Updated in place and returned for convenience.
    alpha : float
        Accepted step length; 0 if the iterate did not move.
    f : float
        Loss at ``x_new``.
    """
    x = np.asarray(x, dtype=float)
    if state.g is None:
        state.f, state.g = loss_and_grad(x)
        state.n_evals += 1
        if not np.isfinite(state.f):
            raise FloatingPointError("loss is not finite at the current parameters")
    f, g = state.f, state.g
    state.iteration += 1
    state.failed = False
    if not np.any(g):
        state.last_trials = 0
        return x, state, 0.0, f

    d = state.direction(g)
    slope = float(np.dot(g, d))
    if not slope < 0.0:
        state.s.clear()
        state.y.clear()
        d = state.direction(g)
        slope = float(np.dot(g, d))

    alpha = 1.0
    for trial in range(1, state.max_trials + 1):
        x_new = x + alpha * d
        f_new, g_new = loss_and_grad(x_new)
        state.n_evals += 1
        if np.isfinite(f_new) and f_new <= f + state.c1 * alpha * slope:
            break
        alpha *= 0.5
    else:
        state.failed = True
        state.last_trials = state.max_trials
        return x, state, 0.0, f
    state.last_trials = trial

    s, y = x_new - x, g_new - g
    sy = float(np.dot(s, y))
    if sy > 1e-12 * float(np.dot(y, y)) and sy > 0.0:
        state.s.append(s)
        state.y.append(y)
        if len(state.s) > state.memory:
            state.s.popleft()
            state.y.popleft()
    else:
        state.n_skipped += 1
    state.f, state.g = f_new, g_new
    return x_new, state, alpha, f_new


def minimize(loss_and_grad: LossAndGrad, x0, iterations: int, state: LbfgsState | None = None):
    """Run ``iterations`` steps; on a line-search failure restart from steepest descent once."""
    state = state or LbfgsState()
    x = np.asarray(x0, dtype=float)
    history = []
    for _ in range(iterations):
        x, state, alpha, f = step(state, x, loss_and_grad)
        if state.failed:
            state.s.clear()
            state.y.clear()
            x, state, alpha, f = step(state, x, loss_and_grad)
        history.append(f)
    return x, state, history
