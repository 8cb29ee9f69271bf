"""Training with quadrature-driven local mesh refinement.

After every optimizer step the loss ``L`` (standard rules) and its companion
``L_hat`` (high-order rules) are compared.  If they differ by more than
``tau1 * L_hat``, the elements whose relative local discrepancy exceeds
``tau2`` times the largest one are refined by newest-vertex bisection and the
optimizer history is cleared.  With refinement disabled the loop is plain
L-BFGS training on a fixed mesh.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import ErrorEvaluator, Loss, LossSpec, ratio_value
from .mesh import Mesh, refine_nvb
from .network import MlpParams
from .optimizer import LbfgsState, step
from .quadrature import seg_rule, tri_rule
from .trialfn import ProblemData

__all__ = [
    "TELEMETRY_COLUMNS",
    "AdaptConfig",
    "TrainResult",
    "mark_elements",
    "train_adaptive",
]

TELEMETRY_COLUMNS = (
    "iter", "wall_time_s", "loss", "eta_omega", "rho_omega", "eta_gamma", "rho_gamma",
    "h1_error", "ratio", "n_elements", "n_quad_volume", "n_quad_boundary", "refined_flag",
)


@dataclass
class AdaptConfig:
    """Parameters of the training loop.

    ``tau1`` and ``tau2`` are the global and local discrepancy thresholds;
    training stops after ``max_iterations`` or once the loss drops below
    ``loss_threshold``.  No refinement happens once the mesh has
    ``max_elements`` elements, or at all when ``enabled`` is false.
    """

    tau1: float = 0.3
    tau2: float = 0.7
    max_iterations: int = 1000
    loss_threshold: float | None = None
    max_elements: int = 20000
    enabled: bool = True
    floor: float = 1e-14

    def __post_init__(self):
        for name in ("tau1", "tau2"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")


@dataclass
class TrainResult:
    params: MlpParams
    mesh: Mesh
    telemetry: list = field(default_factory=list)
    refinements: list = field(default_factory=list)
    cap_reached: bool = False
    state: LbfgsState | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.telemetry], dtype=float)


def mark_elements(local: np.ndarray, local_hat: np.ndarray, tau2: float, floor: float = 1e-14):
    """Maximum-strategy marking on relative local discrepancies.

    Elements with ``local_hat <= floor * sum(local_hat)`` are ignored.
    Returns ``(marked indices, M)``.
    """
    local = np.asarray(local, dtype=float)
    local_hat = np.asarray(local_hat, dtype=float)
    valid = local_hat > floor * max(float(local_hat.sum()), 0.0)
    if not valid.any():
        return np.zeros(0, dtype=np.int64), 0.0
    rel = np.zeros_like(local)
    rel[valid] = np.abs(local[valid] - local_hat[valid]) / local_hat[valid]
    M = float(rel[valid].max())
    marked = np.flatnonzero(valid & (np.abs(local - local_hat) > tau2 * local_hat * M))
    return marked, M


def _parts(report):
    if hasattr(report, "eta_omega"):
        return report.eta_omega, report.rho_omega, report.eta_gamma, report.rho_gamma
    return (float("nan"),) * 4


def train_adaptive(
    params: MlpParams,
    mesh: Mesh,
    spec: LossSpec,
    problem: ProblemData,
    config: AdaptConfig,
    error: ErrorEvaluator | None = None,
    mask=None,
    csv_path=None,
    rules=None,
    high_rules=None,
) -> TrainResult:
    """Train ``params`` on ``mesh`` and refine the mesh where quadrature is inaccurate.

    Parameters
    ----------
    error : ErrorEvaluator, optional
        Used for the ``h1_error`` and ``ratio`` telemetry columns.
    mask : callable, optional
        Train ``mask * u_theta`` instead of ``u_theta``.
    csv_path : path, optional
        Telemetry is appended row by row to this file.
    rules, high_rules : (QuadRule, QuadRule), optional
        Standard and high-order ``(volume, boundary)`` rule pairs.
    """
    if config.enabled and not spec.estimator_based:
        raise ValueError("adaptive refinement needs an estimator-based loss")
    rules = rules or (tri_rule("standard"), seg_rule("standard"))
    high_rules = high_rules or (tri_rule("high"), seg_rule("high"))

    def build(m):
        lo = Loss(spec, problem, m, *rules, mask=mask)
        hi = Loss(spec, problem, m, *high_rules, mask=mask) if config.enabled else None
        return lo, hi

    loss, loss_hat = build(mesh)
    state = LbfgsState()
    theta = params.flat()
    result = TrainResult(params, mesh, state=state)
    writer = handle = None
    if csv_path is not None:
        handle = open(csv_path, "w", newline="")
        writer = csv.DictWriter(handle, fieldnames=TELEMETRY_COLUMNS, extrasaction="ignore")
        writer.writeheader()
    start = time.monotonic()
    try:
        for it in range(1, config.max_iterations + 1):
            if not spec.estimator_based:
                loss.resample()
                state.f = state.g = None
            objective = loss.flat_objective(params)
            theta, state, alpha, value = step(state, theta, objective)
            if state.failed:
                state.s.clear()
                state.y.clear()
                theta, state, alpha, value = step(state, theta, objective)
            current = params.with_flat(theta)
            if alpha > 0.0:
                report = loss.last_report
            else:
                value, report = loss.evaluate(current)

            n_el = mesh.n_elements
            n_qv, n_qb = loss.n_volume, loss.n_boundary
            refined = False
            value_hat = float("nan")
            if config.enabled:
                value_hat, report_hat = loss_hat.evaluate(current)
                if abs(value - value_hat) > config.tau1 * value_hat:
                    if mesh.n_elements >= config.max_elements:
                        result.cap_reached = True
                    else:
                        w = spec.weights
                        marked, M = mark_elements(report.element_sum(w), report_hat.element_sum(w),
                                                  config.tau2, config.floor)
                        if len(marked):
                            mesh = refine_nvb(mesh, marked)
                            loss, loss_hat = build(mesh)
                            state.reset()
                            refined = True
                            result.refinements.append(
                                {"iter": it, "n_marked": int(len(marked)), "M": M,
                                 "n_elements": mesh.n_elements}
                            )

            err = error(current) if error is not None else float("nan")
            eo, ro, eg, rg = _parts(report)
            row = {
                "iter": it,
                "wall_time_s": time.monotonic() - start,
                "loss": value,
                "eta_omega": eo, "rho_omega": ro, "eta_gamma": eg, "rho_gamma": rg,
                "h1_error": err,
                "ratio": ratio_value(value, err) if error is not None else float("nan"),
                "n_elements": n_el,
                "n_quad_volume": n_qv,
                "n_quad_boundary": n_qb,
                "refined_flag": int(refined),
                "loss_hat": value_hat,
            }
            result.telemetry.append(row)
            if writer is not None:
                writer.writerow(row)
                handle.flush()
            if config.loss_threshold is not None and value < config.loss_threshold:
                break
    finally:
        if handle is not None:
            handle.close()
    result.params = params.with_flat(theta)
    result.mesh = mesh
    result.state = state
    return result
