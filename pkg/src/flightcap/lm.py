"""Levenberg-Marquardt for sparse or dense nonlinear least squares."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from flightcap.config import SolveConfig
from flightcap.errors import FlightCapError, NonFiniteResidual, NonPositiveDepth

log = logging.getLogger(__name__)

CONVERGED_GRADIENT = "converged_gradient"
CONVERGED_STEP = "converged_step"
ITERATION_CAP = "iteration_cap"
DAMPING_LIMIT = "damping_limit"

# normal equations larger than this are factorised sparsely
DENSE_LIMIT = 4000
MAX_DAMPING = 1e16


@dataclass
class SolveReport:
    objective: float = 0.0
    initial_objective: float = 0.0
    energies: dict = field(default_factory=dict)
    weighted_energies: dict = field(default_factory=dict)
    iterations: int = 0
    status: str = ""
    gradient_norm: float = float("nan")
    f_z_ambiguous: bool = False
    ambiguity_ratio: float = float("nan")
    gravity_norm_deviation: float = 0.0
    wall_time: float = 0.0
    n_params: int = 0
    n_residuals: int = 0
    history: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status in (CONVERGED_GRADIENT, CONVERGED_STEP, DAMPING_LIMIT)

    @property
    def rms(self) -> float:
        if self.n_residuals == 0:
            return 0.0
        return float(np.sqrt(self.objective / self.n_residuals))

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "initial_objective": self.initial_objective,
            "energies": dict(self.energies),
            "weighted_energies": dict(self.weighted_energies),
            "iterations": self.iterations,
            "status": self.status,
            "converged": self.converged,
            "gradient_norm": self.gradient_norm,
            "f_z_ambiguous": self.f_z_ambiguous,
            "ambiguity_ratio": self.ambiguity_ratio,
            "gravity_norm_deviation": self.gravity_norm_deviation,
            "wall_time_s": self.wall_time,
            "n_params": self.n_params,
            "n_residuals": self.n_residuals,
            "notes": list(self.notes),
        }


def finite_difference_jacobian(residual_fn, x, step=1e-6):
    """Central differences with step ``step * max(1, |x_i|)``."""
    x = np.asarray(x, dtype=float)
    r0 = np.asarray(residual_fn(x))
    jac = np.empty((r0.size, x.size))
    for i in range(x.size):
        h = step * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        jac[:, i] = (np.asarray(residual_fn(xp)) - np.asarray(residual_fn(xm))) / (2 * h)
    return jac


def _evaluate(residual_fn, x):
    try:
        r = np.asarray(residual_fn(x), dtype=float)
    except (NonPositiveDepth, FloatingPointError):
        return None
    if not np.all(np.isfinite(r)):
        return None
    return r


def _normal_equations(jac, r):
    if scipy.sparse.issparse(jac):
        jac = jac.tocsr()
        a = (jac.T @ jac)
        g = jac.T @ r
        if a.shape[0] <= DENSE_LIMIT:
            a = a.toarray()
        return a, np.asarray(g).ravel()
    return jac.T @ jac, jac.T @ r


def _solve_damped(a, g, damping, diag):
    if scipy.sparse.issparse(a):
        m = (a + scipy.sparse.diags(damping * diag)).tocsc()
        try:
            step = scipy.sparse.linalg.spsolve(m, -g)
        except RuntimeError:
            return None
        return step if np.all(np.isfinite(step)) else None
    m = a + np.diag(damping * diag)
    try:
        c = scipy.linalg.cho_factor(m, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        return None
    step = scipy.linalg.cho_solve(c, -g, check_finite=False)
    return step if np.all(np.isfinite(step)) else None


def minimize(
    residual_fn: Callable[[np.ndarray], np.ndarray],
    jacobian_fn: Optional[Callable[[np.ndarray], object]],
    x0,
    config: SolveConfig | None = None,
    callback: Optional[Callable[[np.ndarray], None]] = None,
):
    """Minimise ``||residual_fn(x)||^2`` by Levenberg-Marquardt.

    ``jacobian_fn`` may return a dense array or a scipy sparse matrix; pass
    None to use central finite differences. Damping is Marquardt-scaled
    (by the diagonal of J^T J) and updated multiplicatively. ``callback`` is
    invoked with every accepted iterate, including ``x0``.

    Returns ``(x, SolveReport)``. Hitting the iteration cap is reported in
    ``report.status``, not raised.
    """
    config = config or SolveConfig()
    t0 = time.perf_counter()
    x = np.array(x0, dtype=float)
    r = _evaluate(residual_fn, x)
    if r is None:
        raise NonFiniteResidual("residual is not finite at the initial point", x=x.copy())
    if jacobian_fn is None:
        def jacobian_fn(z):
            return finite_difference_jacobian(residual_fn, z)

    cost = float(r @ r)
    report = SolveReport(initial_objective=cost, n_params=x.size, n_residuals=r.size)
    report.history.append(cost)
    if callback is not None:
        callback(x)

    damping = config.initial_damping
    status = ITERATION_CAP
    it = 0
    grad_norm = float("nan")
    while it < config.max_iterations:
        jac = jacobian_fn(x)
        a, g = _normal_equations(jac, r)
        grad_norm = float(np.max(np.abs(g))) if g.size else 0.0
        if grad_norm <= config.gradient_tolerance:
            status = CONVERGED_GRADIENT
            break
        it += 1
        diag = a.diagonal() if scipy.sparse.issparse(a) else np.diag(a).copy()
        diag = np.maximum(diag, 1e-12 * max(float(diag.max()), 1.0))

        accepted = False
        while damping <= MAX_DAMPING:
            step = _solve_damped(a, g, damping, diag)
            if step is None:
                damping *= config.damping_up
                continue
            small = np.linalg.norm(step) <= config.step_tolerance * (np.linalg.norm(x) + config.step_tolerance)
            x_new = x + step
            r_new = _evaluate(residual_fn, x_new)
            if r_new is not None and float(r_new @ r_new) < cost:
                x, r, cost = x_new, r_new, float(r_new @ r_new)
                damping = max(damping / config.damping_down, 1e-15)
                report.history.append(cost)
                if callback is not None:
                    callback(x)
                accepted = True
            else:
                damping *= config.damping_up
            if small:
                status = CONVERGED_STEP
                break
            if accepted:
                break
        else:
            status = DAMPING_LIMIT
        if status in (CONVERGED_STEP, DAMPING_LIMIT):
            break
    else:
        jac = jacobian_fn(x)
        _, g = _normal_equations(jac, r)
        grad_norm = float(np.max(np.abs(g))) if g.size else 0.0
        if grad_norm <= config.gradient_tolerance:
            status = CONVERGED_GRADIENT

    if status == ITERATION_CAP:
        log.warning("iteration cap %d reached with objective %.6g", config.max_iterations, cost)
    report.objective = cost
    report.iterations = it
    report.status = status
    report.gradient_norm = grad_norm
    report.wall_time = time.perf_counter() - t0
    return x, report


__all__ = [
    "CONVERGED_GRADIENT",
    "CONVERGED_STEP",
    "DAMPING_LIMIT",
    "FlightCapError",
    "ITERATION_CAP",
    "SolveReport",
    "finite_difference_jacobian",
    "minimize",
]
