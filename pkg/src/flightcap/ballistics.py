"""Projectile forward model and object-only trajectory recovery.

A free flight is ``B(t) = b0 + u t + g t^2 / 2`` observed through a pinhole
camera. With ``||g||`` fixed to 9.81 m/s^2 the reprojection problem has a
unique metric solution, so recovered positions are in meters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from flightcap.camera import CameraIntrinsics, backproject_ray, project, project_with_jacobian
from flightcap.config import GRAVITY_MAGNITUDE, DofMode, SolveConfig
from flightcap.errors import (
    InsufficientObservations,
    ObjectBehindCamera,
    SingularConfiguration,
)
from flightcap.lm import SolveReport, minimize

log = logging.getLogger(__name__)

DEFAULT_GRAVITY = np.array([0.0, GRAVITY_MAGNITUDE, 0.0])
# f is optimised in kilopixels so its column is comparable to the metric ones
F_SCALE = 1000.0


@dataclass(frozen=True)
class BallisticParams:
    b0: np.ndarray
    u: np.ndarray
    g: np.ndarray = field(default_factory=lambda: DEFAULT_GRAVITY.copy())

    def __post_init__(self):
        for name in ("b0", "u", "g"):
            v = np.array(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite, got {v}")
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.b0, self.u, self.g])


def position_at(p: BallisticParams, t):
    """Object position at time(s) ``t`` seconds after release."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("time must be non-negative")
    tt = t[..., None]
    return p.b0 + p.u * tt + 0.5 * p.g * tt**2


@dataclass
class ObservationTrack:
    """2D object centres of one flight, indexed by frame from release."""

    points: np.ndarray
    frame_rate: float
    frame_indices: Optional[np.ndarray] = None
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        n = len(self.points)
        if not self.frame_rate > 0:
            raise ValueError(f"frame rate must be positive, got {self.frame_rate}")
        if self.frame_indices is None:
            self.frame_indices = np.arange(n)
        self.frame_indices = np.asarray(self.frame_indices, dtype=int).reshape(-1)
        if len(self.frame_indices) != n:
            raise ValueError("frame_indices and points differ in length")
        if n > 1 and np.any(np.diff(self.frame_indices) <= 0):
            raise ValueError("frame indices must be strictly increasing")
        if self.valid is None:
            self.valid = np.all(np.isfinite(self.points), axis=1)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(-1) & np.all(np.isfinite(self.points), axis=1)
        if len(self.valid) != n:
            raise ValueError("valid mask and points differ in length")

    @property
    def times(self) -> np.ndarray:
        return self.frame_indices / self.frame_rate

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def __len__(self):
        return len(self.points)


class TrajectoryFit(NamedTuple):
    params: BallisticParams
    f: Optional[float]
    report: SolveReport


def gravity_from_direction(v: np.ndarray):
    """Map a free 3-vector to a gravity vector of norm 9.81 and its Jacobian."""
    n = np.linalg.norm(v)
    d = v / n
    g = GRAVITY_MAGNITUDE * d
    dg_dv = GRAVITY_MAGNITUDE * (np.eye(3) - np.outer(d, d)) / n
    return g, dg_dv


def reprojection_block(b0, u, g, f, c, t, obs):
    """Residuals ``obs - project(B(t))`` and their partial derivatives.

    Returns ``(res, d_b0, d_u, d_g, d_f)`` with res of shape (n, 2), the
    position-type partials of shape (n, 2, 3) and d_f of shape (n, 2).
    """
    tt = t[:, None]
    pts = b0 + u * tt + 0.5 * g * tt**2
    uv, jp, jf = project_with_jacobian(pts, f, c)
    res = obs - uv
    d_b0 = -jp
    d_u = -jp * t[:, None, None]
    d_g = -jp * (0.5 * t**2)[:, None, None]
    return res, d_b0, d_u, d_g, -jf


def _check_gravity(g) -> np.ndarray:
    g = np.asarray(g, dtype=float).reshape(3)
    if abs(np.linalg.norm(g) - GRAVITY_MAGNITUDE) > 1e-9:
        raise ValueError(f"gravity must have norm {GRAVITY_MAGNITUDE}, got {np.linalg.norm(g)!r}")
    return g


def _cleared_system(times, pts, f, c, g):
    """Rows of the linear system obtained by multiplying out the projection denominators."""
    rows = []
    rhs = []
    for t, (x, y) in zip(times, pts):
        for axis, q, cq in ((0, x, c[0]), (1, y, c[1])):
            a = np.zeros(6)
            dq = q - cq
            a[axis] = -f
            a[2] = dq
            a[3 + axis] = -f * t
            a[5] = dq * t
            rows.append(a)
            rhs.append(0.5 * t**2 * (f * g[axis] - dq * g[2]))
    return np.array(rows), np.array(rhs)


def solve_closed_form_6dof(track: ObservationTrack, k: CameraIntrinsics, g) -> BallisticParams:
    """Exact (b0, u) from exactly three observations with known gravity and f."""
    g = _check_gravity(g)
    if track.n_valid != 3:
        raise ValueError(f"closed-form solve needs exactly 3 valid observations, got {track.n_valid}")
    t = track.times[track.valid]
    a, b = _cleared_system(t, track.points[track.valid], k.f, k.c, g)
    # columns have mixed scale (f vs pixel offsets); normalise before the rank test
    scale = np.linalg.norm(a, axis=0)
    scale[scale == 0] = 1.0
    an = a / scale
    sv = np.linalg.svd(an, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise SingularConfiguration(f"observation rays are degenerate (singular values {sv})")
    sol = np.linalg.solve(an, b) / scale
    return BallisticParams(sol[:3], sol[3:], g)


def linear_initialisation(track: ObservationTrack, k: CameraIntrinsics, g) -> BallisticParams:
    """Least-squares (b0, u) of the cleared-denominator system for any N >= 3."""
    t = track.times[track.valid]
    a, b = _cleared_system(t, track.points[track.valid], k.f, k.c, g)
    scale = np.linalg.norm(a, axis=0)
    scale[scale == 0] = 1.0
    sol, *_ = np.linalg.lstsq(a / scale, b, rcond=None)
    sol = sol / scale
    return BallisticParams(sol[:3], sol[3:], g)


def depth_initialisation(track: ObservationTrack, k: CameraIntrinsics, g, depth: float) -> BallisticParams:
    """Place the first three observations at a fixed distance and difference them."""
    idx = np.flatnonzero(track.valid)[:3]
    rays = backproject_ray(track.points[idx], k) * depth
    t = track.times[idx]
    b0 = rays[0]
    # second-order one-sided difference on possibly uneven spacing
    if len(idx) >= 3:
        u = np.polyfit(t - t[0], rays, 2)[1]
    else:
        u = (rays[1] - rays[0]) / (t[1] - t[0])
    # rewind to t = 0 of the frame indexing
    t0 = t[0]
    b0 = b0 - u * t0 - 0.5 * np.asarray(g) * t0**2
    return BallisticParams(b0, u, g)


def _rest_initialisation(track: ObservationTrack, k: CameraIntrinsics, g, depth: float) -> BallisticParams:
    """Object at rest at ``depth`` along the first observed ray."""
    i = np.flatnonzero(track.valid)[0]
    ray = backproject_ray(track.points[i], k)
    t0 = track.times[i]
    return BallisticParams(ray * depth / ray[2] - 0.5 * np.asarray(g) * t0**2, np.zeros(3), g)


def _feasible(prob, x) -> bool:
    try:
        return bool(np.all(np.isfinite(prob.residuals(x))))
    except (ValueError, FloatingPointError):
        return False


class _TrajectoryProblem:
    """Packs (b0, u[, gravity direction][, f]) into a scaled parameter vector."""

    def __init__(self, track, k, mode, g_fixed, f_fixed):
        self.track = track
        self.k = k
        self.mode = mode
        self.g_fixed = g_fixed
        self.f_fixed = f_fixed
        self.t = track.times[track.valid]
        self.obs = track.points[track.valid]
        self.weights = np.ones(len(self.t))
        self.n = 6 + (3 if mode.estimates_g else 0) + (1 if mode.estimates_f else 0)

    def pack(self, p: BallisticParams, f: float) -> np.ndarray:
        parts = [p.b0, p.u]
        if self.mode.estimates_g:
            parts.append(p.g / GRAVITY_MAGNITUDE)
        if self.mode.estimates_f:
            parts.append([f / F_SCALE])
        return np.concatenate([np.ravel(q) for q in parts])

    def unpack(self, x):
        b0, u = x[:3], x[3:6]
        i = 6
        if self.mode.estimates_g:
            g, dg_dv = gravity_from_direction(x[i:i + 3])
            i += 3
        else:
            g, dg_dv = self.g_fixed, None
        f = x[i] * F_SCALE if self.mode.estimates_f else self.f_fixed
        return b0, u, g, dg_dv, f

    def params(self, x) -> BallisticParams:
        b0, u, g, _, _ = self.unpack(x)
        return BallisticParams(b0, u, g)

    def focal(self, x) -> float:
        return self.unpack(x)[4]

    def residuals(self, x):
        b0, u, g, _, f = self.unpack(x)
        res, *_ = reprojection_block(b0, u, g, f, self.k.c, self.t, self.obs)
        return (res * np.sqrt(self.weights)[:, None]).ravel()

    def jacobian(self, x):
        b0, u, g, dg_dv, f = self.unpack(x)
        _, d_b0, d_u, d_g, d_f = reprojection_block(b0, u, g, f, self.k.c, self.t, self.obs)
        cols = [d_b0, d_u]
        if self.mode.estimates_g:
            cols.append(d_g @ dg_dv)
        if self.mode.estimates_f:
            cols.append(d_f[:, :, None] * F_SCALE)
        jac = np.concatenate(cols, axis=2) * np.sqrt(self.weights)[:, None, None]
        return jac.reshape(-1, self.n)


def focal_ambiguity_ratio(jac: np.ndarray, f_col: int) -> float:
    """Relative part of the f column not explained by the other columns.

    Zero means a perturbation of f can be exactly compensated by the other
    unknowns (the f/Z ambiguity); values near one mean f is well determined.
    """
    jf = jac[:, f_col]
    nf = np.linalg.norm(jf)
    if nf == 0:
        return 0.0
    others = np.delete(jac, f_col, axis=1)
    norms = np.linalg.norm(others, axis=0)
    others = others[:, norms > 0] / norms[norms > 0]
    coef, *_ = np.linalg.lstsq(others, jf, rcond=None)
    return float(np.linalg.norm(jf - others @ coef) / nf)


def recover_trajectory(
    track: ObservationTrack,
    k: CameraIntrinsics,
    mode=DofMode.SIX,
    init: Optional[BallisticParams] = None,
    g=None,
    config: Optional[SolveConfig] = None,
    f_init: Optional[float] = None,
    init_strategy: str = "depth",
    callback=None,
) -> TrajectoryFit:
    """Fit one flight to its 2D track by minimising the reprojection error.

    ``k.f`` is used as known focal length unless the mode estimates f, in
    which case ``f_init`` (default: the larger image dimension) seeds it.
    ``g`` is the known gravity for 6/7 DoF and the starting guess otherwise.
    Iteration-cap exits are reported through ``report.status``.
    """
    mode = DofMode.parse(mode)
    config = config or SolveConfig(mode=mode)
    if track.n_valid < mode.min_observations:
        raise InsufficientObservations(
            f"{mode.value} needs at least {mode.min_observations} valid observations, got {track.n_valid}")
    g0 = _check_gravity(DEFAULT_GRAVITY if g is None else g)

    if mode.estimates_f:
        if f_init is None:
            f_init = config.f_init
        if f_init is None:
            f_init = float(max(k.image_size)) if k.image_size else k.f
    else:
        f_init = k.f
    k0 = k.with_focal(f_init)

    if init_strategy not in ("linear", "depth"):
        raise ValueError(f"unknown init strategy {init_strategy!r}")
    prob = _TrajectoryProblem(track, k, mode, g0, k.f)
    if init is not None:
        if not mode.estimates_g:
            init = BallisticParams(init.b0, init.u, g0)
        x0 = prob.pack(init, f_init)
    else:
        # noisy tracks can place the chosen start behind the camera; fall back
        # to the other start, then to the object at rest on the first ray
        order = [init_strategy] + [s for s in ("linear", "depth") if s != init_strategy] + ["rest"]
        x0 = None
        for strategy in order:
            if strategy == "linear":
                cand = linear_initialisation(track, k0, g0)
            elif strategy == "depth":
                cand = depth_initialisation(track, k0, g0, config.init_depth)
            else:
                cand = _rest_initialisation(track, k0, g0, config.init_depth)
            x0 = prob.pack(cand, f_init)
            if np.all(np.isfinite(cand.as_vector())) and _feasible(prob, x0):
                break

    g_dev = [0.0]

    def on_accept(x):
        g_dev[0] = max(g_dev[0], abs(np.linalg.norm(prob.params(x).g) - GRAVITY_MAGNITUDE))
        if callback is not None:
            callback(prob.params(x), prob.focal(x))

    x, report = minimize(prob.residuals, prob.jacobian, x0, config, callback=on_accept)
    if config.robust_loss == "huber":
        for _ in range(5):
            res = prob.obs - project(position_at(prob.params(x), prob.t), k.with_focal(prob.focal(x)))
            e = np.linalg.norm(res, axis=1)
            prob.weights = np.where(e <= config.robust_scale, 1.0, config.robust_scale / np.maximum(e, 1e-300))
            x, report = minimize(prob.residuals, prob.jacobian, x, config, callback=on_accept)
        report.notes.append("huber reweighting applied")

    report.gravity_norm_deviation = g_dev[0]
    report.n_params = prob.n
    params = prob.params(x)
    f = prob.focal(x) if mode.estimates_f else None
    if mode.estimates_f:
        ratio = focal_ambiguity_ratio(prob.jacobian(x), prob.n - 1)
        report.ambiguity_ratio = ratio
        report.f_z_ambiguous = ratio < config.ambiguity_threshold
        if report.f_z_ambiguous:
            report.notes.append("f/Z ambiguity: focal length and depth are nearly interchangeable")
    if not report.converged:
        log.warning("trajectory solve did not converge (%s), rms %.3g px", report.status, report.rms)
    return TrajectoryFit(params, f, report)


def simulate_track(
    p: BallisticParams,
    k: CameraIntrinsics,
    n: int,
    r: float,
    noise_sigma: float = 0.0,
    seed=None,
    start_index: int = 0,
) -> ObservationTrack:
    """Project ``n`` frames of a flight at ``r`` Hz, optionally with pixel noise."""
    idx = np.arange(n) + start_index
    pts = position_at(p, idx / r)
    if np.any(pts[:, 2] <= 0):
        raise ObjectBehindCamera(f"object leaves the front of the camera at frame {int(np.argmax(pts[:, 2] <= 0))}")
    uv = project(pts, k)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        uv = uv + rng.normal(0.0, noise_sigma, uv.shape)
    return ObservationTrack(uv, r, idx)
