"""Staged scene solve: per-flight warm starts, then one joint minimisation."""

from __future__ import annotations

import logging
import time
from dataclasses import replace
from typing import Callable, Optional, Tuple

import numpy as np
import scipy.linalg

from flightcap.ballistics import recover_trajectory
from flightcap.config import GRAVITY_MAGNITUDE, DofMode, SolveConfig
from flightcap.energy import BLOCKS, EnergyModel
from flightcap.episodes import build_multi_episode, detect_switches
from flightcap.errors import FlightCapError, InsufficientObservations, NonFiniteResidual
from flightcap.lm import SolveReport, minimize
from flightcap.scene import Scene, Solution
from flightcap.skeleton import apply_scale, bone_lengths

log = logging.getLogger(__name__)

__all__ = ["SolveReport", "initial_solution", "minimize", "segment_scene", "solve_scene"]


def segment_scene(scene: Scene) -> Scene:
    """Copy of ``scene`` with flight windows from switch detection and contacts."""
    switches = detect_switches(scene.object_track, valid=scene.object_valid)
    seg = build_multi_episode(scene.object_track, switches, scene.contacts, valid=scene.object_valid)
    return replace(scene, episodes=seg.episodes())


def _focal_start(scene: Scene, config: SolveConfig) -> float:
    if not config.mode.estimates_f:
        return scene.camera.f
    if config.f_init is not None:
        return float(config.f_init)
    k = scene.camera
    return float(max(k.image_size)) if k.image_size else k.f


def _best_fit(track, k, mode, g, config):
    """Trajectory fit from a depth-seeded and a linear start, keeping the better."""
    best = None
    for strategy in ("depth", "linear"):
        try:
            fit = recover_trajectory(track, k, mode, g=g, config=config.with_(mode=mode), init_strategy=strategy)
        except FlightCapError:
            continue
        if best is None or fit.report.objective < best.report.objective:
            best = fit
    if best is None:
        raise InsufficientObservations("no usable trajectory warm start")
    return best


def _warm_object(scene: Scene, config: SolveConfig, f0: float, depth: Optional[float] = None):
    """Per-flight reprojection-only fits with f held at its starting value.

    Gravity (when estimated) is the observation-weighted mean of the
    per-flight directions; every flight is then refitted with it fixed.
    ``depth`` seeds the object's distance, typically the subjects' depth.
    """
    mode = config.mode
    k0 = scene.camera.with_focal(f0)
    sub = config.with_(max_iterations=min(config.max_iterations, 100))
    if depth is not None and np.isfinite(depth) and depth > 0:
        sub = sub.with_(init_depth=float(depth))
    tracks = [scene.episode_track(e) for e in scene.episodes]
    g = np.asarray(scene.gravity, dtype=float)
    if mode.estimates_g:
        dirs, wts = [], []
        for tr in tracks:
            if tr.n_valid < DofMode.NINE.min_observations:
                continue
            fit = _best_fit(tr, k0, DofMode.NINE, g, sub)
            dirs.append(fit.params.g / GRAVITY_MAGNITUDE)
            wts.append(tr.n_valid)
        if dirs:
            d = np.average(dirs, axis=0, weights=wts)
            g = GRAVITY_MAGNITUDE * d / np.linalg.norm(d)
    b0, u = [], []
    for e, tr in zip(scene.episodes, tracks):
        if tr.n_valid >= DofMode.SIX.min_observations:
            fit = _best_fit(tr, k0, DofMode.SIX, g, sub)
            b0.append(fit.params.b0)
            u.append(fit.params.u)
        else:
            log.warning("episode [%d, %d] has too few observations for a warm start", e.start, e.end)
            b0.append(np.array([0.0, 0.0, config.init_depth]))
            u.append(np.zeros(3))
    return np.array(b0).reshape(-1, 3), np.array(u).reshape(-1, 3), g


def _warm_person(scene: Scene, pi: int, f0: float) -> Tuple[np.ndarray, np.ndarray]:
    """Bone lengths from the kinematic input and a per-frame root translation.

    The root comes from the ingested absolute root when present, otherwise
    from the depth at which the scaled torso matches its 2D extent.
    """
    p = scene.persons[pi]
    topo = scene.topology
    rel = p.kin_relative(topo)
    lengths = np.median(bone_lengths(rel, topo), axis=0)
    if p.root_init is not None:
        return lengths, p.root_init.copy()
    scaled = apply_scale(rel, lengths, topo)
    c = np.asarray(scene.camera.c)
    t = np.zeros((scene.n_frames, 3))
    last = None
    for i in range(scene.n_frames):
        ok = p.p2d_valid[i]
        if ok.sum() < 2:
            t[i] = last if last is not None else (0.0, 0.0, 5.0)
            continue
        q = p.p2d[i, ok]
        pts = scaled[i, ok]
        span2 = np.linalg.norm(q - q.mean(0), axis=1).mean()
        span3 = np.linalg.norm(pts[:, :2] - pts[:, :2].mean(0), axis=1).mean()
        depth = f0 * span3 / max(span2, 1e-9)
        # place the root so the mean joint lands on the mean 2D detection
        centre = (q.mean(0) - c) * depth / f0
        t[i] = (centre[0] - pts[:, 0].mean(), centre[1] - pts[:, 1].mean(), depth - pts[:, 2].mean())
        last = t[i]
    return lengths, t


def initial_solution(scene: Scene, config: Optional[SolveConfig] = None) -> Solution:
    """Warm start for the joint solve."""
    config = config or SolveConfig()
    f0 = _focal_start(scene, config)
    ls, ts = [], []
    for pi in range(len(scene.persons)):
        lengths, t = _warm_person(scene, pi, f0)
        ls.append(lengths)
        ts.append(t)
    depth = float(np.median([t[:, 2] for t in ts])) if ts else None
    b0, u, g = _warm_object(scene, config, f0, depth)
    return Solution(mode=config.mode, episodes=list(scene.episodes), b0=b0, u=u, g=g, f=f0,
                    bone_lengths=np.array(ls).reshape(len(ls), -1),
                    t_corr=np.array(ts).reshape(len(ts), scene.n_frames, 3))


def focal_ambiguity_from_normal(jac, f_index: int) -> float:
    """Relative f-column residual after projecting onto the other columns,
    computed from the column-normalised normal matrix via its Schur complement."""
    a = (jac.T @ jac)
    a = a.toarray() if hasattr(a, "toarray") else np.asarray(a)
    d = np.sqrt(np.maximum(np.diag(a), 0.0))
    if d[f_index] == 0:
        return 0.0
    keep = d > 0
    keep[f_index] = False
    an = a / np.outer(np.where(d > 0, d, 1.0), np.where(d > 0, d, 1.0))
    aoo = an[np.ix_(keep, keep)]
    aof = an[keep, f_index]
    aoo = aoo + 1e-12 * np.eye(len(aoo))
    x = scipy.linalg.cho_solve(scipy.linalg.cho_factor(aoo, check_finite=False), aof, check_finite=False)
    return float(np.sqrt(max(1.0 - aof @ x, 0.0)))


def solve_scene(scene: Scene, config: Optional[SolveConfig] = None,
                init: Optional[Solution] = None,
                callback: Optional[Callable[[Solution], None]] = None) -> Tuple[Solution, SolveReport]:
    """Jointly recover object flights, gravity, focal length and human poses.

    Flight windows come from the scene, or from switch detection when it has
    none. Unknowns outside the mode (gravity in 6/7 DoF, f in 6/9 DoF) stay at
    the scene's values. ``callback`` sees every accepted iterate.
    """
    config = config or SolveConfig()
    t0 = time.perf_counter()
    scene.validate()
    if not scene.episodes:
        scene = segment_scene(scene)
        if not scene.episodes:
            raise InsufficientObservations("no flight episode found in the object track")
    if init is None:
        init = initial_solution(scene, config)
    model = EnergyModel(scene, config.mode, config.weights, m_samples=config.m_samples,
                        m_perspective=config.m_perspective, metric_unit=config.metric_unit)
    x0 = model.pack(init)

    g_dev = [0.0]

    def on_accept(x):
        st = model.unpack(x)
        g_dev[0] = max(g_dev[0], abs(float(np.linalg.norm(st.g)) - GRAVITY_MAGNITUDE))
        if callback is not None:
            callback(st)

    try:
        x, report = minimize(model.residuals, model.jacobian, x0, config, callback=on_accept)
    except NonFiniteResidual as exc:
        raise NonFiniteResidual(f"joint solve ({config.mode.value}, {scene.n_frames} frames, "
                                f"{len(scene.episodes)} episodes): {exc}", x=exc.x) from exc
    except FlightCapError as exc:
        raise type(exc)(f"joint solve ({config.mode.value}): {exc}") from exc

    sol = model.unpack(x)
    report.energies = model.energies(x)
    report.weighted_energies = {b: getattr(config.weights, b) * report.energies[b] if b in model.active_blocks()
                                else 0.0 for b in BLOCKS}
    report.objective = float(sum(report.weighted_energies.values()))
    report.gravity_norm_deviation = g_dev[0]
    if model.layout.f_index is not None:
        ratio = focal_ambiguity_from_normal(model.jacobian(x), model.layout.f_index)
        report.ambiguity_ratio = ratio
        report.f_z_ambiguous = ratio < config.ambiguity_threshold
        if report.f_z_ambiguous:
            report.notes.append("f/Z ambiguity: focal length and depth are nearly interchangeable")
    report.notes.append(f"f = {sol.f:.3f} px" + ("" if config.mode.estimates_f else " (fixed)"))
    report.wall_time = time.perf_counter() - t0
    if not report.converged:
        log.warning("joint solve stopped with status %s", report.status)
    return sol, report
