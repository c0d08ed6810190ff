"""Reconstruction error metrics against ground truth."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from flightcap.errors import ContactOutsideEpisode, MisalignedGroundTruth
from flightcap.scene import GroundTruth, Scene, Solution


@dataclass
class MetricsReport:
    root_mpe_mm: float
    mpjpe_mm: float
    bone_mae_mm: float
    gravity_cosine: float
    object_mpe_mm: float
    e_smooth_mm: float
    contact_gap_mm: float = float("nan")
    seam_gap_mm: float = float("nan")
    f_rel_error: float = float("nan")

    def as_dict(self) -> dict:
        return asdict(self)


def e_smooth(joints, frame_indices: Optional[np.ndarray] = None) -> float:
    """Mean norm of the second temporal difference of 3D joints, in mm/frame^2.

    ``joints`` is (N, K, 3) or (N, 3) in meters. Frames are re-sorted by
    ``frame_indices`` when given.
    """
    j = np.asarray(joints, dtype=float)
    if frame_indices is not None:
        j = j[np.argsort(frame_indices, kind="stable")]
    if len(j) < 3:
        return 0.0
    dd = j[2:] - 2 * j[1:-1] + j[:-2]
    return float(np.linalg.norm(dd, axis=-1).mean() * 1000.0)


def gravity_cosine(g_est, g_true) -> float:
    a = np.asarray(g_est, dtype=float)
    b = np.asarray(g_true, dtype=float)
    return float(np.clip(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)), -1.0, 1.0))


def contact_gap_mm(sol: Solution, scene: Scene) -> float:
    """Mean object-to-joint distance at annotated contact frames."""
    if not scene.contacts or not sol.episodes:
        return float("nan")
    poses = sol.poses(scene)
    # the solution's windows may come from detection rather than the scene
    windows = replace(scene, episodes=list(sol.episodes))
    gaps = []
    for c in scene.contacts:
        try:
            i = windows.contact_episode(c)
        except ContactOutsideEpisode:
            continue
        e = sol.episodes[i]
        p = sol.episode_params(i)
        t = (c.frame - e.start) / scene.frame_rate
        obj = p.b0 + p.u * t + 0.5 * p.g * t**2
        gaps.append(np.linalg.norm(poses[c.person][c.frame, c.joint] - obj))
    return float(np.mean(gaps) * 1000.0) if gaps else float("nan")


def seam_gap_mm(sol: Solution, frame_rate: float) -> float:
    """Largest end-to-start gap between consecutive flights of one multi-episode."""
    gaps = []
    for i in range(1, len(sol.episodes)):
        a, b = sol.episodes[i - 1], sol.episodes[i]
        if a.multi_episode != b.multi_episode:
            continue
        p = sol.episode_params(i - 1)
        t = (a.end - a.start) / frame_rate
        end = p.b0 + p.u * t + 0.5 * p.g * t**2
        gaps.append(np.linalg.norm(end - sol.b0[i]))
    return float(max(gaps) * 1000.0) if gaps else float("nan")


def compute_metrics(sol: Solution, scene: Scene, gt: Optional[GroundTruth] = None) -> MetricsReport:
    """Errors of ``sol`` against the scene's ground truth (or ``gt``)."""
    gt = gt or scene.ground_truth
    if gt is None:
        raise MisalignedGroundTruth("scene has no ground-truth block")
    n = scene.n_frames
    if gt.trajectory.shape != (n, 3) or len(gt.poses) != len(scene.persons) \
            or any(p.shape[0] != n for p in gt.poses) or sol.t_corr.shape[:2] != (len(scene.persons), n):
        raise MisalignedGroundTruth("ground truth, solution and scene disagree on frames or persons")
    root = scene.topology.root
    est = sol.poses(scene)
    root_err, mpjpe, mae, smooth = [], [], [], []
    for pi, (pe, pt) in enumerate(zip(est, gt.poses)):
        root_err.append(np.linalg.norm(pe[:, root] - pt[:, root], axis=-1))
        rel_e = pe - pe[:, root:root + 1]
        rel_t = pt - pt[:, root:root + 1]
        mpjpe.append(np.linalg.norm(rel_e - rel_t, axis=-1).ravel())
        mae.append(np.abs(sol.bone_lengths[pi] - gt.bone_lengths[pi]))
        smooth.append(e_smooth(pe))
    obj = sol.object_positions(n, scene.frame_rate)
    flight = np.all(np.isfinite(obj), axis=1)
    obj_mpe = float(np.linalg.norm(obj[flight] - gt.trajectory[flight], axis=1).mean() * 1000) \
        if flight.any() else float("nan")
    return MetricsReport(
        root_mpe_mm=float(np.concatenate(root_err).mean() * 1000),
        mpjpe_mm=float(np.concatenate(mpjpe).mean() * 1000),
        bone_mae_mm=float(np.concatenate(mae).mean() * 1000),
        gravity_cosine=gravity_cosine(sol.g, gt.gravity),
        object_mpe_mm=obj_mpe,
        e_smooth_mm=float(np.mean(smooth)),
        contact_gap_mm=contact_gap_mm(sol, scene),
        seam_gap_mm=seam_gap_mm(sol, scene.frame_rate),
        f_rel_error=abs(sol.f - gt.f) / gt.f,
    )


__all__ = ["MetricsReport", "compute_metrics", "contact_gap_mm", "e_smooth",
           "gravity_cosine", "seam_gap_mm"]
