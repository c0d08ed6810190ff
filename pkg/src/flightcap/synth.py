"""Synthetic throw-and-catch scenes with exact ground truth, and noise sweeps."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from flightcap.ballistics import BallisticParams, position_at
from flightcap.camera import CameraIntrinsics, project
from flightcap.config import GRAVITY_MAGNITUDE, DofMode, SolveConfig
from flightcap.errors import NonPositiveDepth, SpecInfeasible
from flightcap.scene import CATCH, RELEASE, ContactEvent, Episode, GroundTruth, Person, Scene
from flightcap.skeleton import MPII16, BonePriorTable, bone_lengths

log = logging.getLogger(__name__)

J = MPII16.joint_index
R_WRIST, L_WRIST = J("r_wrist"), J("l_wrist")

# stance of a ~1.75 m subject relative to the pelvis (x right, y down, z away
# from the camera); arms are filled in per frame
_STANCE = {
    "pelvis": (0.0, 0.0, 0.0),
    "r_hip": (-0.12, 0.03, 0.0), "l_hip": (0.12, 0.03, 0.0),
    "r_knee": (-0.13, 0.47, -0.03), "l_knee": (0.13, 0.47, -0.03),
    "r_ankle": (-0.13, 0.89, 0.01), "l_ankle": (0.13, 0.89, 0.01),
    "thorax": (0.0, -0.48, 0.02), "upper_neck": (0.0, -0.60, 0.02), "head_top": (0.0, -0.80, 0.0),
    "r_shoulder": (-0.17, -0.47, 0.02), "l_shoulder": (0.17, -0.47, 0.02),
}
_UPPER_ARM = 0.29
_FOREARM = 0.26
_PELVIS_HEIGHT = 0.89  # pelvis above the ankles


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of one synthetic scene.

    Flights alternate between hands (one person) or between persons (two),
    each caught object is re-thrown in the same frame, so consecutive
    flights form one multi-episode. ``flight_frames`` may be a single window
    length or one per episode. Noise levels: ``sigma_pose_mm`` per 3D joint,
    ``sigma_root_mm`` rigid per-frame jitter of the whole kinematic pose,
    ``sigma_track_px`` on object centres, ``sigma_2d_px`` on 2D joints.
    The bone prior is the first subject's true bone lengths times
    ``prior_scale`` unless ``use_population_prior`` selects the bundled table.
    """

    f: float = 1000.0
    image_size: Tuple[int, int] = (1200, 877)
    frame_rate: float = 30.0
    camera_pitch_deg: float = 15.0
    camera_height: float = 1.5
    n_persons: int = 1
    n_episodes: int = 1
    flight_frames: object = 30
    hold_frames: int = 8
    depth_range: Tuple[float, float] = (2.5, 3.5)
    subject_scale_range: Tuple[float, float] = (0.92, 1.08)
    sigma_pose_mm: float = 0.0
    sigma_root_mm: float = 0.0
    sigma_track_px: float = 0.0
    sigma_2d_px: float = 0.0
    prior_scale: float = 1.0
    use_population_prior: bool = False
    annotate_episodes: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_persons not in (1, 2):
            raise SpecInfeasible(f"synthetic scenes hold one or two persons, got {self.n_persons}")
        if self.n_episodes < 1:
            raise SpecInfeasible("at least one episode is required")
        if self.f <= 0 or self.frame_rate <= 0:
            raise SpecInfeasible("f and frame rate must be positive")
        if min(self.flight_lengths()) < 3:
            raise SpecInfeasible("every flight needs at least 3 frames")
        if self.hold_frames < 0:
            raise SpecInfeasible("hold_frames must be non-negative")
        for name in ("sigma_pose_mm", "sigma_root_mm", "sigma_track_px", "sigma_2d_px"):
            if getattr(self, name) < 0:
                raise SpecInfeasible(f"{name} must be non-negative")

    def flight_lengths(self) -> List[int]:
        if np.ndim(self.flight_frames) == 0:
            return [int(self.flight_frames)] * self.n_episodes
        out = [int(v) for v in self.flight_frames]
        if len(out) != self.n_episodes:
            raise SpecInfeasible(f"{len(out)} flight lengths for {self.n_episodes} episodes")
        return out

    def with_(self, **changes) -> "SceneSpec":
        return replace(self, **changes)

    @property
    def camera(self) -> CameraIntrinsics:
        w, h = self.image_size
        return CameraIntrinsics(self.f, ((w - 1) / 2.0, (h - 1) / 2.0), (w, h))


def _rot_x(deg: float) -> np.ndarray:
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _arm(shoulder, lateral, alpha, bend, scale):
    """Elbow and wrist for an upper-arm pitch ``alpha`` and elbow bend."""
    ua = np.array([lateral * np.sin(0.25), np.cos(alpha), -np.sin(alpha)])
    ua /= np.linalg.norm(ua)
    fa_angle = alpha + bend
    fa = np.array([lateral * 0.35, np.cos(fa_angle), -np.sin(fa_angle)])
    fa /= np.linalg.norm(fa)
    elbow = shoulder + scale * _UPPER_ARM * ua
    wrist = elbow + scale * _FOREARM * fa
    return elbow, wrist


def _body(scale: float, arm_r: Tuple[float, float], arm_l: Tuple[float, float]) -> np.ndarray:
    """Pelvis-relative body-frame pose (K, 3) of a subject of size ``scale``."""
    pose = np.zeros((MPII16.n_joints, 3))
    for name, p in _STANCE.items():
        pose[J(name)] = scale * np.asarray(p)
    pose[J("r_elbow")], pose[J("r_wrist")] = _arm(pose[J("r_shoulder")], 1.0, *arm_r, scale)
    pose[J("l_elbow")], pose[J("l_wrist")] = _arm(pose[J("l_shoulder")], -1.0, *arm_l, scale)
    return pose


def _yaw(deg: float) -> np.ndarray:
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def generate(spec: SceneSpec):
    """Build one scene. Returns ``(GroundTruth, Scene)``; the scene carries the
    ground truth too so it can be written to a single file."""
    seq = np.random.SeedSequence(spec.seed)
    geo, n_track, n_pose, n_root, n_2d = (np.random.default_rng(s) for s in seq.spawn(5))
    k = spec.camera
    r = spec.frame_rate
    lengths_f = spec.flight_lengths()
    n_frames = 2 * spec.hold_frames + sum(n - 1 for n in lengths_f) + 1

    # episode windows: each catch frame is the next release frame
    windows = []
    s = spec.hold_frames
    for n in lengths_f:
        windows.append((s, s + n - 1))
        s += n - 1

    # thrower/catcher per episode: (person, joint)
    if spec.n_persons == 1:
        ends = [(0, R_WRIST if e % 2 == 0 else L_WRIST) for e in range(spec.n_episodes + 1)]
    else:
        ends = [(e % 2, R_WRIST) for e in range(spec.n_episodes + 1)]

    rot = _rot_x(-spec.camera_pitch_deg)
    g_cam = rot @ np.array([0.0, GRAVITY_MAGNITUDE, 0.0])
    t = np.arange(n_frames) / r

    persons_gt, scales, placements = [], [], []
    for pi in range(spec.n_persons):
        scale = geo.uniform(*spec.subject_scale_range)
        depth = geo.uniform(*spec.depth_range)
        if spec.n_persons == 1:
            x_off, yaw = geo.uniform(-0.4, 0.4), geo.uniform(-15, 15)
        else:
            x_off, yaw = (-1.1 if pi == 0 else 1.1) + geo.uniform(-0.2, 0.2), (-35 if pi == 0 else 35)
        phase = geo.uniform(0, 2 * np.pi, size=4)
        scales.append(scale)
        placements.append((x_off, depth, yaw, phase))

    for pi, (x_off, depth, yaw, phase) in enumerate(placements):
        scale = scales[pi]
        yr = _yaw(yaw)
        frames = np.zeros((n_frames, MPII16.n_joints, 3))
        for i, ti in enumerate(t):
            # throwing-arm arc: both arms swing around a forward carrying pose
            a_r = np.radians(35 + 20 * np.sin(2 * np.pi * 0.9 * ti + phase[0]))
            a_l = np.radians(35 + 20 * np.sin(2 * np.pi * 0.9 * ti + phase[1]))
            body = _body(scale, (a_r, np.radians(55)), (a_l, np.radians(55)))
            sway = np.array([0.04 * np.sin(2 * np.pi * 0.4 * ti + phase[2]),
                             0.015 * np.sin(2 * np.pi * 0.7 * ti + phase[3]),
                             0.06 * np.sin(2 * np.pi * 0.3 * ti + phase[2])])
            pelvis = np.array([x_off, spec.camera_height - scale * _PELVIS_HEIGHT, depth]) + sway
            frames[i] = pelvis + body @ yr.T
        persons_gt.append(frames @ rot.T)

    # ballistic flights pinned to the contact joints
    episode_params = []
    traj = np.zeros((n_frames, 3))
    for e, (s, end) in enumerate(windows):
        pa, ja = ends[e]
        pb, jb = ends[e + 1]
        b0 = persons_gt[pa][s, ja]
        bt = persons_gt[pb][end, jb]
        tf = (end - s) / r
        u = (bt - b0 - 0.5 * g_cam * tf**2) / tf
        p = BallisticParams(b0, u, g_cam)
        episode_params.append(p)
        idx = np.arange(s, end + 1)
        traj[idx] = position_at(p, (idx - s) / r)
    first, last = windows[0][0], windows[-1][1]
    traj[:first] = persons_gt[ends[0][0]][:first, ends[0][1]]
    traj[last + 1:] = persons_gt[ends[-1][0]][last + 1:, ends[-1][1]]

    for e, (s, end) in enumerate(windows):
        pa, ja = ends[e]
        if np.linalg.norm(traj[s] - persons_gt[pa][s, ja]) > 1e-9:
            raise SpecInfeasible(f"episode {e}: object does not start at the release joint")
    if np.any(traj[:, 2] <= 0.1):
        raise SpecInfeasible(f"object passes behind the camera at frame {int(np.argmax(traj[:, 2] <= 0.1))}")
    for pi, pose in enumerate(persons_gt):
        if np.any(pose[..., 2] <= 0.1):
            raise SpecInfeasible(f"person {pi} is not fully in front of the camera")

    try:
        track = project(traj, k)
        p2d_true = [project(p.reshape(-1, 3), k).reshape(n_frames, -1, 2) for p in persons_gt]
    except NonPositiveDepth as exc:  # pragma: no cover - guarded above
        raise SpecInfeasible(str(exc)) from exc
    track = track + spec.sigma_track_px * n_track.standard_normal(track.shape)

    persons = []
    root = MPII16.root
    for pi, pose in enumerate(persons_gt):
        kin = pose + (spec.sigma_pose_mm / 1000.0) * n_pose.standard_normal(pose.shape)
        kin = kin + (spec.sigma_root_mm / 1000.0) * n_root.standard_normal((n_frames, 1, 3))
        p2d = p2d_true[pi] + spec.sigma_2d_px * n_2d.standard_normal(p2d_true[pi].shape)
        persons.append(Person(kin=kin, p2d=p2d, root_init=kin[:, root, :].copy()))

    contacts = []
    for e, (s, end) in enumerate(windows):
        pa, ja = ends[e]
        pb, jb = ends[e + 1]
        contacts.append(ContactEvent(s, ja, pa, RELEASE))
        contacts.append(ContactEvent(end, jb, pb, CATCH))

    true_lengths = [bone_lengths(p[0]) for p in persons_gt]
    if spec.use_population_prior:
        prior = BonePriorTable.load()
    else:
        prior = BonePriorTable(true_lengths[0] * spec.prior_scale)
    gt = GroundTruth(trajectory=traj, poses=persons_gt, gravity=g_cam, bone_lengths=true_lengths,
                     f=spec.f, episode_params=episode_params)
    episodes = [Episode(s, end, 0) for s, end in windows] if spec.annotate_episodes else []
    scene = Scene(camera=k, frame_rate=r, object_track=track, persons=persons, contacts=contacts,
                  episodes=episodes, gravity=g_cam, bone_prior=prior, ground_truth=gt)
    scene.validate()
    return gt, scene


# -- noise sweep ------------------------------------------------------------

SWEEP_SIGMAS = (10.0, 30.0, 50.0, 100.0)
SWEEP_MODES = (DofMode.SIX, DofMode.SEVEN, DofMode.TEN)


@dataclass
class SweepRow:
    family: str  # "pose" (mm on 3D joints) or "object" (px on the 2D track)
    mode: str
    sigma: float
    root_mpe_mm: float
    root_mpe_std_mm: float
    gt_root_mpe_mm: float  # same seeds, zero noise
    n_seeds: int
    failures: int = 0


def _sweep_cell(args):
    spec, mode, config = args
    from flightcap.metrics import compute_metrics
    from flightcap.solver import solve_scene

    _, scene = generate(spec)
    try:
        sol, _ = solve_scene(scene, config.with_(mode=mode))
    except Exception as exc:  # a diverged cell is reported, not fatal
        log.warning("sweep cell failed (seed %d, %s): %s", spec.seed, mode.value, exc)
        return float("nan")
    return compute_metrics(sol, scene).root_mpe_mm


def noise_sweep(spec: SceneSpec, sigmas_pose: Sequence[float] = SWEEP_SIGMAS,
                sigmas_track: Sequence[float] = SWEEP_SIGMAS, modes: Sequence = SWEEP_MODES,
                seeds: Sequence[int] = range(5), config: Optional[SolveConfig] = None,
                workers: int = 1, include_zero: bool = False) -> List[SweepRow]:
    """Root MPE per (noise family, mode, sigma), averaged over ``seeds``.

    Pose noise is added to the 3D kinematic joints in mm, object noise to
    the 2D object track in px; all other noise in ``spec`` is zeroed. Cells
    are independent and may run in ``workers`` processes.
    """
    config = config or SolveConfig()
    base = spec.with_(sigma_pose_mm=0.0, sigma_root_mm=0.0, sigma_track_px=0.0, sigma_2d_px=0.0)
    modes = [DofMode.parse(m) for m in modes]
    seeds = list(seeds)
    cells = []
    levels = [("pose", s) for s in sigmas_pose] + [("object", s) for s in sigmas_track]
    if include_zero:
        levels = [("pose", 0.0), ("object", 0.0)] + levels
    for mode in modes:
        for seed in seeds:
            cells.append(("zero", 0.0, mode, seed, base.with_(seed=seed)))
        for family, sigma in levels:
            for seed in seeds:
                key = "sigma_pose_mm" if family == "pose" else "sigma_track_px"
                cells.append((family, sigma, mode, seed, base.with_(seed=seed, **{key: sigma})))

    jobs = [(c[4], c[2], config) for c in cells]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(_sweep_cell, jobs))
    else:
        values = [_sweep_cell(j) for j in jobs]

    table = {}
    for (family, sigma, mode, seed, _), v in zip(cells, values):
        table.setdefault((family, mode, sigma), []).append(v)
    rows = []
    for mode in modes:
        zero = np.array(table[("zero", mode, 0.0)])
        for family, sigma in levels:
            vals = np.array(table[(family, mode, sigma)])
            ok = np.isfinite(vals)
            rows.append(SweepRow(family, mode.value, float(sigma),
                                 float(np.mean(vals[ok])) if ok.any() else float("nan"),
                                 float(np.std(vals[ok])) if ok.any() else float("nan"),
                                 float(np.nanmean(zero)) if np.isfinite(zero).any() else float("nan"),
                                 int(ok.sum()), int((~ok).sum())))
    return rows


def default_workers() -> int:
    return max(1, min(8, os.cpu_count() or 1))
