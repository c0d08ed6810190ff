"""Scene, ground-truth and solution containers shared by the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from flightcap.ballistics import DEFAULT_GRAVITY, BallisticParams, ObservationTrack, position_at
from flightcap.camera import CameraIntrinsics
from flightcap.config import DofMode
from flightcap.errors import ContactOutsideEpisode, InconsistentScene
from flightcap.skeleton import MPII16, BonePriorTable, SkeletonTopology, apply_scale

RELEASE = "release"
CATCH = "catch"


@dataclass(frozen=True)
class ContactEvent:
    frame: int
    joint: int
    person: int = 0
    side: str = RELEASE

    def __post_init__(self):
        if self.side not in (RELEASE, CATCH):
            raise ValueError(f"contact side must be 'release' or 'catch', got {self.side!r}")


@dataclass(frozen=True)
class Episode:
    """Inclusive frame window of one free flight."""

    start: int
    end: int
    multi_episode: int = 0

    def __post_init__(self):
        if self.end - self.start + 1 < 3:
            raise ValueError(f"episode [{self.start}, {self.end}] is shorter than 3 frames")

    @property
    def n_frames(self) -> int:
        return self.end - self.start + 1

    def contains(self, frame: int) -> bool:
        return self.start <= frame <= self.end


@dataclass
class Person:
    """Per-frame observations of one subject.

    ``kin`` holds kinematic 3D joints (N, K, 3) in ``kin_unit_scale`` units
    (meters after scaling); they may be root-relative or carry an initial
    root translation, only root-relative geometry is used. ``root_init`` is
    an optional initial absolute root (N, 3) in meters.
    """

    kin: np.ndarray
    p2d: np.ndarray
    p2d_valid: Optional[np.ndarray] = None
    root_init: Optional[np.ndarray] = None
    kin_unit_scale: float = 1.0

    def __post_init__(self):
        self.kin = np.asarray(self.kin, dtype=float)
        self.p2d = np.asarray(self.p2d, dtype=float)
        if self.p2d_valid is None:
            self.p2d_valid = np.all(np.isfinite(self.p2d), axis=-1)
        self.p2d_valid = np.asarray(self.p2d_valid, dtype=bool) & np.all(np.isfinite(self.p2d), axis=-1)
        if self.root_init is not None:
            self.root_init = np.asarray(self.root_init, dtype=float)

    @property
    def n_frames(self) -> int:
        return len(self.kin)

    def kin_relative(self, topology: SkeletonTopology = MPII16) -> np.ndarray:
        rel = self.kin - self.kin[:, topology.root:topology.root + 1, :]
        return rel * self.kin_unit_scale


@dataclass
class GroundTruth:
    trajectory: np.ndarray  # (N, 3), NaN where the object is not modelled
    poses: List[np.ndarray]  # absolute (N, K, 3) per person
    gravity: np.ndarray
    bone_lengths: List[np.ndarray]
    f: float
    episode_params: List[BallisticParams] = field(default_factory=list)

    def __post_init__(self):
        self.trajectory = np.asarray(self.trajectory, dtype=float)
        self.poses = [np.asarray(p, dtype=float) for p in self.poses]
        self.gravity = np.asarray(self.gravity, dtype=float)
        self.bone_lengths = [np.asarray(b, dtype=float) for b in self.bone_lengths]


@dataclass
class Scene:
    camera: CameraIntrinsics
    frame_rate: float
    object_track: np.ndarray
    persons: List[Person]
    contacts: List[ContactEvent] = field(default_factory=list)
    episodes: List[Episode] = field(default_factory=list)
    object_valid: Optional[np.ndarray] = None
    gravity: np.ndarray = field(default_factory=lambda: DEFAULT_GRAVITY.copy())
    bone_prior: Optional[BonePriorTable] = None
    ground_truth: Optional[GroundTruth] = None
    topology: SkeletonTopology = MPII16

    def __post_init__(self):
        self.object_track = np.asarray(self.object_track, dtype=float).reshape(-1, 2)
        finite = np.all(np.isfinite(self.object_track), axis=1)
        if self.object_valid is None:
            self.object_valid = finite
        self.object_valid = np.asarray(self.object_valid, dtype=bool) & finite
        self.gravity = np.asarray(self.gravity, dtype=float)

    @property
    def n_frames(self) -> int:
        return len(self.object_track)

    def validate(self) -> None:
        """Check stream lengths, joint counts and contact references."""
        n = self.n_frames
        k = self.topology.n_joints
        if len(self.object_valid) != n:
            raise InconsistentScene(f"object validity mask has {len(self.object_valid)} frames, track has {n}")
        if not self.frame_rate > 0:
            raise InconsistentScene(f"frame rate must be positive, got {self.frame_rate}")
        for pi, p in enumerate(self.persons):
            if p.kin.shape != (n, k, 3):
                raise InconsistentScene(f"person {pi}: kinematic poses have shape {p.kin.shape}, expected {(n, k, 3)}")
            if p.p2d.shape != (n, k, 2):
                raise InconsistentScene(f"person {pi}: 2D joints have shape {p.p2d.shape}, expected {(n, k, 2)} "
                                        f"(object track has {n} frames)")
            if p.p2d_valid.shape != (n, k):
                raise InconsistentScene(f"person {pi}: 2D validity mask has shape {p.p2d_valid.shape}")
            if not np.all(np.isfinite(p.kin)):
                raise InconsistentScene(f"person {pi}: kinematic poses contain non-finite values")
            if p.root_init is not None and p.root_init.shape != (n, 3):
                raise InconsistentScene(f"person {pi}: root_init has shape {p.root_init.shape}, expected {(n, 3)}")
        prev_end = -1
        for e in self.episodes:
            if e.start < 0 or e.end >= n:
                raise InconsistentScene(f"episode [{e.start}, {e.end}] outside the {n}-frame sequence")
            if e.start < prev_end:
                raise InconsistentScene(f"episode [{e.start}, {e.end}] overlaps its predecessor")
            prev_end = e.end
        for c in self.contacts:
            if not 0 <= c.frame < n:
                raise InconsistentScene(f"contact frame {c.frame} outside the {n}-frame sequence")
            if not 0 <= c.person < len(self.persons):
                raise InconsistentScene(f"contact refers to person {c.person}, scene has {len(self.persons)}")
            if not 0 <= c.joint < k:
                raise InconsistentScene(f"contact joint index {c.joint} outside 0..{k - 1}")
        if self.ground_truth is not None:
            gt = self.ground_truth
            if gt.trajectory.shape != (n, 3) or len(gt.poses) != len(self.persons):
                raise InconsistentScene("ground truth does not match the scene's frames or persons")

    def episode_track(self, e: Episode) -> ObservationTrack:
        idx = np.arange(e.start, e.end + 1)
        return ObservationTrack(self.object_track[idx], self.frame_rate, idx - e.start, self.object_valid[idx])

    def contact_episode(self, c: ContactEvent) -> int:
        """Index of the episode whose boundary the contact annotates."""
        key = (lambda e: e.start) if c.side == RELEASE else (lambda e: e.end)
        for i, e in enumerate(self.episodes):
            if key(e) == c.frame:
                return i
        for i, e in enumerate(self.episodes):
            if e.contains(c.frame):
                return i
        raise ContactOutsideEpisode(f"{c.side} contact at frame {c.frame} is not inside any flight episode")


@dataclass
class Solution:
    """Recovered unknowns of a scene; positions in meters, camera frame."""

    mode: DofMode
    episodes: List[Episode]
    b0: np.ndarray  # (E, 3)
    u: np.ndarray  # (E, 3)
    g: np.ndarray
    f: float
    bone_lengths: np.ndarray  # (P, n_bones)
    t_corr: np.ndarray  # (P, N, 3)

    def episode_params(self, i: int) -> BallisticParams:
        return BallisticParams(self.b0[i], self.u[i], self.g)

    def object_positions(self, n_frames: int, frame_rate: float) -> np.ndarray:
        out = np.full((n_frames, 3), np.nan)
        for i, e in enumerate(self.episodes):
            idx = np.arange(e.start, e.end + 1)
            out[idx] = position_at(self.episode_params(i), (idx - e.start) / frame_rate)
        return out

    def poses(self, scene: Scene) -> List[np.ndarray]:
        """Absolute poses ``s(kin, l) + t_corr`` per person, (N, K, 3)."""
        out = []
        for pi, p in enumerate(scene.persons):
            rel = apply_scale(p.kin_relative(scene.topology), self.bone_lengths[pi], scene.topology)
            out.append(rel + self.t_corr[pi][:, None, :])
        return out

    @property
    def gravity_direction(self) -> np.ndarray:
        return self.g / np.linalg.norm(self.g)
