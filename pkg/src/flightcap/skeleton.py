"""MPII-16 kinematic tree, bone rescaling and anthropometric helpers."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from flightcap.errors import SchemaError, ZeroLengthBone

JOINT_NAMES = (
    "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle",
    "pelvis", "thorax", "upper_neck", "head_top",
    "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
)
K = len(JOINT_NAMES)
ROOT = JOINT_NAMES.index("pelvis")

_PARENT_NAMES = {
    "r_ankle": "r_knee", "r_knee": "r_hip", "r_hip": "pelvis",
    "l_hip": "pelvis", "l_knee": "l_hip", "l_ankle": "l_knee",
    "thorax": "pelvis", "upper_neck": "thorax", "head_top": "upper_neck",
    "r_wrist": "r_elbow", "r_elbow": "r_shoulder", "r_shoulder": "thorax",
    "l_shoulder": "thorax", "l_elbow": "l_shoulder", "l_wrist": "l_elbow",
}

# common names from other 2D/3D pose formats; "spine" is anchored at the thorax
JOINT_ALIASES = {
    "right_ankle": "r_ankle", "rankle": "r_ankle",
    "right_knee": "r_knee", "rknee": "r_knee",
    "right_hip": "r_hip", "rhip": "r_hip",
    "left_hip": "l_hip", "lhip": "l_hip",
    "left_knee": "l_knee", "lknee": "l_knee",
    "left_ankle": "l_ankle", "lankle": "l_ankle",
    "root": "pelvis", "hip": "pelvis", "hips": "pelvis", "mid_hip": "pelvis",
    "spine": "thorax", "chest": "thorax",
    "neck": "upper_neck",
    "head": "head_top", "headtop": "head_top", "head_end": "head_top",
    "right_wrist": "r_wrist", "rwrist": "r_wrist",
    "right_elbow": "r_elbow", "relbow": "r_elbow",
    "right_shoulder": "r_shoulder", "rshoulder": "r_shoulder",
    "left_shoulder": "l_shoulder", "lshoulder": "l_shoulder",
    "left_elbow": "l_elbow", "lelbow": "l_elbow",
    "left_wrist": "l_wrist", "lwrist": "l_wrist",
}


@dataclass(frozen=True)
class SkeletonTopology:
    joint_names: tuple
    parents: tuple  # parent index per joint, -1 for the root
    bones: tuple  # (parent, child) per bone
    symmetric_pairs: tuple  # (bone_a, bone_b) index pairs
    torso: tuple  # joint indices used by the localisation term

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    @property
    def n_bones(self) -> int:
        return len(self.bones)

    @property
    def root(self) -> int:
        return self.parents.index(-1)

    @property
    def bone_names(self) -> tuple:
        return tuple(f"{self.joint_names[p]}-{self.joint_names[c]}" for p, c in self.bones)

    def joint_index(self, name: str) -> int:
        key = name.strip().lower()
        key = JOINT_ALIASES.get(key, key)
        try:
            return self.joint_names.index(key)
        except ValueError:
            raise SchemaError("joint", f"one of {list(self.joint_names)}", name) from None

    def bone_order(self) -> list:
        """Bone indices sorted so every parent bone precedes its children."""
        depth = {self.root: 0}
        order = []
        pending = list(range(self.n_bones))
        while pending:
            rest = []
            for b in pending:
                p, c = self.bones[b]
                if p in depth:
                    depth[c] = depth[p] + 1
                    order.append(b)
                else:
                    rest.append(b)
            if len(rest) == len(pending):
                raise ValueError("parent map is not a tree rooted at the root joint")
            pending = rest
        return order

    def path_matrix(self) -> np.ndarray:
        """A[k, b] = 1 when bone b lies on the path from the root to joint k."""
        child_bone = {c: b for b, (_, c) in enumerate(self.bones)}
        a = np.zeros((self.n_joints, self.n_bones))
        for k in range(self.n_joints):
            j = k
            while j != self.root:
                b = child_bone[j]
                a[k, b] = 1.0
                j = self.bones[b][0]
        return a


def _mpii16() -> SkeletonTopology:
    parents = tuple(-1 if n == "pelvis" else JOINT_NAMES.index(_PARENT_NAMES[n]) for n in JOINT_NAMES)
    bones = tuple((parents[c], c) for c in range(K) if parents[c] >= 0)
    idx = {f"{JOINT_NAMES[p]}-{JOINT_NAMES[c]}": b for b, (p, c) in enumerate(bones)}
    pairs = (
        ("pelvis-r_hip", "pelvis-l_hip"),
        ("r_hip-r_knee", "l_hip-l_knee"),
        ("r_knee-r_ankle", "l_knee-l_ankle"),
        ("thorax-r_shoulder", "thorax-l_shoulder"),
        ("r_shoulder-r_elbow", "l_shoulder-l_elbow"),
        ("r_elbow-r_wrist", "l_elbow-l_wrist"),
    )
    torso = tuple(JOINT_NAMES.index(n) for n in ("pelvis", "thorax", "upper_neck", "r_shoulder", "l_shoulder"))
    return SkeletonTopology(JOINT_NAMES, parents, bones, tuple((idx[a], idx[b]) for a, b in pairs), torso)


MPII16 = _mpii16()


def bone_vectors(pose: np.ndarray, topology: SkeletonTopology = MPII16) -> np.ndarray:
    """Child-minus-parent vectors, shape (..., n_bones, 3)."""
    pose = np.asarray(pose, dtype=float)
    par = np.array([p for p, _ in topology.bones])
    ch = np.array([c for _, c in topology.bones])
    return pose[..., ch, :] - pose[..., par, :]


def bone_lengths(pose: np.ndarray, topology: SkeletonTopology = MPII16) -> np.ndarray:
    return np.linalg.norm(bone_vectors(pose, topology), axis=-1)


def bone_directions(pose: np.ndarray, topology: SkeletonTopology = MPII16) -> np.ndarray:
    """Unit bone directions; raises ZeroLengthBone on coincident joints."""
    vec = bone_vectors(pose, topology)
    n = np.linalg.norm(vec, axis=-1)
    bad = n <= 1e-12
    if np.any(bad):
        where = np.argwhere(bad)[0]
        bone = int(where[-1])
        frame = int(where[0]) if len(where) > 1 else None
        raise ZeroLengthBone(topology.bones[bone][1], frame)
    return vec / n[..., None]


def apply_scale(kin_pose, lengths, topology: SkeletonTopology = MPII16) -> np.ndarray:
    """Re-length a pose's bones to ``lengths`` keeping every bone direction.

    Accepts one pose (K, 3) or a sequence (N, K, 3). The output is
    root-relative (root at the origin).
    """
    kin_pose = np.asarray(kin_pose, dtype=float)
    lengths = np.asarray(lengths, dtype=float)
    dirs = bone_directions(kin_pose, topology)
    out = np.zeros_like(kin_pose)
    for b in topology.bone_order():
        p, c = topology.bones[b]
        out[..., c, :] = out[..., p, :] + lengths[b] * dirs[..., b, :]
    return out


@dataclass(frozen=True)
class BonePriorTable:
    lengths: np.ndarray
    names: tuple = MPII16.bone_names

    def __post_init__(self):
        v = np.array(self.lengths, dtype=float).reshape(-1)
        if len(v) != len(self.names):
            raise ValueError(f"expected {len(self.names)} bone lengths, got {len(v)}")
        if np.any(~(v > 0)):
            raise ValueError("bone prior lengths must be positive")
        v.setflags(write=False)
        object.__setattr__(self, "lengths", v)

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, float], topology: SkeletonTopology = MPII16) -> "BonePriorTable":
        names = topology.bone_names
        unknown = set(mapping) - set(names)
        if unknown:
            raise SchemaError("bone_prior", f"bone names from {list(names)}", sorted(unknown))
        missing = [n for n in names if n not in mapping]
        if missing:
            raise SchemaError("bone_prior", "a length for every bone", f"missing {missing}")
        return cls(np.array([mapping[n] for n in names], dtype=float), names)

    def as_mapping(self) -> Dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.lengths)}

    @classmethod
    def load(cls, path=None) -> "BonePriorTable":
        """Load a prior table; the bundled default when ``path`` is None."""
        if path is None:
            text = resources.files("flightcap.data").joinpath("bone_prior_mpii16.json").read_text()
        else:
            with open(path) as fh:
                text = fh.read()
        doc = json.loads(text)
        bones = doc.get("bones") if isinstance(doc, dict) else None
        if not isinstance(bones, dict):
            raise SchemaError("bones", "mapping of bone name to meters", type(bones).__name__)
        return cls.from_mapping(bones)


def bone_prior_residuals(lengths, table: BonePriorTable) -> np.ndarray:
    return np.asarray(lengths, dtype=float) - table.lengths


def symmetry_residuals(lengths, topology: SkeletonTopology = MPII16) -> np.ndarray:
    lengths = np.asarray(lengths, dtype=float)
    return np.array([lengths[a] - lengths[b] for a, b in topology.symmetric_pairs])


HEIGHT_CORRECTION = 1.17


def estimate_height(h_px: float, t_z: float, f: float, correction: float = HEIGHT_CORRECTION) -> float:
    """Metric height from an image-space head-to-foot extent at depth ``t_z``.

    The default correction compensates 2D detectors that place the head
    keypoint at the head centre and the foot keypoints at the ankles.
    """
    if not (h_px > 0 and t_z > 0 and f > 0):
        raise ValueError("h_px, t_z and f must all be positive")
    return correction * t_z * h_px / f


def pixel_height(p2d_frame: np.ndarray, topology: SkeletonTopology = MPII16) -> float:
    """Head-top to mid-ankle distance of one 2D pose, in pixels."""
    head = p2d_frame[topology.joint_index("head_top")]
    feet = 0.5 * (p2d_frame[topology.joint_index("r_ankle")] + p2d_frame[topology.joint_index("l_ankle")])
    return float(np.linalg.norm(head - feet))


def sequence_height(p2d: np.ndarray, t_z: np.ndarray, f: float, correction: float = HEIGHT_CORRECTION,
                    valid: Optional[np.ndarray] = None) -> float:
    """Height over a sequence: median of the upper quartile of per-frame estimates.

    The most extended frames are taken as the upright ones.
    """
    est = []
    for i in range(len(p2d)):
        if valid is not None and not valid[i].all():
            continue
        h = pixel_height(p2d[i])
        if h > 0 and t_z[i] > 0:
            est.append(estimate_height(h, t_z[i], f, correction))
    if not est:
        raise ValueError("no frame with a complete 2D pose and positive depth")
    est = np.sort(est)
    return float(np.median(est[int(0.75 * len(est)):]))


def lengths_from_mapping(mapping: Mapping[str, float], topology: SkeletonTopology = MPII16) -> np.ndarray:
    return BonePriorTable.from_mapping(mapping, topology).lengths.copy()


def lengths_to_mapping(lengths: Sequence[float], topology: SkeletonTopology = MPII16) -> Dict[str, float]:
    return {n: float(v) for n, v in zip(topology.bone_names, lengths)}
