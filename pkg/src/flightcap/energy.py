"""Residual blocks of the joint human-object energy and their assembly.

Every block returns plain residuals; the assembled vector scales each block
by ``sqrt(weight)`` so its squared norm is the weighted energy sum

    E = w_p E_p + w_b E_b + w_c E_c + w_m E_m + w_s E_s + w_co E_co + w_bl E_bl.

2D blocks (p, b, m) are in pixels, 3D blocks (c, co, s, bl) in meters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse

from flightcap.ballistics import F_SCALE, gravity_from_direction, reprojection_block
from flightcap.camera import project_with_jacobian
from flightcap.config import GRAVITY_MAGNITUDE, DofMode, Weights
from flightcap.errors import InconsistentScene, NonPositiveDepth
from flightcap.scene import Scene, Solution
from flightcap.skeleton import BonePriorTable, bone_directions

BLOCKS = ("p", "b", "c", "m", "s", "co", "bl")
METRIC_BLOCKS = ("c", "s", "co", "bl")


@dataclass(frozen=True)
class ParameterLayout:
    """Where each unknown lives in the flat parameter vector.

    Per episode ``b0`` and ``u`` (meters, m/s), then the shared gravity
    direction (unit-free 3-vector, normalised to 9.81 m/s^2) and shared focal
    length (kilopixels) when the mode estimates them, then per person the
    bone lengths and per-frame root translations (meters).
    """

    mode: DofMode
    n_episodes: int
    n_persons: int
    n_frames: int
    n_bones: int

    @property
    def _episode_size(self) -> int:
        return 6 * self.n_episodes

    @property
    def g_start(self) -> Optional[int]:
        return self._episode_size if self.mode.estimates_g else None

    @property
    def f_index(self) -> Optional[int]:
        if not self.mode.estimates_f:
            return None
        return self._episode_size + (3 if self.mode.estimates_g else 0)

    @property
    def _person_start(self) -> int:
        return self._episode_size + (3 if self.mode.estimates_g else 0) + (1 if self.mode.estimates_f else 0)

    @property
    def _person_size(self) -> int:
        return self.n_bones + 3 * self.n_frames

    @property
    def n_params(self) -> int:
        return self._person_start + self.n_persons * self._person_size

    def b0_cols(self, e: int) -> np.ndarray:
        return np.arange(6 * e, 6 * e + 3)

    def u_cols(self, e: int) -> np.ndarray:
        return np.arange(6 * e + 3, 6 * e + 6)

    def g_cols(self) -> Optional[np.ndarray]:
        return None if self.g_start is None else np.arange(self.g_start, self.g_start + 3)

    def l_cols(self, p: int) -> np.ndarray:
        s = self._person_start + p * self._person_size
        return np.arange(s, s + self.n_bones)

    def t_cols(self, p: int) -> np.ndarray:
        """(N, 3) column indices of the root translations of person ``p``."""
        s = self._person_start + p * self._person_size + self.n_bones
        return np.arange(s, s + 3 * self.n_frames).reshape(self.n_frames, 3)

    def describe(self) -> Dict[str, Tuple[int, int]]:
        out = {}
        for e in range(self.n_episodes):
            out[f"episode[{e}].b0"] = (6 * e, 6 * e + 3)
            out[f"episode[{e}].u"] = (6 * e + 3, 6 * e + 6)
        if self.g_start is not None:
            out["gravity_direction"] = (self.g_start, self.g_start + 3)
        if self.f_index is not None:
            out["f_kpx"] = (self.f_index, self.f_index + 1)
        for p in range(self.n_persons):
            lc = self.l_cols(p)
            tc = self.t_cols(p)
            out[f"person[{p}].bone_lengths"] = (int(lc[0]), int(lc[-1]) + 1)
            out[f"person[{p}].t_corr"] = (int(tc[0, 0]), int(tc[-1, -1]) + 1)
        return out


class _Triplets:
    def __init__(self):
        self.rows, self.cols, self.vals = [], [], []

    def add(self, rows, cols, vals):
        rows = np.asarray(rows)
        cols = np.asarray(cols)
        vals = np.asarray(vals)
        if cols.ndim == 1:
            cols = np.broadcast_to(cols, rows.shape[:1] + cols.shape)
        r, c = np.broadcast_arrays(rows[:, :, None], cols[:, None, :])
        v = np.broadcast_to(vals, r.shape)
        self.rows.append(r.ravel())
        self.cols.append(c.ravel())
        self.vals.append(v.ravel())

    def matrix(self, n_rows, n_cols, row_offset=0, scale=1.0):
        if not self.rows:
            return scipy.sparse.csr_matrix((n_rows, n_cols))
        rows = np.concatenate(self.rows) + row_offset
        return scipy.sparse.csr_matrix(
            (np.concatenate(self.vals) * scale, (rows, np.concatenate(self.cols))), shape=(n_rows, n_cols))


def _rows(n: int, width: int) -> np.ndarray:
    return np.arange(n)[:, None] * width + np.arange(width)[None, :]


class _State:
    """Unpacked parameter vector plus the quantities every block reuses."""

    def __init__(self, model: "EnergyModel", x: np.ndarray):
        lay = model.layout
        self.x = x
        e = lay.n_episodes
        self.b0 = x[:6 * e].reshape(e, 6)[:, :3] if e else np.zeros((0, 3))
        self.u = x[:6 * e].reshape(e, 6)[:, 3:] if e else np.zeros((0, 3))
        if lay.g_start is not None:
            self.g, self.dg_dv = gravity_from_direction(x[lay.g_start:lay.g_start + 3])
        else:
            self.g, self.dg_dv = model.g_fixed, None
        self.f = x[lay.f_index] * F_SCALE if lay.f_index is not None else model.f_fixed
        self.l = [x[lay.l_cols(p)] for p in range(lay.n_persons)]
        self.t = [x[lay.t_cols(p)] for p in range(lay.n_persons)]
        # absolute joints per person, (N, K, 3)
        self.joints = [
            np.einsum("kb,nbc->nkc", model.path * self.l[p][None, :], model.dirs[p]) + self.t[p][:, None, :]
            for p in range(lay.n_persons)
        ]


class EnergyModel:
    """Residuals and sparse Jacobian of the joint energy for one scene.

    ``g_fixed`` / ``f_fixed`` supply gravity and focal length for modes that
    do not estimate them (defaults: the scene's gravity and camera f).
    """

    def __init__(self, scene: Scene, mode=DofMode.NINE, weights: Optional[Weights] = None,
                 m_samples: int = 5, prior: Optional[BonePriorTable] = None,
                 g_fixed=None, f_fixed: Optional[float] = None, m_perspective: bool = True,
                 metric_unit: float = 1.0):
        scene.validate()
        if not metric_unit > 0:
            raise ValueError("metric_unit must be positive")
        self.metric_unit = float(metric_unit)
        self.m_perspective = bool(m_perspective)
        self.scene = scene
        self.mode = DofMode.parse(mode)
        self.weights = weights or Weights()
        self.m_samples = int(m_samples)
        self.prior = prior or scene.bone_prior or BonePriorTable.load()
        self.g_fixed = np.asarray(scene.gravity if g_fixed is None else g_fixed, dtype=float)
        if not self.mode.estimates_g and abs(np.linalg.norm(self.g_fixed) - GRAVITY_MAGNITUDE) > 1e-9:
            raise ValueError(f"known gravity must have norm {GRAVITY_MAGNITUDE}")
        self.f_fixed = float(scene.camera.f if f_fixed is None else f_fixed)
        self.c = scene.camera.c
        topo = scene.topology
        self.topology = topo
        self.path = topo.path_matrix()
        n = scene.n_frames
        self.layout = ParameterLayout(self.mode, len(scene.episodes), len(scene.persons), n, topo.n_bones)
        self.dirs = []
        for p in scene.persons:
            try:
                self.dirs.append(bone_directions(p.kin_relative(topo), topo))
            except ValueError as exc:
                raise InconsistentScene(f"kinematic pose unusable: {exc}") from exc

        r = scene.frame_rate
        # E_b: per episode, valid observations inside the window
        self._b = []
        for e in scene.episodes:
            idx = np.arange(e.start, e.end + 1)
            idx = idx[scene.object_valid[idx]]
            self._b.append((idx, (idx - e.start) / r, scene.object_track[idx]))
        # E_p: per person, valid 2D joints
        self._p = []
        for p in scene.persons:
            fi, ji = np.nonzero(p.p2d_valid)
            self._p.append((fi, ji, p.p2d[fi, ji]))
        # E_c: contacts resolved to episodes
        self._c = []
        for ct in scene.contacts:
            ei = scene.contact_episode(ct)
            ep = scene.episodes[ei]
            self._c.append((ct.person, ct.joint, ct.frame, ei, (ct.frame - ep.start) / r))
        # E_m: flight frames x torso joints x samples, per (episode, person)
        self._m = []
        w = np.arange(1, self.m_samples + 1) / self.m_samples
        torso = np.array(topo.torso)
        for ei, (idx, t, obs) in enumerate(self._b):
            for pi, p in enumerate(scene.persons):
                ii, jj = np.meshgrid(np.arange(len(idx)), torso, indexing="ij")
                ii, jj = ii.ravel(), jj.ravel()
                ok = p.p2d_valid[idx[ii], jj]
                ii, jj = ii[ok], jj[ok]
                ii = np.repeat(ii, len(w))
                jj = np.repeat(jj, len(w))
                ww = np.tile(w, len(ok.nonzero()[0]))
                frames = idx[ii]
                d2 = (1 - ww)[:, None] * p.p2d[frames, jj] + ww[:, None] * obs[ii]
                self._m.append((ei, pi, frames, jj, ww, t[ii], d2))
        # E_co: seams between consecutive episodes of one multi-episode
        self._co = []
        for ei in range(1, len(scene.episodes)):
            a, b = scene.episodes[ei - 1], scene.episodes[ei]
            if a.multi_episode == b.multi_episode:
                self._co.append((ei - 1, ei, (a.end - a.start) / r))

        self.block_sizes = {
            "p": sum(2 * len(fi) for fi, _, _ in self._p),
            "b": sum(2 * len(idx) for idx, _, _ in self._b),
            "c": 3 * len(self._c),
            "m": sum(2 * len(m[2]) for m in self._m),
            "s": len(topo.symmetric_pairs) * len(scene.persons),
            "co": 3 * len(self._co),
            "bl": topo.n_bones * len(scene.persons),
        }

    # -- packing ---------------------------------------------------------
    def pack(self, sol: Solution) -> np.ndarray:
        lay = self.layout
        x = np.zeros(lay.n_params)
        for e in range(lay.n_episodes):
            x[lay.b0_cols(e)] = sol.b0[e]
            x[lay.u_cols(e)] = sol.u[e]
        if lay.g_start is not None:
            x[lay.g_cols()] = np.asarray(sol.g) / np.linalg.norm(sol.g)
        if lay.f_index is not None:
            x[lay.f_index] = sol.f / F_SCALE
        for p in range(lay.n_persons):
            x[lay.l_cols(p)] = sol.bone_lengths[p]
            x[lay.t_cols(p)] = sol.t_corr[p]
        return x

    def unpack(self, x) -> Solution:
        st = _State(self, np.asarray(x, dtype=float))
        return Solution(
            mode=self.mode,
            episodes=list(self.scene.episodes),
            b0=st.b0.copy(), u=st.u.copy(), g=np.array(st.g), f=float(st.f),
            bone_lengths=np.array(st.l).reshape(self.layout.n_persons, -1),
            t_corr=np.array(st.t).reshape(self.layout.n_persons, self.scene.n_frames, 3),
        )

    # -- blocks ----------------------------------------------------------
    def _project(self, pts, st, frames=None, joints=None):
        try:
            return project_with_jacobian(pts, st.f, self.c)
        except NonPositiveDepth as exc:
            q = exc.joint
            raise NonPositiveDepth(
                "point behind the camera",
                frame=None if frames is None else int(frames[q]),
                joint=None if joints is None else int(joints[q])) from None

    def _block_p(self, st, jac):
        lay = self.layout
        res, trip, off = [], _Triplets(), 0
        for pi, (fi, ji, obs) in enumerate(self._p):
            pts = st.joints[pi][fi, ji]
            uv, jp, jf = self._project(pts, st, fi, ji)
            res.append((obs - uv).ravel())
            if jac:
                rows = off + _rows(len(fi), 2)
                d = self.path[ji][:, :, None] * self.dirs[pi][fi]
                trip.add(rows, lay.l_cols(pi), -np.einsum("qaj,qbj->qab", jp, d))
                trip.add(rows, lay.t_cols(pi)[fi], -jp)
                if lay.f_index is not None:
                    trip.add(rows, [lay.f_index], -jf[:, :, None] * F_SCALE)
            off += 2 * len(fi)
        return _cat(res), trip

    def _block_b(self, st, jac):
        lay = self.layout
        res, trip, off = [], _Triplets(), 0
        for ei, (idx, t, obs) in enumerate(self._b):
            try:
                r, d_b0, d_u, d_g, d_f = reprojection_block(st.b0[ei], st.u[ei], st.g, st.f, self.c, t, obs)
            except NonPositiveDepth as exc:
                raise NonPositiveDepth("object behind the camera", frame=int(idx[exc.joint])) from None
            res.append(r.ravel())
            if jac:
                rows = off + _rows(len(idx), 2)
                trip.add(rows, lay.b0_cols(ei), d_b0)
                trip.add(rows, lay.u_cols(ei), d_u)
                if lay.g_start is not None:
                    trip.add(rows, lay.g_cols(), d_g @ st.dg_dv)
                if lay.f_index is not None:
                    trip.add(rows, [lay.f_index], d_f[:, :, None] * F_SCALE)
            off += 2 * len(idx)
        return _cat(res), trip

    def _ballistic_point(self, st, ei, t):
        return st.b0[ei] + st.u[ei] * t + 0.5 * st.g * t**2

    def _block_c(self, st, jac):
        lay = self.layout
        res, trip = [], _Triplets()
        eye = np.eye(3)
        for q, (pi, joint, frame, ei, t) in enumerate(self._c):
            res.append(st.joints[pi][frame, joint] - self._ballistic_point(st, ei, t))
            if jac:
                rows = (3 * q + np.arange(3)).reshape(1, 3)
                d = (self.path[joint][:, None] * self.dirs[pi][frame]).T  # (3, n_bones)
                trip.add(rows, lay.l_cols(pi), d[None])
                trip.add(rows, lay.t_cols(pi)[frame], eye[None])
                trip.add(rows, lay.b0_cols(ei), -eye[None])
                trip.add(rows, lay.u_cols(ei), -t * eye[None])
                if lay.g_start is not None:
                    trip.add(rows, lay.g_cols(), -0.5 * t**2 * st.dg_dv[None])
        return _cat(res), trip

    def _block_m(self, st, jac):
        lay = self.layout
        res, trip, off = [], _Triplets(), 0
        for ei, pi, frames, jj, w, t, d2 in self._m:
            if len(frames) == 0:
                continue
            obj = st.b0[ei] + st.u[ei] * t[:, None] + 0.5 * st.g * (t**2)[:, None]
            hum = st.joints[pi][frames, jj]
            zh, zo = hum[:, 2], obj[:, 2]
            if self.m_perspective:
                # 3D fraction whose projection sits at fraction w of the 2D segment
                den = w * zh + (1 - w) * zo
                s = w * zh / den
            else:
                s = w
            pts = hum + s[:, None] * (obj - hum)
            uv, jp, jf = self._project(pts, st, frames, jj)
            res.append((d2 - uv).ravel())
            if jac:
                rows = off + _rows(len(frames), 2)
                if self.m_perspective:
                    ds_dzh = w * (1 - w) * zo / den**2
                    ds_dzo = -w * (1 - w) * zh / den**2
                else:
                    ds_dzh = ds_dzo = np.zeros_like(w)
                diff = obj - hum
                eye = np.eye(3)[None]
                dx_dh = (1 - s)[:, None, None] * eye
                dx_dh[:, :, 2] += diff * ds_dzh[:, None]
                dx_do = s[:, None, None] * eye
                dx_do[:, :, 2] += diff * ds_dzo[:, None]
                jh = -jp @ dx_dh
                jo = -jp @ dx_do
                d = self.path[jj][:, :, None] * self.dirs[pi][frames]
                trip.add(rows, lay.l_cols(pi), np.einsum("qaj,qbj->qab", jh, d))
                trip.add(rows, lay.t_cols(pi)[frames], jh)
                trip.add(rows, lay.b0_cols(ei), jo)
                trip.add(rows, lay.u_cols(ei), jo * t[:, None, None])
                if lay.g_start is not None:
                    trip.add(rows, lay.g_cols(), (jo * (0.5 * t**2)[:, None, None]) @ st.dg_dv)
                if lay.f_index is not None:
                    trip.add(rows, [lay.f_index], -jf[:, :, None] * F_SCALE)
            off += 2 * len(frames)
        return _cat(res), trip

    def _block_s(self, st, jac):
        lay = self.layout
        pairs = np.array(self.topology.symmetric_pairs)
        res, trip = [], _Triplets()
        for pi in range(lay.n_persons):
            res.append(st.l[pi][pairs[:, 0]] - st.l[pi][pairs[:, 1]])
            if jac:
                rows = (pi * len(pairs) + np.arange(len(pairs)))[:, None]
                lc = lay.l_cols(pi)
                trip.add(rows, lc[pairs[:, :1]], np.ones((len(pairs), 1, 1)))
                trip.add(rows, lc[pairs[:, 1:]], -np.ones((len(pairs), 1, 1)))
        return _cat(res), trip

    def _block_bl(self, st, jac):
        lay = self.layout
        nb = lay.n_bones
        res, trip = [], _Triplets()
        for pi in range(lay.n_persons):
            res.append(st.l[pi] - self.prior.lengths)
            if jac:
                rows = (pi * nb + np.arange(nb))[:, None]
                trip.add(rows, lay.l_cols(pi)[:, None], np.ones((nb, 1, 1)))
        return _cat(res), trip

    def _block_co(self, st, jac):
        lay = self.layout
        res, trip = [], _Triplets()
        eye = np.eye(3)[None]
        for q, (ea, eb, t) in enumerate(self._co):
            res.append(self._ballistic_point(st, ea, t) - st.b0[eb])
            if jac:
                rows = (3 * q + np.arange(3)).reshape(1, 3)
                trip.add(rows, lay.b0_cols(ea), eye)
                trip.add(rows, lay.u_cols(ea), t * eye)
                if lay.g_start is not None:
                    trip.add(rows, lay.g_cols(), 0.5 * t**2 * st.dg_dv[None])
                trip.add(rows, lay.b0_cols(eb), -eye)
        return _cat(res), trip

    def _block(self, name, st, jac):
        return getattr(self, f"_block_{name}")(st, jac)

    # -- public evaluation -----------------------------------------------
    def block_residuals(self, x) -> Dict[str, np.ndarray]:
        """Unweighted residuals of every block."""
        st = _State(self, np.asarray(x, dtype=float))
        return {name: self._block(name, st, False)[0] for name in BLOCKS}

    def block_jacobian(self, name: str, x):
        """Unweighted sparse Jacobian of one block."""
        st = _State(self, np.asarray(x, dtype=float))
        _, trip = self._block(name, st, True)
        return trip.matrix(self.block_sizes[name], self.layout.n_params)

    def _scale(self, name: str) -> float:
        unit = self.metric_unit if name in METRIC_BLOCKS else 1.0
        return np.sqrt(getattr(self.weights, name)) * unit

    def energies(self, x) -> Dict[str, float]:
        """Unweighted energy per block in objective units (3D blocks use ``metric_unit``)."""
        out = {}
        for k, v in self.block_residuals(x).items():
            unit = self.metric_unit if k in METRIC_BLOCKS else 1.0
            out[k] = float(v @ v) * unit**2
        return out

    def active_blocks(self):
        return [b for b in BLOCKS if getattr(self.weights, b) > 0 and self.block_sizes[b] > 0]

    def residuals(self, x) -> np.ndarray:
        st = _State(self, np.asarray(x, dtype=float))
        return _cat([self._scale(b) * self._block(b, st, False)[0] for b in self.active_blocks()])

    def jacobian(self, x):
        st = _State(self, np.asarray(x, dtype=float))
        mats = []
        for b in self.active_blocks():
            _, trip = self._block(b, st, True)
            mats.append(trip.matrix(self.block_sizes[b], self.layout.n_params, scale=self._scale(b)))
        if not mats:
            return scipy.sparse.csr_matrix((0, self.layout.n_params))
        return scipy.sparse.vstack(mats, format="csr")

    def objective(self, x) -> float:
        r = self.residuals(x)
        return float(r @ r)


def _cat(parts) -> np.ndarray:
    parts = [np.ravel(p) for p in parts]
    return np.concatenate(parts) if parts else np.zeros(0)


def state_from_ground_truth(scene: Scene, mode=DofMode.NINE) -> Solution:
    """Ground-truth unknowns of a synthetic scene as a Solution."""
    gt = scene.ground_truth
    if gt is None:
        raise ValueError("scene has no ground truth")
    root = scene.topology.root
    return Solution(
        mode=DofMode.parse(mode),
        episodes=list(scene.episodes),
        b0=np.array([p.b0 for p in gt.episode_params]).reshape(-1, 3),
        u=np.array([p.u for p in gt.episode_params]).reshape(-1, 3),
        g=np.array(gt.gravity),
        f=float(gt.f),
        bone_lengths=np.array(gt.bone_lengths),
        t_corr=np.array([pose[:, root, :] for pose in gt.poses]),
    )


def assemble(scene: Scene, weights: Optional[Weights] = None, mode=DofMode.NINE,
             state: Optional[Solution] = None, m_samples: int = 5, **kwargs):
    """Stacked weighted residual vector at ``state`` and the parameter layout.

    ``state`` defaults to the scene's ground truth. Extra keyword arguments
    go to :class:`EnergyModel`.
    """
    model = EnergyModel(scene, mode, weights, m_samples=m_samples, **kwargs)
    if state is None:
        state = state_from_ground_truth(scene, mode)
    return model.residuals(model.pack(state)), model.layout
