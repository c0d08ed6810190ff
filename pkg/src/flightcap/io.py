"""Scene and solution files (versioned JSON) and CSV outputs.

Every key carries its unit as a suffix. Missing observations are written as
``null``. Files are written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from typing import Iterable, List, Optional, Sequence

import numpy as np

from flightcap.ballistics import BallisticParams
from flightcap.camera import CameraIntrinsics
from flightcap.config import DofMode
from flightcap.errors import InconsistentScene, SchemaError
from flightcap.scene import CATCH, RELEASE, ContactEvent, Episode, GroundTruth, Person, Scene, Solution
from flightcap.skeleton import MPII16, BonePriorTable, lengths_from_mapping, lengths_to_mapping

SCENE_SCHEMA = "flightcap-scene/1"
SOLUTION_SCHEMA = "flightcap-solution/1"


# -- low-level helpers -------------------------------------------------------

def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=folder)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _to_json(a):
    """Nested lists with NaN mapped to null."""
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        return None if not np.isfinite(a) else float(a)
    return [_to_json(v) for v in a]


def _from_json(value, field: str, shape_tail: Sequence[int] = ()):
    def conv(v):
        if v is None:
            return np.nan
        if isinstance(v, list):
            return [conv(x) for x in v]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise SchemaError(field, "numbers or null", type(v).__name__)
        return float(v)
    try:
        arr = np.array(conv(value), dtype=float)
    except ValueError:
        raise SchemaError(field, "a rectangular numeric array", "ragged nesting") from None
    if shape_tail and (arr.ndim < len(shape_tail) or tuple(arr.shape[-len(shape_tail):]) != tuple(shape_tail)):
        raise SchemaError(field, f"array of shape (..., {', '.join(map(str, shape_tail))})", f"shape {arr.shape}")
    return arr


def _require(doc: dict, key: str, where: str, kind=None):
    if not isinstance(doc, dict) or key not in doc:
        raise SchemaError(f"{where}{key}", "a value", "nothing")
    v = doc[key]
    if kind is not None and not isinstance(v, kind):
        raise SchemaError(f"{where}{key}", getattr(kind, "__name__", str(kind)), type(v).__name__)
    return v


# -- scene files ---------------------------------------------------------------

def scene_to_dict(scene: Scene) -> dict:
    topo = scene.topology
    k = scene.camera
    doc = {
        "schema": SCENE_SCHEMA,
        "joint_names": list(topo.joint_names),
        "camera": {
            "f_px": k.f,
            "c_px": [float(v) for v in k.c],
            "image_size_px": list(k.image_size) if k.image_size else None,
        },
        "frame_rate_hz": scene.frame_rate,
        "gravity_mps2": _to_json(scene.gravity),
        "object": {
            "track_px": _to_json(np.where(scene.object_valid[:, None], scene.object_track, np.nan)),
            "valid": [bool(v) for v in scene.object_valid],
        },
        "persons": [
            {
                "kin_m": _to_json(p.kin),
                "kin_unit_scale": p.kin_unit_scale,
                "p2d_px": _to_json(np.where(p.p2d_valid[..., None], p.p2d, np.nan)),
                "root_init_m": None if p.root_init is None else _to_json(p.root_init),
            }
            for p in scene.persons
        ],
        "contacts": [
            {"frame": c.frame, "joint": topo.joint_names[c.joint], "person": c.person, "side": c.side}
            for c in scene.contacts
        ],
        "episodes": [
            {"start_frame": e.start, "end_frame": e.end, "multi_episode": e.multi_episode}
            for e in scene.episodes
        ],
        "bone_prior_m": None if scene.bone_prior is None else scene.bone_prior.as_mapping(),
        "ground_truth": None,
    }
    gt = scene.ground_truth
    if gt is not None:
        doc["ground_truth"] = {
            "trajectory_m": _to_json(gt.trajectory),
            "poses_m": [_to_json(p) for p in gt.poses],
            "gravity_mps2": _to_json(gt.gravity),
            "bone_lengths_m": [lengths_to_mapping(b, topo) for b in gt.bone_lengths],
            "f_px": gt.f,
            "episodes": [{"b0_m": _to_json(p.b0), "u_mps": _to_json(p.u)} for p in gt.episode_params],
        }
    return doc


def scene_from_dict(doc: dict) -> Scene:
    if not isinstance(doc, dict):
        raise SchemaError("<root>", "object", type(doc).__name__)
    schema = doc.get("schema")
    if schema != SCENE_SCHEMA:
        raise SchemaError("schema", SCENE_SCHEMA, schema)
    topo = MPII16
    names = doc.get("joint_names", list(topo.joint_names))
    if list(names) != list(topo.joint_names):
        order = [topo.joint_index(n) for n in names]  # SchemaError names an unknown joint
        if sorted(order) != list(range(topo.n_joints)):
            raise SchemaError("joint_names", f"each of the {topo.n_joints} joints exactly once", names)
    else:
        order = list(range(topo.n_joints))
    perm = np.argsort(order)

    cam = _require(doc, "camera", "", dict)
    f = _require(cam, "f_px", "camera.")
    c = _require(cam, "c_px", "camera.", list)
    size = cam.get("image_size_px")
    try:
        camera = CameraIntrinsics(float(f), (float(c[0]), float(c[1])), tuple(int(v) for v in size) if size else None)
    except (TypeError, ValueError, IndexError) as exc:
        raise SchemaError("camera", "f_px > 0, c_px [cx, cy]", str(exc)) from None
    rate = _require(doc, "frame_rate_hz", "")
    obj = _require(doc, "object", "", dict)
    track = _from_json(_require(obj, "track_px", "object.", list), "object.track_px", (2,))
    valid = obj.get("valid")
    valid = None if valid is None else np.asarray(valid, dtype=bool)
    if valid is not None and valid.shape != (len(track),):
        raise InconsistentScene(f"object.valid has {valid.shape[0] if valid.ndim else 0} entries, "
                                f"object.track_px has {len(track)} frames")

    persons = []
    for i, pd in enumerate(_require(doc, "persons", "", list)):
        where = f"persons[{i}]."
        kin = _from_json(_require(pd, "kin_m", where), where + "kin_m", (topo.n_joints, 3))[:, perm]
        p2d = _from_json(_require(pd, "p2d_px", where), where + "p2d_px", (topo.n_joints, 2))[:, perm]
        root = pd.get("root_init_m")
        root = None if root is None else _from_json(root, where + "root_init_m", (3,))
        persons.append(Person(kin=kin, p2d=p2d, root_init=root, kin_unit_scale=float(pd.get("kin_unit_scale", 1.0))))

    contacts = []
    for i, cd in enumerate(doc.get("contacts", [])):
        where = f"contacts[{i}]."
        joint = _require(cd, "joint", where)
        if isinstance(joint, str):
            try:
                jidx = topo.joint_index(joint)
            except SchemaError:
                raise SchemaError(where + "joint", f"a joint name from {list(topo.joint_names)}", joint) from None
        elif isinstance(joint, int) and 0 <= joint < topo.n_joints:
            jidx = order[joint]
        else:
            raise SchemaError(where + "joint", "a joint name", joint)
        side = cd.get("side", RELEASE)
        if side not in (RELEASE, CATCH):
            raise SchemaError(where + "side", "'release' or 'catch'", side)
        contacts.append(ContactEvent(int(_require(cd, "frame", where)), jidx, int(cd.get("person", 0)), side))

    episodes = []
    for i, ed in enumerate(doc.get("episodes", [])):
        where = f"episodes[{i}]."
        try:
            episodes.append(Episode(int(_require(ed, "start_frame", where)), int(_require(ed, "end_frame", where)),
                                    int(ed.get("multi_episode", 0))))
        except ValueError as exc:
            if isinstance(exc, SchemaError):
                raise
            raise InconsistentScene(f"{where[:-1]}: {exc}") from None

    prior = doc.get("bone_prior_m")
    prior = None if prior is None else BonePriorTable.from_mapping(prior, topo)
    gravity = doc.get("gravity_mps2")
    gravity = np.array([0.0, 9.81, 0.0]) if gravity is None else _from_json(gravity, "gravity_mps2", (3,))

    gt = None
    gd = doc.get("ground_truth")
    if gd is not None:
        gt = GroundTruth(
            trajectory=_from_json(_require(gd, "trajectory_m", "ground_truth."), "ground_truth.trajectory_m", (3,)),
            poses=[_from_json(p, f"ground_truth.poses_m[{i}]", (topo.n_joints, 3))[:, perm]
                   for i, p in enumerate(_require(gd, "poses_m", "ground_truth.", list))],
            gravity=_from_json(_require(gd, "gravity_mps2", "ground_truth."), "ground_truth.gravity_mps2", (3,)),
            bone_lengths=[lengths_from_mapping(m, topo) for m in _require(gd, "bone_lengths_m", "ground_truth.", list)],
            f=float(_require(gd, "f_px", "ground_truth.")),
            episode_params=[BallisticParams(_from_json(e["b0_m"], "ground_truth.episodes.b0_m"),
                                            _from_json(e["u_mps"], "ground_truth.episodes.u_mps"),
                                            _from_json(gd["gravity_mps2"], "ground_truth.gravity_mps2"))
                            for e in gd.get("episodes", [])],
        )

    scene = Scene(camera=camera, frame_rate=float(rate), object_track=track, persons=persons, contacts=contacts,
                  episodes=episodes, object_valid=valid, gravity=gravity, bone_prior=prior, ground_truth=gt,
                  topology=topo)
    scene.validate()
    return scene


def _read_json(path) -> dict:
    with open(path) as fh:
        text = fh.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"line {exc.lineno}, column {exc.colno}", "valid JSON", exc.msg) from None


def load_scene(path) -> Scene:
    """Read and validate a scene file."""
    return scene_from_dict(_read_json(path))


def save_scene(scene: Scene, path) -> None:
    atomic_write_text(path, json.dumps(scene_to_dict(scene), indent=1, allow_nan=False) + "\n")


# -- solution files -------------------------------------------------------------

def solution_to_dict(sol: Solution, report=None) -> dict:
    doc = {
        "schema": SOLUTION_SCHEMA,
        "mode": sol.mode.value,
        "f_px": sol.f,
        "gravity_mps2": _to_json(sol.g),
        "gravity_direction": _to_json(sol.gravity_direction),
        "episodes": [
            {"start_frame": e.start, "end_frame": e.end, "multi_episode": e.multi_episode,
             "b0_m": _to_json(sol.b0[i]), "u_mps": _to_json(sol.u[i])}
            for i, e in enumerate(sol.episodes)
        ],
        "persons": [
            {"bone_lengths_m": lengths_to_mapping(sol.bone_lengths[p]), "t_corr_m": _to_json(sol.t_corr[p])}
            for p in range(len(sol.bone_lengths))
        ],
    }
    if report is not None:
        doc["report"] = finite_or_null(report.to_dict())
    return doc


def finite_or_null(obj):
    """Recursively replace non-finite floats with None for strict JSON."""
    if isinstance(obj, dict):
        return {k: finite_or_null(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [finite_or_null(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def solution_from_dict(doc: dict) -> Solution:
    if not isinstance(doc, dict) or doc.get("schema") != SOLUTION_SCHEMA:
        raise SchemaError("schema", SOLUTION_SCHEMA, doc.get("schema") if isinstance(doc, dict) else doc)
    eps = _require(doc, "episodes", "", list)
    persons = _require(doc, "persons", "", list)
    return Solution(
        mode=DofMode.parse(_require(doc, "mode", "")),
        episodes=[Episode(int(e["start_frame"]), int(e["end_frame"]), int(e.get("multi_episode", 0))) for e in eps],
        b0=np.array([_from_json(e["b0_m"], "episodes.b0_m") for e in eps]).reshape(-1, 3),
        u=np.array([_from_json(e["u_mps"], "episodes.u_mps") for e in eps]).reshape(-1, 3),
        g=_from_json(_require(doc, "gravity_mps2", ""), "gravity_mps2", (3,)),
        f=float(_require(doc, "f_px", "")),
        bone_lengths=np.array([lengths_from_mapping(p["bone_lengths_m"]) for p in persons]),
        t_corr=np.array([_from_json(p["t_corr_m"], "persons.t_corr_m", (3,)) for p in persons]),
    )


def save_solution(sol: Solution, path, report=None) -> None:
    atomic_write_text(path, json.dumps(solution_to_dict(sol, report), indent=1, allow_nan=False) + "\n")


def load_solution(path) -> Solution:
    return solution_from_dict(_read_json(path))


# -- CSV -----------------------------------------------------------------------

def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    import io as _io
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "nan" if not np.isfinite(v) else repr(float(v))
    return v


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    atomic_write_text(path, _csv_text(header, rows))


METRIC_COLUMNS = ("root_mpe_mm", "mpjpe_mm", "bone_mae_mm", "gravity_cosine", "object_mpe_mm", "e_smooth_mm",
                  "contact_gap_mm", "seam_gap_mm", "f_rel_error")


def write_metrics_csv(path, metrics) -> None:
    d = metrics.as_dict()
    write_csv(path, METRIC_COLUMNS, [[d[c] for c in METRIC_COLUMNS]])


SWEEP_COLUMNS = ("family", "mode", "sigma", "sigma_unit", "root_mpe_mm", "root_mpe_std_mm", "gt_root_mpe_mm",
                 "n_seeds", "failures")


def sweep_rows(rows) -> List[list]:
    return [[r.family, r.mode, r.sigma, "mm" if r.family == "pose" else "px", r.root_mpe_mm, r.root_mpe_std_mm,
             r.gt_root_mpe_mm, r.n_seeds, r.failures] for r in rows]


def write_sweep_csv(path, rows) -> None:
    write_csv(path, SWEEP_COLUMNS, sweep_rows(rows))


def write_plot_csv(path, scene: Scene, sol: Optional[Solution] = None) -> None:
    """Per-frame 2D observations, estimated and true 3D object and root positions."""
    n = scene.n_frames
    root = scene.topology.root
    est = sol.object_positions(n, scene.frame_rate) if sol is not None else np.full((n, 3), np.nan)
    gt = scene.ground_truth
    true = gt.trajectory if gt is not None else np.full((n, 3), np.nan)
    header = ["frame", "time_s", "obj_u_px", "obj_v_px", "obj_x_m", "obj_y_m", "obj_z_m",
              "obj_true_x_m", "obj_true_y_m", "obj_true_z_m"]
    cols = [np.arange(n), np.arange(n) / scene.frame_rate,
            np.where(scene.object_valid, scene.object_track[:, 0], np.nan),
            np.where(scene.object_valid, scene.object_track[:, 1], np.nan),
            est[:, 0], est[:, 1], est[:, 2], true[:, 0], true[:, 1], true[:, 2]]
    for p in range(len(scene.persons)):
        header += [f"p{p}_root_x_m", f"p{p}_root_y_m", f"p{p}_root_z_m"]
        r = sol.t_corr[p] if sol is not None else np.full((n, 3), np.nan)
        cols += [r[:, 0], r[:, 1], r[:, 2]]
        if gt is not None:
            header += [f"p{p}_root_true_x_m", f"p{p}_root_true_y_m", f"p{p}_root_true_z_m"]
            cols += [gt.poses[p][:, root, 0], gt.poses[p][:, root, 1], gt.poses[p][:, root, 2]]
    rows = [[int(cols[0][i])] + [float(c[i]) for c in cols[1:]] for i in range(n)]
    write_csv(path, header, rows)
