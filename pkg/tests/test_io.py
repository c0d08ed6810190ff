import csv
import json

import numpy as np
import pytest

from flightcap.errors import InconsistentScene, SchemaError
from flightcap.io import (
    METRIC_COLUMNS,
    SWEEP_COLUMNS,
    load_scene,
    load_solution,
    save_scene,
    save_solution,
    write_metrics_csv,
    write_plot_csv,
    write_sweep_csv,
)
from flightcap.metrics import compute_metrics
from flightcap.solver import solve_scene
from flightcap.synth import SceneSpec, SweepRow, generate


@pytest.fixture(scope="module")
def scene():
    return generate(SceneSpec(n_persons=2, n_episodes=3, sigma_pose_mm=10, sigma_track_px=1, seed=3))[1]


def same(a, b):
    return np.array_equal(a, b, equal_nan=True)


def test_scene_round_trip_is_bitwise(scene, tmp_path):
    path = tmp_path / "scene.json"
    save_scene(scene, path)
    back = load_scene(path)
    assert same(back.object_track, scene.object_track)
    assert same(back.object_valid, scene.object_valid)
    assert back.camera == scene.camera
    assert back.frame_rate == scene.frame_rate
    assert same(back.gravity, scene.gravity)
    assert back.contacts == scene.contacts
    assert back.episodes == scene.episodes
    assert same(back.bone_prior.lengths, scene.bone_prior.lengths)
    for p, q in zip(back.persons, scene.persons):
        assert same(p.kin, q.kin) and same(p.p2d, q.p2d) and same(p.root_init, q.root_init)
        assert same(p.p2d_valid, q.p2d_valid)
    gt, gq = back.ground_truth, scene.ground_truth
    assert same(gt.trajectory, gq.trajectory) and same(gt.gravity, gq.gravity) and gt.f == gq.f
    assert all(same(a, b) for a, b in zip(gt.poses, gq.poses))
    assert all(same(a.b0, b.b0) and same(a.u, b.u) for a, b in zip(gt.episode_params, gq.episode_params))
    save_scene(back, tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


def test_units_in_keys(scene, tmp_path):
    save_scene(scene, tmp_path / "s.json")
    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc["schema"].startswith("flightcap-scene/")
    assert "f_px" in doc["camera"] and "frame_rate_hz" in doc
    assert doc["camera"]["image_size_px"] == [1200, 877]


def mutate(scene, tmp_path, fn):
    save_scene(scene, tmp_path / "s.json")
    doc = json.loads((tmp_path / "s.json").read_text())
    fn(doc)
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    return tmp_path / "bad.json"


def test_unknown_contact_joint(scene, tmp_path):
    path = mutate(scene, tmp_path, lambda d: d["contacts"][0].__setitem__("joint", "l_pinky"))
    with pytest.raises(SchemaError, match="l_pinky"):
        load_scene(path)


def test_frame_count_mismatch(scene, tmp_path):
    def cut(d):
        d["persons"][0]["p2d_px"] = d["persons"][0]["p2d_px"][:-1]
    with pytest.raises(InconsistentScene):
        load_scene(mutate(scene, tmp_path, cut))


def test_wrong_schema_and_bad_json(scene, tmp_path):
    with pytest.raises(SchemaError, match="schema"):
        load_scene(mutate(scene, tmp_path, lambda d: d.__setitem__("schema", "other/9")))
    (tmp_path / "x.json").write_text('{"schema": ')
    with pytest.raises(SchemaError, match="line 1"):
        load_scene(tmp_path / "x.json")


def test_permuted_joint_order_is_mapped(scene, tmp_path):
    def permute(d):
        names = d["joint_names"]
        order = list(reversed(range(len(names))))
        d["joint_names"] = [names[i] for i in order]
        for p in d["persons"]:
            p["kin_m"] = [[fr[i] for i in order] for fr in p["kin_m"]]
            p["p2d_px"] = [[fr[i] for i in order] for fr in p["p2d_px"]]
        d["ground_truth"]["poses_m"] = [[[fr[i] for i in order] for fr in pose] for pose in d["ground_truth"]["poses_m"]]
    back = load_scene(mutate(scene, tmp_path, permute))
    assert same(back.persons[0].kin, scene.persons[0].kin)
    assert same(back.persons[1].p2d, scene.persons[1].p2d)


def test_solution_round_trip_and_csvs(scene, tmp_path):
    sol, rep = solve_scene(scene)
    save_solution(sol, tmp_path / "sol.json", rep)
    back = load_solution(tmp_path / "sol.json")
    for name in ("b0", "u", "g", "bone_lengths", "t_corr"):
        assert same(getattr(back, name), getattr(sol, name))
    assert back.f == sol.f and back.mode == sol.mode and back.episodes == sol.episodes
    doc = json.loads((tmp_path / "sol.json").read_text())
    assert doc["report"]["status"] == rep.status

    write_metrics_csv(tmp_path / "m.csv", compute_metrics(sol, scene))
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert tuple(rows[0]) == METRIC_COLUMNS
    assert all("," not in v for v in rows[1])
    float(rows[1][0])

    write_plot_csv(tmp_path / "p.csv", scene, sol)
    rows = list(csv.DictReader(open(tmp_path / "p.csv")))
    assert len(rows) == scene.n_frames
    assert "obj_u_px" in rows[0] and "p1_root_z_m" in rows[0]


def test_sweep_csv_layout(tmp_path):
    rows = [SweepRow("pose", "6dof", 10.0, 12.5, 1.0, 0.1, 5), SweepRow("object", "6dof", 100.0, 400.25, 9.0, 0.1, 5)]
    write_sweep_csv(tmp_path / "s.csv", rows)
    out = list(csv.reader(open(tmp_path / "s.csv")))
    assert tuple(out[0]) == SWEEP_COLUMNS
    assert out[1][:4] == ["pose", "6dof", "10.0", "mm"]
    assert out[2][3] == "px"


def test_writes_are_atomic(scene, tmp_path):
    path = tmp_path / "scene.json"
    save_scene(scene, path)
    assert [p.name for p in tmp_path.iterdir()] == ["scene.json"]
