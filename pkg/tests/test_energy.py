import numpy as np
import pytest
from dataclasses import replace

from flightcap.camera import project
from flightcap.config import DofMode, Weights
from flightcap.energy import BLOCKS, EnergyModel, assemble, state_from_ground_truth
from flightcap.errors import ContactOutsideEpisode, InconsistentScene, NonPositiveDepth
from flightcap.lm import finite_difference_jacobian
from flightcap.scene import ContactEvent, Episode
from flightcap.skeleton import MPII16, apply_scale
from flightcap.synth import SceneSpec, generate

SMALL = SceneSpec(hold_frames=2, flight_frames=12)
ONLY = {b: 0.0 for b in BLOCKS}


def model_at_truth(spec=SMALL, mode=DofMode.NINE, weights=None, **kw):
    _, scene = generate(spec)
    model = EnergyModel(scene, mode, weights, **kw)
    sol = state_from_ground_truth(scene, mode)
    return scene, model, sol, model.pack(sol)


@pytest.mark.parametrize("mode", list(DofMode))
@pytest.mark.parametrize("spec", [SMALL, SMALL.with_(n_persons=2, n_episodes=3)])
def test_every_block_zero_at_ground_truth(mode, spec):
    _, model, _, x = model_at_truth(spec, mode)
    for name, r in model.block_residuals(x).items():
        if name == "bl" and spec.n_persons == 2:
            continue  # the prior is the first subject's lengths; the second subject differs in scale
        assert np.max(np.abs(r), initial=0.0) < 1e-9, name


def test_symmetry_and_prior_zero_for_single_subject():
    _, model, _, x = model_at_truth()
    r = model.block_residuals(x)
    assert np.max(np.abs(r["s"])) < 1e-12
    assert np.max(np.abs(r["bl"])) < 1e-12


def test_object_shift_gives_twenty_pixels():
    scene, model, sol, _ = model_at_truth(mode=DofMode.SIX)
    # move the flight to 5 m depth at the first frame so the hand check applies
    b0 = sol.b0[0] * 5.0 / sol.b0[0][2]
    sol = replace(sol, b0=np.array([b0]))
    x = model.pack(sol)
    base = model.block_residuals(x)["b"]
    sol2 = replace(sol, b0=np.array([b0 + (0.1, 0, 0)]))
    r = model.block_residuals(model.pack(sol2))["b"]
    assert r[0] - base[0] == pytest.approx(-20.0, rel=0.05)


def test_masked_object_frame_drops_residuals():
    _, scene = generate(SMALL)
    n = EnergyModel(scene).block_sizes["b"]
    scene.object_valid[5] = False
    assert EnergyModel(scene).block_sizes["b"] == n - 2


def test_pose_scale_ambiguity():
    scene, model, sol, x = model_at_truth()
    # doubling every length and the root translation doubles every joint about the camera centre
    sol2 = replace(sol, bone_lengths=2 * sol.bone_lengths, t_corr=2 * sol.t_corr)
    r1 = model.block_residuals(x)["p"]
    r2 = model.block_residuals(model.pack(sol2))["p"]
    np.testing.assert_allclose(r2, r1, atol=1e-9)


def test_single_joint_shift_is_local():
    _, scene = generate(SMALL)
    scene.persons[0].p2d[4, 7] += (6.0, 8.0)
    model = EnergyModel(scene)
    r = model.block_residuals(model.pack(state_from_ground_truth(scene)))["p"]
    nz = np.flatnonzero(np.abs(r) > 1e-9)
    assert len(nz) == 2
    assert np.hypot(*r[nz]) == pytest.approx(10.0)


def test_pose_behind_camera_reports_frame_and_joint():
    scene, model, sol, _ = model_at_truth()
    t = sol.t_corr.copy()
    t[0, 3, 2] = -5.0
    with pytest.raises(NonPositiveDepth) as exc:
        model.block_residuals(model.pack(replace(sol, t_corr=t)))
    assert exc.value.frame == 3


def test_contact_residual_is_joint_minus_object():
    scene, model, sol, _ = model_at_truth(mode=DofMode.SIX)
    # lift the object 0.2 m (y down) at the release frame by moving b0
    sol2 = replace(sol, b0=sol.b0 - (0, 0.2, 0))
    r = model.block_residuals(model.pack(sol2))["c"]
    np.testing.assert_allclose(r[:3], [0, 0.2, 0], atol=1e-12)


def test_two_person_contacts_route_to_subject():
    spec = SMALL.with_(n_persons=2, n_episodes=2)
    scene, model, sol, _ = model_at_truth(spec)
    assert [c.person for c in scene.contacts] == [0, 1, 1, 0]
    t = sol.t_corr.copy()
    t[1] += (0.05, 0, 0)
    r = model.block_residuals(model.pack(replace(sol, t_corr=t)))["c"].reshape(-1, 3)
    np.testing.assert_allclose(r[[1, 2]], [[0.05, 0, 0]] * 2, atol=1e-12)
    np.testing.assert_allclose(r[[0, 3]], 0.0, atol=1e-12)


def test_contact_outside_episodes():
    _, scene = generate(SMALL)
    scene.contacts.append(ContactEvent(0, 10, 0, "catch"))
    with pytest.raises(ContactOutsideEpisode):
        EnergyModel(scene)


def perturbed(seed=0, **kw):
    scene, model, sol, _ = model_at_truth(**kw)
    rng = np.random.default_rng(seed)
    sol = replace(sol, b0=sol.b0 + rng.normal(scale=0.05, size=sol.b0.shape),
                  t_corr=sol.t_corr + rng.normal(scale=0.03, size=sol.t_corr.shape),
                  bone_lengths=sol.bone_lengths * rng.uniform(0.95, 1.05, sol.bone_lengths.shape))
    return scene, model, sol


def test_localisation_term_blends_pose_and_object_residuals():
    scene, model, sol = perturbed()
    x = model.pack(sol)
    r = model.block_residuals(x)
    poses = sol.poses(scene)[0]
    obj = sol.object_positions(scene.n_frames, scene.frame_rate)
    e = scene.episodes[0]
    k = scene.camera.with_focal(sol.f)
    expected = []
    for i in range(e.start, e.end + 1):
        rb = scene.object_track[i] - project(obj[i], k)
        for j in MPII16.torso:
            rp = scene.persons[0].p2d[i, j] - project(poses[i, j], k)
            for m in range(1, 6):
                w = m / 5
                expected.append((1 - w) * rp + w * rb)
    np.testing.assert_allclose(r["m"], np.ravel(expected), atol=1e-9)


def test_localisation_term_uniform_3d_sampling():
    scene, _, sol = perturbed(1)
    model = EnergyModel(scene, m_perspective=False)
    r = model.block_residuals(model.pack(sol))["m"]
    poses = sol.poses(scene)[0]
    obj = sol.object_positions(scene.n_frames, scene.frame_rate)
    e = scene.episodes[0]
    k = scene.camera
    expected = []
    for i in range(e.start, e.end + 1):
        for j in MPII16.torso:
            p2 = scene.persons[0].p2d[i, j]
            for m in range(1, 6):
                w = m / 5
                d2 = p2 + w * (scene.object_track[i] - p2)
                expected.append(d2 - project(poses[i, j] + w * (obj[i] - poses[i, j]), k))
    np.testing.assert_allclose(r, np.ravel(expected), atol=1e-9)


def test_last_localisation_sample_equals_object_residual():
    scene, model, sol = perturbed(2)
    r = model.block_residuals(model.pack(sol))
    rm = r["m"].reshape(-1, len(MPII16.torso), 5, 2)
    rb = r["b"].reshape(-1, 2)
    for j in range(len(MPII16.torso)):
        np.testing.assert_allclose(rm[:, j, -1], rb, atol=1e-9)


def test_first_sample_approaches_joint_residual():
    scene, _, sol = perturbed(3)
    model = EnergyModel(scene, m_samples=1000)
    r = model.block_residuals(model.pack(sol))
    rm = r["m"].reshape(-1, len(MPII16.torso), 1000, 2)[:, :, 0]
    poses = sol.poses(scene)[0]
    e = scene.episodes[0]
    rp = np.array([[scene.persons[0].p2d[i, j] - project(poses[i, j], scene.camera) for j in MPII16.torso]
                   for i in range(e.start, e.end + 1)])
    scale = np.abs(rp).max()
    assert np.abs(rm - rp).max() < 0.01 * scale


def test_depth_shift_with_counter_scale_penalised_only_by_uniform_sampling():
    # move the subject 0.5 m back and enlarge it so its own reprojection is unchanged
    scene, _, sol, _ = model_at_truth(spec=SMALL.with_(hold_frames=0))
    root = sol.t_corr[0]
    factor = (root[:, 2] + 0.5) / root[:, 2]
    c = float(np.median(factor))
    sol2 = replace(sol, bone_lengths=sol.bone_lengths * c, t_corr=sol.t_corr * c)
    for perspective, nonzero in ((False, True), (True, False)):
        model = EnergyModel(scene, m_perspective=perspective)
        r = model.block_residuals(model.pack(sol2))
        assert np.abs(r["p"]).max() < 1e-9
        assert (np.linalg.norm(r["m"]) > 1.0) == nonzero


def test_continuity_residual_and_seam_count():
    spec = SMALL.with_(n_episodes=3)
    scene, model, sol, x = model_at_truth(spec)
    assert np.abs(model.block_residuals(x)["co"]).max() < 1e-12
    b0 = sol.b0.copy()
    b0[1] += (0.1, 0, 0)
    r = model.block_residuals(model.pack(replace(sol, b0=b0)))["co"].reshape(-1, 3)
    np.testing.assert_allclose(r[0], [-0.1, 0, 0], atol=1e-12)
    assert model.block_sizes["co"] == 6


def test_twelve_episode_chain_has_eleven_seams():
    _, model, _, _ = model_at_truth(SMALL.with_(n_episodes=12, flight_frames=6))
    assert model.block_sizes["co"] == 33


def test_separate_multi_episodes_have_no_seam():
    _, scene = generate(SMALL.with_(n_episodes=2))
    scene.episodes[1] = Episode(scene.episodes[1].start, scene.episodes[1].end, 1)
    assert EnergyModel(scene).block_sizes["co"] == 0


def test_block_isolation_and_additivity():
    scene, model, sol = perturbed(4)
    x = model.pack(sol)
    w = Weights(**{**ONLY, "b": 1.0})
    iso = EnergyModel(scene, weights=w)
    assert iso.objective(x) == pytest.approx(model.energies(x)["b"], rel=1e-14)
    rng = np.random.default_rng(0)
    w = Weights(*rng.uniform(0.1, 2.0, 7))
    m = EnergyModel(scene, weights=w)
    e = m.energies(x)
    assert m.objective(x) == pytest.approx(sum(getattr(w, b) * e[b] for b in BLOCKS), rel=1e-10)


def test_parameter_count_one_person_one_episode():
    spec = SceneSpec(hold_frames=0, flight_frames=30)
    _, scene = generate(spec)
    # full unknown set: per-frame roots, bone lengths, b0, u, gravity and f
    r, layout = assemble(scene, Weights(), DofMode.TEN)
    n = scene.n_frames
    assert n == 30
    assert layout.n_params == 3 * n + 16 + 9 == 115
    assert assemble(scene, Weights(), DofMode.NINE)[1].n_params == 114
    assert np.abs(r).max() < 1e-9


def test_two_person_block_sizes_double():
    one = EnergyModel(generate(SMALL)[1])
    two = EnergyModel(generate(SMALL.with_(n_persons=2))[1])
    for b in ("p", "m", "s", "bl"):
        assert two.block_sizes[b] == 2 * one.block_sizes[b]
    assert two.block_sizes["b"] == one.block_sizes["b"]


def test_layout_descriptor_covers_vector():
    _, model, _, _ = model_at_truth(SMALL.with_(n_persons=2, n_episodes=2), DofMode.TEN)
    spans = sorted(model.layout.describe().values())
    assert spans[0][0] == 0 and spans[-1][1] == model.layout.n_params
    assert all(a[1] == b[0] for a, b in zip(spans, spans[1:]))


@pytest.mark.parametrize("mode", list(DofMode))
def test_block_jacobians_match_differences(mode):
    scene, model, sol = perturbed(5, spec=SMALL.with_(n_persons=2, n_episodes=2), mode=mode)
    x = model.pack(sol)
    for name in BLOCKS:
        ana = model.block_jacobian(name, x).toarray()
        num = finite_difference_jacobian(lambda z: model.block_residuals(z)[name], x)
        scale = max(np.abs(num).max(), 1e-12)
        assert np.abs(ana - num).max() <= 1e-4 * scale, name


def test_weighted_jacobian_consistent_with_residuals():
    scene, model, sol = perturbed(6)
    x = model.pack(sol)
    num = finite_difference_jacobian(model.residuals, x)
    ana = model.jacobian(x).toarray()
    assert np.abs(ana - num).max() <= 1e-4 * np.abs(num).max()


def test_inconsistent_scene_diagnosis():
    _, scene = generate(SMALL)
    scene.persons[0].p2d = scene.persons[0].p2d[:-1]
    scene.persons[0].p2d_valid = scene.persons[0].p2d_valid[:-1]
    with pytest.raises(InconsistentScene, match="2D joints"):
        EnergyModel(scene)


def test_metric_unit_scales_only_3d_blocks():
    scene, model, sol = perturbed(7)
    x = model.pack(sol)
    mm = EnergyModel(scene, metric_unit=1000.0)
    e1, e2 = model.energies(x), mm.energies(x)
    for b in BLOCKS:
        f = 1e6 if b in ("c", "s", "co", "bl") else 1.0
        assert e2[b] == pytest.approx(f * e1[b], rel=1e-12)


def test_scaled_pose_check():
    # apply_scale of the kinematic input with the true lengths reproduces the true relative pose
    gt, scene = generate(SMALL)
    rel = apply_scale(scene.persons[0].kin_relative(), gt.bone_lengths[0])
    true_rel = gt.poses[0] - gt.poses[0][:, MPII16.root:MPII16.root + 1]
    np.testing.assert_allclose(rel, true_rel, atol=1e-12)
