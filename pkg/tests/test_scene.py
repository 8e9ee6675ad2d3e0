import copy

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cinetransfer import diffcore as dc
from cinetransfer.scene import (PRESETS, SceneConfigError, build_scene, joints_3d,
                                load_scene_config, sample_color, sample_density)


def _segment_distance(x, a, b):
    u = b - a
    s = np.clip(np.dot(x - a, u) / np.dot(u, u), 0.0, 1.0)
    return np.linalg.norm(x - (a + s * u))


@pytest.mark.parametrize("name", PRESETS)
def test_presets_build(name):
    sc = build_scene(name)
    assert sc.name == name
    assert sc.diameter > 0


def test_scene_pair_shares_skeleton(scene_a, scene_b):
    np.testing.assert_array_equal(scene_a.actor.bones, scene_b.actor.bones)
    np.testing.assert_array_equal(scene_a.actor.joint_keyframes, scene_b.actor.joint_keyframes)
    assert not np.array_equal(scene_a.actor.bone_color, scene_b.actor.bone_color) or \
        not np.array_equal(scene_a.slab_lo, scene_b.slab_lo)


def test_joints_at_keyframes_are_exact(scene_a):
    a = scene_a.actor
    for k, t in enumerate(a.key_times):
        np.testing.assert_array_equal(joints_3d(scene_a, t), a.joint_keyframes[k])


def test_joints_interpolate_linearly():
    cfg = load_scene_config("empty")
    cfg = copy.deepcopy(cfg)
    J = len(cfg["actor"]["joints"][0])
    cfg["actor"]["key_times"] = [0.0, 1.0]
    cfg["actor"]["joints"] = [[[0.0, -1.0, 0.0]] * J, [[1.0, -1.0, 0.0]] * J]
    sc = build_scene(cfg)
    np.testing.assert_allclose(joints_3d(sc, 0.5)[0], [0.5, -1.0, 0.0])


@given(st.floats(0.01, 0.99))
def test_joint_time_derivative_matches_fd(m):
    sc = build_scene("scene_a")
    w = np.linspace(-1, 1, 3 * sc.actor.joint_count).reshape(-1, 3)
    kt = sc.actor.key_times
    if np.min(np.abs(kt - m)) < 2e-4:
        m = m + 5e-4
    err = dc.check_gradient(lambda t: (joints_3d(sc, t) * dc.as_tensor(w)).sum(),
                            [np.array([m])], h=1e-5)
    assert err <= 1e-6


def test_joints_reject_out_of_range_time(scene_a):
    with pytest.raises(ValueError):
        joints_3d(scene_a, 1.2)


def test_density_far_outside_is_zero(scene_a):
    assert sample_density(scene_a, np.array([100.0, 100.0, 100.0]), 0.3) <= 1e-12


def test_density_at_blob_center_at_least_amplitude(scene_a):
    c = scene_a.blob_center[0]
    assert sample_density(scene_a, c, 0.0) >= scene_a.blob_amplitude[0]


def test_capsule_density_matches_point_segment_formula():
    sc = build_scene("empty")
    a = sc.actor
    J = joints_3d(sc, 0.0)
    i, j = a.bones[3]
    mid = 0.5 * (J[i] + J[j]) + np.array([0.02, 0.01, -0.03])
    expected = sum(amp * np.exp(-_segment_distance(mid, J[p], J[q]) ** 2 / (2 * r * r))
                   for (p, q), amp, r in zip(a.bones, a.bone_amplitude, a.bone_radius))
    assert len(sc.blob_amplitude) == 0 and len(sc.slab_amplitude) == 0
    assert sample_density(sc, mid, 0.0) == pytest.approx(expected, abs=1e-12)


def test_color_is_background_in_empty_space(scene_a):
    rgb = sample_color(scene_a, np.array([100.0, 100.0, 100.0]), 0.0)
    np.testing.assert_array_equal(rgb, scene_a.background_color)


def test_color_mix_of_two_equal_primitives():
    cfg = copy.deepcopy(load_scene_config("blob"))
    blob = cfg["blobs"][0]
    cfg["blobs"] = [dict(blob, center=[-0.5, -1.0, 0.0], color=[1.0, 0.0, 0.0]),
                    dict(blob, center=[0.5, -1.0, 0.0], color=[0.0, 0.0, 1.0])]
    cfg["actor"]["bone_amplitude"] = 0.0
    sc = build_scene(cfg)
    np.testing.assert_allclose(sample_color(sc, np.array([0.0, -1.0, 0.0]), 0.0), [0.5, 0, 0.5],
                               atol=1e-12)


def test_batch_queries_match_single(scene_a, rng):
    pts = rng.uniform(scene_a.bounds[0], scene_a.bounds[1], size=(20, 3))
    batch = sample_density(scene_a, pts, 0.4)
    single = [sample_density(scene_a, p, 0.4) for p in pts]
    np.testing.assert_allclose(batch, single, rtol=0, atol=0)


@pytest.mark.parametrize("path,value,field", [
    (("bounds",), [[0, 0, 0], [-1, 1, 1]], "bounds"),
    (("actor", "key_times"), [0.0, 0.5, 0.4, 0.9, 1.0], "actor.key_times"),
    (("actor", "bone_radius"), None, "actor.bone_radius"),
    (("background_color",), [0.1, 0.2], "background_color"),
])
def test_invalid_config_names_field(path, value, field):
    cfg = copy.deepcopy(load_scene_config("scene_a"))
    node = cfg
    for k in path[:-1]:
        node = node[k]
    if value is None:
        value = [-1.0] * len(node[path[-1]])
    node[path[-1]] = value
    with pytest.raises(SceneConfigError) as exc:
        build_scene(cfg)
    assert exc.value.field == field


def test_unknown_preset():
    with pytest.raises((SceneConfigError, FileNotFoundError, ValueError)):
        build_scene("no_such_scene")
