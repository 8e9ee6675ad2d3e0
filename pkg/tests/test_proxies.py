import numpy as np
import pytest
from dataclasses import replace

from cinetransfer import diffcore as dc
from cinetransfer.geometry import CinematicParams, SE3Pose, Trajectory, look_at
from cinetransfer.proxies import (FlowField, HeatmapStack, ReferenceClip, ReferenceFormatError,
                                  heatmap_tensor, induced_flow, load_reference, make_reference,
                                  render_heatmaps, save_reference)
from cinetransfer.renderer import CameraTensors, render_tensor, Quadrature
from cinetransfer.proxies import flow_tensor
from cinetransfer.scene import build_scene, joints_3d


def _facing(point, back=3.0, focal=80.0, time=0.0):
    point = np.asarray(point, dtype=np.float64)
    return CinematicParams(look_at(point - np.array([0, 0, back]), point), focal, time)


def test_joint_on_axis_peaks_at_principal_point():
    sc = build_scene("empty")
    head = joints_3d(sc, 0.0)[0]
    h = render_heatmaps(_facing(head), sc, (32, 32)).data[..., 0]
    assert np.unravel_index(h.argmax(), h.shape) == (16, 16)
    assert h.max() == pytest.approx(1.0, abs=1e-9)


def test_joint_behind_opaque_slab_vanishes():
    sc = build_scene("slab")
    head = joints_3d(sc, 0.0)[0]
    # camera beyond the slab looking back through it at the head
    p = CinematicParams(look_at(head + np.array([0, 0, 3.7]), head), 80.0, 0.0)
    h = render_heatmaps(p, sc, (32, 32)).data[..., 0]
    assert h.max() < 1e-3
    free = render_heatmaps(p, sc, (32, 32), occlusion=False).data[..., 0]
    assert free.max() > 0.9


@pytest.mark.parametrize("k", [1, 3, 5])
def test_camera_shift_moves_argmax_by_k_pixels(k):
    sc = build_scene("empty")
    head = joints_3d(sc, 0.0)[0]
    p = _facing(head, back=3.0, focal=80.0)
    dx = k * 3.0 / 80.0  # lateral shift giving k pixels at depth 3
    q = CinematicParams(SE3Pose(p.pose.rotation, p.pose.translation - p.pose.rotation[:, 0] * dx),
                        80.0, 0.0)
    a = render_heatmaps(p, sc, (32, 32)).data[..., 0]
    b = render_heatmaps(q, sc, (32, 32)).data[..., 0]
    ra, ca = np.unravel_index(a.argmax(), a.shape)
    rb, cb = np.unravel_index(b.argmax(), b.shape)
    assert (rb - ra, cb - ca) == (0, k)


def test_heatmap_translation_covariance():
    sc = build_scene("empty")
    head = joints_3d(sc, 0.0)[0]
    p = _facing(head, back=3.0, focal=80.0)
    q = CinematicParams(SE3Pose(p.pose.rotation, p.pose.translation - p.pose.rotation[:, 0] * 0.15),
                        80.0, 0.0)
    a = render_heatmaps(p, sc, (32, 32)).data[..., 0]
    b = render_heatmaps(q, sc, (32, 32)).data[..., 0]
    shifted = np.roll(a, 4, axis=1)
    ncc = (shifted * b).sum() / np.sqrt((shifted ** 2).sum() * (b ** 2).sum())
    assert ncc >= 0.99


def test_heatmap_focal_gradient_matches_fd(scene_a, gt_static):
    w = np.random.default_rng(0).normal(size=(16, 16, scene_a.actor.joint_count))

    def f(v):
        cam = CameraTensors.build(v, gt_static.pose)
        return (heatmap_tensor(cam, scene_a, (16, 16)) * dc.as_tensor(w)).sum()

    err, a, d = dc.check_gradient(f, [gt_static.vector()], h=1e-5, return_details=True)
    assert abs(a[0][6] - d[0][6]) <= 1e-3 * abs(d[0][6])
    assert np.abs(a[0] - d[0]).max() <= 1e-3 * np.abs(d[0]).max()


def test_fronto_parallel_translation_flow():
    sc = build_scene("slab")
    f, dx, z = 80.0, 0.05, 3.0
    p0 = CinematicParams(look_at([0.0, -1.5, -1.0], [0.0, -1.5, 5.0]), f, 0.3)
    R = p0.pose.rotation
    p1 = CinematicParams(SE3Pose(R, p0.pose.translation + R[:, 0] * dx), f, 0.3)
    flow = induced_flow(p0, p1, sc, (16, 16), Quadrature(n_samples=256)).data
    # the rendered depth of the slab face is not exactly 3, so compare with 2% slack
    np.testing.assert_allclose(flow[6:10, 6:10, 0], -f * dx / z, rtol=0.02)
    np.testing.assert_allclose(flow[..., 1], 0.0, atol=1e-9)


def test_identical_cameras_static_scene_zero_flow(gt_static):
    sc = build_scene("scene_a_static")
    flow = induced_flow(gt_static, gt_static, sc, (16, 16)).data
    np.testing.assert_allclose(flow, 0.0, atol=1e-12)


def test_time_advance_leaves_background_still(scene_a, gt_static):
    a = replace(gt_static, time=0.2)
    b = replace(gt_static, time=0.3)
    flow = induced_flow(a, b, scene_a, (32, 32)).data
    mag = np.linalg.norm(flow, axis=2)
    # corner pixels look past the actor at background only
    assert mag[:4, :4].max() < 1e-9
    assert mag.max() > 0.1


def test_flow_gradient_matches_fd(scene_a, gt_static):
    res = (12, 12)
    quad = Quadrature(n_samples=48)
    q = replace(gt_static, time=0.33)
    w = np.random.default_rng(3).normal(size=(144, 2))

    def f(v):
        c0 = CameraTensors.build(v[:8], gt_static.pose)
        c1 = CameraTensors.build(v[8:], q.pose)
        packed, o, d = render_tensor(c0, scene_a, res, quad)
        return (flow_tensor(c0, c1, packed, o, d, scene_a, res) * dc.as_tensor(w)).sum()

    x = np.concatenate([gt_static.vector(), q.vector() + np.r_[0.01, 0, 0, 0.05, 0, 0, 0, 0]])
    err, a, d = dc.check_gradient(f, [x], h=1e-5, return_details=True)
    assert np.abs(a[0] - d[0]).max() <= 1e-3 * np.abs(d[0]).max()


def test_make_reference_counts_and_determinism(scene_a):
    from cinetransfer.harness.scenarios import gt_trajectory
    traj = gt_trajectory({"kind": "arc", "frames": 4}, 0)
    a = make_reference(traj, scene_a, (16, 16))
    b = make_reference(traj, scene_a, (16, 16))
    assert len(a.heatmaps) == 4 and len(a.flows) == 3
    for x, y in zip(a.heatmaps, b.heatmaps):
        np.testing.assert_array_equal(x.data, y.data)
    for x, y in zip(a.flows, b.flows):
        np.testing.assert_array_equal(x.data, y.data)


def test_constant_trajectory_static_scene_has_zero_flow(gt_static):
    sc = build_scene("scene_a_static")
    clip = make_reference(Trajectory.from_params([gt_static] * 3), sc, (16, 16))
    for fl in clip.flows:
        np.testing.assert_allclose(fl.data, 0.0, atol=1e-12)


def test_ctrf_round_trip(tmp_path, scene_a):
    from cinetransfer.harness.scenarios import gt_trajectory
    clip = make_reference(gt_trajectory({"kind": "push-in", "frames": 3}), scene_a, (16, 16))
    path = save_reference(clip, tmp_path / "ref.ctrf")
    back = load_reference(path, expected_joints=clip.joint_count, expected_resolution=(16, 16))
    assert back.meta["source"] == "external-file"
    for x, y in zip(clip.heatmaps, back.heatmaps):
        np.testing.assert_allclose(x.data, y.data, rtol=1e-6, atol=1e-7)
    for x, y in zip(clip.flows, back.flows):
        np.testing.assert_allclose(x.data, y.data, rtol=1e-6, atol=1e-5)


def test_ctrf_errors(tmp_path, scene_a):
    from cinetransfer.harness.scenarios import gt_trajectory
    clip = make_reference(gt_trajectory({"kind": "push-in", "frames": 2}), scene_a, (8, 8))
    path = save_reference(clip, tmp_path / "ref.ctrf")
    with pytest.raises(ReferenceFormatError, match="joint count"):
        load_reference(path, expected_joints=clip.joint_count + 1)
    with pytest.raises(ReferenceFormatError, match="resolution"):
        load_reference(path, expected_resolution=(16, 16))
    raw = path.read_bytes()
    (tmp_path / "short.ctrf").write_bytes(raw[: len(raw) - 8 * 8 * 4])
    with pytest.raises(ReferenceFormatError, match="flow record"):
        load_reference(tmp_path / "short.ctrf")
    (tmp_path / "junk.ctrf").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ReferenceFormatError):
        load_reference(tmp_path / "junk.ctrf")


def test_clip_requires_matching_flow_count():
    h = HeatmapStack(np.zeros((4, 4, 2)), 1.0, (4, 4))
    with pytest.raises(ReferenceFormatError):
        ReferenceClip([h, h], [])
    with pytest.raises(ValueError):
        make_reference([CinematicParams()], build_scene("empty"), (4, 4))
    ReferenceClip([h, h], [FlowField(np.zeros((4, 4, 2)))])
