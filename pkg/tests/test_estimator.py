import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cinetransfer.estimator import CinematicTransfer
from cinetransfer.harness.scenarios import gt_trajectory, initial_params, load_scenario
from cinetransfer.proxies import make_reference


def test_params_round_trip_through_clone():
    est = CinematicTransfer(scene="scene_b", iters_per_window=7, guidance_n=None, ot_grid=8)
    params = clone(est).get_params()
    assert params["scene"] == "scene_b" and params["iters_per_window"] == 7
    assert params["guidance_n"] is None and params["ot_grid"] == 8
    est.set_params(arm="pose")
    assert est.arm == "pose"


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        CinematicTransfer().predict([0.0])


def test_fit_requires_clip_and_init():
    with pytest.raises(TypeError):
        CinematicTransfer().fit(np.zeros((3, 3)))


def test_fit_predict_on_quick_scenario(scene_a):
    sc = load_scenario("quick")
    gt = gt_trajectory(sc.motion, sc.seed)
    clip = make_reference(gt, scene_a, sc.resolution)
    init = initial_params(sc.init, gt[0], scene_a, sc.seed)
    with pytest.raises(ValueError, match="init"):
        CinematicTransfer(scene=scene_a).fit(clip)
    est = CinematicTransfer(scene=scene_a, init=init, iters_per_window=10, ot_grid=8,
                            ot_iters=20).fit(clip)
    assert len(est.trajectory_) == 3 and est.n_iter_ > 0 and len(est.log_) == est.n_iter_
    mid = est.positions([0.5])[0]
    ends = est.positions([0.0, 1.0])
    assert np.allclose(mid, ends.mean(axis=0), atol=1e-9)
    err = np.linalg.norm(est.positions([0, 1, 2]) - gt.positions(), axis=1)
    assert err.max() < 0.05 * scene_a.diameter
