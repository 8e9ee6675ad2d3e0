"""scikit-learn style wrapper around :func:`transfer_clip`.

``fit`` takes a reference clip and learns one camera per frame; ``predict``
returns interpolated cameras at (possibly fractional) frame positions.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .geometry import CinematicParams, interpolate_trajectory
from .losses import LossWeights, OTConfig
from .optimizer import OptimConfig, transfer_clip
from .proxies import ReferenceClip
from .scene import DynamicScene, build_scene


class CinematicTransfer(BaseEstimator):
    """Recover a camera trajectory that reproduces a reference clip in ``scene``.

    Hyperparameters mirror :class:`OptimConfig`; ``init`` is the first camera.
    """

    def __init__(self, scene="scene_a", init: CinematicParams | None = None, arm="flow+pose",
                 iters_per_window=500, first_window_iters=None, guidance_n=256,
                 ot_grid=16, ot_epsilon=0.05, ot_iters=30, gradnorm=True, seed=0):
        self.scene = scene
        self.init = init
        self.arm = arm
        self.iters_per_window = iters_per_window
        self.first_window_iters = first_window_iters
        self.guidance_n = guidance_n
        self.ot_grid = ot_grid
        self.ot_epsilon = ot_epsilon
        self.ot_iters = ot_iters
        self.gradnorm = gradnorm
        self.seed = seed

    def _config(self, resolution) -> OptimConfig:
        return OptimConfig(iters_per_window=self.iters_per_window,
                           first_window_iters=self.first_window_iters, arm=self.arm,
                           guidance_n=self.guidance_n, gradnorm=self.gradnorm,
                           ot=OTConfig(grid=self.ot_grid, epsilon=self.ot_epsilon,
                                       iters=self.ot_iters),
                           weights_init=LossWeights(), resolution=tuple(resolution),
                           seed=self.seed)

    def fit(self, X: ReferenceClip, y=None):
        if not isinstance(X, ReferenceClip):
            raise TypeError(f"expected a ReferenceClip, got {type(X).__name__}")
        if self.init is None:
            raise ValueError("init (the first camera) is required")
        scene = self.scene if isinstance(self.scene, DynamicScene) else build_scene(self.scene)
        result = transfer_clip(X, scene, self.init, self._config(X.resolution),
                               return_result=True)
        self.trajectory_ = result.trajectory
        self.n_iter_ = result.iterations
        self.log_ = result.log
        return self

    def predict(self, X) -> list:
        """Cameras at frame positions ``X`` (scalars within the keyframe range)."""
        if not hasattr(self, "trajectory_"):
            raise NotFittedError("call fit before predict")
        return [interpolate_trajectory(self.trajectory_, float(t)) for t in np.ravel(X)]

    def positions(self, X) -> np.ndarray:
        return np.array([p.position for p in self.predict(X)])
