"""Inverse optimization of cinematic parameters over a two-camera sliding window."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from . import guidance as gd
from . import losses as L
from .geometry import CinematicParams, Trajectory
from .proxies import ReferenceClip, flow_tensor, heatmap_tensor
from .renderer import CameraTensors, Quadrature, check_defined, render_tensor
from .scene import DynamicScene

log = logging.getLogger(__name__)

ARMS = ("photometric", "inerf", "pose", "flow", "flow+pose")
N_PARAMS = 8
LOSS_FLOOR = 1e-6  # below this a loss has no usable GradNorm reference value


class OptimizationError(RuntimeError):
    """A window could not be optimized; ``partial`` holds the frames solved so far."""

    def __init__(self, message, iteration=None, window=None, partial=None, stage="optimize"):
        super().__init__(message)
        self.iteration = iteration
        self.window = window
        self.partial = partial
        self.stage = stage


@dataclass(frozen=True)
class OptimConfig:
    iters_per_window: int = 500
    first_window_iters: int | None = None  # cap for window 0, which starts from the raw init
    min_iters: int = 0
    lr_rotation: float = 1e-2
    lr_translation: float = 1e-2  # times scene diameter
    lr_focal: float = 1e-2  # times initial focal
    lr_time: float = 1e-2
    lr_decay: float = 1.0  # per-iteration multiplier, floored at lr_floor
    lr_floor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    stop_tol: float = 1e-4
    patience: int = 50
    guidance_n: int | None = 256  # None means every pixel
    hold_factor: float = 0.1
    focal_bounds: tuple = (20.0, 400.0)
    arm: str = "flow+pose"
    gradnorm: bool = True
    gradnorm_rate: float = 1.0
    ot: L.OTConfig = field(default_factory=L.OTConfig)
    weights_init: L.LossWeights = field(default_factory=L.LossWeights)
    resolution: tuple = (64, 64)
    quadrature: Quadrature = field(default_factory=Quadrature)
    sigma_px: float | None = None
    occlusion: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.arm not in ARMS:
            raise ValueError(f"unknown loss arm {self.arm!r}; expected one of {ARMS}")
        if self.iters_per_window < 0:
            raise ValueError("iters_per_window must be >= 0")
        if self.first_window_iters is not None and self.first_window_iters < 0:
            raise ValueError("first_window_iters must be >= 0")
        if min(self.lr_rotation, self.lr_translation, self.lr_focal, self.lr_time) <= 0:
            raise ValueError("learning rates must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        lo, hi = self.focal_bounds
        if not 0 < lo < hi:
            raise ValueError("focal bounds must satisfy 0 < min < max")

    def effective_weights(self) -> L.LossWeights:
        w = self.weights_init
        if self.arm == "pose":
            return replace(w, beta=0.0)
        if self.arm == "flow":
            return replace(w, alpha=0.0)
        return w


def group_lrs(cfg: OptimConfig, diameter: float, focal_init: float) -> np.ndarray:
    """Learning rate per entry of one camera's 8-vector (omega, rho, focal, time)."""
    return np.array([cfg.lr_rotation] * 3 + [cfg.lr_translation * diameter] * 3
                    + [cfg.lr_focal * focal_init, cfg.lr_time])


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> AdamState:
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(x, grads, state: AdamState, lrs, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Returns the new parameters; ``state`` is updated."""
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != np.shape(x) or state.m.shape != g.shape:
        raise dc.ShapeError("adam_step", [np.shape(x), g.shape, state.m.shape])
    state.t += 1
    state.m = beta1 * state.m + (1 - beta1) * g
    state.v = beta2 * state.v + (1 - beta2) * g * g
    m_hat = state.m / (1 - beta1 ** state.t)
    v_hat = state.v / (1 - beta2 ** state.t)
    return np.asarray(x, dtype=np.float64) - lrs * m_hat / (np.sqrt(v_hat) + eps)


def project_params(p: CinematicParams, focal_bounds, v=None) -> CinematicParams:
    """Re-anchor the pose and clamp focal and time to their feasible ranges.

    ``v`` is an optional raw parameter vector for ``p`` whose focal and time
    may lie outside the ranges that :class:`CinematicParams` accepts.
    """
    lo, hi = focal_bounds
    if v is not None:
        v = np.array(v, dtype=np.float64)
        v[6] = np.clip(v[6], lo, hi)
        v[7] = np.clip(v[7], 0.0, 1.0)
        p = p.with_vector(v)
    return replace(p.anchored(), focal=float(np.clip(p.focal, lo, hi)),
                   time=float(np.clip(p.time, 0.0, 1.0)))


@dataclass
class WindowRef:
    """Reference data for one window: two frames and the flow between them."""

    heat: tuple  # two (H, W, J) arrays
    flow: np.ndarray  # (H, W, 2)
    colors: tuple | None
    targets: tuple  # two PoseTarget

    @classmethod
    def from_clip(cls, clip: ReferenceClip, k: int, ot: L.OTConfig) -> WindowRef:
        heat = (clip.heatmaps[k].data, clip.heatmaps[k + 1].data)
        colors = None
        if clip.colors is not None:
            colors = (clip.colors[k], clip.colors[k + 1])
        return cls(heat, clip.flows[k].data, colors,
                   tuple(L.PoseTarget.build(h, ot) for h in heat))


@dataclass
class WindowState:
    params: tuple  # two CinematicParams
    adam: AdamState
    weights: L.LossWeights
    iteration: int = 0
    history: list = field(default_factory=list)  # monitored objective per iteration
    log: list = field(default_factory=list)  # one dict per iteration
    peak_adjoint_pixels: int = 0

    def vector(self) -> np.ndarray:
        return np.concatenate([p.vector() for p in self.params])


def _image_gradient_weights(color: np.ndarray) -> np.ndarray:
    gray = color.mean(axis=2)
    gy, gx = np.gradient(gray)
    return np.hypot(gx, gy)


class _Evaluator:
    """Builds the window objective for one arm on a fresh tape."""

    def __init__(self, ref: WindowRef, scene: DynamicScene, cfg: OptimConfig):
        self.ref = ref
        self.scene = scene
        self.cfg = cfg
        self.n_pixels = cfg.resolution[0] * cfg.resolution[1]
        self._inerf_w = None
        if cfg.arm in ("photometric", "inerf") and ref.colors is None:
            raise ValueError(f"arm {cfg.arm!r} needs reference colours")
        if cfg.arm == "inerf":
            self._inerf_w = [_image_gradient_weights(c) for c in ref.colors]

    def __call__(self, params, rng):
        cfg, ref, scene, res = self.cfg, self.ref, self.scene, self.cfg.resolution
        tape = dc.Tape()
        v = tape.variable(np.concatenate([p.vector() for p in params]))
        cams = [CameraTensors.build(v[8 * i:8 * i + 8], p.pose) for i, p in enumerate(params)]
        for c in cams:
            check_defined(scene, c.t.data)
        pixel_nodes = []
        out = {"tape": tape, "v": v}
        needs_render = cfg.arm != "pose"
        packed0 = o0 = d0 = None
        if needs_render:
            packed0, o0, d0 = render_tensor(cams[0], scene, res, cfg.quadrature)
            pixel_nodes.append(packed0)
        heats = [heatmap_tensor(c, scene, res, cfg.sigma_px, cfg.occlusion) for c in cams]
        flow = None
        if needs_render:
            flow = flow_tensor(cams[0], cams[1], packed0, o0, d0, scene, res)
            pixel_nodes.append(flow)
        G = gd.guidance_map(ref.heat[0], heats[0].data, ref.flow,
                            None if flow is None else flow.data)
        out["guidance"] = G

        if cfg.arm in ("pose", "flow", "flow+pose"):
            out["pose"] = sum_mean(L.pose_loss_batch(ref.targets, heats, cfg.ot)) if cfg.arm != "flow" else None
            out["flow"] = L.flow_loss(ref.flow, flow) if flow is not None and cfg.arm != "pose" else None
        else:
            packed1, _, _ = render_tensor(cams[1], scene, res, cfg.quadrature)
            pixel_nodes.append(packed1)
            rgb = [packed0[:, 0:3], packed1[:, 0:3]]
            if cfg.arm == "photometric":
                terms = [L.photometric_loss(c.reshape(-1, 3), rc.reshape(-1, 3))
                         for c, rc in zip(ref.colors, rgb)]
            else:
                n = cfg.guidance_n or self.n_pixels
                terms = []
                for k, (c, w) in enumerate(zip(ref.colors, self._inerf_w)):
                    idx = gd.sample_pixels(w, n, rng.integers(2**63), floor=1e-3 * w.mean() + 1e-12)
                    terms.append(L.photometric_loss(c.reshape(-1, 3)[idx], dc.gather(rgb[k], idx)))
            out["photo"] = sum_mean(terms)
        # gradient masking: full forward, sampled backward
        if cfg.guidance_n is not None and cfg.guidance_n < self.n_pixels and cfg.arm != "inerf":
            sampled = gd.sample_pixels(G, cfg.guidance_n, rng.integers(2**63))
            gd.apply_gradient_mask(tape, pixel_nodes, sampled)
        out["pixel_nodes"] = pixel_nodes
        return out


def window_objective(ref: WindowRef, params, scene: DynamicScene, cfg: OptimConfig,
                     weights: L.LossWeights | None = None, x=None, with_grad: bool = True):
    """Full-gradient L_total = alpha L_pose + beta L_flow for one window.

    ``x`` optionally replaces the 16-vector of both cameras (relative to their
    base poses). Returns ``(value, grad)``, with ``grad`` None when not requested.
    Photometric arms return their photometric loss instead.
    """
    cfg = replace(cfg, guidance_n=None)
    w = weights or cfg.effective_weights()
    if x is not None:
        x = np.asarray(x, dtype=np.float64)
        params = tuple(p.with_vector(x[8 * i:8 * i + 8]) for i, p in enumerate(params))
    ev = _Evaluator(ref, scene, cfg)(params, np.random.default_rng(cfg.seed))
    if cfg.arm in ("photometric", "inerf"):
        total = ev["photo"]
    else:
        terms = []
        if ev["pose"] is not None:
            terms.append(ev["pose"] * w.alpha)
        if ev["flow"] is not None:
            terms.append(ev["flow"] * w.beta)
        total = sum(terms[1:], terms[0])
    g = dc.grad(total, [ev["v"]])[0] if with_grad else None
    return total.item(), g


def sum_mean(terms):
    return sum(terms[1:], terms[0]) * (1.0 / len(terms))


def _adjoint_pixels(tape: dc.Tape, nodes) -> int:
    if not nodes:
        return 0
    return int(tape.mask_stats.per_node.get(nodes[0].node, 0)) if tape._masks else _count_rows(nodes)


def _count_rows(nodes) -> int:
    return int(nodes[0].shape[0])


def optimize_window(ref: WindowRef, init, scene: DynamicScene, cfg: OptimConfig,
                    hold: tuple = (1.0, 1.0), window_index: int = 0,
                    focal_init: float | None = None) -> WindowState:
    """Adam on the packed 16-vector of two cameras.

    ``hold`` scales each camera's learning rates; ``transfer_clip`` uses it to
    soften updates to the camera already solved by the previous window.
    """
    params = tuple(project_params(p, cfg.focal_bounds) for p in init)
    weights = cfg.effective_weights()
    state = WindowState(params, AdamState.zeros(2 * N_PARAMS), weights)
    max_iters = cfg.iters_per_window
    if window_index == 0 and cfg.first_window_iters is not None:
        max_iters = cfg.first_window_iters
    if max_iters == 0:
        return state
    phi0 = focal_init if focal_init is not None else params[0].focal
    lr_cam = group_lrs(cfg, scene.diameter, phi0)
    base_lrs = np.concatenate([lr_cam * hold[0], lr_cam * hold[1]])
    evaluator = _Evaluator(ref, scene, cfg)
    init_losses = [None, None]
    w0 = cfg.effective_weights()
    for it in range(max_iters):
        rng = np.random.default_rng([cfg.seed, window_index, it])
        try:
            ev = evaluator(state.params, rng)
        except Exception as exc:  # noqa: BLE001 - annotated and re-raised
            raise OptimizationError(f"window {window_index}, iteration {it}: {exc}",
                                    iteration=it, window=window_index,
                                    stage=type(exc).__name__) from exc
        v = ev["v"]
        tape = ev["tape"]
        entry = {"window": window_index, "iter": it}
        if cfg.arm in ("photometric", "inerf"):
            loss = ev["photo"]
            g_total = dc.grad(loss, [v])[0]
            peak = _adjoint_pixels(tape, ev["pixel_nodes"])
            monitored = loss.item()
            entry.update(L_photo=monitored)
        else:
            Lp, Lf = ev["pose"], ev["flow"]
            gp = dc.grad(Lp, [v])[0] if Lp is not None else np.zeros(16)
            gf = np.zeros(16)
            peak = 0
            if Lf is not None:
                gf = dc.grad(Lf, [v])[0]
                peak = _adjoint_pixels(tape, ev["pixel_nodes"])
            lp = Lp.item() if Lp is not None else 0.0
            lf = Lf.item() if Lf is not None else 0.0
            if not (np.isfinite(lp) and np.isfinite(lf)):
                raise OptimizationError(f"non-finite loss at iteration {it}", iteration=it,
                                        window=window_index, stage="loss")
            # a loss that starts at zero (e.g. flow on a static shot) gets its
            # reference value the first time it is measurably positive
            init_losses = [l0 if l0 is not None or l <= LOSS_FLOOR else l
                           for l0, l in zip(init_losses, (lp, lf))]
            ref_losses = [l0 if l0 is not None else max(l, 1e-12)
                          for l0, l in zip(init_losses, (lp, lf))]
            gn_p = float(np.linalg.norm(gp * base_lrs))
            gn_f = float(np.linalg.norm(gf * base_lrs))
            w = state.weights
            g_total = w.alpha * gp + w.beta * gf
            monitored = w0.alpha * lp + w0.beta * lf
            entry.update(L_pose=lp, L_flow=lf, alpha=w.alpha, beta=w.beta,
                         gn_pose=gn_p, gn_flow=gn_f)
            if cfg.gradnorm and cfg.arm == "flow+pose":
                state.weights = L.gradnorm_update(w, gn_p, gn_f, ref_losses, (lp, lf),
                                                  rate=cfg.gradnorm_rate)
        if not np.isfinite(monitored):
            raise OptimizationError(f"non-finite loss at iteration {it}", iteration=it,
                                    window=window_index, stage="loss")
        state.peak_adjoint_pixels = max(state.peak_adjoint_pixels, peak)
        state.history.append(monitored)
        scale = max(cfg.lr_floor, cfg.lr_decay ** it)
        x = adam_step(state.vector(), g_total, state.adam, base_lrs * scale,
                      cfg.beta1, cfg.beta2, cfg.adam_eps)
        state.params = tuple(project_params(p, cfg.focal_bounds, x[8 * i:8 * i + 8])
                             for i, p in enumerate(state.params))
        state.iteration = it + 1
        entry.update(loss=monitored, adjoint_pixels=peak,
                     params=[float(t) for p in state.params for t in
                             np.concatenate([p.position, [p.focal, p.time]])])
        state.log.append(entry)
        if _converged(state.history, cfg):
            break
    return state


def _converged(history, cfg: OptimConfig) -> bool:
    n = len(history)
    if n <= max(cfg.patience, cfg.min_iters):
        return False
    # best-so-far comparison; single samples are too noisy under pixel sampling
    old = min(history[: n - cfg.patience])
    new = min(history[n - cfg.patience:])
    return (old - new) / max(abs(old), 1e-12) < cfg.stop_tol


@dataclass
class TransferResult:
    trajectory: Trajectory
    windows: list  # WindowState per window

    @property
    def iterations(self) -> int:
        return int(sum(w.iteration for w in self.windows))

    @property
    def peak_adjoint_pixels(self) -> int:
        return max((w.peak_adjoint_pixels for w in self.windows), default=0)

    @property
    def log(self) -> list:
        return [e for w in self.windows for e in w.log]


def transfer_clip(reference: ReferenceClip, scene: DynamicScene, init: CinematicParams,
                  cfg: OptimConfig, return_result: bool = False):
    """Chain windows (k, k+1) along the clip and return one camera per frame."""
    if len(reference) < 2:
        raise ValueError("a reference needs at least two frames")
    if tuple(reference.resolution) != tuple(cfg.resolution):
        raise ValueError(f"reference resolution {reference.resolution} != {cfg.resolution}")
    solved = [project_params(init, cfg.focal_bounds)]
    windows = []
    phi0 = solved[0].focal
    for k in range(len(reference) - 1):
        ref = WindowRef.from_clip(reference, k, cfg.ot)
        cur = solved[k]
        nxt = replace(cur)
        hold = (1.0, 1.0) if k == 0 else (cfg.hold_factor, 1.0)
        try:
            st = optimize_window(ref, (cur, nxt), scene, cfg, hold=hold, window_index=k,
                                 focal_init=phi0)
        except OptimizationError as exc:
            exc.partial = Trajectory.from_params(solved)
            raise
        solved[k] = st.params[0]
        solved.append(st.params[1])
        windows.append(st)
        log.debug("window %d: %d iterations, loss %.4g", k, st.iteration,
                  st.history[-1] if st.history else float("nan"))
    traj = Trajectory.from_params(solved)
    return TransferResult(traj, windows) if return_result else traj
