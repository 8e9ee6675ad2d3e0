"""Cinematic losses: entropic Wasserstein pose loss, flow endpoint loss,
photometric baseline, and GradNorm-style balancing of the pose/flow weights.

The transport solver works on batches: a window's pose loss needs
``J + J(J-1)/2`` channel pairs per frame, and they all share one cost matrix,
so they are solved together by a single taped primitive.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, primitive

# Below this ratio max(C)/eps the kernel exp(-C/eps) is representable and the
# iterations run as matrix products; above it the dense log-sum-exp path is used.
KERNEL_RATIO_LIMIT = 300.0
TINY_MASS = 1e-10
# L1 row-marginal residual above which a run counts as unconverged (the maximum is 2)
MARGINAL_LIMIT = 1.0


class OTError(ArithmeticError):
    pass


@dataclass(frozen=True)
class OTConfig:
    grid: int = 32
    epsilon: float = 0.05
    iters: int = 50
    mass_floor: float = 1e-6

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.grid < 1:
            raise ValueError("grid must be >= 1")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be nonnegative")


@lru_cache(maxsize=16)
def grid_cost(rows: int, cols: int | None = None) -> np.ndarray:
    """Euclidean distance between grid cells, divided by the grid diagonal."""
    cols = rows if cols is None else cols
    r, c = np.divmod(np.arange(rows * cols), cols)
    pts = np.stack([r, c], axis=1).astype(np.float64)
    C = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    C /= np.hypot(max(rows - 1, 1), max(cols - 1, 1))
    C.setflags(write=False)
    return C


class _Kernel:
    """Row contractions against exp(-C/eps), in kernel or dense log form.

    ``C`` is symmetric, so contracting over rows or columns is the same call.
    """

    def __init__(self, C: np.ndarray, eps: float):
        self.Ce = C / eps
        self.dense = float(self.Ce.max()) > KERNEL_RATIO_LIMIT
        if not self.dense:
            self.K = np.exp(-self.Ce)
            self.KC = self.K * C

    def lse(self, x):
        """log sum_j exp(x_j - Ce_ij), for every batch row and i."""
        if self.dense:
            z = x[:, None, :] - self.Ce[None]
            m = z.max(axis=2)
            with np.errstate(divide="ignore"):
                return np.log(np.exp(z - m[..., None]).sum(axis=2)) + m
        m = x.max(axis=1, keepdims=True)
        with np.errstate(divide="ignore"):
            return np.log(np.exp(x - m) @ self.K) + m

    def contract(self, fi, x, w, C=None):
        """sum_j exp(fi_i + x_j - Ce_ij) * w_j (times C_ij when ``C`` is given)."""
        if self.dense:
            E = np.exp(fi[:, :, None] + x[:, None, :] - self.Ce[None])
            if C is not None:
                E = E * C[None]
            return (E * w[:, None, :]).sum(axis=2)
        m = x.max(axis=1, keepdims=True)
        M = self.KC if C is not None else self.K
        return ((np.exp(x - m) * w) @ M) * np.exp(fi + m)


@primitive("sinkhorn")
def _sinkhorn(a, b, C, eps, iters):
    """Entropic transport cost <P, C> for each row pair of ``a`` and ``b``.

    A truncated Sinkhorn run is not symmetric in its arguments, so each pair is
    put in a canonical order first; that makes d(a, b) == d(b, a) bit for bit.
    """
    diff = a - b
    first = np.argmax(diff != 0, axis=1)
    swap = diff[np.arange(len(a)), first] > 0
    if np.any(swap):
        a, b = np.where(swap[:, None], b, a), np.where(swap[:, None], a, b)
    ker = _Kernel(C, eps)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        la, lb = np.log(a), np.log(b)
        Fs, Gs = [], []
        G = np.zeros_like(b)
        for _ in range(iters):
            F = -ker.lse(G + lb)
            G = -ker.lse(F + la)
            Fs.append(F)
            Gs.append(G)
        ones = np.ones_like(b)
        row = ker.contract(F + la, G + lb, ones, C)
        resid = np.abs(ker.contract(F + la, G + lb, ones) - a).sum(axis=1)
    cost = row.sum(axis=1)
    if not (np.all(np.isfinite(cost)) and np.all(np.isfinite(F)) and np.all(np.isfinite(G))):
        raise OTError(f"Sinkhorn produced non-finite values (epsilon={eps} too small?)")
    if resid.max() > MARGINAL_LIMIT:
        raise OTError(f"Sinkhorn did not converge: marginal residual {resid.max():.3g} "
                      f"(epsilon={eps} too small for {iters} iterations?)")

    def vjp(g):
        g = g[:, None]
        col = ker.contract(G + lb, F + la, ones, C)
        Fb = g * row
        Gb = g * col
        la_b = g * row
        lb_b = g * col
        for k in range(iters - 1, -1, -1):
            Fk, Gk = Fs[k], Gs[k]
            Gprev = Gs[k - 1] if k > 0 else np.zeros_like(Gk)
            # G_k = -lse_i(F_k + la - Ce)
            t = -ker.contract(Fk + la, Gk, Gb)
            Fb = Fb + t
            la_b = la_b + t
            # F_k = -lse_j(G_{k-1} + lb - Ce)
            t = -ker.contract(Gprev + lb, Fk, Fb)
            lb_b = lb_b + t
            Gb = t
            Fb = np.zeros_like(Fb)
        ga, gb = la_b / a, lb_b / b
        return np.where(swap[:, None], gb, ga), np.where(swap[:, None], ga, gb)

    return cost, vjp


def _as_channels(x) -> Tensor:
    """(H, W) or (H, W, C) input as an (H, W, C) Tensor."""
    x = dc.as_tensor(x)
    if x.ndim == 2:
        x = x.reshape(x.shape[0], x.shape[1], 1)
    if x.ndim != 3:
        raise dc.ShapeError("heatmap", [x.shape])
    return x


def distributions(heat, cfg: OTConfig) -> Tensor:
    """Pool ``(H, W, C)`` channels to the OT grid and normalize to unit mass: ``(C, n)``."""
    heat = _as_channels(heat)
    H, W, Cn = heat.shape
    g = cfg.grid
    if H % g or W % g:
        raise ValueError(f"OT grid {g} does not divide resolution {(H, W)}")
    pooled = heat.reshape(g, H // g, g, W // g, Cn).mean(axis=(1, 3)).reshape(g * g, Cn).T
    n = g * g
    mass = pooled.data.sum(axis=1, keepdims=True)
    if np.any(pooled.data < 0):
        raise ValueError("heatmap channels must be nonnegative")
    floor = np.where(mass < cfg.mass_floor, cfg.mass_floor / n, 0.0)
    pooled = pooled + floor
    p = pooled / pooled.sum(axis=1, keepdims=True) + TINY_MASS
    return p / p.sum(axis=1, keepdims=True)


def wdist_batch(a: Tensor, b: Tensor, cfg: OTConfig) -> Tensor:
    """Row-wise transport costs between ``(B, n)`` distributions."""
    a, b = dc.as_tensor(a), dc.as_tensor(b)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != cfg.grid ** 2:
        raise dc.ShapeError("sinkhorn", [a.shape, b.shape])
    C = grid_cost(cfg.grid)
    return dc.record("sinkhorn", [a, b], C=C, eps=cfg.epsilon, iters=cfg.iters)


def sinkhorn_wdist(A, B, cfg: OTConfig | None = None):
    """Entropic Wasserstein distance between two heatmap channels.

    Returns a float for array inputs and a scalar Tensor when either input is
    taped.
    """
    cfg = cfg or OTConfig()
    A, B = dc.as_tensor(A), dc.as_tensor(B)
    if A.shape != B.shape:
        raise dc.ShapeError("sinkhorn_wdist", [A.shape, B.shape])
    out = wdist_batch(distributions(A, cfg), distributions(B, cfg), cfg)[0]
    return out if out.tape is not None else out.item()


def _pairs(J: int):
    return np.triu_indices(J, k=1)


def inter_joint_matrix(heat, cfg: OTConfig | None = None) -> np.ndarray:
    """Symmetric J x J matrix of pairwise channel distances, zero diagonal."""
    cfg = cfg or OTConfig()
    data = heat.data if hasattr(heat, "sigma_px") else heat
    p = distributions(np.asarray(dc.as_tensor(data).data), cfg)
    J = p.shape[0]
    iu, ju = _pairs(J)
    d = wdist_batch(dc.gather(p, iu), dc.gather(p, ju), cfg).data
    S = np.zeros((J, J))
    S[iu, ju] = d
    S[ju, iu] = d
    return S


@dataclass
class PoseTarget:
    """Precomputed reference side of the pose loss for one frame."""

    dist: np.ndarray  # (J, n)
    S_pairs: np.ndarray  # upper-triangle entries of S(H*)

    @classmethod
    def build(cls, heat_ref, cfg: OTConfig) -> PoseTarget:
        data = heat_ref.data if hasattr(heat_ref, "sigma_px") else np.asarray(heat_ref)
        S = inter_joint_matrix(data, cfg)
        iu, ju = _pairs(S.shape[0])
        return cls(distributions(data, cfg).data, S[iu, ju])


def pose_loss_batch(targets, heats, cfg: OTConfig) -> list:
    """Pose loss for several frames with one Sinkhorn call.

    ``targets`` are :class:`PoseTarget` and ``heats`` the synthesized
    ``(H, W, J)`` stacks (Tensors or arrays). Returns one scalar per frame.
    """
    ref_rows, syn_a, syn_b, layout = [], [], [], []
    for tgt, heat in zip(targets, heats):
        p = distributions(heat, cfg)
        J = p.shape[0]
        if J != tgt.dist.shape[0]:
            raise ValueError(f"joint count mismatch: reference {tgt.dist.shape[0]}, synthesized {J}")
        iu, ju = _pairs(J)
        ref_rows.append(Tensor(tgt.dist))
        syn_a.append(p)
        syn_b.append(dc.concat([dc.gather(p, iu), dc.gather(p, ju)]) if J > 1 else None)
        layout.append(J)
    A = dc.concat([r for r in ref_rows] + [b[: len(b) // 2] for b in syn_b if b is not None])
    B = dc.concat(syn_a + [b[len(b) // 2:] for b in syn_b if b is not None])
    d = wdist_batch(A, B, cfg)
    out, off_c, off_p = [], 0, sum(layout)
    for tgt, J in zip(targets, layout):
        channel = d[off_c:off_c + J].sum()
        off_c += J
        npair = J * (J - 1) // 2
        if npair:
            diff = d[off_p:off_p + npair] - tgt.S_pairs
            off_p += npair
            channel = channel + dc.norm2(diff) * np.sqrt(2.0)
        out.append(channel)
    return out


def pose_loss(H_ref, H_syn, cfg: OTConfig | None = None):
    """Sum of per-joint distances plus the Frobenius gap of inter-joint matrices."""
    cfg = cfg or OTConfig()
    ref = H_ref.data if hasattr(H_ref, "sigma_px") else H_ref
    syn = H_syn.data if hasattr(H_syn, "sigma_px") else H_syn
    ref = np.asarray(ref)
    if ref.shape[-1] != dc.as_tensor(syn).shape[-1]:
        raise ValueError(f"joint count mismatch: {ref.shape[-1]} vs {dc.as_tensor(syn).shape[-1]}")
    out = pose_loss_batch([PoseTarget.build(ref, cfg)], [syn], cfg)[0]
    return out if out.tape is not None else out.item()


def flow_loss(O_ref, O_syn):
    """Mean per-pixel endpoint error between two flow fields."""
    ref = np.asarray(O_ref.data if hasattr(O_ref, "resolution") and not isinstance(O_ref, Tensor)
                     else O_ref)
    syn = dc.as_tensor(O_syn.data if hasattr(O_syn, "resolution") and not isinstance(O_syn, Tensor)
                       else O_syn)
    ref = ref.reshape(-1, 2)
    if syn.size != ref.size:
        raise dc.ShapeError("flow_loss", [ref.shape, syn.shape])
    out = dc.norm2_rows(syn.reshape(-1, 2) - ref).mean()
    return out if out.tape is not None else out.item()


def photometric_loss(I_ref, I_syn):
    """Mean squared colour error."""
    ref = np.asarray(I_ref)
    syn = dc.as_tensor(I_syn)
    if syn.size != ref.size:
        raise dc.ShapeError("photometric_loss", [ref.shape, syn.shape])
    out = dc.square(syn.reshape(ref.shape) - ref).mean()
    return out if out.tape is not None else out.item()


def total_loss(pose_terms, flow_terms, weights: LossWeights):
    """alpha * mean(pose terms) + beta * mean(flow terms)."""
    out = 0.0
    if len(pose_terms) and weights.alpha:
        out = out + weights.alpha * (sum(pose_terms[1:], pose_terms[0]) * (1.0 / len(pose_terms)))
    if len(flow_terms) and weights.beta:
        out = out + weights.beta * (sum(flow_terms[1:], flow_terms[0]) * (1.0 / len(flow_terms)))
    return out


def gradnorm_update(weights: LossWeights, grad_norm_pose: float, grad_norm_flow: float,
                    initial_losses, current_losses, rate: float = 1.0,
                    bounds=(1e-3, 1e3)) -> LossWeights:
    """Move the weights so the weighted gradient norms track their targets.

    ``grad_norm_*`` are norms of the unweighted loss gradients. The target for
    loss i is ``mean(G) * r_i**gamma`` with ``G_i = w_i * norm_i`` and ``r_i``
    the loss ratio ``L_i / L_i(0)`` divided by its mean. Each weight is scaled
    by ``(target_i / G_i)**rate``, then the pair is rescaled to sum to 2 and
    clamped.
    """
    w = np.array([weights.alpha, weights.beta], dtype=np.float64)
    norms = np.array([grad_norm_pose, grad_norm_flow], dtype=np.float64)
    if np.any(norms < 0):
        raise ValueError("gradient norms must be nonnegative")
    if not np.any(norms > 0):
        return weights
    L0 = np.asarray(initial_losses, dtype=np.float64)
    L = np.asarray(current_losses, dtype=np.float64)
    if np.any(L0 <= 0):
        raise ValueError("initial losses must be positive")
    active = (norms > 0) & (w > 0)
    if active.sum() < 2:
        return weights
    G = w * norms
    ratio = L / L0
    r = ratio / ratio.mean()
    target = G.mean() * np.maximum(r, 1e-12) ** weights.gamma
    w = w * (target / G) ** rate
    w = 2.0 * w / w.sum()
    w = np.clip(w, *bounds)
    return replace(weights, alpha=float(w[0]), beta=float(w[1]))
