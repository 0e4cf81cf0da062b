"""Continuous refinement of active Gaussians by differentiable splatting.

backward() walks the same splat order as the forward compositor and
accumulates reverse-mode gradients of the L1 image loss with respect to all
six trainable attribute groups (means, log scales, quaternions, logit
opacities, SH DC, SH rest). The suffix S_i needed for d(loss)/d(alpha_i) is
recovered per pixel from the forward image as S_i = C - prefix_i - contrib_i,
so the walk stays a single front-to-back pass. Updates use Adam with
per-attribute learning rates; frozen rows receive no state and no updates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import CameraIntrinsics, Pose, quat_normalize, quat_to_rotmat
from .model import AppendRecord, GaussianModel, MutationRecord, PermuteRecord, PruneRecord
from .render import (
    ALPHA_CAP,
    SH_C0,
    TRANSMITTANCE_CUTOFF,
    LightState,
    composite,
    prepare_splats,
    sh_basis_grad,
    splat_window,
    _window_alpha,
)


@dataclass
class ReferenceView:
    """Ground-truth supervision for one camera."""

    pose: Pose
    intrinsics: CameraIntrinsics
    image: np.ndarray
    light_state: LightState
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ready: bool = True

    def __post_init__(self):
        if self.image.shape[:2] != (self.intrinsics.height, self.intrinsics.width):
            raise ValueError("reference image dimensions do not match intrinsics")


@dataclass
class Gradients:
    """Loss gradients for the active rows only."""

    means: np.ndarray
    log_scales: np.ndarray
    quaternions: np.ndarray
    logit_opacities: np.ndarray
    sh_coeffs: np.ndarray

    def __iadd__(self, other: "Gradients"):
        self.means += other.means
        self.log_scales += other.log_scales
        self.quaternions += other.quaternions
        self.logit_opacities += other.logit_opacities
        self.sh_coeffs += other.sh_coeffs
        return self

    def scale(self, f: float):
        self.means *= f
        self.log_scales *= f
        self.quaternions *= f
        self.logit_opacities *= f
        self.sh_coeffs *= f

    def per_gaussian_norm(self) -> np.ndarray:
        """Position-gradient magnitude per active Gaussian (freeze statistic)."""
        return np.linalg.norm(self.means, axis=-1)


def loss(rendered: np.ndarray, ground_truth: np.ndarray) -> float:
    """Mean absolute error over pixels and channels."""
    if rendered.shape != ground_truth.shape:
        raise ValueError(f"shape mismatch {rendered.shape} vs {ground_truth.shape}")
    return float(np.mean(np.abs(rendered - ground_truth)))


def _drotmat_dquat_batch(q: np.ndarray) -> np.ndarray:
    """Batched derivative of the rotation matrix w.r.t. raw quaternions: (M, 4, 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qh = q / norm
    w, x, y, z = qh[:, 0], qh[:, 1], qh[:, 2], qh[:, 3]
    M = q.shape[0]
    d = np.zeros((M, 4, 3, 3))
    zero = np.zeros(M)
    d[:, 0] = 2 * np.stack([
        np.stack([zero, -z, y], -1), np.stack([z, zero, -x], -1), np.stack([-y, x, zero], -1)
    ], -2)
    d[:, 1] = 2 * np.stack([
        np.stack([zero, y, z], -1), np.stack([y, -2 * x, -w], -1), np.stack([z, w, -2 * x], -1)
    ], -2)
    d[:, 2] = 2 * np.stack([
        np.stack([-2 * y, x, w], -1), np.stack([x, zero, z], -1), np.stack([-w, z, -2 * y], -1)
    ], -2)
    d[:, 3] = 2 * np.stack([
        np.stack([-2 * z, -w, x], -1), np.stack([w, -2 * z, y], -1), np.stack([x, y, zero], -1)
    ], -2)
    # chain through normalization: dqh/dq = (I - qh qh^T)/|q|
    proj = (np.eye(4)[None] - qh[:, :, None] * qh[:, None, :]) / norm[:, :, None]
    return np.einsum("mkl,mlij->mkij", proj, d)


def backward(model: GaussianModel, view: ReferenceView, index_subset=None,
             extent_cutoff: bool = True):
    """Analytic gradients of the L1 loss for one view.

    Returns (loss value, Gradients over active rows, rendered image).
    """
    intr = view.intrinsics
    prep = prepare_splats(model, view.pose, intr, view.light_state, index_subset, extent_cutoff)
    image, _ = composite(prep, intr, view.background)
    gt = view.image.astype(np.float64)
    L = loss(image, gt)
    n_px = image.size
    dLdC = np.sign(image - gt) / n_px

    M = prep.rows.size
    g_color = np.zeros((M, 3))
    g_opacity = np.zeros(M)
    g_mu2d = np.zeros((M, 2))
    g_Sigma2d = np.zeros((M, 2, 2))

    H, W = intr.height, intr.width
    T = np.ones((H, W))
    prefix = np.zeros((H, W, 3))
    for i in prep.order:
        x0, x1, y0, y1 = splat_window(prep.mu2d[i], prep.radius[i], W, H)
        if x0 >= x1 or y0 >= y1:
            continue
        Tw = T[y0:y1, x0:x1]
        active = Tw >= TRANSMITTANCE_CUTOFF
        if not active.any():
            continue
        alpha, G = _window_alpha(prep, i, x0, x1, y0, y1)
        uncapped = prep.opacity[i] * G < ALPHA_CAP
        contrib = np.where(active, alpha * Tw, 0.0)
        gC = dLdC[y0:y1, x0:x1]
        color = prep.color[i]

        g_color[i] = np.einsum("yxc,yx->c", gC, contrib)
        S = image[y0:y1, x0:x1] - prefix[y0:y1, x0:x1] - contrib[..., None] * color
        dalpha = np.einsum("yxc,yxc->yx", gC, color[None, None, :] * Tw[..., None] - S / (1.0 - alpha)[..., None])
        dalpha = np.where(active, dalpha, 0.0)
        g_opacity[i] = np.sum(dalpha * np.where(uncapped, G, 0.0))
        g_power = dalpha * np.where(uncapped, alpha, 0.0)

        xs = np.arange(x0, x1, dtype=np.float64) + 0.5
        ys = np.arange(y0, y1, dtype=np.float64) + 0.5
        dx = xs[None, :] - prep.mu2d[i, 0]
        dy = ys[:, None] - prep.mu2d[i, 1]
        A = prep.inv2d[i]
        Adx = A[0, 0] * dx + A[0, 1] * dy
        Ady = A[1, 0] * dx + A[1, 1] * dy
        g_mu2d[i, 0] = np.sum(g_power * Adx)
        g_mu2d[i, 1] = np.sum(g_power * Ady)
        g_Sigma2d[i, 0, 0] = 0.5 * np.sum(g_power * Adx * Adx)
        g_Sigma2d[i, 0, 1] = 0.5 * np.sum(g_power * Adx * Ady)
        g_Sigma2d[i, 1, 0] = g_Sigma2d[i, 0, 1]
        g_Sigma2d[i, 1, 1] = 0.5 * np.sum(g_power * Ady * Ady)

        prefix[y0:y1, x0:x1] += contrib[..., None] * color
        T[y0:y1, x0:x1] = np.where(active, Tw * (1.0 - alpha), Tw)

    # ---- chain rules per splat (vectorized over M) ----
    # clamp: color = clip(color_pre, 0, 1)
    pre = prep.color_pre
    g_color = np.where((pre > 0.0) & (pre < 1.0), g_color, 0.0)

    # compositing geometry paths
    gJ = np.einsum("mab,mbc,mcd->mad", g_Sigma2d + np.swapaxes(g_Sigma2d, 1, 2), prep.J, prep.cov_cam)
    gV = np.einsum("mba,mbc,mcd->mad", prep.J, g_Sigma2d, prep.J)  # J^T G2 J
    G3 = np.einsum("ba,mbc,cd->mad", prep.W, gV, prep.W)  # W^T gV W

    fx, fy = intr.fx, intr.fy
    x, y, z = prep.mu_cam[:, 0], prep.mu_cam[:, 1], prep.mu_cam[:, 2]
    g_mu_cam = np.einsum("mab,ma->mb", prep.J, g_mu2d)  # J^T g_mu2d
    g_mu_cam[:, 0] += gJ[:, 0, 2] * (-fx / z**2)
    g_mu_cam[:, 1] += gJ[:, 1, 2] * (-fy / z**2)
    g_mu_cam[:, 2] += (
        gJ[:, 0, 0] * (-fx / z**2)
        + gJ[:, 1, 1] * (-fy / z**2)
        + gJ[:, 0, 2] * (2 * fx * x / z**3)
        + gJ[:, 1, 2] * (2 * fy * y / z**3)
    )
    g_mu = g_mu_cam @ prep.W  # W^T g_mu_cam with W = world->cam

    # covariance paths to scales and rotation
    rows = prep.rows
    ls = model.log_scales[rows].astype(np.float64)
    quats = model.quaternions[rows].astype(np.float64)
    sh = model.sh_coeffs[rows].astype(np.float64)
    Rq = quat_to_rotmat(quats)
    S2 = np.exp(2.0 * ls)
    RtG3R = np.einsum("mba,mbc,mcd->mad", Rq, G3, Rq)
    g_ls = np.einsum("mkk->mk", RtG3R) * 2.0 * S2
    gR = np.einsum("mab,mbc->mac", G3 + np.swapaxes(G3, 1, 2), Rq) * S2[:, None, :]

    # direct-light cosine path: n_hat = Rq[:, k], s = n_hat . (-l)
    inter = prep.shade_inter
    light_dir = -view.light_state.direction
    albedo_est = inter["albedo_est"]
    g_cos = np.einsum("mc,mc->m", g_color, albedo_est * view.light_state.intensity[None, :]) * inter["vis"]
    g_s = g_cos * np.sign(inter["s"])
    kidx = prep.n_axis
    gR[np.arange(M), :, kidx] += g_s[:, None] * light_dir[None, :]

    dRdq = _drotmat_dquat_batch(quats)
    g_quat = np.einsum("mij,mkij->mk", gR, dRdq)

    # appearance paths
    Y = inter["Y"]  # (M, B)
    B = sh.shape[2]
    g_sh = np.zeros((M, 3, B))
    if view.light_state.ambient_sh is None:
        g_sh += g_color[:, :, None] * Y[:, None, :]
    else:
        Lsh = view.light_state.ambient_sh
        BL = min(Lsh.shape[1], B)
        g_sh[:, :, :BL] += g_color[:, :, None] * Lsh[None, :, :BL]
        if B > 1:
            g_sh[:, :, 1:] += g_color[:, :, None] * Y[:, None, 1:]
    # direct term through albedo_est = C0*dc + 0.5
    g_sh[:, :, 0] += g_color * (SH_C0 * view.light_state.intensity[None, :]) * (inter["cos"] * inter["vis"])[:, None]

    # view-direction path: v = (mu - cam)/r, color depends on v through Y
    dY = sh_basis_grad(prep.view_dir, model.sh_degree)  # (M, B, 3)
    g_v = np.einsum("mcb,mc,mbk->mk", sh, g_color, dY)
    vvT = prep.view_dir[:, :, None] * prep.view_dir[:, None, :]
    proj = (np.eye(3)[None] - vvT) / prep.view_dist[:, None, None]
    g_mu += np.einsum("mkj,mk->mj", proj, g_v)

    # opacity through the sigmoid
    op = prep.opacity
    g_logit = g_opacity * op * (1.0 - op)

    # scatter to full-count arrays, then slice the active rows
    n, B_full = model.count, sh.shape[2]
    full = Gradients(
        means=np.zeros((n, 3)),
        log_scales=np.zeros((n, 3)),
        quaternions=np.zeros((n, 4)),
        logit_opacities=np.zeros(n),
        sh_coeffs=np.zeros((n, 3, B_full)),
    )
    full.means[rows] = g_mu
    full.log_scales[rows] = g_ls
    full.quaternions[rows] = g_quat
    full.logit_opacities[rows] = g_logit
    full.sh_coeffs[rows] = g_sh
    a = model.active_count
    grads = Gradients(
        means=full.means[:a],
        log_scales=full.log_scales[:a],
        quaternions=full.quaternions[:a],
        logit_opacities=full.logit_opacities[:a],
        sh_coeffs=full.sh_coeffs[:a],
    )
    return L, grads, image


@dataclass
class LearningRates:
    means: float = 2e-4  # scaled by scene extent
    log_scales: float = 5e-3
    quaternions: float = 1e-3
    logit_opacities: float = 5e-2
    sh_dc: float = 2.5e-3
    sh_rest: float = 1.25e-4


class OptimizerState:
    """Adam moments for the active rows plus per-Gaussian age and gradient EMA."""

    GROUPS = ("means", "log_scales", "quaternions", "logit_opacities", "sh_coeffs")

    def __init__(self, model: GaussianModel, lrs: Optional[LearningRates] = None,
                 scene_extent: float = 1.0, betas=(0.9, 0.999), eps: float = 1e-8,
                 ema_beta: float = 0.99):
        self.lrs = lrs or LearningRates()
        self.scene_extent = float(scene_extent)
        self.betas = betas
        self.eps = eps
        self.ema_beta = ema_beta
        self.step_count = 0
        a = model.active_count
        shapes = {
            "means": (a, 3),
            "log_scales": (a, 3),
            "quaternions": (a, 4),
            "logit_opacities": (a,),
            "sh_coeffs": (a, 3, model.sh_coeffs.shape[2]),
        }
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.age = np.zeros(a, dtype=np.int64)
        self.grad_ema = np.zeros(a)

    @property
    def active_count(self) -> int:
        return self.age.shape[0]

    def resize(self, record: MutationRecord):
        """Keep accumulator rows aligned with the model after a mutation."""
        if isinstance(record, AppendRecord):
            if record.insert_at != self.active_count:
                raise ValueError("append record does not extend the active region")
            pad = record.count
            for k in self.m:
                shape = (pad,) + self.m[k].shape[1:]
                self.m[k] = np.concatenate([self.m[k], np.zeros(shape)])
                self.v[k] = np.concatenate([self.v[k], np.zeros(shape)])
            self.age = np.concatenate([self.age, np.zeros(pad, dtype=np.int64)])
            self.grad_ema = np.concatenate([self.grad_ema, np.zeros(pad)])
        elif isinstance(record, PermuteRecord):
            sel = record.permutation[: record.new_active_count]
            if (sel >= self.active_count).any():
                raise ValueError("permutation maps a frozen row into the active region")
            for k in self.m:
                self.m[k] = self.m[k][sel].copy()
                self.v[k] = self.v[k][sel].copy()
            self.age = self.age[sel].copy()
            self.grad_ema = self.grad_ema[sel].copy()
        elif isinstance(record, PruneRecord):
            keep = np.ones(self.active_count, dtype=bool)
            active_removed = record.indices[record.indices < self.active_count]
            keep[active_removed] = False
            for k in self.m:
                self.m[k] = self.m[k][keep].copy()
                self.v[k] = self.v[k][keep].copy()
            self.age = self.age[keep].copy()
            self.grad_ema = self.grad_ema[keep].copy()
        else:
            raise TypeError(f"unknown record {type(record)}")

    def _lr(self, group: str, sh_slice: Optional[str] = None) -> float:
        if group == "means":
            return self.lrs.means * self.scene_extent
        if group == "sh_coeffs":
            return self.lrs.sh_dc if sh_slice == "dc" else self.lrs.sh_rest
        return getattr(self.lrs, group)


def step(model: GaussianModel, state: OptimizerState, views: list[ReferenceView],
         index_subset=None, extent_cutoff: bool = True) -> float:
    """One Adam step over a mini batch of ready views. Returns mean batch loss."""
    ready = [v for v in views if v.ready]
    if not ready:
        raise ValueError("no ready views")
    a = model.active_count
    if state.active_count != a:
        raise ValueError("optimizer state out of sync with model")

    total = None
    loss_sum = 0.0
    for view in ready:
        L, g, _ = backward(model, view, index_subset, extent_cutoff)
        loss_sum += L
        if total is None:
            total = g
        else:
            total += g
    total.scale(1.0 / len(ready))

    if a > 0:
        state.step_count += 1
        t = state.step_count
        b1, b2 = state.betas
        grads = {
            "means": total.means,
            "log_scales": total.log_scales,
            "quaternions": total.quaternions,
            "logit_opacities": total.logit_opacities,
            "sh_coeffs": total.sh_coeffs,
        }
        for k, g in grads.items():
            state.m[k] = b1 * state.m[k] + (1 - b1) * g
            state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
            mh = state.m[k] / (1 - b1**t)
            vh = state.v[k] / (1 - b2**t)
            upd = mh / (np.sqrt(vh) + state.eps)
            if k == "sh_coeffs":
                upd[:, :, 0] *= state._lr(k, "dc")
                if upd.shape[2] > 1:
                    upd[:, :, 1:] *= state._lr(k, "rest")
            else:
                upd *= state._lr(k)
            cur = model.attribute(k)
            cur[:a] = (cur[:a].astype(np.float64) - upd).astype(np.float32)
        model.quaternions[:a] = quat_normalize(model.quaternions[:a].astype(np.float64)).astype(np.float32)

        norms = total.per_gaussian_norm()
        fresh = state.age == 0
        state.grad_ema = np.where(
            fresh, norms, state.ema_beta * state.grad_ema + (1 - state.ema_beta) * norms
        )
        state.age += 1
    return loss_sum / len(ready)
