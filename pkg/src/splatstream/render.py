"""Forward splat renderer: projection, 2D covariance, depth sort, and
front-to-back alpha compositing, with spherical-harmonics appearance and a
visibility-attenuated direct light term for relighting.

All math runs in float64 regardless of the model's float32 storage so the
analytic gradients in optim.py can be validated tightly against finite
differences. The renderer keeps every intermediate needed by the backward
pass in a PreparedSplats bundle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import CameraIntrinsics, OrthoCamera, Pose, quat_to_rotmat
from .model import GaussianModel
from .scene import DirectionalLight

SH_C0 = 0.2820947918
SH_C1 = 0.4886025119
SH_C2 = (1.0925484306, -1.0925484306, 0.3153915653, -1.0925484306, 0.5462742153)
SH_C3 = (-0.5900435899, 2.8906114426, -0.4570457995, 0.3731763326,
         -0.4570457995, 1.4453057213, -0.5900435899)

TRANSMITTANCE_CUTOFF = 1e-4
ALPHA_CAP = 0.999
COV2D_BLUR = 0.3  # anti-aliasing floor added to the 2D covariance diagonal
NORMAL_AXIS_MARGIN = 5e-3  # log-scale slack before the shortest-axis pick moves off axis 0


@dataclass
class LightState:
    """Current lighting: direction/intensity of the one directional light plus
    optional ambient environment SH coefficients (3, B)."""

    direction: np.ndarray
    intensity: np.ndarray
    ambient_sh: Optional[np.ndarray] = None

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=np.float64)
        self.direction = self.direction / np.linalg.norm(self.direction)
        self.intensity = np.asarray(self.intensity, dtype=np.float64)
        if self.ambient_sh is not None:
            self.ambient_sh = np.asarray(self.ambient_sh, dtype=np.float64)


def flat_ambient_sh(ambient_rgb) -> np.ndarray:
    """Ambient SH for a constant environment term: evaluating a freshly
    initialized Gaussian under it reproduces albedo * ambient exactly."""
    a = np.asarray(ambient_rgb, dtype=np.float64)
    return (SH_C0 * a)[:, None]  # (3, 1)


def light_state_from_scene(light: DirectionalLight) -> LightState:
    return LightState(direction=light.direction.copy(), intensity=light.intensity.copy(),
                      ambient_sh=flat_ambient_sh(light.ambient))


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values Y_b(dir), shape (..., (degree+1)^2). Y_0 = C0."""
    dirs = np.asarray(dirs, dtype=np.float64)
    B = (degree + 1) ** 2
    out = np.empty(dirs.shape[:-1] + (B,), dtype=np.float64)
    out[..., 0] = SH_C0
    if degree >= 1:
        x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out[..., 4] = SH_C2[0] * xy
        out[..., 5] = SH_C2[1] * yz
        out[..., 6] = SH_C2[2] * (2 * zz - xx - yy)
        out[..., 7] = SH_C2[3] * xz
        out[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = SH_C3[0] * y * (3 * xx - yy)
        out[..., 10] = SH_C3[1] * xy * z
        out[..., 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        out[..., 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[..., 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = SH_C3[6] * x * (xx - yy - 3 * zz)
    return out


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """dY_b/ddir, shape (..., B, 3)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    B = (degree + 1) ** 2
    g = np.zeros(dirs.shape[:-1] + (B, 3), dtype=np.float64)
    if degree >= 1:
        x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
        g[..., 1, 1] = -SH_C1
        g[..., 2, 2] = SH_C1
        g[..., 3, 0] = -SH_C1
    if degree >= 2:
        g[..., 4, 0] = SH_C2[0] * y
        g[..., 4, 1] = SH_C2[0] * x
        g[..., 5, 1] = SH_C2[1] * z
        g[..., 5, 2] = SH_C2[1] * y
        g[..., 6, 0] = SH_C2[2] * (-2 * x)
        g[..., 6, 1] = SH_C2[2] * (-2 * y)
        g[..., 6, 2] = SH_C2[2] * (4 * z)
        g[..., 7, 0] = SH_C2[3] * z
        g[..., 7, 2] = SH_C2[3] * x
        g[..., 8, 0] = SH_C2[4] * (2 * x)
        g[..., 8, 1] = SH_C2[4] * (-2 * y)
    if degree >= 3:
        g[..., 9, 0] = SH_C3[0] * 6 * x * y
        g[..., 9, 1] = SH_C3[0] * (3 * x * x - 3 * y * y)
        g[..., 10, 0] = SH_C3[1] * y * z
        g[..., 10, 1] = SH_C3[1] * x * z
        g[..., 10, 2] = SH_C3[1] * x * y
        g[..., 11, 0] = SH_C3[2] * (-2 * x * y)
        g[..., 11, 1] = SH_C3[2] * (4 * z * z - x * x - 3 * y * y)
        g[..., 11, 2] = SH_C3[2] * (8 * y * z)
        g[..., 12, 0] = SH_C3[3] * (-6 * x * z)
        g[..., 12, 1] = SH_C3[3] * (-6 * y * z)
        g[..., 12, 2] = SH_C3[3] * (6 * z * z - 3 * x * x - 3 * y * y)
        g[..., 13, 0] = SH_C3[4] * (4 * z * z - 3 * x * x - y * y)
        g[..., 13, 1] = SH_C3[4] * (-2 * x * y)
        g[..., 13, 2] = SH_C3[4] * (8 * x * z)
        g[..., 14, 0] = SH_C3[5] * (2 * x * z)
        g[..., 14, 1] = SH_C3[5] * (-2 * y * z)
        g[..., 14, 2] = SH_C3[5] * (x * x - y * y)
        g[..., 15, 0] = SH_C3[6] * (3 * x * x - y * y - 3 * z * z)
        g[..., 15, 1] = SH_C3[6] * (-2 * x * y)
        g[..., 15, 2] = SH_C3[6] * (-6 * x * z)
    return g


def normal_proxies(log_scales: np.ndarray, quaternions: np.ndarray):
    """Shortest-principal-axis direction per Gaussian, plus the axis index.

    Near-tied scales take the lowest axis index within NORMAL_AXIS_MARGIN of
    the minimum, so a replica whose scales differ by quantization noise picks
    the same axis and shades identically.
    """
    ls = np.asarray(log_scales, dtype=np.float64)
    m = ls.min(axis=-1, keepdims=True)
    k = (ls <= m + NORMAL_AXIS_MARGIN).argmax(axis=-1)
    R = quat_to_rotmat(quaternions)
    n = R[np.arange(len(k)), :, k]
    return n, k


def shade_gaussian(sh_coeffs, view_dir, light_state: LightState, visibility, normal_proxy) -> np.ndarray:
    """Relit color of a single Gaussian, clamped to [0, 1].

    Base appearance comes from the stored SH transfer coefficients. When the
    light state carries ambient SH, the view-independent part is the product
    of the transfer coefficients with the lighting coefficients; the direct
    term adds the estimated albedo times a visibility-gated Lambert factor
    using the shortest-axis normal proxy.
    """
    sh = np.asarray(sh_coeffs, dtype=np.float64)[None]
    color, _ = _shade_core(
        sh,
        np.asarray(view_dir, dtype=np.float64)[None],
        light_state,
        np.asarray([visibility], dtype=np.float64),
        np.asarray(normal_proxy, dtype=np.float64)[None],
        int(np.sqrt(sh.shape[-1])) - 1,
    )
    return np.clip(color[0], 0.0, 1.0)


def _shade_core(sh, view_dirs, light_state: LightState, visibility, n_hat, degree):
    """Vectorized pre-clamp color. Returns (color_pre (M,3), intermediates)."""
    M = sh.shape[0]
    Y = sh_basis(view_dirs, degree)  # (M, B)
    albedo_est = SH_C0 * sh[:, :, 0] + 0.5  # (M, 3)
    s = n_hat @ (-light_state.direction)  # signed cosine
    cos = np.abs(s)  # sign canonicalized toward the light
    direct = albedo_est * light_state.intensity[None, :] * (cos * visibility)[:, None]

    if light_state.ambient_sh is None:
        base = np.einsum("mcb,mb->mc", sh, Y) + 0.5
        view_dep = None
    else:
        L = light_state.ambient_sh  # (3, B_L)
        BL = min(L.shape[1], sh.shape[2])
        sh_eff = sh[:, :, :BL].copy()
        sh_eff[:, :, 0] += 0.5 / SH_C0  # fold the DC offset into the transfer product
        ambient = np.einsum("mcb,cb->mc", sh_eff, L[:, :BL])
        view_dep = np.einsum("mcb,mb->mc", sh[:, :, 1:], Y[:, 1:]) if sh.shape[2] > 1 else 0.0
        base = ambient + view_dep
    color_pre = base + direct
    inter = {"Y": Y, "albedo_est": albedo_est, "s": s, "cos": cos, "vis": visibility}
    return color_pre, inter


@dataclass
class PreparedSplats:
    """Per-splat quantities for visible Gaussians, in model-row order."""

    rows: np.ndarray  # model row index per prepared splat
    mu_cam: np.ndarray  # (M, 3)
    depth: np.ndarray  # (M,)
    mu2d: np.ndarray  # (M, 2)
    J: np.ndarray  # (M, 2, 3)
    W: np.ndarray  # (3, 3) world->camera rotation (shared)
    Sigma3d: np.ndarray  # (M, 3, 3)
    cov_cam: np.ndarray  # (M, 3, 3)  W Sigma3d W^T
    Sigma2d: np.ndarray  # (M, 2, 2) with blur floor added
    inv2d: np.ndarray  # (M, 2, 2)
    opacity: np.ndarray  # (M,)
    color: np.ndarray  # (M, 3) clamped
    color_pre: np.ndarray  # (M, 3) before clamping
    view_dir: np.ndarray  # (M, 3)
    view_dist: np.ndarray  # (M,)
    n_hat: np.ndarray  # (M, 3)
    n_axis: np.ndarray  # (M,) shortest-axis index
    shade_inter: dict
    order: np.ndarray  # composition order (indices into the M splats)
    radius: np.ndarray  # (M,) pixel-space extent (3 sigma), inf if cutoff disabled


def prepare_splats(model: GaussianModel, pose: Pose, intr: CameraIntrinsics,
                   light_state: LightState, index_subset=None,
                   extent_cutoff: bool = True) -> PreparedSplats:
    rows = np.arange(model.count) if index_subset is None else np.asarray(index_subset, dtype=np.int64)
    means = model.means[rows].astype(np.float64)
    R_cw = pose.rotation()  # camera->world
    W = R_cw.T  # world->camera
    mu_cam = (means - pose.position) @ R_cw
    vis_mask = mu_cam[:, 2] >= intr.near
    rows = rows[vis_mask]
    means = means[vis_mask]
    mu_cam = mu_cam[vis_mask]
    M = rows.shape[0]

    ls = model.log_scales[rows].astype(np.float64)
    quats = model.quaternions[rows].astype(np.float64)
    sh = model.sh_coeffs[rows].astype(np.float64)
    opacity = 1.0 / (1.0 + np.exp(-model.logit_opacities[rows].astype(np.float64)))
    visibility = model.light_visibility[rows].astype(np.float64)

    x, y, z = mu_cam[:, 0], mu_cam[:, 1], mu_cam[:, 2]
    fx, fy = intr.fx, intr.fy
    mu2d = np.stack([fx * x / z + intr.cx, fy * y / z + intr.cy], axis=-1)
    J = np.zeros((M, 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / z**2
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / z**2

    Rq = quat_to_rotmat(quats)  # (M, 3, 3)
    S2 = np.exp(2.0 * ls)  # (M, 3)
    Sigma3d = np.einsum("mik,mk,mjk->mij", Rq, S2, Rq)
    cov_cam = np.einsum("ik,mkl,jl->mij", W, Sigma3d, W)
    Sigma2d = np.einsum("mik,mkl,mjl->mij", J, cov_cam, J)
    Sigma2d[:, 0, 0] += COV2D_BLUR
    Sigma2d[:, 1, 1] += COV2D_BLUR
    det = Sigma2d[:, 0, 0] * Sigma2d[:, 1, 1] - Sigma2d[:, 0, 1] * Sigma2d[:, 1, 0]
    inv2d = np.empty_like(Sigma2d)
    inv2d[:, 0, 0] = Sigma2d[:, 1, 1] / det
    inv2d[:, 1, 1] = Sigma2d[:, 0, 0] / det
    inv2d[:, 0, 1] = -Sigma2d[:, 0, 1] / det
    inv2d[:, 1, 0] = -Sigma2d[:, 1, 0] / det

    diff = means - pose.position
    dist = np.linalg.norm(diff, axis=-1)
    view_dir = diff / dist[:, None]
    n_hat, n_axis = (np.zeros((0, 3)), np.zeros(0, np.int64)) if M == 0 else normal_proxies(ls, quats)
    color_pre, inter = _shade_core(sh, view_dir, light_state, visibility, n_hat, model.sh_degree)
    color = np.clip(color_pre, 0.0, 1.0)

    if extent_cutoff:
        tr = Sigma2d[:, 0, 0] + Sigma2d[:, 1, 1]
        lam_max = 0.5 * tr + np.sqrt(np.maximum(0.25 * tr**2 - det, 0.0))
        radius = 3.0 * np.sqrt(lam_max)
    else:
        radius = np.full(M, np.inf)

    order = np.lexsort((rows, mu_cam[:, 2]))  # depth ascending, row index breaks ties
    return PreparedSplats(
        rows=rows, mu_cam=mu_cam, depth=mu_cam[:, 2], mu2d=mu2d, J=J, W=W,
        Sigma3d=Sigma3d, cov_cam=cov_cam, Sigma2d=Sigma2d, inv2d=inv2d,
        opacity=opacity, color=color, color_pre=color_pre,
        view_dir=view_dir, view_dist=dist, n_hat=n_hat, n_axis=n_axis,
        shade_inter=inter, order=order, radius=radius,
    )


def splat_window(mu2d, radius, width, height):
    """Clipped integer pixel window [x0, x1) x [y0, y1) around a splat."""
    if not np.isfinite(radius):
        return 0, width, 0, height
    x0 = max(int(np.floor(mu2d[0] - radius)), 0)
    x1 = min(int(np.ceil(mu2d[0] + radius)) + 1, width)
    y0 = max(int(np.floor(mu2d[1] - radius)), 0)
    y1 = min(int(np.ceil(mu2d[1] + radius)) + 1, height)
    return x0, x1, y0, y1


def _window_alpha(prep: PreparedSplats, i: int, x0, x1, y0, y1):
    """Gaussian falloff alpha over a pixel window (float64)."""
    xs = np.arange(x0, x1, dtype=np.float64) + 0.5
    ys = np.arange(y0, y1, dtype=np.float64) + 0.5
    dx = xs[None, :] - prep.mu2d[i, 0]
    dy = ys[:, None] - prep.mu2d[i, 1]
    A = prep.inv2d[i]
    power = -0.5 * (A[0, 0] * dx * dx + 2.0 * A[0, 1] * dx * dy + A[1, 1] * dy * dy)
    G = np.exp(power)
    alpha = np.minimum(prep.opacity[i] * G, ALPHA_CAP)
    return alpha, G


def composite(prep: PreparedSplats, intr: CameraIntrinsics, background) -> tuple[np.ndarray, np.ndarray]:
    """Front-to-back composite of prepared splats. Returns (image, transmittance)."""
    H, W = intr.height, intr.width
    bg = np.asarray(background, dtype=np.float64)
    image = np.zeros((H, W, 3))
    T = np.ones((H, W))
    for i in prep.order:
        x0, x1, y0, y1 = splat_window(prep.mu2d[i], prep.radius[i], W, H)
        if x0 >= x1 or y0 >= y1:
            continue
        Tw = T[y0:y1, x0:x1]
        active = Tw >= TRANSMITTANCE_CUTOFF
        if not active.any():
            continue
        alpha, _ = _window_alpha(prep, i, x0, x1, y0, y1)
        contrib = np.where(active, alpha * Tw, 0.0)
        image[y0:y1, x0:x1] += contrib[..., None] * prep.color[i]
        T[y0:y1, x0:x1] = np.where(active, Tw * (1.0 - alpha), Tw)
    image += T[..., None] * bg
    return image, T


def render(model: GaussianModel, pose: Pose, intr: CameraIntrinsics,
           light_state: LightState, index_subset=None, background=(0.0, 0.0, 0.0),
           return_transmittance: bool = False, extent_cutoff: bool = True):
    """Render the model; returns the image, optionally with the transmittance map."""
    prep = prepare_splats(model, pose, intr, light_state, index_subset, extent_cutoff)
    image, T = composite(prep, intr, background)
    if return_transmittance:
        return image, T
    return image


def update_light_visibility(model: GaussianModel, depth_map: np.ndarray,
                            light_cam: OrthoCamera, bias: float = 0.02) -> None:
    """Binary per-Gaussian shadow term from an orthographic light-space depth test.

    A Gaussian is lit when its center's light-space depth is within `bias`
    meters of the first surface the light sees at that pixel; centers outside
    the light frustum count as lit.
    """
    if model.count == 0:
        return
    uv, z = light_cam.project(model.means.astype(np.float64))
    px = np.floor(uv[:, 0]).astype(np.int64)
    py = np.floor(uv[:, 1]).astype(np.int64)
    inside = (px >= 0) & (px < light_cam.width) & (py >= 0) & (py < light_cam.height) & (z >= 0)
    vis = np.ones(model.count, dtype=np.float32)
    pi = px[inside]
    pj = py[inside]
    vis[inside] = (z[inside] <= depth_map[pj, pi] + bias).astype(np.float32)
    model.light_visibility = vis
