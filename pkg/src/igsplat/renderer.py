"""Differentiable CPU splatting renderer.

Forward: 3D covariances from (scale, quaternion), EWA projection to 2D
covariances through the local affine Jacobian, SH shading, and front-to-back
alpha compositing with a global depth sort. Backward: exact analytic
gradients of every stage, recovering per-splat transmittances back-to-front.

Conventions inherited from the public splatting renderer this follows:
alpha clamp 0.99, contribution skip below 1/255, 3-sigma pixel footprint,
0.3 px^2 covariance floor. Pixel (row i, col j) samples at (x=j, y=i).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import Camera, GaussianAttributes, ImageBuffer

ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
COV2D_FLOOR = 0.3
SINGULAR_DET = 1e-12
FOOTPRINT_SIGMA = 3.0

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


# ---------------------------------------------------------------------------
# 3D covariance


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(n, 4) quaternions (w, x, y, z) -> (n, 3, 3) rotation matrices."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def covariance3d(attrs: GaussianAttributes) -> np.ndarray:
    """Sigma = R S S^T R^T with S = diag(e^scale_exp); (n, 3, 3), PSD."""
    rot = quat_to_rotmat(attrs.rotation)
    s = np.exp(attrs.scale_exp)
    m = rot * s[:, None, :]
    return m @ np.swapaxes(m, 1, 2)


def covariance3d_backward(attrs: GaussianAttributes, d_sigma: np.ndarray):
    """Gradients of covariance3d w.r.t. scale_exp and the (unit) quaternion.

    `d_sigma` is (n, 3, 3) with independent per-entry gradients.
    """
    q = attrs.rotation
    s = np.exp(attrs.scale_exp)
    rot = quat_to_rotmat(q)
    m = rot * s[:, None, :]
    # Sigma = M M^T  =>  dM = (G + G^T) M
    g_sym = d_sigma + np.swapaxes(d_sigma, 1, 2)
    d_m = g_sym @ m
    d_rot = d_m * s[:, None, :]
    d_scale_exp = np.einsum("nik,nik->nk", rot, d_m) * s

    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    # dR/dq stacked as (n, 4, 3, 3)
    dr = np.empty((q.shape[0], 4, 3, 3))
    dr[:, 0] = 2 * np.stack(
        [np.stack([zero, -z, y], -1), np.stack([z, zero, -x], -1), np.stack([-y, x, zero], -1)], -2)
    dr[:, 1] = 2 * np.stack(
        [np.stack([zero, y, z], -1), np.stack([y, -2 * x, -w], -1), np.stack([z, w, -2 * x], -1)], -2)
    dr[:, 2] = 2 * np.stack(
        [np.stack([-2 * y, x, w], -1), np.stack([x, zero, z], -1), np.stack([-w, z, -2 * y], -1)], -2)
    dr[:, 3] = 2 * np.stack(
        [np.stack([-2 * z, -w, x], -1), np.stack([w, -2 * z, y], -1), np.stack([x, y, zero], -1)], -2)
    d_q = np.einsum("nij,nkij->nk", d_rot, dr)
    return d_scale_exp, d_q


# ---------------------------------------------------------------------------
# Projection


@dataclass
class Splat2D:
    """One projected Gaussian ready for compositing."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float


@dataclass
class SplatBatch:
    mean2d: np.ndarray  # (n, 2)
    cov2d: np.ndarray   # (n, 2, 2), floor included
    depth: np.ndarray   # (n,)
    color: np.ndarray   # (n, 3)
    opacity: np.ndarray  # (n,)

    @property
    def n(self) -> int:
        return self.mean2d.shape[0]

    @staticmethod
    def from_splats(splats) -> "SplatBatch":
        return SplatBatch(
            mean2d=np.array([s.mean2d for s in splats], dtype=np.float64).reshape(-1, 2),
            cov2d=np.array([s.cov2d for s in splats], dtype=np.float64).reshape(-1, 2, 2),
            depth=np.array([s.depth for s in splats], dtype=np.float64),
            color=np.array([s.color for s in splats], dtype=np.float64).reshape(-1, 3),
            opacity=np.array([s.opacity for s in splats], dtype=np.float64),
        )


@dataclass
class ProjectionCache:
    camera: Camera
    t_cam: np.ndarray    # (n, 3) camera-space positions of valid splats
    sigma: np.ndarray    # (n, 3, 3)
    jac: np.ndarray      # (n, 2, 3)
    u_mat: np.ndarray    # (n, 2, 3) = J @ W


def project_splats(positions: np.ndarray, sigma3d: np.ndarray, colors: np.ndarray,
                   opacities: np.ndarray, camera: Camera):
    """EWA-project a batch; points at depth <= near are culled, not errors.

    Returns (batch, valid_mask, cache); batch rows correspond to valid points.
    """
    positions = np.asarray(positions, dtype=np.float64)
    t_cam = camera.world_to_camera(positions)
    valid = t_cam[:, 2] > camera.near
    t = t_cam[valid]
    sig = sigma3d[valid]
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    mean2d = np.stack([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy], axis=-1)
    jac = np.zeros((t.shape[0], 2, 3))
    jac[:, 0, 0] = camera.fx / z
    jac[:, 0, 2] = -camera.fx * x / z**2
    jac[:, 1, 1] = camera.fy / z
    jac[:, 1, 2] = -camera.fy * y / z**2
    u_mat = jac @ camera.rotation
    cov2d = u_mat @ sig @ np.swapaxes(u_mat, 1, 2)
    cov2d[:, 0, 0] += COV2D_FLOOR
    cov2d[:, 1, 1] += COV2D_FLOOR
    batch = SplatBatch(mean2d=mean2d, cov2d=cov2d, depth=z.copy(),
                       color=colors[valid].astype(np.float64),
                       opacity=np.asarray(opacities, dtype=np.float64)[valid])
    cache = ProjectionCache(camera=camera, t_cam=t, sigma=sig, jac=jac, u_mat=u_mat)
    return batch, valid, cache


def project_splats_backward(cache: ProjectionCache, d_mean2d: np.ndarray, d_cov2d: np.ndarray):
    """Chain projected-splat gradients back to world positions and Sigma_3d.

    Includes the dependence of the local Jacobian on the camera-space mean.
    """
    cam = cache.camera
    t = cache.t_cam
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    # mean2d path
    d_t = np.einsum("nij,ni->nj", cache.jac, d_mean2d)
    # cov2d path: V = U Sigma U^T
    g = d_cov2d
    u_mat = cache.u_mat
    d_sigma = np.einsum("nki,nkl,nlj->nij", u_mat, g, u_mat)
    d_u = g @ u_mat @ cache.sigma + np.swapaxes(g, 1, 2) @ u_mat @ cache.sigma
    d_jac = d_u @ cam.rotation.T
    inv_z2 = 1.0 / z**2
    d_t[:, 0] += d_jac[:, 0, 2] * (-cam.fx * inv_z2)
    d_t[:, 1] += d_jac[:, 1, 2] * (-cam.fy * inv_z2)
    d_t[:, 2] += (
        d_jac[:, 0, 0] * (-cam.fx * inv_z2)
        + d_jac[:, 1, 1] * (-cam.fy * inv_z2)
        + d_jac[:, 0, 2] * (2.0 * cam.fx * x / z**3)
        + d_jac[:, 1, 2] * (2.0 * cam.fy * y / z**3)
    )
    d_pos = d_t @ cam.rotation
    return d_pos, d_sigma


def project_splat(mu: np.ndarray, sigma3d: np.ndarray, camera: Camera,
                  color=(0.0, 0.0, 0.0), opacity: float = 1.0):
    """Single-splat projection; returns None when the point is culled."""
    batch, valid, _ = project_splats(
        np.asarray(mu, dtype=np.float64)[None, :], np.asarray(sigma3d)[None],
        np.asarray(color, dtype=np.float64)[None, :], np.array([opacity]), camera)
    if not valid[0]:
        return None
    return Splat2D(mean2d=batch.mean2d[0], cov2d=batch.cov2d[0], depth=float(batch.depth[0]),
                   color=batch.color[0], opacity=float(batch.opacity[0]))


# ---------------------------------------------------------------------------
# Spherical harmonics


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values, (n, (degree+1)^2), in the splatting convention."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    n = d.shape[0]
    out = np.empty((n, (degree + 1) ** 2))
    out[:, 0] = SH_C0
    if degree >= 1:
        out[:, 1] = -SH_C1 * y
        out[:, 2] = SH_C1 * z
        out[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = SH_C2[0] * x * y
        out[:, 5] = SH_C2[1] * y * z
        out[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
        out[:, 7] = SH_C2[3] * x * z
        out[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 9] = SH_C3[0] * y * (3 * xx - yy)
        out[:, 10] = SH_C3[1] * x * y * z
        out[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        out[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        out[:, 14] = SH_C3[5] * z * (xx - yy)
        out[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d(basis)/d(dir), shape (n, (degree+1)^2, 3)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    n = d.shape[0]
    g = np.zeros((n, (degree + 1) ** 2, 3))
    if degree >= 1:
        g[:, 1, 1] = -SH_C1
        g[:, 2, 2] = SH_C1
        g[:, 3, 0] = -SH_C1
    if degree >= 2:
        g[:, 4, 0] = SH_C2[0] * y
        g[:, 4, 1] = SH_C2[0] * x
        g[:, 5, 1] = SH_C2[1] * z
        g[:, 5, 2] = SH_C2[1] * y
        g[:, 6, 0] = SH_C2[2] * (-2 * x)
        g[:, 6, 1] = SH_C2[2] * (-2 * y)
        g[:, 6, 2] = SH_C2[2] * (4 * z)
        g[:, 7, 0] = SH_C2[3] * z
        g[:, 7, 2] = SH_C2[3] * x
        g[:, 8, 0] = SH_C2[4] * (2 * x)
        g[:, 8, 1] = SH_C2[4] * (-2 * y)
    if degree >= 3:
        g[:, 9, 0] = SH_C3[0] * 6 * x * y
        g[:, 9, 1] = SH_C3[0] * (3 * x * x - 3 * y * y)
        g[:, 10, 0] = SH_C3[1] * y * z
        g[:, 10, 1] = SH_C3[1] * x * z
        g[:, 10, 2] = SH_C3[1] * x * y
        g[:, 11, 0] = SH_C3[2] * (-2 * x * y)
        g[:, 11, 1] = SH_C3[2] * (4 * z * z - x * x - 3 * y * y)
        g[:, 11, 2] = SH_C3[2] * (8 * y * z)
        g[:, 12, 0] = SH_C3[3] * (-6 * x * z)
        g[:, 12, 1] = SH_C3[3] * (-6 * y * z)
        g[:, 12, 2] = SH_C3[3] * (6 * z * z - 3 * x * x - 3 * y * y)
        g[:, 13, 0] = SH_C3[4] * (4 * z * z - 3 * x * x - y * y)
        g[:, 13, 1] = SH_C3[4] * (-2 * x * y)
        g[:, 13, 2] = SH_C3[4] * (8 * x * z)
        g[:, 14, 0] = SH_C3[5] * (2 * x * z)
        g[:, 14, 1] = SH_C3[5] * (-2 * y * z)
        g[:, 14, 2] = SH_C3[5] * (x * x - y * y)
        g[:, 15, 0] = SH_C3[6] * (3 * x * x - 3 * y * y)
        g[:, 15, 1] = SH_C3[6] * (-6 * x * y)
    return g


def evaluate_sh(sh: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """SH -> RGB for unit view directions; color = max(basis . sh + 0.5, 0)."""
    color, _ = evaluate_sh_with_cache(sh, view_dir)
    return color


def evaluate_sh_with_cache(sh: np.ndarray, view_dir: np.ndarray):
    sh = np.asarray(sh, dtype=np.float64)
    dirs = np.asarray(view_dir, dtype=np.float64)
    single = sh.ndim == 2
    sh3 = sh[None] if single else sh
    d2 = dirs[None, :] if dirs.ndim == 1 else dirs
    degree = int(round(np.sqrt(sh3.shape[2]))) - 1
    basis = sh_basis(d2, degree)
    raw = np.einsum("nk,nck->nc", basis, sh3) + 0.5
    color = np.maximum(raw, 0.0)
    cache = (sh3, d2, degree, basis, raw > 0.0)
    return (color[0] if single else color), cache


def evaluate_sh_backward(cache, d_color: np.ndarray):
    """Returns (d_sh, d_view_dir); the clamp gates both paths."""
    sh3, dirs, degree, basis, active = cache
    g = np.asarray(d_color, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    g = g * active
    d_sh = np.einsum("nc,nk->nck", g, basis)
    bgrad = sh_basis_grad(dirs, degree)
    d_dir = np.einsum("nc,nck,nkd->nd", g, sh3, bgrad)
    return d_sh, d_dir


# ---------------------------------------------------------------------------
# Rasterization


@dataclass
class RasterCache:
    batch: SplatBatch
    width: int
    height: int
    background: np.ndarray
    order: np.ndarray          # splat indices in front-to-back depth order
    inv_cov: np.ndarray        # (n, 2, 2)
    usable: np.ndarray         # (n,) bool: non-singular cov2d
    windows: np.ndarray        # (n, 4) x0, x1, y0, y1 inclusive; x1 < x0 if empty
    final_t: np.ndarray        # (h, w) transmittance after all splats
    singular_skipped: int = 0


def _splat_windows(batch: SplatBatch, width: int, height: int, usable: np.ndarray) -> np.ndarray:
    a = batch.cov2d[:, 0, 0]
    b = batch.cov2d[:, 0, 1]
    c = batch.cov2d[:, 1, 1]
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = FOOTPRINT_SIGMA * np.sqrt(np.maximum(lam_max, 0.0))
    win = np.empty((batch.n, 4), dtype=np.int64)
    win[:, 0] = np.maximum(np.floor(batch.mean2d[:, 0] - radius), 0)
    win[:, 1] = np.minimum(np.ceil(batch.mean2d[:, 0] + radius), width - 1)
    win[:, 2] = np.maximum(np.floor(batch.mean2d[:, 1] - radius), 0)
    win[:, 3] = np.minimum(np.ceil(batch.mean2d[:, 1] + radius), height - 1)
    empty = (~usable) | (win[:, 1] < win[:, 0]) | (win[:, 3] < win[:, 2])
    win[empty] = (0, -1, 0, -1)
    return win


def _window_alpha(batch: SplatBatch, inv_cov: np.ndarray, i: int, win: np.ndarray,
                  gx: np.ndarray, gy: np.ndarray):
    x0, x1, y0, y1 = win[i]
    dx = gx[x0 : x1 + 1] - batch.mean2d[i, 0]
    dy = gy[y0 : y1 + 1] - batch.mean2d[i, 1]
    p = inv_cov[i]
    power = (
        -0.5 * p[0, 0] * dx**2
        - 0.5 * p[1, 1] * (dy**2)[:, None]
        - p[0, 1] * dy[:, None] * dx
    )
    alpha = batch.opacity[i] * np.exp(power)
    clamped = alpha > ALPHA_CLAMP
    alpha = np.where(clamped, ALPHA_CLAMP, alpha)
    skipped = alpha < ALPHA_SKIP
    alpha = np.where(skipped, 0.0, alpha)
    return dx, dy, alpha, clamped, skipped


def rasterize_arrays(batch: SplatBatch, width: int, height: int, background):
    """Depth-sorted front-to-back compositing; returns (image, cache)."""
    bg = np.asarray(background, dtype=np.float64)
    det = np.linalg.det(batch.cov2d) if batch.n else np.zeros(0)
    usable = det > SINGULAR_DET
    inv_cov = np.zeros_like(batch.cov2d)
    if batch.n:
        inv_cov[usable] = np.linalg.inv(batch.cov2d[usable])
    order = np.argsort(batch.depth, kind="stable")
    windows = _splat_windows(batch, width, height, usable) if batch.n else np.zeros((0, 4), np.int64)

    image = np.zeros((height, width, 3))
    t_buf = np.ones((height, width))
    gx = np.arange(width, dtype=np.float64)
    gy = np.arange(height, dtype=np.float64)
    for i in order:
        x0, x1, y0, y1 = windows[i]
        if x1 < x0:
            continue
        _, _, alpha, _, _ = _window_alpha(batch, inv_cov, i, windows, gx, gy)
        tw = t_buf[y0 : y1 + 1, x0 : x1 + 1]
        w = alpha * tw
        image[y0 : y1 + 1, x0 : x1 + 1] += w[:, :, None] * batch.color[i]
        tw *= 1.0 - alpha
    image += t_buf[:, :, None] * bg
    cache = RasterCache(
        batch=batch, width=width, height=height, background=bg, order=order,
        inv_cov=inv_cov, usable=usable, windows=windows, final_t=t_buf,
        singular_skipped=int(batch.n - np.count_nonzero(usable)),
    )
    return image, cache


def rasterize(splats, camera: Camera, background=(0.0, 0.0, 0.0)) -> ImageBuffer:
    """Composite already-projected splats over a constant background."""
    batch = splats if isinstance(splats, SplatBatch) else SplatBatch.from_splats(list(splats))
    image, _ = rasterize_arrays(batch, camera.width, camera.height, background)
    return ImageBuffer(image)


@dataclass
class SplatGrads:
    mean2d: np.ndarray
    cov2d: np.ndarray
    color: np.ndarray
    opacity: np.ndarray


def rasterize_backward(cache: RasterCache, d_image: np.ndarray) -> SplatGrads:
    """Analytic gradients of the compositing formula.

    Walks splats back-to-front, dividing the running transmittance by each
    splat's (1 - alpha) to recover the transmittance it saw in the forward
    pass, while accumulating the color contributed behind it.
    """
    batch = cache.batch
    d_img = np.asarray(d_image, dtype=np.float64)
    g_mean = np.zeros((batch.n, 2))
    g_cov = np.zeros((batch.n, 2, 2))
    g_color = np.zeros((batch.n, 3))
    g_opacity = np.zeros(batch.n)

    t_run = cache.final_t.copy()
    behind = cache.final_t[:, :, None] * cache.background  # bg contribution
    gx = np.arange(cache.width, dtype=np.float64)
    gy = np.arange(cache.height, dtype=np.float64)
    for i in cache.order[::-1]:
        x0, x1, y0, y1 = cache.windows[i]
        if x1 < x0:
            continue
        dx, dy, alpha, clamped, skipped = _window_alpha(batch, cache.inv_cov, i, cache.windows, gx, gy)
        tw_after = t_run[y0 : y1 + 1, x0 : x1 + 1]
        t_i = tw_after / (1.0 - alpha)
        dw = d_img[y0 : y1 + 1, x0 : x1 + 1]
        bw = behind[y0 : y1 + 1, x0 : x1 + 1]

        g_color[i] = np.einsum("yxc,yx->c", dw, alpha * t_i)
        # dC/d(alpha_i) = c_i * T_i - behind / (1 - alpha_i)
        d_alpha = np.einsum("yxc,c->yx", dw, batch.color[i]) * t_i - np.einsum(
            "yxc,yxc->yx", dw, bw) / (1.0 - alpha)
        live = (~clamped) & (~skipped)
        d_alpha = np.where(live, d_alpha, 0.0)
        g_opacity[i] = np.sum(d_alpha * alpha) / batch.opacity[i]
        d_power = d_alpha * alpha  # d(alpha)/d(power) = alpha for live pixels

        p = cache.inv_cov[i]
        # power = -1/2 d^T P d, d = pix - mean
        pd_x = p[0, 0] * dx[None, :] + p[0, 1] * dy[:, None]
        pd_y = p[0, 1] * dx[None, :] + p[1, 1] * dy[:, None]
        g_mean[i, 0] = np.sum(d_power * pd_x)
        g_mean[i, 1] = np.sum(d_power * pd_y)
        dp00 = -0.5 * np.sum(d_power * dx[None, :] ** 2)
        dp11 = -0.5 * np.sum(d_power * dy[:, None] ** 2)
        dp01 = -0.5 * np.sum(d_power * dy[:, None] * dx[None, :])
        d_p = np.array([[dp00, dp01], [dp01, dp11]])
        g_cov[i] = -p @ d_p @ p

        # roll state back past splat i
        bw += (alpha * t_i)[:, :, None] * batch.color[i]
        t_run[y0 : y1 + 1, x0 : x1 + 1] = t_i
    return SplatGrads(mean2d=g_mean, cov2d=g_cov, color=g_color, opacity=g_opacity)


def frustum_cull(positions: np.ndarray, camera: Camera, margin: float = 0.0) -> np.ndarray:
    """Indices of points in front of the near plane whose projection lands
    within the image expanded by `margin` pixels."""
    t = camera.world_to_camera(np.asarray(positions, dtype=np.float64))
    z = t[:, 2]
    safe_z = np.where(z > camera.near, z, 1.0)
    px = camera.fx * t[:, 0] / safe_z + camera.cx
    py = camera.fy * t[:, 1] / safe_z + camera.cy
    keep = (
        (z > camera.near)
        & (px >= -margin) & (px <= camera.width - 1 + margin)
        & (py >= -margin) & (py <= camera.height - 1 + margin)
    )
    return np.nonzero(keep)[0]


# ---------------------------------------------------------------------------
# Full pipeline: attributes -> image, with backward


@dataclass
class RenderCache:
    camera: Camera
    positions: np.ndarray
    attrs: GaussianAttributes
    valid: np.ndarray
    proj_cache: ProjectionCache
    raster_cache: RasterCache
    sh_cache: tuple
    view_vec: np.ndarray      # (n_valid, 3) un-normalized mu - cam_center
    view_dir: np.ndarray


@dataclass
class AttributeGrads:
    positions: np.ndarray
    opacity: np.ndarray
    scale_exp: np.ndarray
    rotation: np.ndarray
    sh: np.ndarray
    screen: np.ndarray = None  # (n, 2) d_loss/d_mean2d, drives densification


def render_gaussians(positions: np.ndarray, attrs: GaussianAttributes, camera: Camera,
                     background=(0.0, 0.0, 0.0)):
    """Render a batch of activated Gaussians; returns (ImageBuffer, cache)."""
    positions = np.asarray(positions, dtype=np.float64)
    sigma = covariance3d(attrs)
    cam_center = camera.center()
    t_cam = camera.world_to_camera(positions)
    valid = t_cam[:, 2] > camera.near
    vec = positions[valid] - cam_center
    norm = np.linalg.norm(vec, axis=1)
    dirs = vec / norm[:, None]
    colors, sh_cache = evaluate_sh_with_cache(attrs.sh[valid], dirs)
    batch, valid2, proj_cache = project_splats(
        positions[valid], sigma[valid], colors, attrs.opacity[valid], camera)
    assert bool(np.all(valid2))
    image, raster_cache = rasterize_arrays(batch, camera.width, camera.height, background)
    cache = RenderCache(camera=camera, positions=positions, attrs=attrs, valid=valid,
                        proj_cache=proj_cache, raster_cache=raster_cache,
                        sh_cache=sh_cache, view_vec=vec, view_dir=dirs)
    return ImageBuffer(image), cache


def render_gaussians_backward(cache: RenderCache, d_image: np.ndarray) -> AttributeGrads:
    """Gradients of the rendered image w.r.t. positions and all activated
    attributes. Culled points receive zero gradient."""
    attrs = cache.attrs
    n = attrs.n
    valid = cache.valid
    sg = rasterize_backward(cache.raster_cache, d_image)
    d_pos_v, d_sigma_v = project_splats_backward(cache.proj_cache, sg.mean2d, sg.cov2d)
    d_sh_v, d_dir = evaluate_sh_backward(cache.sh_cache, sg.color)
    # direction normalization: d = v/|v|
    norm = np.linalg.norm(cache.view_vec, axis=1, keepdims=True)
    d_vec = (d_dir - cache.view_dir * np.sum(cache.view_dir * d_dir, axis=1, keepdims=True)) / norm
    d_pos_v = d_pos_v + d_vec

    d_sigma = np.zeros((n, 3, 3))
    d_sigma[valid] = d_sigma_v
    d_scale_exp, d_q = covariance3d_backward(attrs, d_sigma)

    out = AttributeGrads(
        positions=np.zeros((n, 3)),
        opacity=np.zeros(n),
        scale_exp=d_scale_exp,
        rotation=d_q,
        sh=np.zeros_like(attrs.sh),
        screen=np.zeros((n, 2)),
    )
    out.positions[valid] = d_pos_v
    out.opacity[valid] = sg.opacity
    out.sh[valid] = d_sh_v
    out.screen[valid] = sg.mean2d
    return out


# ---------------------------------------------------------------------------
# Rendering loss: (1 - lambda) L1 + lambda (1 - SSIM)


L1_SSIM_LAMBDA = 0.2
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


_SSIM_KERNEL = _gaussian_kernel()


def _blur(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian blur with zero padding; self-adjoint, which the
    backward pass relies on."""
    out = ndimage.convolve1d(img, _SSIM_KERNEL, axis=0, mode="constant", cval=0.0)
    return ndimage.convolve1d(out, _SSIM_KERNEL, axis=1, mode="constant", cval=0.0)


def ssim_with_grad(pred: np.ndarray, gt: np.ndarray):
    """Mean SSIM over pixels and channels, plus d(mean SSIM)/d(pred)."""
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    ux = _blur(x)
    uy = _blur(y)
    vx = _blur(x * x)
    vy = _blur(y * y)
    w = _blur(x * y)
    a1 = 2.0 * ux * uy + SSIM_C1
    a2 = 2.0 * (w - ux * uy) + SSIM_C2
    b1 = ux**2 + uy**2 + SSIM_C1
    b2 = (vx - ux**2) + (vy - uy**2) + SSIM_C2
    denom = b1 * b2
    s = a1 * a2 / denom
    n_total = s.size
    mean_s = float(s.mean())

    g = 1.0 / n_total
    ds_dux = (2.0 * uy * (a2 - a1)) / denom - s * (2.0 * ux * (b2 - b1)) / denom
    ds_dvx = -s / b2
    ds_dw = 2.0 * a1 / denom
    grad = _blur(g * ds_dux) + 2.0 * x * _blur(g * ds_dvx) + y * _blur(g * ds_dw)
    return mean_s, grad


def psnr(pred, gt, cap: float = 99.0) -> float:
    """Peak signal-to-noise ratio against peak 1.0, capped for identical images."""
    p = pred.pixels if isinstance(pred, ImageBuffer) else np.asarray(pred, dtype=np.float64)
    q = gt.pixels if isinstance(gt, ImageBuffer) else np.asarray(gt, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"image shape mismatch: {p.shape} vs {q.shape}")
    mse = float(np.mean((p - q) ** 2))
    if mse <= 0.0:
        return cap
    return min(-10.0 * np.log10(mse), cap)


def render_loss(pred: ImageBuffer, gt: ImageBuffer, lam: float = L1_SSIM_LAMBDA):
    """(1 - lam) * L1 + lam * (1 - SSIM); returns (loss, d_loss/d_pred)."""
    p = pred.pixels if isinstance(pred, ImageBuffer) else np.asarray(pred, dtype=np.float64)
    q = gt.pixels if isinstance(gt, ImageBuffer) else np.asarray(gt, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"image shape mismatch: {p.shape} vs {q.shape}")
    diff = p - q
    l1 = float(np.abs(diff).mean())
    g_l1 = np.sign(diff) / diff.size
    mean_s, g_s = ssim_with_grad(p, q)
    loss = (1.0 - lam) * l1 + lam * (1.0 - mean_s)
    grad = (1.0 - lam) * g_l1 - lam * g_s
    return loss, grad
