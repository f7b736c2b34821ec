"""Multi-level tri-plane feature grids.

Three levels of three axis-aligned planes at halving resolutions. A query
point is normalized against the scene bbox, optionally contracted, projected
onto each plane, and bilinearly interpolated; the per-level feature is the
concatenation over the xy/xz/yz planes. Levels above the first decode
residuals, so inactive levels simply contribute nothing.

Grid coordinates are vertex-centered: uv in [0, r-1], integer uv hits stored
vertices exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import BoundingBox, normalize_point

PLANE_NAMES = ("xy", "xz", "yz")
# world-axis indices kept by each plane projection
AXIS_PAIRS = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}

DEFAULT_CHANNELS = 5
PLANE_INIT_SCALE = 1e-4


@dataclass
class FeaturePlane:
    """One w x h x m feature grid. `clamp_events` counts out-of-range lookups
    (possible only through floating round-off after contraction)."""

    data: np.ndarray
    learnable: bool = True
    clamp_events: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"plane data must be (w, h, m), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("plane data must be finite")

    @property
    def width(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class TriPlaneLevel:
    """xy/xz/yz planes sharing one resolution and channel count."""

    planes: dict

    def __post_init__(self):
        if set(self.planes) != set(PLANE_NAMES):
            raise ValueError(f"level must hold planes {PLANE_NAMES}")
        shapes = {self.planes[n].data.shape for n in PLANE_NAMES}
        if len(shapes) != 1:
            raise ValueError("planes within a level must share shape")
        w, h, _ = self.planes["xy"].data.shape
        if w != h:
            raise ValueError("tri-plane levels are square")

    @property
    def resolution(self) -> int:
        return self.planes["xy"].width

    @property
    def channels(self) -> int:
        return self.planes["xy"].channels


@dataclass
class MultiLevelTriPlane:
    """Exactly three levels; level l has twice the resolution of level l-1.
    `active_levels` gates how many levels participate in decoding."""

    levels: list
    active_levels: int = 1

    def __post_init__(self):
        if len(self.levels) != 3:
            raise ValueError("expected exactly 3 tri-plane levels")
        res = [lv.resolution for lv in self.levels]
        if not (res[1] == 2 * res[0] and res[2] == 2 * res[1]):
            raise ValueError(f"resolutions must halve per level, got {res}")
        if len({lv.channels for lv in self.levels}) != 1:
            raise ValueError("levels must share channel count")
        if self.active_levels not in (1, 2, 3):
            raise ValueError("active_levels must be 1, 2, or 3")

    @property
    def channels(self) -> int:
        return self.levels[0].channels

    @property
    def feature_dim(self) -> int:
        return 3 * self.channels

    @property
    def resolutions(self) -> tuple:
        return tuple(lv.resolution for lv in self.levels)

    @staticmethod
    def create(
        base_resolution: int = 256,
        channels: int = DEFAULT_CHANNELS,
        rng=None,
        init_scales: tuple = (PLANE_INIT_SCALE, 0.0, 0.0),
    ) -> "MultiLevelTriPlane":
        """Fresh grids at resolutions (r/4, r/2, r).

        Level 1 gets near-zero uniform init; residual levels start at exact
        zero so activating them leaves both the decoded attributes and the
        regularizer terms untouched."""
        if base_resolution % 4 != 0 or base_resolution < 8:
            raise ValueError("base_resolution must be a multiple of 4 and >= 8")
        rng = np.random.default_rng(rng)
        levels = []
        for li, r in enumerate((base_resolution // 4, base_resolution // 2, base_resolution)):
            a = init_scales[li]
            planes = {
                name: FeaturePlane(
                    rng.uniform(-a, a, size=(r, r, channels)) if a > 0.0
                    else np.zeros((r, r, channels))
                )
                for name in PLANE_NAMES
            }
            levels.append(TriPlaneLevel(planes))
        return MultiLevelTriPlane(levels)


def contract(x: np.ndarray, enabled: bool = True) -> np.ndarray:
    """Per-axis squeeze of normalized coordinates into [-1, 1].

    Identity on [-0.5, 0.5]; outside, t maps to sign(t) * (1 - 1/(4|t|)),
    which is continuous at the seam and approaches +-1 as |t| grows. With
    contraction disabled (object scenes) coordinates are clamped instead.
    """
    x = np.asarray(x, dtype=np.float64)
    if not enabled:
        return np.clip(x, -1.0, 1.0)
    ax = np.abs(x)
    outside = ax > 0.5
    out = np.where(outside, np.sign(x) * (1.0 - 1.0 / (4.0 * np.maximum(ax, 0.5))), x)
    return out


def contract_jacobian(x: np.ndarray, enabled: bool = True) -> np.ndarray:
    """Per-axis derivative of `contract` (diagonal Jacobian)."""
    x = np.asarray(x, dtype=np.float64)
    if not enabled:
        return ((x >= -1.0) & (x <= 1.0)).astype(np.float64)
    ax = np.abs(x)
    return np.where(ax > 0.5, 1.0 / (4.0 * np.maximum(ax, 0.5) ** 2), 1.0)


def project(x_contracted: np.ndarray, axis_pair: str, resolution: int) -> np.ndarray:
    """Drop the omitted axis and remap [-1, 1] to grid coordinates [0, r-1]."""
    a, b = AXIS_PAIRS[axis_pair]
    x = np.asarray(x_contracted, dtype=np.float64)
    scale = 0.5 * (resolution - 1)
    return np.stack([(x[..., a] + 1.0) * scale, (x[..., b] + 1.0) * scale], axis=-1)


def _corner_weights(plane: FeaturePlane, uv: np.ndarray):
    """Clamp uv into bounds, split into corner indices and bilinear weights."""
    r_u = plane.width - 1
    r_v = plane.height - 1
    u = uv[..., 0]
    v = uv[..., 1]
    out_of_range = (u < 0) | (u > r_u) | (v < 0) | (v > r_v)
    n_clamped = int(np.count_nonzero(out_of_range))
    if n_clamped:
        plane.clamp_events += n_clamped
        u = np.clip(u, 0.0, float(r_u))
        v = np.clip(v, 0.0, float(r_v))
    i0 = np.clip(np.floor(u).astype(np.intp), 0, max(r_u - 1, 0))
    j0 = np.clip(np.floor(v).astype(np.intp), 0, max(r_v - 1, 0))
    fu = u - i0
    fv = v - j0
    return i0, j0, fu, fv


def interp(plane: FeaturePlane, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup; exact at integer uv. Accepts (2,) or (N, 2)."""
    uv = np.asarray(uv, dtype=np.float64)
    single = uv.ndim == 1
    uv2 = uv[None, :] if single else uv
    i0, j0, fu, fv = _corner_weights(plane, uv2)
    d = plane.data
    f00 = d[i0, j0]
    f10 = d[i0 + 1, j0]
    f01 = d[i0, j0 + 1]
    f11 = d[i0 + 1, j0 + 1]
    wu = fu[:, None]
    wv = fv[:, None]
    out = (
        f00 * (1 - wu) * (1 - wv)
        + f10 * wu * (1 - wv)
        + f01 * (1 - wu) * wv
        + f11 * wu * wv
    )
    return out[0] if single else out


def interp_backward(plane: FeaturePlane, uv: np.ndarray, upstream: np.ndarray):
    """Gradients of `interp`: dense plane-shaped gradient (nonzero on the 4
    touched vertices per query) and the analytic d(feature)/d(uv) chained
    with `upstream`.

    Returns (grad_plane, grad_uv) with grad_uv shaped like uv.
    """
    uv = np.asarray(uv, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    single = uv.ndim == 1
    uv2 = uv[None, :] if single else uv
    up2 = upstream[None, :] if single else upstream
    i0, j0, fu, fv = _corner_weights(plane, uv2)
    d = plane.data
    grad_plane = np.zeros_like(d)
    wu = fu[:, None]
    wv = fv[:, None]
    np.add.at(grad_plane, (i0, j0), up2 * (1 - wu) * (1 - wv))
    np.add.at(grad_plane, (i0 + 1, j0), up2 * wu * (1 - wv))
    np.add.at(grad_plane, (i0, j0 + 1), up2 * (1 - wu) * wv)
    np.add.at(grad_plane, (i0 + 1, j0 + 1), up2 * wu * wv)

    f00 = d[i0, j0]
    f10 = d[i0 + 1, j0]
    f01 = d[i0, j0 + 1]
    f11 = d[i0 + 1, j0 + 1]
    df_du = (f10 - f00) * (1 - wv) + (f11 - f01) * wv
    df_dv = (f01 - f00) * (1 - wu) + (f11 - f10) * wu
    grad_uv = np.stack([(up2 * df_du).sum(axis=1), (up2 * df_dv).sum(axis=1)], axis=-1)
    return grad_plane, (grad_uv[0] if single else grad_uv)


@dataclass
class QueryCache:
    """Forward-pass state needed to push gradients back through a feature
    query: the mltp queried (possibly a noisy copy), per-point grid coords,
    and the chain-rule factor from grid coords back to world coordinates."""

    mltp: MultiLevelTriPlane
    bbox: BoundingBox
    contraction: bool
    uv: dict = field(default_factory=dict)  # (level, plane) -> (N, 2)
    duv_dworld: float = 0.0  # shared normalize scale 1/(2*half_extent)
    contract_jac: np.ndarray | None = None  # (N, 3)


def query_features(
    mltp: MultiLevelTriPlane,
    p_world: np.ndarray,
    bbox: BoundingBox,
    contraction: bool = True,
) -> list:
    """Per-level concatenated plane features for world-space points.

    Returns a list of length `active_levels`; entry l is (N, 3m) (or (3m,)
    for a single point), blocks ordered xy, xz, yz.
    """
    feats, _ = query_features_with_cache(mltp, p_world, bbox, contraction)
    return feats


def query_features_with_cache(
    mltp: MultiLevelTriPlane,
    p_world: np.ndarray,
    bbox: BoundingBox,
    contraction: bool = True,
):
    p = np.asarray(p_world, dtype=np.float64)
    single = p.ndim == 1
    pts = p[None, :] if single else p
    q = normalize_point(pts, bbox)
    t = contract(q, contraction)
    cache = QueryCache(mltp=mltp, bbox=bbox, contraction=contraction)
    cache.duv_dworld = 1.0 / (2.0 * bbox.half_extent)
    cache.contract_jac = contract_jacobian(q, contraction)
    feats = []
    for li in range(mltp.active_levels):
        level = mltp.levels[li]
        blocks = []
        for name in PLANE_NAMES:
            plane = level.planes[name]
            uv = project(t, name, plane.width)
            cache.uv[(li, name)] = uv
            blocks.append(interp(plane, uv))
        f = np.concatenate(blocks, axis=-1)
        feats.append(f[0] if single else f)
    return feats, cache


def query_features_backward(cache: QueryCache, upstream_per_level: list):
    """Backward of `query_features_with_cache`.

    `upstream_per_level` holds one (N, 3m) gradient per active level. Returns
    (plane_grads, grad_positions) where plane_grads maps (level, plane_name)
    to a dense plane-shaped array and grad_positions is (N, 3) in world units.
    """
    mltp = cache.mltp
    m = mltp.channels
    n = cache.contract_jac.shape[0]
    grad_pos = np.zeros((n, 3))
    plane_grads = {}
    for li in range(mltp.active_levels):
        up = np.asarray(upstream_per_level[li], dtype=np.float64)
        if up.ndim == 1:
            up = up[None, :]
        level = mltp.levels[li]
        for bi, name in enumerate(PLANE_NAMES):
            plane = level.planes[name]
            uv = cache.uv[(li, name)]
            g_plane, g_uv = interp_backward(plane, uv, up[:, bi * m : (bi + 1) * m])
            plane_grads[(li, name)] = g_plane
            # uv -> contracted coords -> normalized -> world
            a, b = AXIS_PAIRS[name]
            s = 0.5 * (plane.width - 1)
            grad_pos[:, a] += g_uv[:, 0] * s * cache.contract_jac[:, a] * cache.duv_dworld
            grad_pos[:, b] += g_uv[:, 1] * s * cache.contract_jac[:, b] * cache.duv_dworld
    return plane_grads, grad_pos


def tv_loss(level: TriPlaneLevel) -> float:
    """Total variation over the level's planes, L1 across channels, averaged
    by the pixel count of a single plane."""
    total = 0.0
    for name in PLANE_NAMES:
        d = level.planes[name].data
        total += np.abs(np.diff(d, axis=0)).sum() + np.abs(np.diff(d, axis=1)).sum()
    r = level.resolution
    return float(total) / float(r * r)


def tv_loss_grad(level: TriPlaneLevel) -> dict:
    """Subgradient of `tv_loss` w.r.t. each plane (sign convention: 0 at
    exact ties)."""
    grads = {}
    r = level.resolution
    inv = 1.0 / float(r * r)
    for name in PLANE_NAMES:
        d = level.planes[name].data
        g = np.zeros_like(d)
        su = np.sign(np.diff(d, axis=0))
        g[1:, :, :] += su
        g[:-1, :, :] -= su
        sv = np.sign(np.diff(d, axis=1))
        g[:, 1:, :] += sv
        g[:, :-1, :] -= sv
        grads[name] = g * inv
    return grads


def sparsity_loss(level: TriPlaneLevel) -> float:
    """Unnormalized L1 norm summed over the level's planes."""
    return float(sum(np.abs(level.planes[name].data).sum() for name in PLANE_NAMES))


def sparsity_loss_grad(level: TriPlaneLevel) -> dict:
    return {name: np.sign(level.planes[name].data) for name in PLANE_NAMES}


def add_quantization_noise(mltp: MultiLevelTriPlane, q, rng) -> MultiLevelTriPlane:
    """Copy of `mltp` whose *active* planes carry i.i.d. uniform(-q, q) noise.

    `q` is a single amplitude or a {(level_index, plane_name): amplitude}
    mapping. The originals are untouched; the noisy copy feeds only the
    render path during optimization, never the regularizers or test-time
    decoding. Inactive levels are shared, not copied.
    """
    amp = q if isinstance(q, dict) else {
        (li, name): float(q) for li in range(3) for name in PLANE_NAMES
    }
    if any(a < 0.0 for a in amp.values()):
        raise ValueError("noise amplitude must be >= 0")
    rng = np.random.default_rng(rng)
    levels = []
    for li, level in enumerate(mltp.levels):
        if li < mltp.active_levels and any(amp.get((li, n), 0.0) > 0.0 for n in PLANE_NAMES):
            planes = {}
            for name in PLANE_NAMES:
                src = level.planes[name]
                a = amp.get((li, name), 0.0)
                noisy = src.data + rng.uniform(-a, a, size=src.data.shape) if a > 0.0 else src.data
                planes[name] = FeaturePlane(noisy, learnable=src.learnable)
            levels.append(TriPlaneLevel(planes))
        else:
            levels.append(level)
    return MultiLevelTriPlane(levels, active_levels=mltp.active_levels)
