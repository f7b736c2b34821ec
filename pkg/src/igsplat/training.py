"""Level-based progressive training.

Timeline: a bootstrapping phase renders the scene twice per iteration, once
from explicit per-point attributes (plain splatting optimization, with
densify/prune) and once through the level-1 tri-plane, with both paths
pushing gradients into the point positions. Bootstrapping ends, the explicit
attributes are dropped, the point count freezes, and levels 2 and 3 activate
at scheduled iterations with earlier levels' learning rates cut on each
activation. Feature planes used for rendering carry uniform quantization
noise; the regularizers and all test-time decoding read the clean planes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    BoundingBox,
    NumericalError,
    make_cubic_bbox,
    neighbor_distances,
)
from .decoder import (
    OPACITY_BIAS_INIT,
    ROTATION_SLOT,
    SCALE_SLOT,
    SH_SLOT_START,
    activate,
    activate_backward,
    inverse_scale_activation,
    raw_dim,
)
from .model import IgsModel, decode_attributes, decode_attributes_backward
from .renderer import (
    frustum_cull,
    quat_to_rotmat,
    render_gaussians,
    render_gaussians_backward,
    render_loss,
)
from .triplane import (
    PLANE_NAMES,
    add_quantization_noise,
    sparsity_loss,
    sparsity_loss_grad,
    tv_loss,
    tv_loss_grad,
)

# slot multipliers on top of lr_explicit: opacity, scale, rotation, sh
EXPLICIT_LR_MULT = (20.0, 2.0, 0.4, 1.0)


@dataclass
class TrainConfig:
    total_iters: int = 3000
    bootstrap_iters: int = 960
    level2_start: int = 1200
    level3_start: int = 2100
    lr_position: float = 1.6e-4          # x scene extent, exp-decayed
    lr_position_final: float = 1.6e-6
    lr_explicit: float = 0.0025
    lr_plane: float = 2e-2
    lr_mlp: float = 2e-3
    prev_level_lr_factor: float = 0.1
    lambda_levels: tuple = (1e-4, 5e-4, 1e-3)
    lambda_tv: float = 1.0
    noise_q: float | None = None         # None: half the 8-bit step per plane
    noise_interval: int = 500
    densify_interval: int = 100
    densify_grad_threshold: float = 0.08
    prune_opacity: float = 0.005
    percent_dense: float = 0.01
    max_points: int = 50000
    seed: int = 0
    sh_degree: int = 1
    base_resolution: int = 256
    channels: int = 5
    contraction: bool = True
    n_init_points: int = 1000
    cull_margin: float = 24.0
    background: tuple = (0.0, 0.0, 0.0)
    bbox_mode: str = "cameras"           # cameras | warmup | manual
    bbox_center: tuple | None = None
    bbox_half_extent: float | None = None
    bbox_margin: float = 0.05
    explicit_only: bool = False          # plain splatting baseline, no tri-plane
    checkpoint_interval: int = 0         # containers every N iterations (0: off)

    @staticmethod
    def with_schedule(total_iters: int, **kw) -> "TrainConfig":
        """Schedule ratios 0.32 / 0.40 / 0.70 of the total, mirroring the
        16k / 20k / 35k events of a 50k-iteration run."""
        return TrainConfig(
            total_iters=total_iters,
            bootstrap_iters=round(0.32 * total_iters),
            level2_start=round(0.40 * total_iters),
            level3_start=round(0.70 * total_iters),
            **kw,
        )

    def validate(self):
        if self.total_iters < 0:
            raise ValueError("total_iters must be >= 0")
        if self.total_iters and not self.explicit_only:
            if not (self.bootstrap_iters < self.level2_start < self.level3_start < self.total_iters):
                raise ValueError("schedule must satisfy bootstrap < level2 < level3 < total")
        if self.bbox_mode not in ("cameras", "warmup", "manual"):
            raise ValueError(f"unknown bbox_mode {self.bbox_mode!r}")
        if self.bbox_mode == "manual" and (self.bbox_center is None or self.bbox_half_extent is None):
            raise ValueError("manual bbox_mode requires bbox_center and bbox_half_extent")


class Adam:
    """Adaptive-moment gradient descent with per-name state. `lr` may be an
    array broadcastable against the parameter (slot-wise rates)."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, name: str, value: np.ndarray, grad: np.ndarray, lr) -> np.ndarray:
        m = self.m.get(name)
        if m is None or m.shape != value.shape:
            m = np.zeros_like(value)
            self.v[name] = np.zeros_like(value)
            self.t[name] = 0
        v = self.v[name]
        t = self.t[name] + 1
        m = self.beta1 * m + (1.0 - self.beta1) * grad
        v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
        self.m[name], self.v[name], self.t[name] = m, v, t
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        return value - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def remap_rows(self, name: str, keep: np.ndarray, n_new: int):
        """After densify/prune: keep selected rows' moments, zero the new."""
        for store in (self.m, self.v):
            old = store.get(name)
            if old is None:
                return
            kept = old[keep]
            pad = np.zeros((n_new,) + old.shape[1:], dtype=old.dtype)
            store[name] = np.concatenate([kept, pad], axis=0)


@dataclass
class TrainState:
    model: IgsModel
    config: TrainConfig
    rng: np.random.Generator
    optimizer: Adam
    scene_extent: float
    explicit_raw: np.ndarray | None = None
    iteration: int = 0
    active_levels: int = 1
    level_lr_scale: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    densify_grad_acc: np.ndarray | None = None
    densify_count: np.ndarray | None = None
    noise_amp: dict = field(default_factory=dict)
    loss_history: list = field(default_factory=list)
    metrics: list = field(default_factory=list)

    @property
    def n_points(self) -> int:
        return self.model.n_points

    @property
    def points_frozen(self) -> bool:
        return self.iteration >= self.config.bootstrap_iters


@dataclass
class TrainResult:
    model: IgsModel
    explicit_raw: np.ndarray | None
    loss_history: list
    metrics: list
    state: TrainState


def init_explicit_raw(positions: np.ndarray, sh_degree: int) -> np.ndarray:
    """Raw per-point attributes: translucent opacity, neighbor-distance
    scale, identity rotation, zero SH (mid-gray)."""
    n = positions.shape[0]
    raw = np.zeros((n, raw_dim(sh_degree)))
    raw[:, 0] = OPACITY_BIAS_INIT
    s0 = np.clip(np.log(neighbor_distances(positions)), -11.0, -2.5)
    raw[:, SCALE_SLOT] = inverse_scale_activation(s0)[:, None]
    raw[:, ROTATION_SLOT.start] = 1.0
    return raw


def progressive_gate(state: TrainState):
    """Activate levels per the schedule; each activation multiplies the
    learning rates of all earlier levels by `prev_level_lr_factor`. Returns
    (active_levels, per-level plane/mlp learning rates)."""
    cfg = state.config
    target = 1
    if not cfg.explicit_only:
        target += int(state.iteration >= cfg.level2_start)
        target += int(state.iteration >= cfg.level3_start)
    while state.active_levels < target:
        newly = state.active_levels  # 0-based index of the level switching on
        for li in range(newly):
            state.level_lr_scale[li] *= cfg.prev_level_lr_factor
        state.active_levels += 1
    state.model.mltp.active_levels = state.active_levels
    lrs = {
        "plane": [cfg.lr_plane * state.level_lr_scale[li] for li in range(3)],
        "mlp": [cfg.lr_mlp * state.level_lr_scale[li] for li in range(3)],
    }
    return state.active_levels, lrs


def total_loss(render_loss_value: float, level_losses: list, lambda_levels, lambda_tv: float) -> float:
    """render + sum_l lambda_l * (sparsity_l + lambda_tv * tv_l) over the
    active levels; `level_losses` holds (sparsity, tv) pairs."""
    total = float(render_loss_value)
    for li, (sp, tv) in enumerate(level_losses):
        total += lambda_levels[li] * (sp + lambda_tv * tv)
    return total


def _position_lr(state: TrainState) -> float:
    cfg = state.config
    frac = state.iteration / max(cfg.total_iters, 1)
    decay = (cfg.lr_position_final / cfg.lr_position) ** frac
    return cfg.lr_position * state.scene_extent * decay


def _explicit_lr_vector(cfg: TrainConfig, sh_degree: int) -> np.ndarray:
    n_sh = 3 * (sh_degree + 1) ** 2
    mult = np.concatenate([
        [EXPLICIT_LR_MULT[0]],
        np.full(3, EXPLICIT_LR_MULT[1]),
        np.full(4, EXPLICIT_LR_MULT[2]),
        np.full(n_sh, EXPLICIT_LR_MULT[3]),
    ])
    return cfg.lr_explicit * mult


def _refresh_noise_amp(state: TrainState):
    cfg = state.config
    amps = {}
    for li in range(state.active_levels):
        for name in PLANE_NAMES:
            if cfg.noise_q is not None:
                amps[(li, name)] = float(cfg.noise_q)
            else:
                d = state.model.mltp.levels[li].planes[name].data
                amps[(li, name)] = 0.5 * (float(d.max()) - float(d.min())) / 255.0
    state.noise_amp = amps


def _nonfinite_groups(state: TrainState) -> list:
    groups = []
    model = state.model
    if not np.all(np.isfinite(model.positions)):
        groups.append("positions")
    if state.explicit_raw is not None and not np.all(np.isfinite(state.explicit_raw)):
        groups.append("explicit")
    for li, level in enumerate(model.mltp.levels):
        for name in PLANE_NAMES:
            if not np.all(np.isfinite(level.planes[name].data)):
                groups.append(f"plane_{li}_{name}")
    for li, dec in enumerate(model.decoders):
        for k, w in dec.params().items():
            if not np.all(np.isfinite(w)):
                groups.append(f"mlp_{li}_{k}")
    return groups


def _check_finite(state: TrainState, losses: dict):
    bad = [k for k, val in losses.items() if not np.isfinite(val)]
    if not bad:
        return
    raise NumericalError(
        f"non-finite loss at iteration {state.iteration}: {bad}; "
        f"non-finite parameter groups: {_nonfinite_groups(state) or 'none'}"
    )


def _step(state: TrainState, camera, gt_pixels: np.ndarray):
    """One optimizer iteration on one view. Returns (loss_explicit,
    loss_implicit_total, level_losses); losses are None when the
    corresponding path is off."""
    cfg = state.config
    model = state.model
    it = state.iteration
    try:
        return _step_inner(state, camera, gt_pixels)
    except NumericalError:
        raise
    except (ValueError, FloatingPointError) as exc:
        raise NumericalError(
            f"optimization diverged at iteration {it}: {exc}; "
            f"non-finite parameter groups: {_nonfinite_groups(state) or 'none'}"
        ) from exc


def _step_inner(state: TrainState, camera, gt_pixels: np.ndarray):
    cfg = state.config
    model = state.model
    it = state.iteration

    grads = {}

    idx = frustum_cull(model.positions, camera, margin=cfg.cull_margin)
    g_pos = np.zeros_like(model.positions)

    loss_implicit = None
    level_losses = []
    if not cfg.explicit_only:
        if cfg.noise_q is None and (it % cfg.noise_interval == 0 or
                                    len(state.noise_amp) < 3 * state.active_levels):
            _refresh_noise_amp(state)
        elif cfg.noise_q is not None and len(state.noise_amp) < 3 * state.active_levels:
            _refresh_noise_amp(state)
        max_amp = max(state.noise_amp.values(), default=0.0)
        noisy = (add_quantization_noise(model.mltp, state.noise_amp, state.rng)
                 if max_amp > 0.0 else model.mltp)

        attrs, dcache = decode_attributes(model, indices=idx, mltp=noisy)
        image, rcache = render_gaussians(model.positions[idx], attrs, camera, cfg.background)
        loss_render, d_image = render_loss(image.pixels, gt_pixels)

        # regularizers always read the clean planes
        for li in range(state.active_levels):
            level = model.mltp.levels[li]
            level_losses.append((sparsity_loss(level), tv_loss(level)))
        loss_implicit = total_loss(loss_render, level_losses, cfg.lambda_levels, cfg.lambda_tv)

        ag = render_gaussians_backward(rcache, d_image)
        plane_g, mlp_g, d_pos_feat = decode_attributes_backward(
            model, dcache,
            {"opacity": ag.opacity, "scale_exp": ag.scale_exp,
             "rotation": ag.rotation, "sh": ag.sh},
        )
        np.add.at(g_pos, idx, ag.positions + d_pos_feat)
        for li in range(state.active_levels):
            sp_g = sparsity_loss_grad(model.mltp.levels[li])
            tv_g = tv_loss_grad(model.mltp.levels[li])
            lam = cfg.lambda_levels[li]
            for name in PLANE_NAMES:
                g = plane_g[(li, name)] + lam * (sp_g[name] + cfg.lambda_tv * tv_g[name])
                grads[f"plane_{li}_{name}"] = g
            for k, wg in mlp_g[li].items():
                grads[f"mlp_{li}_{k}"] = wg

    loss_explicit = None
    if state.explicit_raw is not None:
        raw = state.explicit_raw[idx]
        attrs_e = activate(raw)
        image_e, rcache_e = render_gaussians(model.positions[idx], attrs_e, camera, cfg.background)
        loss_explicit, d_image_e = render_loss(image_e.pixels, gt_pixels)
        ag_e = render_gaussians_backward(rcache_e, d_image_e)
        d_raw = activate_backward(raw, attrs_e,
                                  {"opacity": ag_e.opacity, "scale_exp": ag_e.scale_exp,
                                   "rotation": ag_e.rotation, "sh": ag_e.sh})
        np.add.at(g_pos, idx, ag_e.positions)
        g_explicit = np.zeros_like(state.explicit_raw)
        g_explicit[idx] = d_raw
        grads["explicit"] = g_explicit
        # screen-space gradient magnitude drives densification
        np.add.at(state.densify_grad_acc, idx, np.linalg.norm(ag_e.screen, axis=1))
        np.add.at(state.densify_count, idx, 1.0)

    grads["positions"] = g_pos

    _check_finite(state, {"explicit": loss_explicit or 0.0, "implicit": loss_implicit or 0.0})

    _, lrs = progressive_gate(state)  # lr values only; activation happened pre-step
    opt = state.optimizer
    model.positions = opt.step("positions", model.positions, grads["positions"], _position_lr(state))
    if "explicit" in grads:
        lr_vec = _explicit_lr_vector(cfg, model.sh_degree)
        state.explicit_raw = opt.step("explicit", state.explicit_raw, grads["explicit"], lr_vec)
    for li in range(state.active_levels):
        for name in PLANE_NAMES:
            key = f"plane_{li}_{name}"
            if key in grads:
                plane = model.mltp.levels[li].planes[name]
                plane.data = opt.step(key, plane.data, grads[key], lrs["plane"][li])
        dec = model.decoders[li]
        for k in ("w1", "b1", "w2", "b2", "w3", "b3"):
            key = f"mlp_{li}_{k}"
            if key in grads:
                setattr(dec, k, opt.step(key, getattr(dec, k), grads[key], lrs["mlp"][li]))
    return loss_explicit, loss_implicit, level_losses


def bootstrap_step(state: TrainState, camera, gt_pixels: np.ndarray):
    """Dual-path iteration during bootstrapping; both render paths share the
    same view, and their position gradients are summed in one optimizer step."""
    if state.iteration >= state.config.bootstrap_iters:
        raise ValueError("bootstrap_step called outside the bootstrapping phase")
    if state.explicit_raw is None:
        raise ValueError("bootstrap requires explicit attributes")
    loss_e, loss_i, _ = _step(state, camera, gt_pixels)
    return loss_e, loss_i


def densify_and_prune(state: TrainState) -> int:
    """Clone small / split large high-gradient splats and prune transparent
    ones; a no-op after the bootstrapping phase. Returns the new point count."""
    cfg = state.config
    if state.points_frozen or state.explicit_raw is None:
        return state.n_points
    raw = state.explicit_raw
    pos = state.model.positions
    n = pos.shape[0]

    count = np.maximum(state.densify_count, 1.0)
    avg_grad = state.densify_grad_acc / count
    seen = state.densify_count > 0.0

    attrs = activate(raw)
    scales = np.exp(attrs.scale_exp)
    max_scale = scales.max(axis=1)
    high = seen & (avg_grad > cfg.densify_grad_threshold)
    room = cfg.max_points - n
    if room <= 0:
        high = np.zeros_like(high)
    split = high & (max_scale > cfg.percent_dense * state.scene_extent)
    clone = high & ~split

    prune = attrs.opacity < cfg.prune_opacity
    keep = ~prune & ~split

    rot = quat_to_rotmat(attrs.rotation)

    def sample_offsets(sel, count_per):
        s = np.repeat(scales[sel], count_per, axis=0)
        r = np.repeat(rot[sel], count_per, axis=0)
        eps = state.rng.normal(size=s.shape)
        return np.einsum("nij,nj->ni", r, s * eps)

    new_pos = []
    new_raw = []
    if np.any(clone):
        off = sample_offsets(clone, 1)
        new_pos.append(pos[clone] + off)
        new_raw.append(raw[clone].copy())
    if np.any(split):
        off = sample_offsets(split, 2)
        base = np.repeat(pos[split], 2, axis=0)
        new_pos.append(base + off)
        r2 = np.repeat(raw[split], 2, axis=0)
        shrunk = np.clip(attrs.scale_exp[split] - np.log(1.6), -11.9, -2.1)
        r2[:, SCALE_SLOT] = np.repeat(inverse_scale_activation(shrunk), 2, axis=0)
        new_raw.append(r2)

    kept_pos = pos[keep]
    kept_raw = raw[keep]
    all_pos = np.concatenate([kept_pos] + new_pos, axis=0) if new_pos else kept_pos
    all_raw = np.concatenate([kept_raw] + new_raw, axis=0) if new_raw else kept_raw
    if all_pos.shape[0] == 0:
        raise NumericalError(
            f"densify/prune removed every point at iteration {state.iteration} "
            f"(pruned {int(np.count_nonzero(prune))} of {n})"
        )
    n_new = all_pos.shape[0] - int(np.count_nonzero(keep))
    state.model.positions = all_pos
    state.explicit_raw = all_raw
    state.optimizer.remap_rows("positions", keep, n_new)
    state.optimizer.remap_rows("explicit", keep, n_new)
    state.densify_grad_acc = np.zeros(all_pos.shape[0])
    state.densify_count = np.zeros(all_pos.shape[0])
    return all_pos.shape[0]


def resolve_bbox(scene, config: TrainConfig, init_positions=None) -> BoundingBox:
    if config.bbox_mode == "manual":
        return BoundingBox(np.asarray(config.bbox_center, dtype=np.float64),
                           float(config.bbox_half_extent))
    if config.bbox_mode == "cameras":
        centers = np.stack([cam.center() for cam in scene.cameras])
        return make_cubic_bbox(centers, margin=config.bbox_margin)
    # warmup: short explicit-only run to place points, then box them
    if init_positions is not None:
        return make_cubic_bbox(init_positions, margin=config.bbox_margin)
    warm_iters = max(1, round(0.04 * config.total_iters))
    warm_cfg = replace(config, total_iters=warm_iters, bootstrap_iters=warm_iters,
                       explicit_only=True, bbox_mode="cameras")
    warm = train(scene, warm_cfg)
    return make_cubic_bbox(warm.model.positions, margin=config.bbox_margin)


def initialize_state(scene, config: TrainConfig, init_positions=None,
                     init_explicit_raw=None) -> TrainState:
    rng = np.random.default_rng(config.seed)
    bbox = resolve_bbox(scene, config, init_positions)
    if init_positions is None:
        lo = bbox.center - bbox.half_extent
        positions = lo + rng.uniform(0.0, 2.0 * bbox.half_extent,
                                     size=(config.n_init_points, 3))
    else:
        positions = np.asarray(init_positions, dtype=np.float64)
    model = IgsModel.create(positions, bbox, sh_degree=config.sh_degree,
                            contraction=config.contraction,
                            base_resolution=config.base_resolution,
                            channels=config.channels, rng=rng)
    explicit = (np.asarray(init_explicit_raw, dtype=np.float64)
                if init_explicit_raw is not None
                else init_explicit_raw_for(model, config))
    state = TrainState(
        model=model, config=config, rng=rng, optimizer=Adam(),
        scene_extent=2.0 * bbox.half_extent, explicit_raw=explicit,
        densify_grad_acc=np.zeros(model.n_points),
        densify_count=np.zeros(model.n_points),
    )
    return state


def init_explicit_raw_for(model: IgsModel, config: TrainConfig) -> np.ndarray:
    return init_explicit_raw(model.positions, config.sh_degree)


def train(scene, config: TrainConfig, init_positions=None, init_explicit_raw=None,
          progress=None, checkpoint_dir=None) -> TrainResult:
    """Run the full schedule and return the trained model.

    Deterministic for a fixed seed: view sampling, noise, and densification
    all draw from one seeded generator, and every reduction is sequential.
    With `checkpoint_interval` set, intermediate models are written to
    `checkpoint_dir` in the container format.
    """
    config.validate()
    if len(scene.cameras) < 2:
        raise ValueError("training requires at least 2 views")
    state = initialize_state(scene, config, init_positions, init_explicit_raw)
    n_views = len(scene.cameras)
    for it in range(config.total_iters):
        state.iteration = it
        if (it >= config.bootstrap_iters and state.explicit_raw is not None
                and not config.explicit_only):
            state.explicit_raw = None  # point count frozen from here on
        progressive_gate(state)
        vi = int(state.rng.integers(n_views))
        loss_e, loss_i, level_losses = _step(state, scene.cameras[vi], scene.images[vi])
        tracked = loss_i if loss_i is not None else loss_e
        state.loss_history.append(tracked)
        reg = sum(lam * (sp + config.lambda_tv * tv) for lam, (sp, tv)
                  in zip(config.lambda_levels, level_losses))
        state.metrics.append({
            "iter": it,
            "loss_total": tracked,
            "loss_render_implicit": loss_i,
            "loss_explicit": loss_e,
            "n_points": state.n_points,
            "active_levels": state.active_levels,
            "reg_weighted": reg,
        })
        if (not state.points_frozen and it > 0
                and it % config.densify_interval == 0):
            densify_and_prune(state)
        if (config.checkpoint_interval and checkpoint_dir is not None
                and (it + 1) % config.checkpoint_interval == 0):
            from pathlib import Path

            from .codec import write_container

            out = Path(checkpoint_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / f"ckpt_{it + 1:06d}.igs").write_bytes(write_container(state.model))
        if progress is not None:
            progress(state)
    state.iteration = config.total_iters
    if state.explicit_raw is not None and not config.explicit_only:
        state.explicit_raw = None
    return TrainResult(model=state.model, explicit_raw=state.explicit_raw,
                       loss_history=state.loss_history, metrics=state.metrics,
                       state=state)
