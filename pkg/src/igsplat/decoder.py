"""Per-level MLP decoders and attribute activation.

Each level owns a 3-layer perceptron (feature -> 168 -> 168 -> raw attribute
vector, ReLU on the two hidden layers). Raw vectors from active levels are
summed slot-wise (levels above the first decode residuals) and activated once
into renderer-ready Gaussian attributes.

Raw slot layout, shared by all levels and by the bootstrap-phase explicit
attributes: [opacity(1) | scale(3) | rotation(4) | sh(3*(deg+1)^2)].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit as sigmoid

from .core import SCALE_EXP_MAX, SCALE_EXP_MIN, GaussianAttributes

HIDDEN_WIDTH = 168

OPACITY_SLOT = slice(0, 1)
SCALE_SLOT = slice(1, 4)
ROTATION_SLOT = slice(4, 8)
SH_SLOT_START = 8

# translucent init: sigmoid(OPACITY_BIAS_INIT) = 0.1
OPACITY_BIAS_INIT = float(np.log(0.1 / 0.9))


def inverse_sigmoid(p):
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-6, 1.0 - 1e-6)
    return np.log(p / (1.0 - p))


def inverse_scale_activation(scale_exp):
    """Raw value whose activation lands on the given scale exponent."""
    s = (np.asarray(scale_exp, dtype=np.float64) - SCALE_EXP_MIN) / (SCALE_EXP_MAX - SCALE_EXP_MIN)
    return inverse_sigmoid(s)

_degenerate_rotation_events = 0


def degenerate_rotation_events() -> int:
    return _degenerate_rotation_events


def reset_degenerate_rotation_events():
    global _degenerate_rotation_events
    _degenerate_rotation_events = 0


def raw_dim(sh_degree: int) -> int:
    return 8 + 3 * (sh_degree + 1) ** 2


@dataclass
class MlpDecoder:
    """3-layer perceptron; weights stored (out, in), applied as x @ W.T + b."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    def __post_init__(self):
        if self.w2.shape != (HIDDEN_WIDTH, HIDDEN_WIDTH):
            raise ValueError(f"hidden width must be {HIDDEN_WIDTH}")
        if self.w1.shape[0] != HIDDEN_WIDTH or self.w3.shape[1] != HIDDEN_WIDTH:
            raise ValueError("layer shapes are inconsistent")

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w3.shape[0]

    @staticmethod
    def create(in_dim: int, out_dim: int, rng, opacity_bias: float | None = None,
               scale_bias: float | None = None) -> "MlpDecoder":
        """Uniform(-1/sqrt(fan_in), ..) weights, zero biases. Zero biases keep
        the decoder exactly zero at zero input, so residual levels start as
        near-identities on near-zero planes.

        The first level passes `opacity_bias` (translucent initial splats)
        and `scale_bias` (raw scale slots targeting a sane footprint); it
        also gets a unit w on the quaternion slot, without which the raw
        rotation starts near zero and the normalization blows up gradients.
        """
        rng = np.random.default_rng(rng)

        def layer(n_out, n_in):
            k = 1.0 / np.sqrt(n_in)
            return rng.uniform(-k, k, size=(n_out, n_in))

        dec = MlpDecoder(
            w1=layer(HIDDEN_WIDTH, in_dim),
            b1=np.zeros(HIDDEN_WIDTH),
            w2=layer(HIDDEN_WIDTH, HIDDEN_WIDTH),
            b2=np.zeros(HIDDEN_WIDTH),
            w3=layer(out_dim, HIDDEN_WIDTH),
            b3=np.zeros(out_dim),
        )
        if opacity_bias is not None:
            dec.b3[0] = opacity_bias
            dec.b3[ROTATION_SLOT.start] = 1.0
        if scale_bias is not None:
            dec.b3[SCALE_SLOT] = scale_bias
        return dec

    def params(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "w3": self.w3, "b3": self.b3}


def decode_level(mlp: MlpDecoder, f: np.ndarray) -> np.ndarray:
    """Forward pass; accepts (in_dim,) or (N, in_dim)."""
    raw, _ = decode_level_with_cache(mlp, f)
    return raw


def decode_level_with_cache(mlp: MlpDecoder, f: np.ndarray):
    f = np.asarray(f, dtype=np.float64)
    single = f.ndim == 1
    x = f[None, :] if single else f
    z1 = x @ mlp.w1.T + mlp.b1
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ mlp.w2.T + mlp.b2
    h2 = np.maximum(z2, 0.0)
    out = h2 @ mlp.w3.T + mlp.b3
    cache = (x, z1, h1, z2, h2)
    return (out[0] if single else out), cache


def decoder_backward_from_cache(mlp: MlpDecoder, cache, upstream: np.ndarray):
    """Reverse-mode gradients given the forward cache.

    Returns (param_grads, grad_f) with param_grads keyed like params().
    """
    x, z1, h1, z2, h2 = cache
    g = np.asarray(upstream, dtype=np.float64)
    single = g.ndim == 1
    if single:
        g = g[None, :]
    gw3 = g.T @ h2
    gb3 = g.sum(axis=0)
    gh2 = g @ mlp.w3
    # subgradient 1 at exactly 0 keeps zero-initialized residual levels
    # trainable (their first forward pass sits exactly on the kink)
    gz2 = gh2 * (z2 >= 0.0)
    gw2 = gz2.T @ h1
    gb2 = gz2.sum(axis=0)
    gh1 = gz2 @ mlp.w2
    gz1 = gh1 * (z1 >= 0.0)
    gw1 = gz1.T @ x
    gb1 = gz1.sum(axis=0)
    gx = gz1 @ mlp.w1
    grads = {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2, "w3": gw3, "b3": gb3}
    return grads, (gx[0] if single else gx)


def decoder_backward(mlp: MlpDecoder, f: np.ndarray, upstream: np.ndarray):
    """Gradients of `decode_level` w.r.t. all weights, biases, and `f`."""
    _, cache = decode_level_with_cache(mlp, f)
    return decoder_backward_from_cache(mlp, cache, upstream)


def accumulate(raw_per_level: list) -> np.ndarray:
    """Slot-wise sum of per-level raw vectors (residual accumulation)."""
    if len(raw_per_level) == 0:
        raise ValueError("accumulate requires at least one level output")
    out = np.asarray(raw_per_level[0], dtype=np.float64)
    for raw in raw_per_level[1:]:
        out = out + np.asarray(raw, dtype=np.float64)
    return out


def activate(raw: np.ndarray) -> GaussianAttributes:
    """Raw slots -> activated attributes.

    opacity: sigmoid; scale_exp: -12 + 10 * sigmoid (exponent, used as
    e^scale_exp inside the renderer); rotation: L2-normalized, falling back
    to the identity quaternion for degenerate raw rotations; sh: unchanged.
    """
    global _degenerate_rotation_events
    raw = np.asarray(raw, dtype=np.float64)
    r2 = raw[None, :] if raw.ndim == 1 else raw
    n = r2.shape[0]
    n_sh = r2.shape[1] - SH_SLOT_START
    if n_sh < 3 or n_sh % 3 != 0:
        raise ValueError(f"raw vector length {r2.shape[1]} has no valid sh block")
    # float round-off at extreme raw values would otherwise hit exactly 0 or 1
    opacity = np.clip(sigmoid(r2[:, 0]), 1e-12, 1.0 - 1e-12)
    scale_exp = SCALE_EXP_MIN + (SCALE_EXP_MAX - SCALE_EXP_MIN) * sigmoid(r2[:, SCALE_SLOT])
    rot_raw = r2[:, ROTATION_SLOT]
    norms = np.linalg.norm(rot_raw, axis=1)
    degenerate = norms < 1e-8
    if np.any(degenerate):
        _degenerate_rotation_events += int(np.count_nonzero(degenerate))
        rot_raw = rot_raw.copy()
        rot_raw[degenerate] = (1.0, 0.0, 0.0, 0.0)
        norms = np.where(degenerate, 1.0, norms)
    rotation = rot_raw / norms[:, None]
    sh = r2[:, SH_SLOT_START:].reshape(n, 3, n_sh // 3)
    return GaussianAttributes(opacity=opacity, scale_exp=scale_exp, rotation=rotation, sh=sh)


def activate_backward(raw: np.ndarray, attrs: GaussianAttributes, d_attrs: dict) -> np.ndarray:
    """Chain gradients on activated attributes back to the raw vector.

    `d_attrs` holds 'opacity' (n,), 'scale_exp' (n, 3), 'rotation' (n, 4)
    w.r.t. the *unit* quaternion, and 'sh' (n, 3, k).
    """
    raw = np.asarray(raw, dtype=np.float64)
    single = raw.ndim == 1
    r2 = raw[None, :] if single else raw
    n = r2.shape[0]
    grad = np.zeros_like(r2)
    grad[:, 0] = d_attrs["opacity"] * attrs.opacity * (1.0 - attrs.opacity)
    s = (attrs.scale_exp - SCALE_EXP_MIN) / (SCALE_EXP_MAX - SCALE_EXP_MIN)
    grad[:, SCALE_SLOT] = d_attrs["scale_exp"] * (SCALE_EXP_MAX - SCALE_EXP_MIN) * s * (1.0 - s)
    rot_raw = r2[:, ROTATION_SLOT]
    norms = np.linalg.norm(rot_raw, axis=1)
    ok = norms >= 1e-8
    gq = d_attrs["rotation"]
    q = attrs.rotation
    proj = gq - q * np.sum(q * gq, axis=1, keepdims=True)
    grad[:, ROTATION_SLOT] = np.where(ok[:, None], proj / np.maximum(norms, 1e-8)[:, None], 0.0)
    grad[:, SH_SLOT_START:] = d_attrs["sh"].reshape(n, -1)
    return grad[0] if single else grad
