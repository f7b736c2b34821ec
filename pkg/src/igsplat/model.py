"""The trained artifact: point cloud + multi-level tri-plane + per-level
decoders, and the full decode chain (query -> decode -> accumulate ->
activate) with its backward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import BoundingBox, GaussianAttributes, ImageBuffer
from .decoder import (
    MlpDecoder,
    accumulate,
    activate,
    activate_backward,
    decode_level_with_cache,
    decoder_backward_from_cache,
    raw_dim,
)
from .renderer import render_gaussians
from .triplane import (
    MultiLevelTriPlane,
    query_features_backward,
    query_features_with_cache,
)


@dataclass
class IgsModel:
    positions: np.ndarray
    mltp: MultiLevelTriPlane
    decoders: list
    bbox: BoundingBox
    sh_degree: int = 1
    contraction: bool = True

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if len(self.decoders) != 3:
            raise ValueError("expected one decoder per tri-plane level")
        d_out = raw_dim(self.sh_degree)
        for dec in self.decoders:
            if dec.out_dim != d_out or dec.in_dim != self.mltp.feature_dim:
                raise ValueError("decoder dimensions do not match model config")

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]

    @staticmethod
    def create(positions, bbox, sh_degree: int = 1, contraction: bool = True,
               base_resolution: int = 256, channels: int = 5, rng=None) -> "IgsModel":
        from .core import mean_neighbor_distance
        from .decoder import OPACITY_BIAS_INIT, inverse_scale_activation

        positions = np.asarray(positions, dtype=np.float64)
        rng = np.random.default_rng(rng)
        mltp = MultiLevelTriPlane.create(base_resolution, channels, rng=rng)
        d_out = raw_dim(sh_degree)
        s0 = float(np.clip(np.log(mean_neighbor_distance(positions)), -11.0, -2.5))
        decoders = [
            MlpDecoder.create(mltp.feature_dim, d_out, rng,
                              opacity_bias=OPACITY_BIAS_INIT if level == 0 else None,
                              scale_bias=inverse_scale_activation(s0) if level == 0 else None)
            for level in range(3)
        ]
        return IgsModel(positions=positions, mltp=mltp,
                        decoders=decoders, bbox=bbox, sh_degree=sh_degree,
                        contraction=contraction)


@dataclass
class DecodeCache:
    indices: np.ndarray
    query_cache: object
    mlp_caches: list
    raw: np.ndarray
    attrs: GaussianAttributes


def decode_attributes(model: IgsModel, indices=None, mltp=None):
    """Decode activated attributes for the selected points.

    `mltp` overrides the model's planes (used for the noisy render path during
    training); the decoders and everything else stay the model's own.
    Returns (GaussianAttributes, DecodeCache).
    """
    planes = model.mltp if mltp is None else mltp
    idx = np.arange(model.n_points) if indices is None else np.asarray(indices)
    pts = model.positions[idx]
    feats, qcache = query_features_with_cache(planes, pts, model.bbox, model.contraction)
    raws = []
    mlp_caches = []
    for li, f in enumerate(feats):
        raw_l, c = decode_level_with_cache(model.decoders[li], f)
        raws.append(raw_l)
        mlp_caches.append(c)
    raw = accumulate(raws)
    attrs = activate(raw)
    return attrs, DecodeCache(indices=idx, query_cache=qcache, mlp_caches=mlp_caches,
                              raw=raw, attrs=attrs)


def decode_attributes_backward(model: IgsModel, cache: DecodeCache, d_attrs: dict):
    """Backward of `decode_attributes`.

    `d_attrs` holds gradients on the activated fields (keys 'opacity',
    'scale_exp', 'rotation', 'sh'). Returns (plane_grads, mlp_grads,
    d_positions) where plane_grads maps (level, plane_name) to an array,
    mlp_grads is a per-level list of weight-gradient dicts, and d_positions
    covers the selected points only, in selection order.
    """
    d_raw = activate_backward(cache.raw, cache.attrs, d_attrs)
    upstream_per_level = []
    mlp_grads = []
    for li, mlp_cache in enumerate(cache.mlp_caches):
        grads, d_f = decoder_backward_from_cache(model.decoders[li], mlp_cache, d_raw)
        mlp_grads.append(grads)
        upstream_per_level.append(d_f)
    plane_grads, d_pos = query_features_backward(cache.query_cache, upstream_per_level)
    return plane_grads, mlp_grads, d_pos


def render_model(model: IgsModel, camera, background=(0.0, 0.0, 0.0), indices=None,
                 mltp=None) -> ImageBuffer:
    """Test-time render: decode attributes once, splat, composite."""
    attrs, _ = decode_attributes(model, indices=indices, mltp=mltp)
    pts = model.positions if indices is None else model.positions[np.asarray(indices)]
    image, _ = render_gaussians(pts, attrs, camera, background)
    return image
