"""Compression container.

Point clouds are normalized, quantized to 16 bits, Morton-sorted so spatially
close points stay adjacent in the packed image, tiled into a single-channel
16-bit image, and compressed losslessly as PNG; a raw half-float payload is
produced in parallel and the smaller of the two is kept. Feature planes are
tiled per level into one single-channel image, uniformly quantized, and
DEFLATE-coded (QDEF backend) or handed to a system HEIC encoder. MLP weights
ship as half-precision blobs.

All multi-byte fields are little-endian. The container is canonical: decoding
and re-encoding with the same options reproduces the byte stream.
"""

from __future__ import annotations

import io
import struct
import warnings
import zlib
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .core import BoundingBox, PointCloud, denormalize_point, normalize_point
from .decoder import HIDDEN_WIDTH, MlpDecoder
from .model import IgsModel
from .triplane import FeaturePlane, MultiLevelTriPlane, TriPlaneLevel, PLANE_NAMES

MAGIC = b"IGSC"
VERSION = 1

POINT_MODE_RAW16F = 0
POINT_MODE_SORTED_PNG = 1
POINT_MODE_NAMES = {POINT_MODE_RAW16F: "RAW16F", POINT_MODE_SORTED_PNG: "SORTED_PNG"}

BACKEND_QDEF = 0
BACKEND_HEIC = 1
BACKEND_IDS = {"qdef": BACKEND_QDEF, "heic": BACKEND_HEIC}
BACKEND_NAMES = {v: k for k, v in BACKEND_IDS.items()}

SECTION_ORDER = (b"HEAD", b"PNTS", b"PLN0", b"PLN1", b"PLN2", b"MLP0", b"MLP1", b"MLP2")

_HEAD_FMT = "<3ddIHBBBB3B3BQ"
_TABLE_FMT = "<4sQQI"


class ContainerError(ValueError):
    """Base class for container parse/validation failures."""


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


# ---------------------------------------------------------------------------
# Morton (Z-order) codes: bit i of axis a lands on output bit 3i + a,
# axis order x = 0, y = 1, z = 2.


def _spread_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0xFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1249249249249249)
    v = (v ^ (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v ^ (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v ^ (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v ^ (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v ^ (v >> np.uint64(32))) & np.uint64(0xFFFF)
    return v


def morton_encode(q) -> np.ndarray:
    """Interleave (..., 3) 16-bit coordinates into 48-bit codes."""
    q = np.asarray(q)
    if np.any(q < 0) or np.any(q > 0xFFFF):
        raise ValueError("morton inputs must be 16-bit unsigned")
    x = _spread_bits(q[..., 0])
    y = _spread_bits(q[..., 1])
    z = _spread_bits(q[..., 2])
    return x | (y << np.uint64(1)) | (z << np.uint64(2))


def morton_decode(code) -> np.ndarray:
    """Inverse of `morton_encode`; returns (..., 3) uint16."""
    c = np.asarray(code, dtype=np.uint64)
    x = _compact_bits(c)
    y = _compact_bits(c >> np.uint64(1))
    z = _compact_bits(c >> np.uint64(2))
    return np.stack([x, y, z], axis=-1).astype(np.uint16)


def sort_points(pc, bbox: BoundingBox):
    """Quantize normalized positions to 16 bits and Morton-sort them.

    Points outside [-1, 1] normalized space are clamped and counted. Returns
    (permutation, sorted uint16 coords (N, 3), n_clamped); ties in the Morton
    code keep original index order.
    """
    positions = pc.positions if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)
    t = normalize_point(positions, bbox)
    n_clamped = int(np.count_nonzero(np.any(np.abs(t) > 1.0, axis=1)))
    t = np.clip(t, -1.0, 1.0)
    q = np.round((t + 1.0) * 0.5 * 65535.0).astype(np.uint16)
    codes = morton_encode(q)
    perm = np.argsort(codes, kind="stable")
    return perm, q[perm], n_clamped


def pack_point_image(coords: np.ndarray) -> np.ndarray:
    """Tile (N, 3) 16-bit coords into one single-channel image: each axis
    fills a W x H block row-major (W = ceil(sqrt N)), blocks stacked
    vertically -> (3H, W). Padding cells are zero."""
    coords = np.asarray(coords, dtype=np.uint16)
    n = coords.shape[0]
    w = int(np.ceil(np.sqrt(n)))
    h = int(np.ceil(n / w))
    img = np.zeros((3 * h, w), dtype=np.uint16)
    for a in range(3):
        block = np.zeros(w * h, dtype=np.uint16)
        block[:n] = coords[:, a]
        img[a * h : (a + 1) * h] = block.reshape(h, w)
    return img


def unpack_point_image(img: np.ndarray, n: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.uint16)
    h = img.shape[0] // 3
    out = np.empty((n, 3), dtype=np.uint16)
    for a in range(3):
        out[:, a] = img[a * h : (a + 1) * h].reshape(-1)[:n]
    return out


def _png_bytes(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG", optimize=True)
    return buf.getvalue()


def encode_points(pc, bbox: BoundingBox):
    """Produce both point payload candidates and keep the smaller.

    Returns (payload bytes, mode flag). RAW16F stores half-precision world
    coordinates; SORTED_PNG stores the Morton-packed 16-bit image, losslessly
    PNG-coded, with per-axis error bounded by 2 * half_extent / 65535.
    """
    positions = pc.positions if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)
    raw = positions.astype("<f2").tobytes()
    try:
        _, coords, _ = sort_points(positions, bbox)
        png = _png_bytes(pack_point_image(coords))
    except Exception as exc:  # encoder failure: fall back to raw
        warnings.warn(f"point image encoding failed ({exc}); storing RAW16F")
        return raw, POINT_MODE_RAW16F
    if len(png) < len(raw):
        return png, POINT_MODE_SORTED_PNG
    return raw, POINT_MODE_RAW16F


def decode_points(payload: bytes, mode: int, n: int, bbox: BoundingBox) -> np.ndarray:
    if mode == POINT_MODE_RAW16F:
        expect = 2 * 3 * n
        if len(payload) != expect:
            raise TruncatedError(f"point payload is {len(payload)} bytes, expected {expect}")
        return np.frombuffer(payload, dtype="<f2").reshape(n, 3).astype(np.float64)
    if mode == POINT_MODE_SORTED_PNG:
        img = np.asarray(Image.open(io.BytesIO(payload)))
        q = unpack_point_image(img, n)
        t = q.astype(np.float64) / 65535.0 * 2.0 - 1.0
        return denormalize_point(t, bbox)
    raise ContainerError(f"unknown point payload mode {mode}")


# ---------------------------------------------------------------------------
# Feature-plane quantization and coding


@dataclass
class QuantizedPlane:
    bit_depth: int
    vmin: float
    vmax: float
    codes: np.ndarray  # (w, h, m) uint8 or uint16

    def __post_init__(self):
        if self.bit_depth not in (8, 16):
            raise ValueError("bit depth must be 8 or 16")


def quantize_plane(plane: FeaturePlane, bits: int) -> QuantizedPlane:
    """Uniform affine quantization over the plane's own [min, max]."""
    data = plane.data
    vmin = float(data.min())
    vmax = float(data.max())
    codes = _quantize_array(data, vmin, vmax, (1 << bits) - 1)
    return QuantizedPlane(bit_depth=bits, vmin=vmin, vmax=vmax,
                          codes=codes.astype(np.uint8 if bits == 8 else np.uint16))


def dequantize_plane(qp: QuantizedPlane) -> FeaturePlane:
    data = _dequantize_array(qp.codes, qp.vmin, qp.vmax, (1 << qp.bit_depth) - 1)
    return FeaturePlane(data)


def _quantize_array(data: np.ndarray, vmin: float, vmax: float, max_code: int) -> np.ndarray:
    if vmax <= vmin:
        return np.zeros(data.shape, dtype=np.uint32)
    scaled = (np.clip(data, vmin, vmax) - vmin) / (vmax - vmin) * max_code
    return np.round(scaled).astype(np.uint32)


def _dequantize_array(codes: np.ndarray, vmin: float, vmax: float, max_code: int) -> np.ndarray:
    if vmax <= vmin:
        return np.full(codes.shape, vmin, dtype=np.float64)
    return vmin + codes.astype(np.float64) / max_code * (vmax - vmin)


def _qdef_params(quality: int):
    """Quality -> (stored bit depth, quantization level count).

    q = 100 is 16-bit quantization over the full value range; below that the
    payload stays 8-bit and the number of quantization levels shrinks with q,
    which makes both rate and distortion monotone in q.
    """
    if not 0 <= quality <= 100:
        raise ValueError("quality must be in 0..100")
    if quality >= 100:
        return 16, 1 << 16
    levels = int(np.clip(round(2.0 ** (quality / 12.5)), 2, 256))
    return 8, levels


def tile_level(level: TriPlaneLevel) -> np.ndarray:
    """(3r, m*r) single-channel image: block rows = planes, cols = channels."""
    r = level.resolution
    m = level.channels
    img = np.empty((3 * r, m * r), dtype=np.float64)
    for pi, name in enumerate(PLANE_NAMES):
        d = level.planes[name].data
        for ci in range(m):
            img[pi * r : (pi + 1) * r, ci * r : (ci + 1) * r] = d[:, :, ci]
    return img


def untile_level(img: np.ndarray, resolution: int, channels: int) -> TriPlaneLevel:
    planes = {}
    r = resolution
    for pi, name in enumerate(PLANE_NAMES):
        d = np.empty((r, r, channels))
        for ci in range(channels):
            d[:, :, ci] = img[pi * r : (pi + 1) * r, ci * r : (ci + 1) * r]
        planes[name] = FeaturePlane(d)
    return TriPlaneLevel(planes)


def _heic_module():
    try:
        import pillow_heif
    except ImportError:
        raise ContainerError(
            "HEIC backend needs the pillow_heif package; use the QDEF backend instead"
        ) from None
    pillow_heif.register_heif_opener()
    return pillow_heif


def encode_level(level: TriPlaneLevel, quality: int, backend: int) -> bytes:
    """One level's planes -> 16-byte header + coded stream."""
    img = tile_level(level)
    vmin = float(img.min())
    vmax = float(img.max())
    layout = (3 << 16) | level.channels
    if backend == BACKEND_QDEF:
        bits, levels = _qdef_params(quality)
        codes = _quantize_array(img, vmin, vmax, levels - 1)
        body = codes.astype("<u2" if bits == 16 else np.uint8).tobytes()
        stream = zlib.compress(body, 9)
    elif backend == BACKEND_HEIC:
        _heic_module()
        bits, levels = 8, 256
        codes = _quantize_array(img, vmin, vmax, 255).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(codes, mode="L").save(buf, format="HEIF", quality=int(quality))
        stream = buf.getvalue()
    else:
        raise ContainerError(f"unknown plane codec backend id {backend}")
    header = struct.pack("<BBHffI", bits, backend, levels - 1, vmin, vmax, layout)
    return header + stream


def decode_level(payload: bytes, resolution: int, channels: int, backend: int) -> TriPlaneLevel:
    if len(payload) < 16:
        raise TruncatedError("plane payload shorter than its header")
    bits, stored_backend, levels_m1, vmin, vmax, layout = struct.unpack("<BBHffI", payload[:16])
    if stored_backend != backend:
        raise ContainerError("plane payload backend does not match header")
    rows, cols = layout >> 16, layout & 0xFFFF
    if rows != 3 or cols != channels:
        raise ContainerError(f"unexpected plane tiling {rows}x{cols}")
    shape = (3 * resolution, channels * resolution)
    if backend == BACKEND_QDEF:
        body = zlib.decompress(payload[16:])
        dtype = "<u2" if bits == 16 else np.uint8
        codes = np.frombuffer(body, dtype=dtype)
        if codes.size != shape[0] * shape[1]:
            raise TruncatedError("plane payload size mismatch")
        codes = codes.reshape(shape)
    elif backend == BACKEND_HEIC:
        _heic_module()
        codes = np.asarray(Image.open(io.BytesIO(payload[16:])).convert("L"))
        if codes.shape != shape:
            raise ContainerError("decoded plane image has wrong shape")
    else:
        raise ContainerError(f"unknown plane codec backend id {backend}")
    img = _dequantize_array(codes, float(vmin), float(vmax), levels_m1)
    return untile_level(img, resolution, channels)


def encode_planes(mltp: MultiLevelTriPlane, quality, backend="qdef") -> list:
    """Per-level payloads at per-level quality; index 0 is the lowest level
    (which carries most of the information and gets the highest quality in
    the named presets)."""
    q1, q2, q3 = quality
    bid = BACKEND_IDS[backend] if isinstance(backend, str) else int(backend)
    return [encode_level(mltp.levels[li], q, bid) for li, q in enumerate((q1, q2, q3))]


# ---------------------------------------------------------------------------
# MLP blobs


def encode_mlp(dec: MlpDecoder) -> bytes:
    head = struct.pack("<HH", dec.in_dim, dec.out_dim)
    parts = [head]
    for k in ("w1", "b1", "w2", "b2", "w3", "b3"):
        parts.append(getattr(dec, k).astype("<f2").tobytes())
    return b"".join(parts)


def decode_mlp(payload: bytes) -> MlpDecoder:
    if len(payload) < 4:
        raise TruncatedError("mlp payload shorter than its header")
    in_dim, out_dim = struct.unpack("<HH", payload[:4])
    shapes = [(HIDDEN_WIDTH, in_dim), (HIDDEN_WIDTH,), (HIDDEN_WIDTH, HIDDEN_WIDTH),
              (HIDDEN_WIDTH,), (out_dim, HIDDEN_WIDTH), (out_dim,)]
    need = 4 + 2 * sum(int(np.prod(s)) for s in shapes)
    if len(payload) != need:
        raise TruncatedError(f"mlp payload is {len(payload)} bytes, expected {need}")
    off = 4
    arrays = []
    for s in shapes:
        count = int(np.prod(s))
        arrays.append(np.frombuffer(payload, dtype="<f2", count=count, offset=off)
                      .astype(np.float64).reshape(s))
        off += 2 * count
    return MlpDecoder(*arrays)


# ---------------------------------------------------------------------------
# Container assembly


@dataclass
class ContainerHeader:
    bbox: BoundingBox
    base_resolution: int
    channels: int
    sh_degree: int
    contraction: bool
    active_levels: int
    point_mode: int
    backend: int
    quality: tuple
    n_points: int

    def pack(self) -> bytes:
        return struct.pack(
            _HEAD_FMT,
            *self.bbox.center, self.bbox.half_extent,
            self.base_resolution, self.channels, self.sh_degree,
            1 if self.contraction else 0, self.active_levels, self.point_mode,
            self.backend, self.backend, self.backend,
            *(int(q) for q in self.quality),
            self.n_points,
        )

    @staticmethod
    def unpack(payload: bytes) -> "ContainerHeader":
        if len(payload) != struct.calcsize(_HEAD_FMT):
            raise TruncatedError("header section has wrong size")
        vals = struct.unpack(_HEAD_FMT, payload)
        (cx, cy, cz, half, base_res, channels, sh_degree, contraction,
         active_levels, point_mode, b1, b2, b3, q1, q2, q3, n_points) = vals
        if b1 != b2 or b2 != b3:
            raise ContainerError("inconsistent per-level backend ids")
        return ContainerHeader(
            bbox=BoundingBox(np.array([cx, cy, cz]), half),
            base_resolution=base_res, channels=channels, sh_degree=sh_degree,
            contraction=bool(contraction), active_levels=active_levels,
            point_mode=point_mode, backend=b1, quality=(q1, q2, q3),
            n_points=n_points,
        )


@dataclass
class IgsContainer:
    header: ContainerHeader
    point_payload: bytes
    plane_payloads: list
    mlp_payloads: list

    def sections(self) -> dict:
        return {
            b"HEAD": self.header.pack(),
            b"PNTS": self.point_payload,
            b"PLN0": self.plane_payloads[0],
            b"PLN1": self.plane_payloads[1],
            b"PLN2": self.plane_payloads[2],
            b"MLP0": self.mlp_payloads[0],
            b"MLP1": self.mlp_payloads[1],
            b"MLP2": self.mlp_payloads[2],
        }


def encode_model(model: IgsModel, quality=(100, 100, 100), backend="qdef") -> IgsContainer:
    bid = BACKEND_IDS[backend] if isinstance(backend, str) else int(backend)
    point_payload, mode = encode_points(model.positions, model.bbox)
    plane_payloads = encode_planes(model.mltp, quality, bid)
    mlp_payloads = [encode_mlp(dec) for dec in model.decoders]
    header = ContainerHeader(
        bbox=model.bbox,
        base_resolution=model.mltp.resolutions[2],
        channels=model.mltp.channels,
        sh_degree=model.sh_degree,
        contraction=model.contraction,
        active_levels=model.mltp.active_levels,
        point_mode=mode,
        backend=bid,
        quality=tuple(quality),
        n_points=model.n_points,
    )
    return IgsContainer(header, point_payload, plane_payloads, mlp_payloads)


def serialize(container: IgsContainer) -> bytes:
    sections = container.sections()
    table_size = struct.calcsize(_TABLE_FMT) * len(SECTION_ORDER)
    offset = 4 + 2 + 2 + table_size
    table = []
    body = []
    for tag in SECTION_ORDER:
        payload = sections[tag]
        table.append(struct.pack(_TABLE_FMT, tag, offset, len(payload), zlib.crc32(payload)))
        body.append(payload)
        offset += len(payload)
    return b"".join([MAGIC, struct.pack("<HH", VERSION, len(SECTION_ORDER))] + table + body)


def parse(data: bytes) -> IgsContainer:
    if len(data) < 8:
        raise TruncatedError("file shorter than the fixed header")
    if data[:4] != MAGIC:
        raise BadMagicError("bad magic; not an IGS container")
    version, n_sections = struct.unpack("<HH", data[4:8])
    if version != VERSION:
        raise VersionError(f"container version {version}, expected {VERSION}")
    entry_size = struct.calcsize(_TABLE_FMT)
    if len(data) < 8 + entry_size * n_sections:
        raise TruncatedError("truncated section table")
    payloads = {}
    for i in range(n_sections):
        tag, offset, length, crc = struct.unpack_from(_TABLE_FMT, data, 8 + i * entry_size)
        if offset + length > len(data):
            raise TruncatedError(f"section {tag.decode()} extends past end of file")
        payload = data[offset : offset + length]
        if zlib.crc32(payload) != crc:
            raise ChecksumError(f"checksum mismatch in section {tag.decode()}")
        payloads[tag] = payload
    for tag in SECTION_ORDER:
        if tag not in payloads:
            raise ContainerError(f"missing section {tag.decode()}")
    header = ContainerHeader.unpack(payloads[b"HEAD"])
    return IgsContainer(
        header=header,
        point_payload=payloads[b"PNTS"],
        plane_payloads=[payloads[b"PLN0"], payloads[b"PLN1"], payloads[b"PLN2"]],
        mlp_payloads=[payloads[b"MLP0"], payloads[b"MLP1"], payloads[b"MLP2"]],
    )


def decode_model(container: IgsContainer) -> IgsModel:
    h = container.header
    positions = decode_points(container.point_payload, h.point_mode, h.n_points, h.bbox)
    res = (h.base_resolution // 4, h.base_resolution // 2, h.base_resolution)
    levels = [decode_level(container.plane_payloads[li], res[li], h.channels, h.backend)
              for li in range(3)]
    mltp = MultiLevelTriPlane(levels, active_levels=h.active_levels)
    decoders = [decode_mlp(p) for p in container.mlp_payloads]
    return IgsModel(positions=positions, mltp=mltp, decoders=decoders, bbox=h.bbox,
                    sh_degree=h.sh_degree, contraction=h.contraction)


def write_container(model: IgsModel, quality=(100, 100, 100), backend="qdef") -> bytes:
    """Model -> container bytes."""
    return serialize(encode_model(model, quality, backend))


def read_container(data: bytes) -> IgsModel:
    """Container bytes -> model; validates magic, version, and checksums."""
    return decode_model(parse(data))


def container_info(data: bytes) -> dict:
    """Per-section size breakdown plus header metadata (for the info CLI)."""
    container = parse(data)
    sections = container.sections()
    h = container.header
    entry_size = struct.calcsize(_TABLE_FMT)
    info = {
        "file_size": len(data),
        "fixed_overhead": 8 + entry_size * len(SECTION_ORDER),
        "sections": {tag.decode(): len(payload) for tag, payload in sections.items()},
        "point_mode": POINT_MODE_NAMES[h.point_mode],
        "backend": BACKEND_NAMES[h.backend],
        "quality": h.quality,
        "n_points": h.n_points,
        "sh_degree": h.sh_degree,
        "base_resolution": h.base_resolution,
        "channels": h.channels,
        "contraction": h.contraction,
        "active_levels": h.active_levels,
    }
    return info
