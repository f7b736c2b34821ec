"""Scene directory and checkpoint I/O.

A scene directory holds `cameras.txt` (one camera per line: rotation
row-major 9 floats, translation 3, fx fy cx cy, W H, near far) and one
`view_NNN.png` ground-truth image per line, index-matched.

PLY import follows the field layout of public splatting checkpoints:
x y z [nx ny nz] f_dc_* f_rest_* opacity scale_* rot_*, binary little-endian
or ascii, with f_rest stored channel-major.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import Camera, ImageBuffer
from .decoder import ROTATION_SLOT, SCALE_SLOT, SH_SLOT_START, inverse_scale_activation, raw_dim

MANIFEST_NAME = "cameras.txt"


@dataclass
class Scene:
    cameras: list
    images: list  # (H, W, 3) float64 arrays in [0, 1]

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ValueError("camera/image count mismatch")

    @property
    def n_views(self) -> int:
        return len(self.cameras)


def save_image(path, pixels):
    arr = pixels.to_uint8() if isinstance(pixels, ImageBuffer) else ImageBuffer(pixels).to_uint8()
    Image.fromarray(arr, mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def camera_to_line(cam: Camera) -> str:
    vals = list(cam.rotation.reshape(-1)) + list(cam.translation) + [
        cam.fx, cam.fy, cam.cx, cam.cy, float(cam.width), float(cam.height),
        cam.near, cam.far]
    return " ".join(f"{v:.17g}" for v in vals)


def camera_from_line(line: str) -> Camera:
    vals = [float(tok) for tok in line.split()]
    if len(vals) != 20:
        raise ValueError(f"camera line needs 20 numbers, got {len(vals)}")
    return Camera(
        rotation=np.array(vals[:9]).reshape(3, 3),
        translation=np.array(vals[9:12]),
        fx=vals[12], fy=vals[13], cx=vals[14], cy=vals[15],
        width=int(vals[16]), height=int(vals[17]),
        near=vals[18], far=vals[19],
    )


def save_scene(path, scene: Scene):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    lines = [camera_to_line(cam) for cam in scene.cameras]
    (out / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    for i, img in enumerate(scene.images):
        save_image(out / f"view_{i:03d}.png", img)


def load_scene(path) -> Scene:
    root = Path(path)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {root}")
    cameras = []
    images = []
    for i, line in enumerate(manifest.read_text().splitlines()):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        cam = camera_from_line(line)
        img_path = root / f"view_{i:03d}.png"
        if not img_path.is_file():
            raise FileNotFoundError(f"missing image {img_path}")
        img = load_image(img_path)
        if img.shape[:2] != (cam.height, cam.width):
            raise ValueError(f"{img_path}: image is {img.shape[1]}x{img.shape[0]}, "
                             f"camera says {cam.width}x{cam.height}")
        cameras.append(cam)
        images.append(img)
    if not cameras:
        raise ValueError(f"empty camera manifest in {root}")
    return Scene(cameras=cameras, images=images)


# ---------------------------------------------------------------------------
# PLY import/export (splatting checkpoint layout)


def _sh_coeff_count(n_rest: int) -> int:
    if n_rest % 3 != 0:
        raise ValueError("f_rest field count must be a multiple of 3")
    k = 1 + n_rest // 3
    deg = int(round(np.sqrt(k))) - 1
    if (deg + 1) ** 2 != k or not 0 <= deg <= 3:
        raise ValueError(f"unsupported SH layout with {k} coefficients per channel")
    return k


def read_gaussian_ply(path):
    """Read a splatting checkpoint PLY.

    Returns (positions (N, 3), raw_attrs (N, 8 + 3K), sh_degree); raw scale
    slots are remapped from log-scale into this codebase's sigmoid range.
    """
    blob = Path(path).read_bytes()
    header_end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or header_end < 0:
        raise ValueError(f"{path}: not a PLY file")
    header = blob[:header_end].decode("ascii", "replace").splitlines()
    data = blob[header_end + len(b"end_header\n"):]

    fmt = None
    n_vertex = 0
    props = []
    for line in header:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            if tok[1] != "vertex" and props:
                break  # only the vertex element is supported
            if tok[1] == "vertex":
                n_vertex = int(tok[2])
        elif tok[0] == "property" and tok[1] in ("float", "float32"):
            props.append(tok[2])
        elif tok[0] == "property":
            raise ValueError(f"{path}: unsupported property type {tok[1]}")
    if fmt not in ("binary_little_endian", "ascii"):
        raise ValueError(f"{path}: unsupported PLY format {fmt}")
    if n_vertex < 1:
        raise ValueError(f"{path}: no vertices")

    if fmt == "ascii":
        rows = np.loadtxt(data.decode("ascii").splitlines(), dtype=np.float64,
                          ndmin=2)[:n_vertex, : len(props)]
    else:
        need = 4 * len(props) * n_vertex
        if len(data) < need:
            raise ValueError(f"{path}: truncated vertex data")
        rows = np.frombuffer(data[:need], dtype="<f4").reshape(n_vertex, len(props)).astype(np.float64)
    col = {name: i for i, name in enumerate(props)}

    def take(names):
        try:
            return rows[:, [col[n] for n in names]]
        except KeyError as exc:
            raise ValueError(f"{path}: missing field {exc}") from None

    positions = take(["x", "y", "z"])
    n_rest = sum(1 for p in props if p.startswith("f_rest_"))
    k = _sh_coeff_count(n_rest)
    sh_degree = int(round(np.sqrt(k))) - 1
    raw = np.zeros((n_vertex, raw_dim(sh_degree)))
    raw[:, 0] = take(["opacity"])[:, 0]
    log_scale = take([f"scale_{i}" for i in range(3)])
    raw[:, SCALE_SLOT] = inverse_scale_activation(np.clip(log_scale, -11.9, -2.1))
    raw[:, ROTATION_SLOT] = take([f"rot_{i}" for i in range(4)])
    sh = np.zeros((n_vertex, 3, k))
    sh[:, :, 0] = take([f"f_dc_{c}" for c in range(3)])
    if k > 1:
        rest = take([f"f_rest_{i}" for i in range(n_rest)])
        sh[:, :, 1:] = rest.reshape(n_vertex, 3, k - 1)
    raw[:, SH_SLOT_START:] = sh.reshape(n_vertex, -1)
    return positions, raw, sh_degree


def write_gaussian_ply(path, positions, raw_attrs, sh_degree: int):
    """Inverse of `read_gaussian_ply`, binary little-endian."""
    from .decoder import activate

    positions = np.asarray(positions, dtype=np.float64)
    raw = np.asarray(raw_attrs, dtype=np.float64)
    n = positions.shape[0]
    k = (sh_degree + 1) ** 2
    attrs = activate(raw)
    log_scale = attrs.scale_exp
    sh = raw[:, SH_SLOT_START:].reshape(n, 3, k)

    names = (["x", "y", "z"]
             + [f"f_dc_{c}" for c in range(3)]
             + [f"f_rest_{i}" for i in range(3 * (k - 1))]
             + ["opacity"]
             + [f"scale_{i}" for i in range(3)]
             + [f"rot_{i}" for i in range(4)])
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {nm}" for nm in names]
    header += ["end_header", ""]

    table = np.concatenate([
        positions,
        sh[:, :, 0],
        sh[:, :, 1:].reshape(n, -1),
        raw[:, 0:1],
        log_scale,
        raw[:, ROTATION_SLOT],
    ], axis=1).astype("<f4")
    Path(path).write_bytes("\n".join(header).encode("ascii") + table.tobytes())
