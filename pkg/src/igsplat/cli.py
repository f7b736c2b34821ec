"""Command-line front end.

Subcommands: synth (closed-loop synthetic scenes rendered by this package's
own renderer), train, compress, decompress, render, eval, info, rd-sweep,
import-ply. Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .codec import ContainerError, container_info, read_container, write_container
from .core import Camera, GaussianAttributes, ImageBuffer, NumericalError
from .model import render_model
from .renderer import SH_C0, psnr, render_gaussians, ssim_with_grad
from .sceneio import (
    Scene,
    camera_from_line,
    load_image,
    load_scene,
    read_gaussian_ply,
    save_image,
    save_scene,
)
from .training import TrainConfig, train

# optimal quality tuples (level1, level2, level3) used for the RD presets
PRESETS = {
    "P0": (45, 35, 10),
    "P1": (45, 45, 10),
    "P2": (55, 45, 10),
    "P3": (55, 60, 20),
    "P4": (70, 60, 40),
    "P5": (90, 75, 40),
    "P6": (100, 100, 100),
}


def look_at_camera(eye, target, width: int, height: int, fov_scale: float = 1.1,
                   up=(0.0, 0.0, 1.0), near: float = 0.1, far: float = 50.0) -> Camera:
    """Pinhole camera at `eye` looking at `target`, image y pointing down."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f = f / np.linalg.norm(f)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(f, up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(f, up)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    rot = np.stack([x, y, f])
    fx = fov_scale * width
    return Camera(rotation=rot, translation=-rot @ eye, fx=fx, fy=fx,
                  cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                  width=width, height=height, near=near, far=far)


def synth_scene(seed: int, k: int, v: int, resolution: int):
    """Sample K Gaussians and a V-view camera ring, render ground truth with
    this package's renderer. Returns (Scene, (positions, attrs))."""
    if k < 1 or v < 2:
        raise ValueError("synthetic scenes need K >= 1 and V >= 2")
    rng = np.random.default_rng(seed)
    positions = rng.uniform(-0.6, 0.6, size=(k, 3))
    opacity = rng.uniform(0.5, 0.95, size=k)
    scale_exp = rng.uniform(-3.6, -2.2, size=(k, 3))
    quats = rng.normal(size=(k, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    sh = np.zeros((k, 3, 4))
    sh[:, :, 0] = (rng.uniform(0.15, 0.85, size=(k, 3)) - 0.5) / SH_C0
    sh[:, :, 1:] = rng.normal(scale=0.08, size=(k, 3, 3))
    attrs = GaussianAttributes(opacity, scale_exp, quats, sh)

    cameras = []
    images = []
    radius = 2.4
    for i in range(v):
        az = 2.0 * np.pi * i / v
        el = np.deg2rad(15.0 if i % 2 == 0 else 30.0)
        eye = radius * np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
        cam = look_at_camera(eye, (0.0, 0.0, 0.0), resolution, resolution)
        img, _ = render_gaussians(positions, attrs, cam, background=(0.0, 0.0, 0.0))
        # freeze to the 8-bit values the PNGs will hold
        images.append(img.to_uint8().astype(np.float64) / 255.0)
        cameras.append(cam)
    return Scene(cameras=cameras, images=images), (positions, attrs)


def load_cameras(path) -> list:
    """Camera manifest only (scene dir or a bare cameras.txt)."""
    p = Path(path)
    manifest = p / "cameras.txt" if p.is_dir() else p
    if not manifest.is_file():
        raise FileNotFoundError(f"no camera manifest at {manifest}")
    cams = []
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            cams.append(camera_from_line(line))
    if not cams:
        raise ValueError(f"empty camera manifest {manifest}")
    return cams


def parse_quality(text: str):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError("--quality expects three comma-separated values")
    q = tuple(int(p) for p in parts)
    if any(not 0 <= x <= 100 for x in q):
        raise ValueError("quality values must be in 0..100")
    return q


def _coerce_field(f: dataclasses.Field, text: str):
    text = text.strip()
    if f.name in ("noise_q",):
        return None if text.lower() in ("auto", "none") else float(text)
    if f.name in ("bbox_center", "lambda_levels", "background"):
        return tuple(float(x) for x in text.split(","))
    if f.name == "bbox_half_extent":
        return None if text.lower() == "none" else float(text)
    if f.type in ("int", int):
        return int(text)
    if f.type in ("float", float):
        return float(text)
    if f.type in ("bool", bool):
        return text.lower() in ("1", "true", "yes", "on")
    return text


def load_train_config(path=None, **overrides) -> TrainConfig:
    """Key-value config file (one `key = value` per line, # comments),
    plus keyword overrides for CLI flags."""
    values = {}
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    if path is not None:
        for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            if not _:
                key, _, val = line.partition(" ")
            key = key.strip()
            if key not in fields:
                raise ValueError(f"{path}:{ln}: unknown config key {key!r}")
            values[key] = _coerce_field(fields[key], val)
    values.update({k: v for k, v in overrides.items() if v is not None})
    if "total_iters" in values and not {"bootstrap_iters", "level2_start",
                                        "level3_start"} & set(values):
        cfg = TrainConfig.with_schedule(values.pop("total_iters"))
        for k, v in values.items():
            setattr(cfg, k, v)
    else:
        cfg = TrainConfig(**values)
    cfg.validate()
    return cfg


def write_metrics_csv(path, rows, fieldnames=None):
    names = fieldnames or (list(rows[0]) if rows else None)
    if names is None:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=names)
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    scene, _ = synth_scene(args.seed, args.gaussians, args.views, args.resolution)
    save_scene(args.out, scene)
    print(f"wrote {scene.n_views} views at {args.resolution}x{args.resolution} to {args.out}")
    return 0


def cmd_train(args) -> int:
    scene = load_scene(args.scene)
    cfg = load_train_config(
        args.config,
        total_iters=args.iters,
        seed=args.seed,
        base_resolution=args.resolution,
    )
    init_positions = init_raw = None
    if args.init_ply:
        init_positions, init_raw, ply_deg = read_gaussian_ply(args.init_ply)
        cfg.sh_degree = ply_deg
    result = train(scene, cfg, init_positions=init_positions, init_explicit_raw=init_raw,
                   checkpoint_dir=args.checkpoint_dir)
    quality = parse_quality(args.quality) if args.quality else PRESETS[args.preset or "P6"]
    data = write_container(result.model, quality=quality, backend=args.backend)
    Path(args.out).write_bytes(data)
    if args.metrics:
        write_metrics_csv(args.metrics, result.metrics)
    print(f"trained {cfg.total_iters} iters, {result.model.n_points} points; "
          f"wrote {len(data)} bytes to {args.out}")
    return 0


def cmd_compress(args) -> int:
    model = read_container(Path(args.input).read_bytes())
    quality = parse_quality(args.quality) if args.quality else PRESETS[args.preset or "P3"]
    data = write_container(model, quality=quality, backend=args.backend)
    Path(args.out).write_bytes(data)
    print(f"re-encoded at {quality} -> {len(data)} bytes")
    return 0


def cmd_decompress(args) -> int:
    model = read_container(Path(args.input).read_bytes())
    data = write_container(model, quality=PRESETS["P6"], backend="qdef")
    Path(args.out).write_bytes(data)
    print(f"decoded and re-stored losslessly -> {len(data)} bytes")
    return 0


def cmd_render(args) -> int:
    model = read_container(Path(args.model).read_bytes())
    cameras = load_cameras(args.cameras)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bg = tuple(float(x) for x in args.background.split(","))
    for i, cam in enumerate(cameras):
        img = render_model(model, cam, background=bg)
        save_image(out / f"view_{i:03d}.png", img)
        if args.float_out:
            np.save(out / f"view_{i:03d}.npy", img.pixels.astype(np.float32))
    print(f"rendered {len(cameras)} views to {out}")
    return 0


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    pred_files = sorted(p.name for p in pred_dir.glob("*.png"))
    gt_files = sorted(p.name for p in gt_dir.glob("*.png"))
    if pred_files != gt_files or not pred_files:
        missing = sorted(set(pred_files) ^ set(gt_files))
        raise ValueError(f"prediction/gt filename mismatch: {missing or 'no images'}")
    rows = []
    for name in pred_files:
        a = load_image(pred_dir / name)
        b = load_image(gt_dir / name)
        if a.shape != b.shape:
            raise ValueError(f"{name}: dimension mismatch {a.shape} vs {b.shape}")
        rows.append({"image": name, "psnr": psnr(a, b), "ssim": ssim_with_grad(a, b)[0]})
    mean_row = {"image": "mean",
                "psnr": float(np.mean([r["psnr"] for r in rows])),
                "ssim": float(np.mean([r["ssim"] for r in rows]))}
    rows.append(mean_row)
    if args.out:
        write_metrics_csv(args.out, rows)
    for r in rows:
        print(f"{r['image']}: PSNR {r['psnr']:.3f} dB  SSIM {r['ssim']:.5f}")
    return 0


def rd_sweep(model, tuples, scene: Scene, backend: str = "qdef", background=(0.0, 0.0, 0.0)):
    """Encode at each quality tuple, decode from bytes, render the scene's
    views, and measure. Returns CSV-ready rows."""
    rows = []
    for label, quality in tuples:
        data = write_container(model, quality=quality, backend=backend)
        decoded = read_container(data)
        ps, ss = [], []
        for cam, gt in zip(scene.cameras, scene.images):
            img = render_model(decoded, cam, background=background)
            ps.append(psnr(img.pixels, gt))
            ss.append(ssim_with_grad(img.pixels, gt)[0])
        rows.append({
            "preset": label,
            "q1": quality[0], "q2": quality[1], "q3": quality[2],
            "size_bytes": len(data),
            "psnr": float(np.mean(ps)),
            "ssim": float(np.mean(ss)),
        })
    return rows


def cmd_rd_sweep(args) -> int:
    model = read_container(Path(args.model).read_bytes())
    scene = load_scene(args.scene)
    tuples = []
    if args.presets:
        for name in args.presets.split(","):
            name = name.strip().upper()
            if name not in PRESETS:
                raise ValueError(f"unknown preset {name!r} (P0..P6)")
            tuples.append((name, PRESETS[name]))
    if args.quality:
        for spec_ in args.quality.split(";"):
            q = parse_quality(spec_)
            tuples.append((f"{q[0]}-{q[1]}-{q[2]}", q))
    rows = rd_sweep(model, tuples, scene, backend=args.backend)
    write_metrics_csv(args.out, rows,
                      fieldnames=["preset", "q1", "q2", "q3", "size_bytes", "psnr", "ssim"])
    for r in rows:
        print(f"{r['preset']}: {r['size_bytes']} bytes  PSNR {r['psnr']:.3f}  SSIM {r['ssim']:.5f}")
    return 0


def cmd_info(args) -> int:
    info = container_info(Path(args.input).read_bytes())
    print(f"file size      {info['file_size']} bytes")
    print(f"points         {info['n_points']} ({info['point_mode']})")
    print(f"planes         base {info['base_resolution']}, {info['channels']} channels, "
          f"backend {info['backend']}, quality {info['quality']}")
    print(f"sh degree      {info['sh_degree']}   contraction {info['contraction']}   "
          f"active levels {info['active_levels']}")
    print("section sizes:")
    total = info["fixed_overhead"]
    for tag, size in info["sections"].items():
        print(f"  {tag}  {size:>12} bytes")
        total += size
    print(f"  overhead {info['fixed_overhead']:>8} bytes (magic + table)")
    assert total == info["file_size"], "section sizes must sum to the file size"
    return 0


def cmd_import_ply(args) -> int:
    positions, raw, sh_degree = read_gaussian_ply(args.ply)
    np.savez(args.out, positions=positions, explicit_raw=raw, sh_degree=sh_degree)
    print(f"imported {positions.shape[0]} points, SH degree {sh_degree} -> {args.out}")
    return 0


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="igsplat", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--deterministic", action="store_true",
                        help="single-threaded deterministic reductions (always on)")
        return sp

    sp = add("synth", cmd_synth, "generate a synthetic scene")
    sp.add_argument("--out", required=True)
    sp.add_argument("--gaussians", "-k", type=int, default=100)
    sp.add_argument("--views", "-v", type=int, default=16)
    sp.add_argument("--resolution", type=int, default=64)

    sp = add("train", cmd_train, "train a model on a scene directory")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", default=None)
    sp.add_argument("--iters", type=int, default=None)
    sp.add_argument("--resolution", type=int, default=None, help="largest plane resolution")
    sp.add_argument("--quality", default=None)
    sp.add_argument("--preset", default=None, choices=sorted(PRESETS))
    sp.add_argument("--backend", default="qdef", choices=["qdef", "heic"])
    sp.add_argument("--metrics", default=None, help="write per-iteration CSV here")
    sp.add_argument("--init-ply", default=None, help="bootstrap from a splatting checkpoint")
    sp.add_argument("--checkpoint-dir", default=None,
                    help="periodic .igs checkpoints (see checkpoint_interval)")

    sp = add("compress", cmd_compress, "re-encode a container at a new quality")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--quality", default=None, help="q1,q2,q3 in 0..100")
    sp.add_argument("--preset", default=None, choices=sorted(PRESETS))
    sp.add_argument("--backend", default="qdef", choices=["qdef", "heic"])

    sp = add("decompress", cmd_decompress, "decode and re-store losslessly")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)

    sp = add("render", cmd_render, "render a container over a camera path")
    sp.add_argument("--model", required=True)
    sp.add_argument("--cameras", required=True, help="scene dir or cameras.txt")
    sp.add_argument("--out", required=True)
    sp.add_argument("--background", default="0,0,0")
    sp.add_argument("--float-out", action="store_true",
                    help="also write float32 .npy arrays")

    sp = add("eval", cmd_eval, "PSNR/SSIM between two image directories")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", default=None, help="CSV path")

    sp = add("info", cmd_info, "container introspection and size breakdown")
    sp.add_argument("--in", dest="input", required=True)

    sp = add("rd-sweep", cmd_rd_sweep, "rate-distortion sweep over quality tuples")
    sp.add_argument("--model", required=True)
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--presets", default=None, help="comma-separated P0..P6")
    sp.add_argument("--quality", default=None, help="semicolon-separated q1,q2,q3 tuples")
    sp.add_argument("--backend", default="qdef", choices=["qdef", "heic"])

    sp = add("import-ply", cmd_import_ply, "read a splatting checkpoint PLY")
    sp.add_argument("--ply", required=True)
    sp.add_argument("--out", required=True, help="output .npz")

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args) or 0
    except NumericalError as exc:
        print(f"igsplat: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ContainerError, ValueError, FileNotFoundError, OSError) as exc:
        print(f"igsplat: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
