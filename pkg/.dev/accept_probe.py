import json
import time
import numpy as np
from igsplat.cli import synth_scene, look_at_camera, PRESETS, rd_sweep
from igsplat.training import TrainConfig, train
from igsplat.model import render_model
from igsplat.renderer import psnr, render_gaussians, ssim_with_grad
from igsplat.codec import write_container, encode_planes
from igsplat.sceneio import Scene

SEED = 11
scene, (gt_pos, gt_attrs) = synth_scene(seed=SEED, k=100, v=16, resolution=64)

# held-out ring: azimuths between training views, mid elevation
test_cams = []
test_imgs = []
for i in range(4):
    az = 2 * np.pi * (i + 0.5) / 4
    el = np.deg2rad(22.5)
    eye = 2.4 * np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
    cam = look_at_camera(eye, (0, 0, 0), 64, 64)
    img, _ = render_gaussians(gt_pos, gt_attrs, cam)
    test_cams.append(cam)
    test_imgs.append(img.to_uint8().astype(np.float64) / 255.0)

def heldout_psnr_model(model):
    return float(np.mean([psnr(render_model(model, c).pixels, g)
                          for c, g in zip(test_cams, test_imgs)]))

def heldout_psnr_explicit(result):
    from igsplat.decoder import activate
    attrs = activate(result.explicit_raw)
    vals = []
    for c, g in zip(test_cams, test_imgs):
        img, _ = render_gaussians(result.model.positions, attrs, c)
        vals.append(psnr(img.pixels, g))
    return float(np.mean(vals))

report = {}
T = 3000
base = dict(seed=0, base_resolution=64, n_init_points=1000)

t0 = time.time()
igs = train(scene, TrainConfig.with_schedule(T, **base))
report["igs_time_s"] = time.time() - t0
report["igs_points"] = igs.model.n_points
report["igs_heldout_psnr"] = heldout_psnr_model(igs.model)

t0 = time.time()
baseline = train(scene, TrainConfig.with_schedule(T, explicit_only=True, **base))
report["baseline_time_s"] = time.time() - t0
report["baseline_points"] = baseline.model.n_points
report["baseline_heldout_psnr"] = heldout_psnr_explicit(baseline)

t0 = time.time()
noreg = train(scene, TrainConfig.with_schedule(T, lambda_levels=(0.0, 0.0, 0.0), **base))
report["noreg_time_s"] = time.time() - t0
report["noreg_heldout_psnr"] = heldout_psnr_model(noreg.model)

# criterion 5: smoothed loss across activation boundaries
cfg = TrainConfig.with_schedule(T, **base)
loss = np.array(igs.loss_history)
for name, b in (("level2", cfg.level2_start), ("level3", cfg.level3_start)):
    before = loss[b - 100 : b].mean()
    after = loss[b : b + 100].mean()
    report[f"jump_{name}"] = float(after / before - 1.0)

# criterion 6: plane payloads at P3
p3 = PRESETS["P3"]
pl_reg = sum(map(len, encode_planes(igs.model.mltp, p3)))
pl_noreg = sum(map(len, encode_planes(noreg.model.mltp, p3)))
report["p3_planes_reg"] = pl_reg
report["p3_planes_noreg"] = pl_noreg
report["p3_ratio"] = pl_reg / pl_noreg
# PSNR of the two models decoded at P3
from igsplat.codec import read_container
mreg = read_container(write_container(igs.model, quality=p3))
mnoreg = read_container(write_container(noreg.model, quality=p3))
report["p3_psnr_reg"] = heldout_psnr_model(mreg)
report["p3_psnr_noreg"] = heldout_psnr_model(mnoreg)

# criterion 8: rd sweep orderings on the test views
test_scene = Scene(cameras=test_cams, images=test_imgs)
rows = rd_sweep(igs.model, [(p, PRESETS[p]) for p in ("P1", "P3", "P5", "P6")], test_scene)
report["rd"] = [(r["preset"], r["size_bytes"], round(r["psnr"], 3)) for r in rows]

# plane value ranges for context
for li, lv in enumerate(igs.model.mltp.levels):
    d = np.concatenate([lv.planes[n].data.ravel() for n in ("xy", "xz", "yz")])
    report[f"level{li}_absmax"] = float(np.abs(d).max())
    report[f"level{li}_mean_abs"] = float(np.abs(d).mean())

print(json.dumps(report, indent=2))
