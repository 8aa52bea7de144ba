"""Pilot run to size the desk-scale smoke test (not part of the package)."""
import json
import time
from pathlib import Path

import ctdenoise as cd
from ctdenoise.trainer import TrainConfig, train, load_denoiser

t0 = time.time()
train_pairs = [
    cd.generate_phantom(cd.default_phantom_spec(1000 + i, 64))[::-1]
    for i in range(200)
]
val_pairs = [
    cd.generate_phantom(cd.default_phantom_spec(9000 + i, 64))[::-1]
    for i in range(20)
]
# generate_phantom returns (clean, noisy); dataset wants (noisy, clean)
print(f"data: {time.time()-t0:.1f}s")

cfg = TrainConfig(epochs=10, seed=123)  # 200/4 = 50 batches/epoch -> 500 steps
out = Path("/tmp/pilot_full")
res = train(cfg, train_pairs, out)
print(f"train: {time.time()-t0:.1f}s, steps={res.state.step}")

noisy_report = cd.evaluate(lambda img: img, val_pairs)
net = load_denoiser(res.checkpoint_path)
den_report = cd.evaluate(lambda img: cd.denoise_image(net, img), val_pairs)
r10 = res.reports[10]
rlast = res.reports[-1]
print(json.dumps({
    "noisy_psnr": noisy_report.summary()["psnr"]["mean"],
    "denoised_psnr": den_report.summary()["psnr"]["mean"],
    "noisy_rmse": noisy_report.summary()["rmse"]["mean"],
    "denoised_rmse": den_report.summary()["rmse"]["mean"],
    "loss_step10": r10.l_total,
    "loss_last": rlast.l_total,
    "pixel_step10": r10.l_pixel,
    "pixel_last": rlast.l_pixel,
    "elapsed_s": time.time() - t0,
}, indent=2))
