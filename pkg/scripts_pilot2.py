"""Second pilot: supervised-only control, then rebalanced full training."""
import json
import sys
import time
from pathlib import Path

import ctdenoise as cd
from ctdenoise.trainer import TrainConfig, train, load_denoiser

mode = sys.argv[1]
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 500

train_pairs = [
    cd.generate_phantom(cd.default_phantom_spec(1000 + i, 64))[::-1]
    for i in range(200)
]
val_pairs = [
    cd.generate_phantom(cd.default_phantom_spec(9000 + i, 64))[::-1]
    for i in range(20)
]

if mode == "supervised":
    cfg = TrainConfig(epochs=40, max_steps=steps, seed=123, weight_global=0.0, weight_local=0.0)
else:
    cfg = TrainConfig(epochs=40, max_steps=steps, seed=123)

t0 = time.time()
out = Path(f"/tmp/pilot2_{mode}_{steps}")
res = train(cfg, train_pairs, out)
elapsed = time.time() - t0

noisy_report = cd.evaluate(lambda img: img, val_pairs)
net = load_denoiser(res.checkpoint_path)
den_report = cd.evaluate(lambda img: cd.denoise_image(net, img), val_pairs)
print(json.dumps({
    "mode": mode,
    "steps": res.state.step,
    "noisy_psnr": noisy_report.summary()["psnr"]["mean"],
    "denoised_psnr": den_report.summary()["psnr"]["mean"],
    "noisy_rmse": noisy_report.summary()["rmse"]["mean"],
    "denoised_rmse": den_report.summary()["rmse"]["mean"],
    "denoised_ssim": den_report.summary()["ssim"]["mean"],
    "loss_step10": res.reports[10].l_total,
    "loss_last": res.reports[-1].l_total,
    "drop_pct": 100 * (1 - res.reports[-1].l_total / res.reports[10].l_total),
    "l_components_last": [res.reports[-1].l_global, res.reports[-1].l_local, res.reports[-1].l_pixel],
    "elapsed_s": elapsed,
}, indent=2))
