"""Short masked-reconstruction pretraining run on a small phantom corpus,
saving original / masked / reconstructed triptychs before and after training.

Run:  python3 demos/04_pretrain_reconstruction.py    (about 2 minutes)
"""

from pathlib import Path

import numpy as np

from sonomae import data, ndgrad, optim, vitmae

out = Path(__file__).parent / "out" / "reconstruction"
out.mkdir(parents=True, exist_ok=True)

rng = np.random.default_rng(0)
images = []
for i in range(120):
    label = data.CLASSES[i % 3]
    render = data.render_phantom(data.make_spec(label, seed=i, image_size=64))
    images.append(data.resize_normalize(render.image, 64).data)
images = np.stack(images)

cfg = vitmae.ModelConfig(seed=1)
model = vitmae.VitMaeModel(cfg, mode=vitmae.PRETRAIN)
plan = vitmae.sample_mask(cfg.num_patches, cfg.mask_ratio, seed=5)


def to_u8(std_image):
    lo, hi = std_image.min(), std_image.max()
    return np.round((std_image - lo) / (hi - lo + 1e-9) * 255).astype(np.uint8)


def snapshot(tag):
    with ndgrad.no_grad():
        recon = vitmae.forward_mae(model, images[0], plan)
    masked = images[0].copy()
    pix = vitmae.unpatchify(
        np.repeat((~plan.mask).astype(np.float32)[:, None], 64, axis=1), 8)
    data.write_pnm(out / f"{tag}_original.pgm", to_u8(images[0][0]))
    data.write_pnm(out / f"{tag}_masked.pgm", to_u8(masked[0] * pix[0]))
    data.write_pnm(out / f"{tag}_recon.pgm", to_u8(recon.data[0]))
    loss = float(vitmae.mae_loss(recon, images[0]).data)
    print(f"{tag}: reconstruction MSE on the sample image = {loss:.4f}")


snapshot("before")
ocfg = optim.OptimConfig(learning_rate=3e-4, weight_decay=0.01, epochs=10,
                         batch_size=16)
history = optim.train_pretrain(model, images, ocfg, seed=2)
print("epoch mean losses:", [round(v, 4) for v in history["epoch_loss"]])
snapshot("after")
print(f"triptychs under {out}")
