"""Generate one phantom of each class, plus an annotated variant, and save
them as portable graymaps/pixmaps under demos/out/phantoms/.

Run:  python3 demos/02_phantom_gallery.py
"""

from pathlib import Path

import numpy as np

from sonomae import data

out = Path(__file__).parent / "out" / "phantoms"
out.mkdir(parents=True, exist_ok=True)

for label in data.CLASSES:
    spec = data.make_spec(label, seed=7, image_size=64)
    render = data.render_phantom(spec)
    data.write_pnm(out / f"{label}.pgm", render.image)
    data.write_pnm(out / f"{label}_mask.pgm", render.anomaly_mask)
    dark = render.anomaly_mask.sum() // 255
    print(f"{label:7s}: anomaly pixels {dark:4d}  "
          f"kidney axes {spec.kidney_axes[0]:.1f} x {spec.kidney_axes[1]:.1f}")

# annotated example: a caliper cross over the anomaly plus text-like blocks
spec = data.make_spec("utd", seed=7, image_size=64, annotate=True)
render = data.render_phantom(spec)
data.write_pnm(out / "utd_annotated.ppm", render.annotated)
print(f"annotated overlay pixels: {int(render.annotation_mask.sum())}")

# a small labeled corpus with its manifest
corpus_dir = out / "corpus"
manifest = data.make_corpus(corpus_dir, {"normal": 6, "utd": 3, "mcdk": 3},
                            seed=123)
print(f"wrote corpus manifest: {manifest}")
print(f"all images under {out}")
