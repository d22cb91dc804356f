"""Scratch probe for criteria 8 (random-init comparison) and 9 (localization)."""
import time

import numpy as np

from sonomae import data, metrics, ndgrad, optim, scorecam, vitmae

rng_root = 20250811
counts = {"normal": 600, "utd": 240, "mcdk": 60}
records, images = [], []
idx = 0
for label in data.CLASSES:
    for _ in range(counts[label]):
        spec = data.make_spec(label, seed=rng_root ^ idx, image_size=64)
        render = data.render_phantom(spec)
        images.append(data.resize_normalize(render.image, 64).data)
        records.append(data.SampleRecord(path=f"{label}_{idx}", label=label))
        idx += 1
images = np.stack(images)
cv, test = data.holdout_split(records, 150 / 900, seed=1)
tr, val = data.holdout_split(cv, 150 / 750, seed=2)
index = {r.path: i for i, r in enumerate(records)}
def take(recs):
    ids = np.array([index[r.path] for r in recs])
    return images[ids], data.label_indices(recs, "multiclass")
Xtr, ytr = take(tr); Xva, yva = take(val); Xte, yte = take(test)

def wf1(y, probs):
    conf = metrics.MultiConfusion.from_predictions(y, vitmae.predict_class(probs), k=3)
    return metrics.weighted_metrics(conf)["f1_weighted"]

mae = vitmae.VitMaeModel(vitmae.ModelConfig(seed=3), mode=vitmae.PRETRAIN)
pcfg = optim.OptimConfig(learning_rate=3e-4, weight_decay=0.01, epochs=20, batch_size=16)
t0 = time.time()
hist = optim.train_pretrain(mae, Xtr, pcfg, seed=4)
print(f"pretrain: {time.time()-t0:.0f}s ratio {hist['epoch_loss'][-1]/hist['epoch_loss'][0]:.3f}", flush=True)

fcfg = optim.OptimConfig(learning_rate=3e-4, weight_decay=0.01, epochs=30, batch_size=16)
w = optim.compute_class_weights(np.bincount(ytr, minlength=3))

# pretrained vs random init, same seeds
clf_p = vitmae.classifier_from_pretrained(mae, num_classes=3)
res_p = optim.train_finetune(clf_p, Xtr, ytr, Xva, yva, w, fcfg, seed=5,
                             val_metric_fn=wf1, target_metric=0.85)
print(f"pretrained: epochs_to_0.85 = {res_p.epochs_to_target}", flush=True)

clf_r = vitmae.VitMaeModel(vitmae.ModelConfig(num_classes=3, seed=3), mode=vitmae.CLASSIFY)
res_r = optim.train_finetune(clf_r, Xtr, ytr, Xva, yva, w, fcfg, seed=5,
                             val_metric_fn=wf1, target_metric=0.85)
print(f"random init: epochs_to_0.85 = {res_r.epochs_to_target}", flush=True)
print("val_metric traces:")
print("  pretrained:", [round(r["val_metric"], 3) for r in res_p.history[:12]])
print("  random    :", [round(r["val_metric"], 3) for r in res_r.history[:12]], flush=True)

# criterion 9 probe: 50 UTD + 50 MCDK fresh phantoms through scorecam
t0 = time.time()
stats = {"utd": [], "mcdk": []}
correct = {"utd": 0, "mcdk": 0}
for label in ("utd", "mcdk"):
    target = data.CLASSES.index(label)
    for i in range(50):
        spec = data.make_spec(label, seed=777000 + target * 1000 + i, image_size=64)
        render = data.render_phantom(spec)
        std = data.resize_normalize(render.image, 64)
        with ndgrad.no_grad():
            _, probs = vitmae.forward_classify(clf_p, std)
        if int(vitmae.predict_class(probs)) != target:
            continue
        correct[label] += 1
        sal = scorecam.scorecam(clf_p, std, target_class=target, channel_budget=64)
        box = scorecam.mask_bounding_box(render.anomaly_mask)
        stats[label].append(scorecam.saliency_mass_fraction(sal, box))
for label in ("utd", "mcdk"):
    arr = np.array(stats[label])
    frac_pass = (arr >= 0.40).mean() if len(arr) else 0.0
    print(f"{label}: correct {correct[label]}/50, mass>=40% in {frac_pass:.0%} "
          f"(median mass {np.median(arr):.2f}, box share of image ~{np.mean(arr>=0)*0:.0f})", flush=True)
print(f"scorecam probe: {time.time()-t0:.0f}s")
