"""Scratch experiment: end-to-end synthetic pipeline feasibility probe."""
import time

import numpy as np

from sonomae import data, metrics, ndgrad, optim, vitmae

t_start = time.time()
rng_root = 20250811

# corpus: 900 phantoms, table-like 2:1 imbalance
counts = {"normal": 600, "utd": 240, "mcdk": 60}
records = []
images = []
idx = 0
t0 = time.time()
for label in data.CLASSES:
    for _ in range(counts[label]):
        spec = data.make_spec(label, seed=rng_root ^ idx, image_size=64)
        render = data.render_phantom(spec)
        images.append(data.resize_normalize(render.image, 64).data)
        records.append(data.SampleRecord(path=f"{label}_{idx}", label=label))
        idx += 1
images = np.stack(images)
print(f"generate: {time.time()-t0:.1f}s", flush=True)

cv, test = data.holdout_split(records, 150 / 900, seed=1)
cv_idx = {r.path: i for i, r in enumerate(records)}
trainval, test_recs = cv, test
tr_cv, val = data.holdout_split(trainval, 150 / 750, seed=2)
print("split sizes:", len(tr_cv), len(val), len(test_recs))
def take(recs, task):
    ids = np.array([cv_idx[r.path] for r in recs])
    return images[ids], data.label_indices(recs, task)

# pretrain 20 epochs on the 600 training images
XtrM, ytrM = take(tr_cv, "multiclass")
Xva, yvaM = take(val, "multiclass")
Xte, yteM = take(test_recs, "multiclass")
ytrB = (ytrM > 0).astype(np.int64); yvaB = (yvaM > 0).astype(np.int64); yteB = (yteM > 0).astype(np.int64)

mcfg = vitmae.ModelConfig(seed=3)
mae = vitmae.VitMaeModel(mcfg, mode=vitmae.PRETRAIN)
pcfg = optim.OptimConfig(learning_rate=3e-4, weight_decay=0.01, epochs=20, batch_size=16)
t0 = time.time()
hist = optim.train_pretrain(mae, XtrM, pcfg, seed=4)
print(f"pretrain 20ep: {time.time()-t0:.1f}s  loss {hist['epoch_loss'][0]:.4f} -> {hist['epoch_loss'][-1]:.4f} (ratio {hist['epoch_loss'][-1]/hist['epoch_loss'][0]:.3f})", flush=True)

def wf1(y, probs):
    conf = metrics.MultiConfusion.from_predictions(y, vitmae.predict_class(probs), k=probs.shape[1])
    return metrics.weighted_metrics(conf)["f1_weighted"]

for task, ytr, yva, yte, k in (("multiclass", ytrM, yvaM, yteM, 3), ("binary", ytrB, yvaB, yteB, 2)):
    for epochs in (30,):
        clf = vitmae.classifier_from_pretrained(mae, num_classes=k)
        fcfg = optim.OptimConfig(learning_rate=3e-4, weight_decay=0.01, epochs=epochs, batch_size=16)
        w = optim.compute_class_weights(np.bincount(ytr, minlength=k))
        t0 = time.time()
        res = optim.train_finetune(clf, XtrM, ytr, Xva, yva, w, fcfg, seed=5,
                                   val_metric_fn=wf1 if k == 3 else None, target_metric=0.85 if k == 3 else None)
        acc_te, probs_te = optim.evaluate_classifier(clf, Xte, yte)
        line = f"{task} ft {epochs}ep: {time.time()-t0:.1f}s best_val_acc {res.best_val_accuracy:.4f} (ep {res.best_epoch}) test_acc {acc_te:.4f}"
        if k == 2:
            line += f" test_auc {metrics.roc_auc(probs_te[:,1], yte):.4f}"
        else:
            line += f" test_wF1 {wf1(yte, probs_te):.4f} epochs_to_0.85 {res.epochs_to_target}"
        tracc = [r['train_accuracy'] for r in res.history]
        line += f" train_acc_max {max(tracc):.3f}"
        print(line, flush=True)

print(f"total: {time.time()-t_start:.1f}s")
