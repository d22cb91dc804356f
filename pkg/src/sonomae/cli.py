"""Command-line entry point.

Subcommands: pretrain, finetune, evaluate, explain, synth, preprocess, tune.
Every run takes a single --seed; module seeds derive from it through fixed
labeled offsets (split = seed^1, mask = seed^2, init = seed^3, batch = seed^4,
synth = seed^5), and the per-fold training seed is seed ^ (rep << 8) ^ fold.
Each output directory receives a run.json that fully reconstructs the run.

Exit codes: 0 success, 1 usage error, 2 data or contract error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import data, metrics, ndgrad, optim, scorecam, vitmae

SEED_SPLIT = 1
SEED_MASK = 2
SEED_INIT = 3
SEED_BATCH = 4
SEED_SYNTH = 5


class UsageError(Exception):
    pass


_DATA_ERRORS = (
    data.ManifestError, data.ConfigurationError, optim.ConfigurationError,
    optim.CheckpointError, ndgrad.ContractError, ndgrad.ShapeError,
    ndgrad.NonFiniteError, vitmae.StateError, metrics.DegenerateInputError,
    OSError,
)


@dataclass(frozen=True)
class RunConfig:
    """Merged view of model, optimizer and data settings for one run."""

    task: str = "binary"
    image_size: int = 64
    patch: int = 8
    embed_dim: int = 128
    encoder_depth: int = 4
    encoder_heads: int = 4
    mlp_ratio: float = 4.0
    decoder_dim: int = 64
    decoder_depth: int = 2
    decoder_heads: int = 4
    mask_ratio: float = 0.25
    loss_on_masked_only: bool = False
    lr: float = 3e-4
    wd: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    warmup_fraction: float = 0.10
    epochs: int = 100
    batch: int = 16
    folds: int = 4
    repeats: int = 5
    test_fraction: float = 0.17
    group_split: bool = False
    seed: int = 0
    manifest: str = ""
    out: str = ""
    from_checkpoint: str = ""
    channel_budget: int = 64
    alpha: float = 0.5
    score_mode: str = "prob_diff"

    def model_config(self, num_classes: int | None = None, mode_seed: int | None = None
                     ) -> vitmae.ModelConfig:
        k = num_classes if num_classes is not None else (2 if self.task == "binary" else 3)
        return vitmae.ModelConfig(
            image_size=self.image_size, patch_size=self.patch, embed_dim=self.embed_dim,
            encoder_depth=self.encoder_depth, encoder_heads=self.encoder_heads,
            mlp_ratio=self.mlp_ratio, decoder_dim=self.decoder_dim,
            decoder_depth=self.decoder_depth, decoder_heads=self.decoder_heads,
            mask_ratio=self.mask_ratio, num_classes=k,
            seed=self.seed ^ SEED_INIT if mode_seed is None else mode_seed,
            loss_on_masked_only=self.loss_on_masked_only)

    def optim_config(self) -> optim.OptimConfig:
        return optim.OptimConfig(
            learning_rate=self.lr, weight_decay=self.wd, beta1=self.beta1,
            beta2=self.beta2, eps=self.eps, clip_norm=self.clip_norm,
            epochs=self.epochs, warmup_fraction=self.warmup_fraction,
            batch_size=self.batch)


_RUN_FIELDS = {f.name for f in fields(RunConfig)}


def load_config(path, overrides: dict) -> RunConfig:
    """Defaults, then JSON file values, then command-line overrides. Unknown
    keys in either layer are rejected."""
    merged: dict = {}
    if path:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(doc, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        unknown = set(doc) - _RUN_FIELDS
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        merged.update(doc)
    unknown = set(overrides) - _RUN_FIELDS
    if unknown:
        raise UsageError(f"unknown override key(s): {', '.join(sorted(unknown))}")
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**merged)


def save_run_json(out_dir: Path, subcommand: str, cfg: RunConfig) -> None:
    doc = {"subcommand": subcommand, "config": asdict(cfg)}
    (out_dir / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")


def _log_writer(path: Path):
    fh = open(path, "w", encoding="utf-8")
    fh.write("epoch,step,lr,loss,val_accuracy\n")

    def write(row: dict):
        fh.write(f"{row.get('epoch', '')},{row.get('step', '')},"
                 f"{row.get('lr', '')},{row.get('loss', '')},"
                 f"{row.get('val_accuracy', '')}\n")

    return write, fh


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="sonomae", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand")

    def common(p, with_model=True):
        p.add_argument("--config", default="")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True)
        if with_model:
            p.add_argument("--image-size", dest="image_size", type=int, default=None)
            p.add_argument("--patch", type=int, default=None)

    p = sub.add_parser("synth", description="Generate a synthetic phantom corpus.")
    common(p, with_model=False)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--image-size", dest="image_size", type=int, default=None)
    p.add_argument("--speckle-sigma", dest="speckle_sigma", type=float, default=0.25)
    p.add_argument("--annotate-fraction", dest="annotate_fraction", type=float, default=0.0)
    p.add_argument("--counts", default="",
                   help="explicit per-class counts, e.g. normal=200,utd=80,mcdk=20")

    p = sub.add_parser("preprocess", description="De-annotate a manifest into grayscale.")
    common(p, with_model=False)
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("pretrain", description="Masked-reconstruction pretraining.")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--wd", type=float, default=None)
    p.add_argument("--mask-ratio", dest="mask_ratio", type=float, default=None)

    p = sub.add_parser("finetune", description="Supervised fine-tuning with repeated "
                                               "stratified cross-validation.")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", choices=["binary", "multiclass"], default=None)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--wd", type=float, default=None)
    p.add_argument("--mask-ratio", dest="mask_ratio", type=float, default=None)
    p.add_argument("--from-checkpoint", dest="from_checkpoint", default=None)
    p.add_argument("--group-split", dest="group_split", action="store_true", default=None)

    p = sub.add_parser("evaluate", description="Metrics, curves and summary for a "
                                               "finetune run directory.")
    p.add_argument("--run-dir", dest="run_dir", required=True)
    p.add_argument("--manifest", default="")
    p.add_argument("--out", required=True)

    p = sub.add_parser("explain", description="Score-CAM saliency for one image.")
    common(p, with_model=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--target-class", dest="target_class", type=int, default=None)
    p.add_argument("--channel-budget", dest="channel_budget", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--score-mode", dest="score_mode", default=None)

    p = sub.add_parser("tune", description="Grid search over learning rate and "
                                           "weight decay.")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", choices=["binary", "multiclass"], default=None)
    p.add_argument("--lr-grid", dest="lr_grid", default="0.001,0.0003,0.0005,0.00001")
    p.add_argument("--wd-grid", dest="wd_grid", default="0.01,0.05,0.001,0.0001")
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--from-checkpoint", dest="from_checkpoint", default=None)

    return parser


def _collect_overrides(args: argparse.Namespace) -> dict:
    skip = {"subcommand", "config", "n", "speckle_sigma", "annotate_fraction",
            "counts", "run_dir", "checkpoint", "image", "target_class",
            "lr_grid", "wd_grid"}
    return {k: v for k, v in vars(args).items() if k not in skip and v is not None}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _table1_counts(n: int) -> dict[str, int]:
    # two normals per abnormal, with the anomaly split mirroring the ~4:1
    # dilation-to-cystic ratio of the modelling dataset
    normal = int(round(n * 2 / 3))
    mcdk = int(round(n / 15))
    return {"normal": normal, "mcdk": mcdk, "utd": n - normal - mcdk}


def cmd_synth(args) -> int:
    cfg = load_config(args.config, _collect_overrides(args))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.counts:
        counts = {}
        for part in args.counts.split(","):
            key, val = part.split("=")
            counts[key.strip()] = int(val)
        bad = set(counts) - set(data.CLASSES)
        if bad:
            raise UsageError(f"unknown class(es) in --counts: {sorted(bad)}")
    else:
        counts = _table1_counts(args.n)
    data.make_corpus(out, counts, seed=cfg.seed ^ SEED_SYNTH, image_size=cfg.image_size,
                     speckle_sigma=args.speckle_sigma,
                     annotate_fraction=args.annotate_fraction)
    save_run_json(out, "synth", cfg)
    print(f"synth: wrote {sum(counts.values())} phantoms to {out}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = load_config(args.config, _collect_overrides(args))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    records = data.load_manifest(cfg.manifest)
    base = Path(cfg.manifest).parent
    cleaned = []
    for rec in records:
        img = data.read_pnm(rec.resolved(base))
        gray = data.deannotate(img) if img.ndim == 3 else img
        stem = Path(rec.path).stem
        data.write_pnm(out / f"{stem}.pgm", gray)
        cleaned.append(data.SampleRecord(path=f"{stem}.pgm", label=rec.label,
                                         group=rec.group, source="preprocess"))
    data.save_manifest(out / "manifest.csv", cleaned)
    save_run_json(out, "preprocess", cfg)
    print(f"preprocess: cleaned {len(cleaned)} images into {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config, _collect_overrides(args))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    records = data.load_manifest(cfg.manifest)
    images = data.load_images(records, Path(cfg.manifest).parent, cfg.image_size)
    model = vitmae.VitMaeModel(cfg.model_config(), mode=vitmae.PRETRAIN)
    log, fh = _log_writer(out / "log.csv")
    try:
        history = optim.train_pretrain(model, images, cfg.optim_config(), seed=cfg.seed,
                                       checkpoint_path=out / "mae.ckpt", log_fn=log)
    finally:
        fh.close()
    (out / "history.json").write_text(json.dumps(history, indent=2) + "\n", encoding="utf-8")
    save_run_json(out, "pretrain", cfg)
    print(f"pretrain: epoch losses {history['epoch_loss'][0]:.4f} -> "
          f"{history['epoch_loss'][-1]:.4f}, checkpoint at {out / 'mae.ckpt'}")
    return 0


def _check_class_coverage(records, task: str) -> None:
    present = {r.label for r in records}
    if task == "multiclass" and present != set(data.CLASSES):
        missing = sorted(set(data.CLASSES) - present)
        raise data.ConfigurationError(
            f"multiclass task needs all of {data.CLASSES}; manifest lacks {missing}")
    if task == "binary" and ("normal" not in present or present == {"normal"}):
        raise data.ConfigurationError(
            "binary task needs both normal and abnormal samples in the manifest")


def _build_fold_model(cfg: RunConfig, num_classes: int, rep: int, fold: int
                      ) -> vitmae.VitMaeModel:
    if cfg.from_checkpoint:
        pretrained, _ = optim.load_model(cfg.from_checkpoint)
        return vitmae.classifier_from_pretrained(pretrained, num_classes)
    seed = (cfg.seed ^ SEED_INIT) ^ (rep << 8) ^ fold
    return vitmae.VitMaeModel(cfg.model_config(num_classes, mode_seed=seed),
                              mode=vitmae.CLASSIFY)


def cmd_finetune(args) -> int:
    cfg = load_config(args.config, _collect_overrides(args))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    records = data.load_manifest(cfg.manifest)
    _check_class_coverage(records, cfg.task)
    plan = data.make_fold_plan(records, cfg.test_fraction, k=cfg.folds,
                               repeats=cfg.repeats, seed=cfg.seed ^ SEED_SPLIT,
                               group_split=cfg.group_split)
    data.write_fold_plan(plan, out / "foldplan.txt")
    base = Path(cfg.manifest).parent
    by_id = {r.path: r for r in records}
    images = data.load_images(records, base, cfg.image_size)
    index = {r.path: i for i, r in enumerate(records)}
    labels = data.label_indices(records, cfg.task)
    k = len(data.task_classes(cfg.task))
    ocfg = cfg.optim_config()

    for rep, fold in plan.folds():
        train_ids = plan.train_ids(rep, fold)
        val_ids = plan.val_ids[(rep, fold)]
        tr = np.array([index[i] for i in train_ids])
        va = np.array([index[i] for i in val_ids])
        fold_counts = {c: sum(1 for i in train_ids if by_id[i].label == c)
                       for c in data.task_classes(cfg.task)}
        if cfg.task == "binary":
            fold_counts = {"normal": fold_counts.get("normal", 0),
                           "abnormal": sum(1 for i in train_ids
                                           if by_id[i].label != "normal")}
        weights = optim.compute_class_weights(fold_counts,
                                              classes=data.task_classes(cfg.task),
                                              source_fold=f"rep{rep}_fold{fold}")
        model = _build_fold_model(cfg, k, rep, fold)
        log, fh = _log_writer(out / f"log_rep{rep}_fold{fold}.csv")
        try:
            result = optim.train_finetune(
                model, images[tr], labels[tr], images[va], labels[va], weights, ocfg,
                seed=cfg.seed ^ (rep << 8) ^ fold,
                checkpoint_path=out / "checkpoints" / f"rep{rep}_fold{fold}.ckpt",
                log_fn=log)
        finally:
            fh.close()
        print(f"finetune rep {rep} fold {fold}: best val accuracy "
              f"{result.best_val_accuracy:.4f} at epoch {result.best_epoch}")
    save_run_json(out, "finetune", cfg)
    return 0


def _binary_fold_metrics(labels, probs) -> dict:
    preds = vitmae.predict_class(probs)
    counts = metrics.ConfusionCounts.from_predictions(labels, preds)
    vals = metrics.binary_metrics(counts)
    out = {k: vals[k] for k in ("accuracy", "precision", "recall", "specificity", "f1")}
    out["auc"] = metrics.roc_auc(probs[:, 1], labels)
    return out


def _multi_fold_metrics(labels, probs) -> dict:
    preds = vitmae.predict_class(probs)
    confusion = metrics.MultiConfusion.from_predictions(labels, preds, k=probs.shape[1])
    vals = metrics.weighted_metrics(confusion)
    aucs = metrics.multiclass_auc(probs, labels)
    return {"accuracy": vals["accuracy"], "precision": vals["precision_weighted"],
            "recall": vals["recall_weighted"], "specificity": vals["specificity_weighted"],
            "f1": vals["f1_weighted"], "auc": aucs["weighted"], "auc_macro": aucs["macro"]}


def fold_eval_metrics(task: str, labels, probs) -> dict:
    return _binary_fold_metrics(labels, probs) if task == "binary" \
        else _multi_fold_metrics(labels, probs)


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run_dir)
    run_doc = json.loads((run_dir / "run.json").read_text(encoding="utf-8"))
    cfg = RunConfig(**run_doc["config"])
    if args.manifest:
        cfg = replace(cfg, manifest=args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "curves").mkdir(exist_ok=True)
    records = data.load_manifest(cfg.manifest)
    plan = data.read_fold_plan(run_dir / "foldplan.txt")
    base = Path(cfg.manifest).parent
    images = data.load_images(records, base, cfg.image_size)
    index = {r.path: i for i, r in enumerate(records)}
    labels = data.label_indices(records, cfg.task)
    te = np.array([index[i] for i in plan.test_ids])

    rows = []
    per_split: dict[str, list[dict]] = {"val": [], "test": []}
    confusions = []
    first_curves_written = False
    for rep, fold in plan.folds():
        model, _ = optim.load_model(run_dir / "checkpoints" / f"rep{rep}_fold{fold}.ckpt")
        va = np.array([index[i] for i in plan.val_ids[(rep, fold)]])
        _, val_probs = optim.evaluate_classifier(model, images[va], labels[va], cfg.batch)
        _, test_probs = optim.evaluate_classifier(model, images[te], labels[te], cfg.batch)
        val_m = fold_eval_metrics(cfg.task, labels[va], val_probs)
        test_m = fold_eval_metrics(cfg.task, labels[te], test_probs)
        per_split["val"].append(val_m)
        per_split["test"].append(test_m)
        for split, m in (("val", val_m), ("test", test_m)):
            for name, value in m.items():
                rows.append((rep, fold, cfg.task, f"{split}.{name}", value))
        preds = vitmae.predict_class(test_probs)
        if cfg.task == "binary":
            confusions.append(metrics.ConfusionCounts.from_predictions(labels[te], preds))
        else:
            confusions.append(metrics.MultiConfusion.from_predictions(
                labels[te], preds, k=test_probs.shape[1]))
        if not first_curves_written:
            _write_curves(out / "curves", cfg.task, labels[te], test_probs)
            first_curves_written = True
    metrics.write_fold_csv(out / "fold_metrics.csv", rows)
    summary = {cfg.task: {split: metrics.aggregate_folds(per_split[split])
                          for split in ("val", "test")}}
    metrics.write_summary_json(out / "summary.json", summary)
    _write_confusions(out / "confusion.json", cfg.task, confusions)
    save_run_json(out, "evaluate", cfg)
    print(f"evaluate: wrote summary for task {cfg.task} to {out / 'summary.json'}")
    return 0


def _write_curves(curve_dir: Path, task: str, labels, probs) -> None:
    if task == "binary":
        roc, pr = metrics.curve_points(probs[:, 1], labels)
        metrics.write_roc_csv(curve_dir / "roc.csv", roc)
        metrics.write_pr_csv(curve_dir / "pr.csv", pr)
        return
    for c, name in enumerate(data.CLASSES):
        y = (np.asarray(labels) == c).astype(np.int64)
        roc, pr = metrics.curve_points(probs[:, c], y)
        metrics.write_roc_csv(curve_dir / f"roc_{name}.csv", roc)
        metrics.write_pr_csv(curve_dir / f"pr_{name}.csv", pr)


def _write_confusions(path: Path, task: str, confusions) -> None:
    if task == "binary":
        mats = np.array([[[c.tn, c.fp], [c.fn, c.tp]] for c in confusions], dtype=np.float64)
    else:
        mats = np.array([c.matrix for c in confusions], dtype=np.float64)
    doc = {"task": task, "mean": mats.mean(axis=0).tolist(),
           "std": mats.std(axis=0, ddof=1).tolist() if len(mats) > 1 else None,
           "n_folds": len(mats)}
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def cmd_explain(args) -> int:
    cfg = load_config(args.config, _collect_overrides(args))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    model, _ = optim.load_model(args.checkpoint)
    raw = data.read_pnm(args.image)
    if raw.ndim == 3:
        raw = np.round(data.luminance(raw)).astype(np.uint8)
    standardized = data.resize_normalize(raw, model.config.image_size)
    with ndgrad.no_grad():
        _, probs = vitmae.forward_classify(model, standardized)
    target = args.target_class
    if target is None:
        target = int(vitmae.predict_class(probs))
    sal = scorecam.scorecam(model, standardized, target,
                            channel_budget=cfg.channel_budget, score_mode=cfg.score_mode)
    display = np.round(data.bilinear_resize(raw.astype(np.float64),
                                            model.config.image_size,
                                            model.config.image_size)).astype(np.uint8)
    scorecam.write_saliency_outputs(out, Path(args.image).stem, display, sal, cfg.alpha)
    save_run_json(out, "explain", cfg)
    print(f"explain: target class {target}, saliency written to {out}")
    return 0


def cmd_tune(args) -> int:
    cfg = load_config(args.config, _collect_overrides(args))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    lr_grid = [float(x) for x in args.lr_grid.split(",") if x]
    wd_grid = [float(x) for x in args.wd_grid.split(",") if x]
    records = data.load_manifest(cfg.manifest)
    _check_class_coverage(records, cfg.task)
    plan = data.make_fold_plan(records, cfg.test_fraction, k=cfg.folds,
                               repeats=cfg.repeats, seed=cfg.seed ^ SEED_SPLIT,
                               group_split=cfg.group_split)
    base = Path(cfg.manifest).parent
    by_id = {r.path: r for r in records}
    images = data.load_images(records, base, cfg.image_size)
    index = {r.path: i for i, r in enumerate(records)}
    labels = data.label_indices(records, cfg.task)
    k = len(data.task_classes(cfg.task))

    def evaluate_cell(lr: float, wd: float, cv) -> float:
        cell_cfg = replace(cfg, lr=lr, wd=wd)
        ocfg = cell_cfg.optim_config()
        accs = []
        for rep, fold in cv.folds():
            train_ids = cv.train_ids(rep, fold)
            val_ids = cv.val_ids[(rep, fold)]
            tr = np.array([index[i] for i in train_ids])
            va = np.array([index[i] for i in val_ids])
            fold_counts = {c: 0 for c in data.task_classes(cfg.task)}
            for i in train_ids:
                key = by_id[i].label if cfg.task == "multiclass" else (
                    "normal" if by_id[i].label == "normal" else "abnormal")
                fold_counts[key] += 1
            weights = optim.compute_class_weights(fold_counts,
                                                  classes=data.task_classes(cfg.task),
                                                  source_fold=f"rep{rep}_fold{fold}")
            model = _build_fold_model(cell_cfg, k, rep, fold)
            result = optim.train_finetune(model, images[tr], labels[tr], images[va],
                                          labels[va], weights, ocfg,
                                          seed=cfg.seed ^ (rep << 8) ^ fold)
            accs.append(result.best_val_accuracy)
        return float(np.mean(accs))

    best_lr, best_wd, results = optim.grid_search(lr_grid, wd_grid, plan, evaluate_cell)
    with open(out / "cells.csv", "w", encoding="utf-8") as fh:
        fh.write("lr,wd,mean_val_accuracy\n")
        for (lr, wd), acc in sorted(results.items()):
            fh.write(f"{lr:.15g},{wd:.15g},{acc:.15g}\n")
    (out / "best.json").write_text(
        json.dumps({"lr": best_lr, "wd": best_wd,
                    "mean_val_accuracy": results[(best_lr, best_wd)]}, indent=2) + "\n",
        encoding="utf-8")
    save_run_json(out, "tune", cfg)
    print(f"tune: best lr {best_lr:g}, wd {best_wd:g}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "tune": cmd_tune,
}


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.subcommand:
            raise UsageError("a subcommand is required "
                             "(pretrain | finetune | evaluate | explain | synth | "
                             "preprocess | tune)")
        return _COMMANDS[args.subcommand](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
