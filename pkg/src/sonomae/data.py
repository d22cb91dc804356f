"""Datasets and preprocessing.

Manifest loading, stratified holdout plus repeated k-fold cross-validation
planning, HSV-based overlay removal with median inpainting, bilinear resizing
with per-image standardization, portable graymap/pixmap codecs, and a seeded
synthetic kidney-phantom generator that stands in for clinical data.

Image ids throughout are the path strings as written in the manifest.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ndgrad import ContractError, ShapeError, Tensor

CLASSES = ("normal", "utd", "mcdk")
BINARY_CLASSES = ("normal", "abnormal")

SAT_THRESHOLD = 0.15
VAL_THRESHOLD = 0.12

# phantom rendering intensities (8-bit)
BACKGROUND = 20.0
PARENCHYMA = 150.0
SINUS = 185.0
ANECHOIC = 25.0
# smallest admissible pelvis diameter, as a fraction of image size (the
# desk-scale analog of the millimetre dilation threshold)
MIN_PELVIS_FRACTION = 0.125


class ManifestError(ValueError):
    """Manifest file violates the CSV contract."""


class ConfigurationError(ValueError):
    """A split or generator request cannot be satisfied."""


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# ---------------------------------------------------------------------------
# portable graymap / pixmap codecs
# ---------------------------------------------------------------------------

def write_pnm(path, image: np.ndarray) -> None:
    """Write uint8 data as binary P5 (2-D) or P6 (3-D, RGB)."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        raise ContractError(f"write_pnm expects uint8 data, got {arr.dtype}")
    if arr.ndim == 2:
        header = b"P5\n%d %d\n255\n" % (arr.shape[1], arr.shape[0])
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = b"P6\n%d %d\n255\n" % (arr.shape[1], arr.shape[0])
    else:
        raise ShapeError(f"write_pnm expects [H, W] or [H, W, 3], got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_pnm(path) -> np.ndarray:
    """Read a binary P5 or P6 file into a uint8 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise ContractError(f"{path}: not a binary P5/P6 file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise ContractError(f"{path}: only maxval 255 supported, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    n = width * height * channels
    if len(blob) - pos < n:
        raise ContractError(f"{path}: truncated pixel payload")
    arr = np.frombuffer(blob, dtype=np.uint8, count=n, offset=pos)
    return arr.reshape((height, width) if channels == 1 else (height, width, 3)).copy()


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleRecord:
    path: str
    label: str
    group: str = ""
    source: str = ""

    def resolved(self, base: Path | str | None = None) -> Path:
        p = Path(self.path)
        if p.is_absolute() or base is None:
            return p
        return Path(base) / p


def load_manifest(csv_path, check_files: bool = True) -> list[SampleRecord]:
    """Read a ``path,label,group`` manifest. Labels are case-insensitive and
    must come from the closed class set; duplicate paths are rejected."""
    csv_path = Path(csv_path)
    records: list[SampleRecord] = []
    seen: dict[str, int] = {}
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{csv_path}: empty manifest") from None
        if [h.strip().lower() for h in header] != ["path", "label", "group"]:
            raise ManifestError(f"{csv_path}: header must be 'path,label,group', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise ManifestError(f"{csv_path}:{lineno}: expected 3 fields, got {len(row)}")
            path, label, group = (c.strip() for c in row)
            label = label.lower()
            if label not in CLASSES:
                raise ManifestError(
                    f"{csv_path}:{lineno}: unknown label {label!r} (expected one of {CLASSES})")
            if path in seen:
                raise ManifestError(
                    f"{csv_path}:{lineno}: duplicate path {path!r} (first seen on line {seen[path]})")
            seen[path] = lineno
            rec = SampleRecord(path=path, label=label, group=group, source=str(csv_path))
            if check_files and not rec.resolved(csv_path.parent).exists():
                raise IOError(f"{csv_path}:{lineno}: image file not found: {path}")
            records.append(rec)
    return records


def save_manifest(csv_path, records: Iterable[SampleRecord]) -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label", "group"])
        for r in records:
            writer.writerow([r.path, r.label, r.group])


def label_indices(records: Sequence[SampleRecord], task: str) -> np.ndarray:
    """Class indices for a task: binary maps any anomaly to 1, multiclass uses
    the canonical (normal, utd, mcdk) ordering."""
    if task == "binary":
        return np.array([0 if r.label == "normal" else 1 for r in records], dtype=np.int64)
    if task == "multiclass":
        return np.array([CLASSES.index(r.label) for r in records], dtype=np.int64)
    raise ContractError(f"unknown task {task!r}")


def task_classes(task: str) -> tuple[str, ...]:
    return BINARY_CLASSES if task == "binary" else CLASSES


# ---------------------------------------------------------------------------
# stratified splitting
# ---------------------------------------------------------------------------

def _by_class(records: Sequence[SampleRecord]) -> dict[str, list[int]]:
    out: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        out.setdefault(r.label, []).append(i)
    return out


def _class_order(groups: Mapping[str, list]) -> list[str]:
    return [c for c in CLASSES if c in groups] + sorted(set(groups) - set(CLASSES))


def holdout_split(records: Sequence[SampleRecord], test_fraction: float, seed: int
                  ) -> tuple[list[SampleRecord], list[SampleRecord]]:
    """Stratified holdout: per-class test count is round(fraction * n_class),
    nudged by at most one per class to hit the global rounded total."""
    if not 0.0 < test_fraction < 1.0:
        raise ContractError(f"test_fraction {test_fraction} outside (0, 1)")
    groups = _by_class(records)
    order = _class_order(groups)
    for cls in order:
        if len(groups[cls]) < 2:
            raise ContractError(f"class {cls!r} has {len(groups[cls])} sample(s); need >= 2")
    total = _round_half_up(test_fraction * len(records))
    want = {c: test_fraction * len(groups[c]) for c in order}
    take = {c: _round_half_up(want[c]) for c in order}
    while sum(take.values()) > total:
        c = max(order, key=lambda c: (take[c] - want[c], take[c]))
        take[c] -= 1
    while sum(take.values()) < total:
        c = min(order, key=lambda c: (take[c] - want[c], -take[c]))
        take[c] += 1
    rng = np.random.default_rng(seed)
    test_idx: set[int] = set()
    for cls in order:
        members = np.array(groups[cls])
        rng.shuffle(members)
        test_idx.update(members[: take[cls]].tolist())
    test = [records[i] for i in sorted(test_idx)]
    cv = [records[i] for i in range(len(records)) if i not in test_idx]
    return cv, test


@dataclass(frozen=True)
class FoldPlan:
    """Holdout test ids plus, for each repetition and fold, the validation ids.

    Repetitions are numbered 1..repeats and folds 1..k. Training ids for a
    fold are the cv ids not in its validation fold.
    """

    seed: int
    k: int
    repeats: int
    test_ids: tuple[str, ...]
    cv_ids: tuple[str, ...]
    val_ids: dict[tuple[int, int], tuple[str, ...]]
    class_counts: tuple[tuple[str, int], ...] = ()

    def train_ids(self, rep: int, fold: int) -> tuple[str, ...]:
        val = set(self.val_ids[(rep, fold)])
        return tuple(i for i in self.cv_ids if i not in val)

    def folds(self):
        for rep in range(1, self.repeats + 1):
            for fold in range(1, self.k + 1):
                yield rep, fold


def cv_plan(cv_records: Sequence[SampleRecord], k: int = 4, repeats: int = 5,
            seed: int = 0) -> dict[tuple[int, int], tuple[str, ...]]:
    """Validation folds for repeated stratified k-fold assignment: per
    repetition, shuffle each class then deal round-robin into k folds."""
    if k < 2:
        raise ContractError(f"k must be >= 2, got {k}")
    if repeats < 1:
        raise ContractError(f"repeats must be >= 1, got {repeats}")
    groups = _by_class(cv_records)
    order = _class_order(groups)
    for cls in order:
        if len(groups[cls]) < k:
            raise ConfigurationError(
                f"class {cls!r} has {len(groups[cls])} samples, fewer than k={k}")
    val: dict[tuple[int, int], tuple[str, ...]] = {}
    for rep in range(1, repeats + 1):
        rng = np.random.default_rng([seed, rep])
        fold_members: dict[int, list[str]] = {f: [] for f in range(1, k + 1)}
        for cls in order:
            members = np.array(groups[cls])
            rng.shuffle(members)
            for i, idx in enumerate(members.tolist()):
                fold_members[1 + i % k].append(cv_records[idx].path)
        for f in range(1, k + 1):
            val[(rep, f)] = tuple(fold_members[f])
    return val


def _group_units(records: Sequence[SampleRecord]) -> list[SampleRecord]:
    """Collapse records into one representative per group: the unit label is
    the group's majority label (ties broken by canonical class order)."""
    by_group: dict[str, list[SampleRecord]] = {}
    for r in records:
        key = r.group if r.group else f"__solo__{r.path}"
        by_group.setdefault(key, []).append(r)
    units = []
    for key, members in by_group.items():
        votes = {c: sum(1 for m in members if m.label == c) for c in CLASSES}
        label = max(CLASSES, key=lambda c: votes[c])
        units.append(SampleRecord(path=key, label=label, group=key))
    return units


def make_fold_plan(records: Sequence[SampleRecord], test_fraction: float,
                   k: int = 4, repeats: int = 5, seed: int = 0,
                   group_split: bool = False) -> FoldPlan:
    """Holdout split followed by repeated stratified k-fold planning.

    ``group_split`` keeps every image of a group id in a single subset, at the
    cost of only best-effort stratification.
    """
    counts = tuple((c, sum(1 for r in records if r.label == c))
                   for c in CLASSES if any(r.label == c for r in records))
    if not group_split:
        cv, test = holdout_split(records, test_fraction, seed)
        val = cv_plan(cv, k=k, repeats=repeats, seed=seed)
        return FoldPlan(seed=seed, k=k, repeats=repeats,
                        test_ids=tuple(r.path for r in test),
                        cv_ids=tuple(r.path for r in cv),
                        val_ids=val, class_counts=counts)
    units = _group_units(records)
    cv_units, test_units = holdout_split(units, test_fraction, seed)
    unit_val = cv_plan(cv_units, k=k, repeats=repeats, seed=seed)
    members: dict[str, list[str]] = {}
    for r in records:
        key = r.group if r.group else f"__solo__{r.path}"
        members.setdefault(key, []).append(r.path)

    def expand(unit_ids: Iterable[str]) -> tuple[str, ...]:
        out: list[str] = []
        for u in unit_ids:
            out.extend(members[u])
        return tuple(out)

    val = {key: expand(ids) for key, ids in unit_val.items()}
    return FoldPlan(seed=seed, k=k, repeats=repeats,
                    test_ids=expand(u.path for u in test_units),
                    cv_ids=expand(u.path for u in cv_units),
                    val_ids=val, class_counts=counts)


def write_fold_plan(plan: FoldPlan, path) -> None:
    """Deterministic, diffable text form: header then one line per
    (repetition, fold, subset, id), ids sorted within each block. Test lines
    use repetition 0, fold 0."""
    lines = ["# foldplan v1",
             f"# seed={plan.seed} k={plan.k} repeats={plan.repeats}",
             "# classes: " + ",".join(f"{c}={n}" for c, n in plan.class_counts),
             f"# counts: test={len(plan.test_ids)} cv={len(plan.cv_ids)}",
             "rep,fold,subset,id"]
    for i in sorted(plan.test_ids):
        lines.append(f"0,0,test,{i}")
    for rep, fold in plan.folds():
        for i in sorted(plan.train_ids(rep, fold)):
            lines.append(f"{rep},{fold},train,{i}")
        for i in sorted(plan.val_ids[(rep, fold)]):
            lines.append(f"{rep},{fold},val,{i}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_fold_plan(path) -> FoldPlan:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    header: dict[str, int] = {}
    counts: list[tuple[str, int]] = []
    rows: list[tuple[int, int, str, str]] = []
    for line in text:
        if line.startswith("# seed="):
            for part in line[2:].split():
                key, val = part.split("=")
                header[key] = int(val)
        elif line.startswith("# classes:"):
            body = line.split(":", 1)[1].strip()
            if body:
                counts = [(p.split("=")[0], int(p.split("=")[1])) for p in body.split(",")]
        elif line.startswith("#") or line == "rep,fold,subset,id" or not line:
            continue
        else:
            rep, fold, subset, ident = line.split(",", 3)
            rows.append((int(rep), int(fold), subset, ident))
    test_ids = tuple(i for rep, fold, s, i in rows if s == "test")
    val_ids: dict[tuple[int, int], tuple[str, ...]] = {}
    for rep, fold, subset, ident in rows:
        if subset == "val":
            val_ids[(rep, fold)] = val_ids.get((rep, fold), ()) + (ident,)
    rep1 = sorted({i for rep, fold, s, i in rows if rep == 1 and fold == 1})
    return FoldPlan(seed=header.get("seed", 0), k=header.get("k", 0),
                    repeats=header.get("repeats", 0), test_ids=test_ids,
                    cv_ids=tuple(rep1), val_ids=val_ids, class_counts=tuple(counts))


# ---------------------------------------------------------------------------
# de-annotation
# ---------------------------------------------------------------------------

def hsv_mark(rgb: np.ndarray, sat_threshold: float = SAT_THRESHOLD,
             val_threshold: float = VAL_THRESHOLD) -> np.ndarray:
    """Boolean mask of pixels outside the grayscale HSV region (annotations)."""
    f = rgb.astype(np.float64) / 255.0
    mx = f.max(axis=2)
    mn = f.min(axis=2)
    sat = np.where(mx > 0, (mx - mn) / np.maximum(mx, 1e-12), 0.0)
    return (sat > sat_threshold) & (mx > val_threshold)


def luminance(rgb: np.ndarray) -> np.ndarray:
    f = rgb.astype(np.float64)
    return 0.299 * f[:, :, 0] + 0.587 * f[:, :, 1] + 0.114 * f[:, :, 2]


def deannotate(image: np.ndarray, sat_threshold: float = SAT_THRESHOLD,
               val_threshold: float = VAL_THRESHOLD) -> np.ndarray:
    """Remove colored overlays from an 8-bit RGB image, returning grayscale.

    Pixels with saturation > sat_threshold and value > val_threshold are
    treated as annotation and re-filled iteratively with the median of already
    known neighbors inside an expanding Chebyshev window (radius starts at 1
    and grows only when a full pass fills nothing). Grayscale input (2-D, or
    RGB with equal channels) passes through as its luminance.
    """
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        raise ContractError(f"deannotate expects uint8 input, got {arr.dtype}")
    if arr.ndim == 2:
        return arr.copy()
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"deannotate expects [H, W, 3] or [H, W], got {arr.shape}")
    marked = hsv_mark(arr, sat_threshold, val_threshold)
    lum = luminance(arr)
    if not marked.any():
        return np.round(lum).astype(np.uint8)
    if marked.all():
        raise ContractError("every pixel is marked as annotation; nothing to anchor the fill")
    h, w = marked.shape
    known = ~marked
    values = lum.copy()
    unknown = [tuple(p) for p in np.argwhere(marked)]
    radius = 1
    while unknown:
        fills: list[tuple[tuple[int, int], float]] = []
        for (r, c) in unknown:
            r0, r1 = max(0, r - radius), min(h, r + radius + 1)
            c0, c1 = max(0, c - radius), min(w, c + radius + 1)
            window_known = known[r0:r1, c0:c1]
            if window_known.any():
                fills.append(((r, c), float(np.median(values[r0:r1, c0:c1][window_known]))))
        if not fills:
            radius += 1
            continue
        done = set()
        for (r, c), v in fills:
            values[r, c] = v
            known[r, c] = True
            done.add((r, c))
        unknown = [p for p in unknown if p not in done]
    return np.round(values).astype(np.uint8)


# ---------------------------------------------------------------------------
# resizing and normalisation
# ---------------------------------------------------------------------------

def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-center coordinates, clamped at the
    borders: src = (dst + 0.5) * (in / out) - 0.5."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"bilinear_resize expects a 2-D image, got {arr.shape}")
    in_h, in_w = arr.shape
    if (in_h, in_w) == (out_h, out_w):
        return arr.copy()

    def axis_coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    r0, r1, fr = axis_coords(in_h, out_h)
    c0, c1, fc = axis_coords(in_w, out_w)
    top = arr[r0][:, c0] * (1 - fc) + arr[r0][:, c1] * fc
    bot = arr[r1][:, c0] * (1 - fc) + arr[r1][:, c1] * fc
    return top * (1 - fr[:, None]) + bot * fr[:, None]


def resize_normalize(image: np.ndarray, target_size: int) -> Tensor:
    """Resample to target x target and standardize to mean 0 / variance 1,
    with a 1e-6 variance floor (constant images become all zeros)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"resize_normalize expects a 2-D grayscale image, got {arr.shape}")
    resized = bilinear_resize(arr, target_size, target_size)
    mu = resized.mean()
    var = resized.var()
    out = (resized - mu) / math.sqrt(max(var, 1e-6))
    return Tensor(out[None].astype(np.float32))


def load_images(records: Sequence[SampleRecord], base: Path | str | None,
                image_size: int) -> np.ndarray:
    """Read, resize and standardize a batch of manifest records into a
    [n, 1, S, S] float32 array."""
    out = np.empty((len(records), 1, image_size, image_size), dtype=np.float32)
    for i, rec in enumerate(records):
        img = read_pnm(rec.resolved(base))
        if img.ndim == 3:
            img = np.round(luminance(img)).astype(np.uint8)
        out[i] = resize_normalize(img, image_size).data
    return out


# ---------------------------------------------------------------------------
# synthetic phantoms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhantomSpec:
    """Full geometry of one synthetic kidney image. Rendering is a pure
    function of the spec, so identical specs give identical bytes."""

    label: str
    image_size: int
    seed: int
    kidney_center: tuple[float, float]
    kidney_axes: tuple[float, float]
    kidney_angle: float
    pelvis_center: tuple[float, float] | None = None
    pelvis_diameter: float | None = None
    cyst_centers: tuple[tuple[float, float], ...] = ()
    cyst_radii: tuple[float, ...] = ()
    speckle_sigma: float = 0.25
    annotate: bool = False

    def __post_init__(self):
        if self.label not in CLASSES:
            raise ContractError(f"unknown phantom class {self.label!r}")
        if self.label == "utd":
            if self.pelvis_diameter is None or self.pelvis_center is None:
                raise ConfigurationError("utd phantom needs a pelvis")
            if self.pelvis_diameter < MIN_PELVIS_FRACTION * self.image_size:
                raise ConfigurationError(
                    f"pelvis diameter {self.pelvis_diameter:.1f}px below the dilation "
                    f"threshold {MIN_PELVIS_FRACTION * self.image_size:.1f}px")
        if self.label == "mcdk":
            if len(self.cyst_centers) < 3:
                raise ConfigurationError("mcdk phantom needs at least 3 cysts")
            for i in range(len(self.cyst_centers)):
                for j in range(i + 1, len(self.cyst_centers)):
                    (yi, xi), (yj, xj) = self.cyst_centers[i], self.cyst_centers[j]
                    dist = math.hypot(yi - yj, xi - xj)
                    if dist <= self.cyst_radii[i] + self.cyst_radii[j]:
                        raise ConfigurationError(
                            f"cysts {i} and {j} overlap (dist {dist:.2f})")
        if self.label == "normal" and (self.pelvis_diameter or self.cyst_centers):
            raise ConfigurationError("normal phantom must carry no anomaly geometry")


def make_spec(label: str, seed: int, image_size: int = 64,
              speckle_sigma: float = 0.25, annotate: bool = False) -> PhantomSpec:
    """Randomized but seeded phantom geometry for one sample."""
    rng = np.random.default_rng(seed)
    s = float(image_size)
    cy = s / 2 + rng.uniform(-0.05, 0.05) * s
    cx = s / 2 + rng.uniform(-0.05, 0.05) * s
    a = rng.uniform(0.30, 0.38) * s
    b = rng.uniform(0.21, 0.27) * s
    angle = rng.uniform(-30.0, 30.0)
    pelvis_center = None
    pelvis_diameter = None
    cyst_centers: tuple[tuple[float, float], ...] = ()
    cyst_radii: tuple[float, ...] = ()
    if label == "utd":
        pelvis_diameter = rng.uniform(0.17, 0.25) * s
        pelvis_center = (cy + rng.uniform(-0.03, 0.03) * s,
                         cx + rng.uniform(-0.03, 0.03) * s)
    elif label == "mcdk":
        count = int(rng.integers(3, 6))
        centers: list[tuple[float, float]] = []
        radii: list[float] = []
        attempts = 0
        while len(centers) < count and attempts < 500:
            attempts += 1
            r = rng.uniform(0.055, 0.095) * s
            # sample inside the kidney ellipse, away from the rim
            t = rng.uniform(0, 2 * math.pi)
            rho = math.sqrt(rng.uniform(0, 1.0)) * 0.72
            dy = rho * math.sin(t) * b
            dx = rho * math.cos(t) * a
            th = math.radians(angle)
            y = cy + dy * math.cos(th) + dx * math.sin(th)
            x = cx - dy * math.sin(th) + dx * math.cos(th)
            if all(math.hypot(y - yy, x - xx) > r + rr + 1.0
                   for (yy, xx), rr in zip(centers, radii)):
                centers.append((y, x))
                radii.append(r)
        if len(centers) < 3:
            raise ConfigurationError(f"could not place 3 cysts for seed {seed}")
        cyst_centers = tuple(centers)
        cyst_radii = tuple(radii)
    return PhantomSpec(label=label, image_size=image_size, seed=seed,
                       kidney_center=(cy, cx), kidney_axes=(a, b), kidney_angle=angle,
                       pelvis_center=pelvis_center, pelvis_diameter=pelvis_diameter,
                       cyst_centers=cyst_centers, cyst_radii=cyst_radii,
                       speckle_sigma=speckle_sigma, annotate=annotate)


def _ellipse_mask(size: int, center, axes, angle_deg: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = center
    a, b = axes
    th = math.radians(angle_deg)
    dx = xx - cx
    dy = yy - cy
    u = dx * math.cos(th) + dy * math.sin(th)
    v = -dx * math.sin(th) + dy * math.cos(th)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


@dataclass(frozen=True)
class PhantomRender:
    image: np.ndarray                      # uint8 [S, S], clean
    anomaly_mask: np.ndarray               # uint8 [S, S], 0/255
    annotated: np.ndarray | None = None    # uint8 [S, S, 3] when requested
    annotation_mask: np.ndarray | None = None


def render_phantom(spec: PhantomSpec) -> PhantomRender:
    """Render base anatomy, apply multiplicative speckle, and rasterize the
    ground-truth anomaly mask. Deterministic for a given spec."""
    s = spec.image_size
    base = np.full((s, s), BACKGROUND, dtype=np.float64)
    kidney = _ellipse_mask(s, spec.kidney_center, spec.kidney_axes, spec.kidney_angle)
    base[kidney] = PARENCHYMA
    anomaly = np.zeros((s, s), dtype=bool)
    if spec.label in ("normal", "utd"):
        sinus = _ellipse_mask(s, spec.kidney_center,
                              (spec.kidney_axes[0] * 0.38, spec.kidney_axes[1] * 0.34),
                              spec.kidney_angle)
        base[sinus & kidney] = SINUS
    if spec.label == "utd":
        d = spec.pelvis_diameter
        pelvis = _ellipse_mask(s, spec.pelvis_center, (d / 2.0, d / 2.0 * 0.72),
                               spec.kidney_angle)
        pelvis &= kidney
        base[pelvis] = ANECHOIC
        anomaly |= pelvis
    if spec.label == "mcdk":
        for (cy, cx), r in zip(spec.cyst_centers, spec.cyst_radii):
            cyst = _ellipse_mask(s, (cy, cx), (r, r), 0.0) & kidney
            base[cyst] = ANECHOIC
            anomaly |= cyst
    rng = np.random.default_rng(spec.seed)
    sigma = spec.speckle_sigma
    if sigma > 0:
        field = rng.lognormal(mean=-0.5 * sigma * sigma, sigma=sigma, size=(s, s))
        field = np.clip(field, 0.35, 2.5)
    else:
        field = np.ones((s, s))
    image = np.clip(np.round(base * field), 0, 255).astype(np.uint8)
    mask = np.where(anomaly, 255, 0).astype(np.uint8)
    annotated = None
    ann_mask = None
    if spec.annotate:
        annotated = np.repeat(image[:, :, None], 3, axis=2).copy()
        ann_mask = np.zeros((s, s), dtype=bool)
        if anomaly.any():
            ys, xs = np.nonzero(anomaly)
            cy, cx = int(ys.mean()), int(xs.mean())
        else:
            cy, cx = (int(spec.kidney_center[0]), int(spec.kidney_center[1]))
        _draw_cross(annotated, ann_mask, cy, cx, 4, (255, 255, 0))
        _draw_blocks(annotated, ann_mask, rng)
        ann_mask = ann_mask.copy()
    return PhantomRender(image=image, anomaly_mask=mask, annotated=annotated,
                         annotation_mask=ann_mask)


def _draw_cross(rgb: np.ndarray, mask: np.ndarray, cy: int, cx: int, arm: int,
                color) -> None:
    h, w = mask.shape
    for d in range(-arm, arm + 1):
        if 0 <= cy + d < h and 0 <= cx < w:
            rgb[cy + d, cx] = color
            mask[cy + d, cx] = True
        if 0 <= cy < h and 0 <= cx + d < w:
            rgb[cy, cx + d] = color
            mask[cy, cx + d] = True


def _draw_blocks(rgb: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> None:
    # small saturated rectangles near the top-left corner, mimicking text
    colors = [(0, 255, 255), (255, 0, 255), (0, 255, 0)]
    for i, color in enumerate(colors):
        r0, c0 = 2, 2 + 5 * i
        rgb[r0:r0 + 2, c0:c0 + 3] = color
        mask[r0:r0 + 2, c0:c0 + 3] = True


def synth_generate(spec: PhantomSpec, out_dir, stem: str) -> tuple[SampleRecord, Path, Path]:
    """Render one phantom to disk: clean P5 image, P5 anomaly mask, and the
    annotated P6 when the spec asks for it. Returns (record, image, mask)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    render = render_phantom(spec)
    img_path = out_dir / f"{stem}.pgm"
    mask_path = out_dir / f"{stem}_mask.pgm"
    write_pnm(img_path, render.image)
    write_pnm(mask_path, render.anomaly_mask)
    rec_path = f"{stem}.pgm"
    if spec.annotate:
        ann_path = out_dir / f"{stem}.ppm"
        write_pnm(ann_path, render.annotated)
        rec_path = f"{stem}.ppm"
    record = SampleRecord(path=rec_path, label=spec.label, group="", source="synthetic")
    return record, img_path, mask_path


def make_corpus(out_dir, counts: Mapping[str, int], seed: int, image_size: int = 64,
                speckle_sigma: float = 0.25, annotate_fraction: float = 0.0) -> Path:
    """Generate a labeled phantom corpus plus manifest.csv. Per-sample seeds
    derive from the master seed xor the sample index, so generation of
    distinct samples is order-independent."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records: list[SampleRecord] = []
    idx = 0
    ann_rng = np.random.default_rng([seed, 0xA11])
    for label in CLASSES:
        for _ in range(counts.get(label, 0)):
            annotate = bool(annotate_fraction > 0 and ann_rng.random() < annotate_fraction)
            spec = make_spec(label, seed ^ idx, image_size=image_size,
                             speckle_sigma=speckle_sigma, annotate=annotate)
            record, _, _ = synth_generate(spec, out_dir, f"{label}_{idx:05d}")
            records.append(record)
            idx += 1
    manifest = out_dir / "manifest.csv"
    save_manifest(manifest, records)
    return manifest
