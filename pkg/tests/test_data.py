"""Manifest, split, preprocessing, codec and phantom-generator tests."""

import math
from pathlib import Path

import numpy as np
import pytest

from sonomae import data
from sonomae.data import (ConfigurationError, FoldPlan, ManifestError,
                          PhantomSpec, SampleRecord, bilinear_resize, cv_plan,
                          deannotate, holdout_split, load_manifest,
                          make_corpus, make_fold_plan, make_spec, read_fold_plan,
                          read_pnm, render_phantom, resize_normalize,
                          save_manifest, synth_generate, write_fold_plan,
                          write_pnm)
from sonomae.ndgrad import ContractError, ShapeError


def fake_records(counts: dict, with_groups=False) -> list[SampleRecord]:
    out = []
    i = 0
    for label, n in counts.items():
        for _ in range(n):
            group = f"g{i // 3}" if with_groups else ""
            out.append(SampleRecord(path=f"{label}_{i:05d}.pgm", label=label,
                                    group=group))
            i += 1
    return out


class TestPnm:
    def test_p5_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (13, 9)).astype(np.uint8)
        write_pnm(tmp_path / "a.pgm", img)
        again = read_pnm(tmp_path / "a.pgm")
        assert again.tobytes() == img.tobytes()

    def test_p6_round_trip(self, tmp_path):
        img = np.random.default_rng(1).integers(0, 256, (7, 11, 3)).astype(np.uint8)
        write_pnm(tmp_path / "a.ppm", img)
        assert read_pnm(tmp_path / "a.ppm").tobytes() == img.tobytes()

    def test_comment_header_tolerated(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# a comment\n2 2\n255\n\x00\x01\x02\x03")
        img = read_pnm(path)
        np.testing.assert_array_equal(img, [[0, 1], [2, 3]])

    def test_wrong_maxval_rejected(self, tmp_path):
        path = tmp_path / "m.pgm"
        path.write_bytes(b"P5\n2 2\n65535\n" + b"\x00" * 8)
        with pytest.raises(ContractError):
            read_pnm(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "t.pgm"
        path.write_bytes(b"P5\n4 4\n255\n\x00\x01")
        with pytest.raises(ContractError):
            read_pnm(path)

    def test_non_uint8_rejected(self, tmp_path):
        with pytest.raises(ContractError):
            write_pnm(tmp_path / "x.pgm", np.zeros((2, 2), np.float32))


class TestManifest:
    def _write(self, tmp_path, rows, images=True):
        lines = ["path,label,group"] + rows
        path = tmp_path / "manifest.csv"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        if images:
            for row in rows:
                name = row.split(",")[0]
                write_pnm(tmp_path / name, np.zeros((4, 4), np.uint8))
        return path

    def test_three_valid_rows(self, tmp_path):
        path = self._write(tmp_path, ["a.pgm,normal,", "b.pgm,utd,p1", "c.pgm,mcdk,p2"])
        records = load_manifest(path)
        assert len(records) == 3
        assert records[1].label == "utd"
        assert records[1].group == "p1"

    def test_case_insensitive_labels(self, tmp_path):
        path = self._write(tmp_path, ["a.pgm,Normal,", "b.pgm,UTD,"])
        records = load_manifest(path)
        assert [r.label for r in records] == ["normal", "utd"]

    def test_duplicate_path_names_line(self, tmp_path):
        path = self._write(tmp_path, ["a.pgm,normal,", "a.pgm,utd,"])
        with pytest.raises(ManifestError) as err:
            load_manifest(path)
        assert ":3:" in str(err.value)

    def test_unknown_label_names_line(self, tmp_path):
        path = self._write(tmp_path, ["a.pgm,normal,", "b.pgm,cyst,"])
        with pytest.raises(ManifestError) as err:
            load_manifest(path)
        assert ":3:" in str(err.value) and "cyst" in str(err.value)

    def test_missing_file_is_io_error(self, tmp_path):
        path = self._write(tmp_path, ["a.pgm,normal,"], images=False)
        with pytest.raises(IOError):
            load_manifest(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("file,cls\n", encoding="utf-8")
        with pytest.raises(ManifestError):
            load_manifest(path)

    def test_save_load_round_trip(self, tmp_path):
        records = fake_records({"normal": 2, "utd": 1})
        save_manifest(tmp_path / "m.csv", records)
        again = load_manifest(tmp_path / "m.csv", check_files=False)
        assert [(r.path, r.label, r.group) for r in again] == \
               [(r.path, r.label, r.group) for r in records]


class TestHoldoutSplit:
    def test_reference_distribution(self):
        # 969 = 646 normal + 64 mcdk + 259 utd; a 161-image holdout splits
        # stratified as 107 / 11 / 43
        records = fake_records({"normal": 646, "mcdk": 64, "utd": 259})
        cv, test = holdout_split(records, 161 / 969, seed=0)
        counts = {c: sum(1 for r in test if r.label == c) for c in ("normal", "mcdk", "utd")}
        assert counts == {"normal": 107, "mcdk": 11, "utd": 43}
        assert len(cv) == 808

    def test_single_sample_class_rejected(self):
        records = fake_records({"normal": 10, "utd": 1})
        with pytest.raises(ContractError):
            holdout_split(records, 0.2, seed=0)

    def test_fraction_bounds(self):
        records = fake_records({"normal": 4, "utd": 4})
        for bad in (0.0, 1.0, -0.3):
            with pytest.raises(ContractError):
                holdout_split(records, bad, seed=0)

    def test_stratification_property_sweep(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            counts = {c: int(rng.integers(4, 200)) for c in ("normal", "utd", "mcdk")}
            frac = float(rng.uniform(0.1, 0.4))
            records = fake_records(counts)
            cv, test = holdout_split(records, frac, seed=int(rng.integers(1 << 30)))
            assert len(cv) + len(test) == len(records)
            for c, n in counts.items():
                got = sum(1 for r in test if r.label == c)
                assert abs(got - frac * n) <= 1.0 + 1e-9

    def test_deterministic(self):
        records = fake_records({"normal": 50, "utd": 30, "mcdk": 10})
        a = holdout_split(records, 0.2, seed=5)
        b = holdout_split(records, 0.2, seed=5)
        assert [r.path for r in a[1]] == [r.path for r in b[1]]

    def test_disjoint_and_complete(self):
        records = fake_records({"normal": 30, "utd": 20})
        cv, test = holdout_split(records, 0.25, seed=1)
        cv_ids = {r.path for r in cv}
        test_ids = {r.path for r in test}
        assert not cv_ids & test_ids
        assert cv_ids | test_ids == {r.path for r in records}


class TestCvPlan:
    def test_reference_fold_sizes(self):
        # the 808-image development set: validation folds of 202 +- 1
        records = fake_records({"normal": 539, "mcdk": 53, "utd": 216})
        folds = cv_plan(records, k=4, repeats=5, seed=0)
        for (rep, fold), val in folds.items():
            assert abs(len(val) - 202) <= 1

    def test_k_below_two_rejected(self):
        records = fake_records({"normal": 8, "utd": 8})
        with pytest.raises(ContractError):
            cv_plan(records, k=1, repeats=1, seed=0)

    def test_small_class_rejected(self):
        records = fake_records({"normal": 8, "utd": 3})
        with pytest.raises(ConfigurationError):
            cv_plan(records, k=4, repeats=1, seed=0)

    def test_validation_folds_partition_cv(self):
        records = fake_records({"normal": 23, "utd": 17, "mcdk": 9})
        folds = cv_plan(records, k=4, repeats=3, seed=2)
        all_ids = {r.path for r in records}
        for rep in range(1, 4):
            seen = []
            for fold in range(1, 5):
                seen.extend(folds[(rep, fold)])
            assert sorted(seen) == sorted(all_ids)
            assert len(seen) == len(set(seen))

    def test_per_class_stratification(self):
        counts = {"normal": 101, "utd": 42, "mcdk": 17}
        records = fake_records(counts)
        by_label = {r.path: r.label for r in records}
        folds = cv_plan(records, k=4, repeats=2, seed=3)
        for (rep, fold), val in folds.items():
            for c, n in counts.items():
                got = sum(1 for i in val if by_label[i] == c)
                assert abs(got - n / 4) <= 1.0 + 1e-9


class TestFoldPlanFile:
    def _plan(self, seed=0):
        records = fake_records({"normal": 25, "utd": 13, "mcdk": 8})
        return make_fold_plan(records, 0.2, k=4, repeats=2, seed=seed)

    def test_byte_reproducible(self, tmp_path):
        write_fold_plan(self._plan(), tmp_path / "a.txt")
        write_fold_plan(self._plan(), tmp_path / "b.txt")
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    def test_round_trip_stable(self, tmp_path):
        plan = self._plan(seed=9)
        write_fold_plan(plan, tmp_path / "a.txt")
        again = read_fold_plan(tmp_path / "a.txt")
        assert again.seed == plan.seed and again.k == plan.k
        assert set(again.test_ids) == set(plan.test_ids)
        for key, val in plan.val_ids.items():
            assert set(again.val_ids[key]) == set(val)
        write_fold_plan(again, tmp_path / "b.txt")
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    def test_no_leakage(self):
        plan = self._plan(seed=4)
        test_ids = set(plan.test_ids)
        for key, val in plan.val_ids.items():
            assert not test_ids & set(val)
            assert not test_ids & set(plan.train_ids(*key))

    def test_train_val_disjoint_and_cover_cv(self):
        plan = self._plan(seed=5)
        cv = set(plan.cv_ids)
        for rep, fold in plan.folds():
            train = set(plan.train_ids(rep, fold))
            val = set(plan.val_ids[(rep, fold)])
            assert not train & val
            assert train | val == cv

    def test_group_split_keeps_groups_together(self):
        records = fake_records({"normal": 30, "utd": 18, "mcdk": 12}, with_groups=True)
        plan = make_fold_plan(records, 0.2, k=3, repeats=2, seed=1, group_split=True)
        group_of = {r.path: r.group for r in records}
        test_groups = {group_of[i] for i in plan.test_ids}
        for rep, fold in plan.folds():
            val_groups = {group_of[i] for i in plan.val_ids[(rep, fold)]}
            train_groups = {group_of[i] for i in plan.train_ids(rep, fold)}
            assert not val_groups & train_groups
            assert not test_groups & (val_groups | train_groups)


class TestDeannotate:
    def test_grayscale_rgb_passes_through_as_luminance(self):
        rng = np.random.default_rng(0)
        gray = rng.integers(0, 256, (12, 12)).astype(np.uint8)
        rgb = np.repeat(gray[:, :, None], 3, axis=2)
        out = deannotate(rgb)
        np.testing.assert_array_equal(out, gray)

    def test_2d_input_passthrough(self):
        gray = np.arange(16, dtype=np.uint8).reshape(4, 4)
        np.testing.assert_array_equal(deannotate(gray), gray)

    def test_single_saturated_pixel_filled_with_neighbor_gray(self):
        img = np.full((9, 9, 3), 120, np.uint8)
        img[4, 4] = (255, 0, 0)
        out = deannotate(img)
        assert out[4, 4] == 120
        np.testing.assert_array_equal(out, np.full((9, 9), 120, np.uint8))

    def test_caliper_cross_on_smooth_phantom(self):
        spec = make_spec("utd", seed=3, image_size=64, speckle_sigma=0.02,
                         annotate=True)
        render = render_phantom(spec)
        cleaned = deannotate(render.annotated)
        region = render.annotation_mask
        mad = np.abs(cleaned[region].astype(np.float64)
                     - render.image[region].astype(np.float64)).mean()
        assert mad < 5.0

    def test_fully_marked_rejected(self):
        img = np.zeros((4, 4, 3), np.uint8)
        img[:, :] = (255, 0, 0)
        with pytest.raises(ContractError):
            deannotate(img)

    def test_idempotent(self):
        spec = make_spec("mcdk", seed=5, image_size=48, speckle_sigma=0.1,
                         annotate=True)
        render = render_phantom(spec)
        once = deannotate(render.annotated)
        twice = deannotate(np.repeat(once[:, :, None], 3, axis=2))
        np.testing.assert_array_equal(once, twice)

    def test_isolated_annotation_island_reachable(self):
        # marked block bigger than radius 1: the fill must expand its radius
        img = np.full((11, 11, 3), 80, np.uint8)
        img[3:8, 3:8] = (0, 255, 255)
        out = deannotate(img)
        np.testing.assert_array_equal(out, np.full((11, 11), 80, np.uint8))


class TestResizeNormalize:
    def test_constant_image_all_zeros(self):
        out = resize_normalize(np.full((10, 10), 77, np.uint8), 10)
        np.testing.assert_array_equal(out.data, np.zeros((1, 10, 10), np.float32))

    def test_bilinear_2x2_to_4x4_hand_computed(self):
        src = np.array([[0.0, 10.0], [20.0, 30.0]])
        out = bilinear_resize(src, 4, 4)
        # half-pixel mapping: dst x -> src (x + 0.5)/2 - 0.5, clamped to [0, 1]
        coords = np.clip((np.arange(4) + 0.5) * 0.5 - 0.5, 0.0, 1.0)
        expected = np.empty((4, 4))
        for r in range(4):
            for c in range(4):
                fr, fc = coords[r], coords[c]
                r0, c0 = int(math.floor(fr)), int(math.floor(fc))
                r1, c1 = min(r0 + 1, 1), min(c0 + 1, 1)
                ar, ac = fr - r0, fc - c0
                expected[r, c] = (src[r0, c0] * (1 - ar) * (1 - ac)
                                  + src[r0, c1] * (1 - ar) * ac
                                  + src[r1, c0] * ar * (1 - ac)
                                  + src[r1, c1] * ar * ac)
        np.testing.assert_allclose(out, expected, atol=1e-6)

    def test_standardization_contract(self):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, (37, 53)).astype(np.uint8)
        out = resize_normalize(img, 32).data
        assert out.shape == (1, 32, 32)
        assert abs(out.mean()) < 1e-5
        assert abs(out.var() - 1.0) < 1e-3

    def test_identity_size_preserves_values(self):
        src = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(bilinear_resize(src, 2, 2), src)


class TestPhantoms:
    def test_deterministic_bytes(self, tmp_path):
        spec = make_spec("utd", seed=11, image_size=64)
        _, img_a, mask_a = synth_generate(spec, tmp_path / "a", "s")
        _, img_b, mask_b = synth_generate(spec, tmp_path / "b", "s")
        assert img_a.read_bytes() == img_b.read_bytes()
        assert mask_a.read_bytes() == mask_b.read_bytes()

    def test_normal_mask_empty(self):
        render = render_phantom(make_spec("normal", seed=0))
        assert render.anomaly_mask.sum() == 0

    def test_utd_pelvis_darker_than_parenchyma(self):
        # anechoic pelvis vs speckled parenchyma, measured over 100 phantoms
        sigma = 0.25
        margin = []
        for i in range(100):
            spec = make_spec("utd", seed=1000 + i, speckle_sigma=sigma)
            render = render_phantom(spec)
            inside = render.anomaly_mask > 0
            kidney = data._ellipse_mask(spec.image_size, spec.kidney_center,
                                        spec.kidney_axes, spec.kidney_angle)
            parenchyma = kidney & ~inside
            margin.append(render.image[parenchyma].mean()
                          - render.image[inside].mean())
        speckle_std = data.PARENCHYMA * math.sqrt(math.exp(sigma ** 2) - 1.0)
        assert min(margin) > 2.0 * speckle_std

    def test_mcdk_has_three_nonoverlapping_cysts(self):
        for i in range(50):
            spec = make_spec("mcdk", seed=i)
            assert len(spec.cyst_centers) >= 3

    def test_overlapping_cysts_rejected(self):
        with pytest.raises(ConfigurationError):
            PhantomSpec(label="mcdk", image_size=64, seed=0,
                        kidney_center=(32, 32), kidney_axes=(20, 14),
                        kidney_angle=0.0,
                        cyst_centers=((30.0, 30.0), (31.0, 31.0), (50.0, 50.0)),
                        cyst_radii=(4.0, 4.0, 4.0))

    def test_small_pelvis_rejected(self):
        with pytest.raises(ConfigurationError):
            PhantomSpec(label="utd", image_size=64, seed=0,
                        kidney_center=(32, 32), kidney_axes=(20, 14),
                        kidney_angle=0.0, pelvis_center=(32, 32),
                        pelvis_diameter=4.0)

    def test_normal_with_anomaly_geometry_rejected(self):
        with pytest.raises(ConfigurationError):
            PhantomSpec(label="normal", image_size=64, seed=0,
                        kidney_center=(32, 32), kidney_axes=(20, 14),
                        kidney_angle=0.0, pelvis_center=(32, 32),
                        pelvis_diameter=10.0)

    def test_class_separability_by_dark_fraction(self):
        # a one-dimensional threshold on the dark-pixel share inside the
        # kidney must separate normal from abnormal on 300 phantoms
        fractions = []
        is_abnormal = []
        per_class = 100
        for ci, label in enumerate(("normal", "utd", "mcdk")):
            for i in range(per_class):
                spec = make_spec(label, seed=5000 + ci * per_class + i)
                render = render_phantom(spec)
                kidney = data._ellipse_mask(spec.image_size, spec.kidney_center,
                                            spec.kidney_axes, spec.kidney_angle)
                dark = (render.image < 0.5 * data.PARENCHYMA) & kidney
                fractions.append(dark.sum() / kidney.sum())
                is_abnormal.append(label != "normal")
        fractions = np.array(fractions)
        is_abnormal = np.array(is_abnormal)
        best = 0.0
        for thr in np.unique(fractions):
            acc = ((fractions > thr) == is_abnormal).mean()
            best = max(best, acc)
        assert best >= 0.95

    def test_make_corpus_manifest_loads(self, tmp_path):
        manifest = make_corpus(tmp_path, {"normal": 4, "utd": 2, "mcdk": 2}, seed=3)
        records = load_manifest(manifest)
        assert len(records) == 8
        labels = {r.label for r in records}
        assert labels == {"normal", "utd", "mcdk"}
        img = read_pnm(records[0].resolved(tmp_path))
        assert img.shape == (64, 64)

    def test_annotated_corpus_references_color_files(self, tmp_path):
        manifest = make_corpus(tmp_path, {"normal": 6}, seed=4,
                               annotate_fraction=1.0)
        records = load_manifest(manifest)
        assert all(r.path.endswith(".ppm") for r in records)
        img = read_pnm(records[0].resolved(tmp_path))
        assert img.ndim == 3


class TestLabelIndices:
    def test_binary_mapping(self):
        records = fake_records({"normal": 2, "utd": 1, "mcdk": 1})
        idx = data.label_indices(records, "binary")
        np.testing.assert_array_equal(idx, [0, 0, 1, 1])

    def test_multiclass_mapping(self):
        records = fake_records({"normal": 1, "utd": 1, "mcdk": 1})
        idx = data.label_indices(records, "multiclass")
        np.testing.assert_array_equal(idx, [0, 1, 2])

    def test_unknown_task(self):
        with pytest.raises(ContractError):
            data.label_indices([], "ternary")
