"""Architecture tests: patch geometry, masking, forward passes, losses."""

import numpy as np
import pytest

from sonomae import ndgrad, optim, vitmae
from sonomae.ndgrad import ContractError, ShapeError
from sonomae.vitmae import (CLASSIFY, PRETRAIN, MaskPlan, ModelConfig,
                            StateError, VitMaeModel, classifier_from_pretrained,
                            forward_classify, forward_mae, mae_loss, mask_count,
                            patchify, reference_config, sample_mask, unpatchify)


def small_config(**kw):
    base = dict(image_size=32, patch_size=8, embed_dim=32, encoder_depth=2,
                encoder_heads=2, decoder_dim=16, decoder_depth=1, decoder_heads=2,
                mlp_ratio=2.0, seed=7)
    base.update(kw)
    return ModelConfig(**base)


class TestModelConfig:
    def test_patch_divisibility(self):
        with pytest.raises(ContractError):
            ModelConfig(image_size=65, patch_size=8)

    def test_head_divisibility(self):
        with pytest.raises(ContractError):
            ModelConfig(embed_dim=100, encoder_heads=3)
        with pytest.raises(ContractError):
            ModelConfig(decoder_dim=30, decoder_heads=4)

    def test_mask_ratio_range(self):
        with pytest.raises(ContractError):
            ModelConfig(mask_ratio=1.0)
        with pytest.raises(ContractError):
            ModelConfig(mask_ratio=-0.1)

    def test_num_classes(self):
        with pytest.raises(ContractError):
            ModelConfig(num_classes=4)

    def test_num_patches(self):
        assert ModelConfig(image_size=224, patch_size=16).num_patches == 196
        assert ModelConfig().num_patches == 64

    def test_parameter_count_pure_function_of_config(self):
        a = VitMaeModel(small_config(), mode=PRETRAIN)
        b = VitMaeModel(small_config(), mode=PRETRAIN)
        assert a.parameter_count() == b.parameter_count()
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)

    def test_head_width_matches_num_classes(self):
        for k in (2, 3):
            model = VitMaeModel(small_config(num_classes=k), mode=CLASSIFY)
            assert model.params["head.weight"].data.shape[1] == k


class TestPatchify:
    def test_224_16_arithmetic(self):
        img = np.zeros((1, 224, 224), np.float32)
        patches = patchify(img, 16)
        assert patches.shape == (196, 256)

    def test_32_8_arithmetic(self):
        assert patchify(np.zeros((1, 32, 32), np.float32), 8).shape == (16, 64)

    def test_round_trip_bit_exact(self):
        rng = np.random.default_rng(0)
        img = rng.normal(size=(1, 64, 64)).astype(np.float32)
        again = unpatchify(patchify(img, 8), 8)
        assert again.tobytes() == img.tobytes()

    def test_row_content_is_raster_order(self):
        # pixel (r, c) of patch p lands at row p, column r*patch+c
        img = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
        patches = patchify(img, 2)
        np.testing.assert_array_equal(patches[0], [0, 1, 4, 5])
        np.testing.assert_array_equal(patches[1], [2, 3, 6, 7])
        np.testing.assert_array_equal(patches[2], [8, 9, 12, 13])

    def test_non_divisible_rejected(self):
        with pytest.raises(ShapeError):
            patchify(np.zeros((1, 30, 30), np.float32), 8)


class TestSampleMask:
    def test_quarter_of_196(self):
        plan = sample_mask(196, 0.25, seed=0)
        assert plan.num_masked == 49

    def test_ratio_zero(self):
        plan = sample_mask(64, 0.0, seed=1)
        assert plan.num_masked == 0
        assert plan.visible_indices.shape == (64,)

    def test_seed_determinism(self):
        a = sample_mask(196, 0.25, seed=42)
        b = sample_mask(196, 0.25, seed=42)
        np.testing.assert_array_equal(a.mask, b.mask)
        np.testing.assert_array_equal(a.permutation, b.permutation)

    def test_different_seeds_differ(self):
        a = sample_mask(196, 0.25, seed=1)
        b = sample_mask(196, 0.25, seed=2)
        assert not np.array_equal(a.mask, b.mask)

    def test_ratio_bounds(self):
        with pytest.raises(ContractError):
            sample_mask(64, 1.0, seed=0)
        with pytest.raises(ContractError):
            sample_mask(64, -0.01, seed=0)

    def test_exact_counts_sweep(self):
        for n in (16, 49, 100, 196, 257, 1024):
            for ratio in (0.0, 0.25, 0.5, 0.75):
                plan = sample_mask(n, ratio, seed=n)
                assert plan.num_masked == mask_count(n, ratio)
                assert plan.num_masked == int(np.floor(ratio * n + 0.5))


class TestForwardMae:
    def setup_method(self):
        self.cfg = small_config()
        self.model = VitMaeModel(self.cfg, mode=PRETRAIN)
        rng = np.random.default_rng(3)
        self.img = rng.normal(size=(1, 32, 32)).astype(np.float32)

    def test_output_dims_match_input(self):
        plan = sample_mask(self.cfg.num_patches, 0.25, seed=0)
        with ndgrad.no_grad():
            recon = forward_mae(self.model, self.img, plan)
        assert tuple(recon.shape) == (1, 32, 32)

    def test_zero_ratio_full_sequence(self):
        plan = sample_mask(self.cfg.num_patches, 0.0, seed=0)
        assert plan.visible_indices.size + 1 == self.cfg.num_patches + 1
        with ndgrad.no_grad():
            recon = forward_mae(self.model, self.img, plan)
        assert tuple(recon.shape) == (1, 32, 32)

    def test_visible_order_permutation_equivariance(self):
        plan = sample_mask(self.cfg.num_patches, 0.25, seed=5)
        perm = plan.permutation.copy()
        m = plan.num_masked
        perm[m], perm[m + 3] = perm[m + 3], perm[m]
        swapped = MaskPlan(mask=plan.mask.copy(), permutation=perm, seed=None)
        with ndgrad.no_grad():
            base = forward_mae(self.model, self.img, plan)
            alt = forward_mae(self.model, self.img, swapped)
        np.testing.assert_allclose(base.data, alt.data, atol=1e-5)

    def test_plan_length_mismatch(self):
        wrong = sample_mask(99, 0.25, seed=0)
        with pytest.raises(ShapeError):
            forward_mae(self.model, self.img, wrong)

    def test_classify_model_rejected(self):
        clf = VitMaeModel(small_config(), mode=CLASSIFY)
        plan = sample_mask(self.cfg.num_patches, 0.25, seed=0)
        with pytest.raises(StateError):
            forward_mae(clf, self.img, plan)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(4)
        imgs = rng.normal(size=(3, 1, 32, 32)).astype(np.float32)
        plans = [sample_mask(self.cfg.num_patches, 0.25, seed=i) for i in range(3)]
        with ndgrad.no_grad():
            batch = forward_mae(self.model, imgs, plans)
            singles = [forward_mae(self.model, imgs[i], plans[i]) for i in range(3)]
        for i in range(3):
            np.testing.assert_allclose(batch.data[i], singles[i].data, atol=1e-5)

    def test_forward_determinism_bit_exact(self):
        plan = sample_mask(self.cfg.num_patches, 0.25, seed=9)
        with ndgrad.no_grad():
            a = forward_mae(self.model, self.img, plan).data.tobytes()
            b = forward_mae(self.model, self.img, plan).data.tobytes()
        assert a == b

    def test_gradient_reaches_every_parameter_group(self):
        plan = sample_mask(self.cfg.num_patches, 0.25, seed=1)
        self.model.zero_grads()
        recon = forward_mae(self.model, self.img, plan)
        ndgrad.backward(mae_loss(recon, self.img))
        grads = self.model.grads()
        for group in ("patch_embed.weight", "enc.0.attn.wq", "enc.0.mlp.w1",
                      "dec.0.attn.wq", "mask_token", "recon.weight"):
            assert group in grads, f"no gradient for {group}"
            assert np.linalg.norm(grads[group]) > 0, f"zero gradient norm for {group}"


class TestMaeLoss:
    def test_zero_when_equal(self):
        x = np.random.default_rng(0).normal(size=(1, 8, 8)).astype(np.float32)
        loss = mae_loss(ndgrad.Tensor(x), x)
        assert float(loss.data) == 0.0

    def test_constant_offset(self):
        x = np.random.default_rng(1).normal(size=(1, 8, 8)).astype(np.float32)
        for c in (0.5, -1.25):
            loss = mae_loss(ndgrad.Tensor(x + np.float32(c)), x)
            assert float(loss.data) == pytest.approx(c * c, abs=1e-6)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(1, 6, 6)).astype(np.float32)
        b = rng.normal(size=(1, 6, 6)).astype(np.float32)
        loss = float(mae_loss(ndgrad.Tensor(a), b).data)
        total = 0.0
        for i in range(6):
            for j in range(6):
                total += (float(a[0, i, j]) - float(b[0, i, j])) ** 2
        assert loss == pytest.approx(total / 36.0, abs=1e-6)

    def test_nonnegative_and_zero_iff_equal(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(1, 4, 4)).astype(np.float32)
        b = a.copy()
        b[0, 2, 2] += 0.1
        assert float(mae_loss(ndgrad.Tensor(a), b).data) > 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mae_loss(ndgrad.Tensor(np.zeros((1, 4, 4))), np.zeros((1, 8, 8)))

    def test_masked_only_variant(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(1, 16, 16)).astype(np.float32)
        b = rng.normal(size=(1, 16, 16)).astype(np.float32)
        plan = sample_mask(16, 0.25, seed=0)  # patch size 4
        loss = float(mae_loss(ndgrad.Tensor(a), b, plan, masked_only=True).data)
        pix = unpatchify(np.repeat(plan.mask.astype(np.float64)[:, None], 16, axis=1), 4)
        diff = (a.astype(np.float64) - b.astype(np.float64)) ** 2
        expected = float((diff * pix).sum() / pix.sum())
        assert loss == pytest.approx(expected, abs=1e-6)


class TestForwardClassify:
    def setup_method(self):
        self.model = VitMaeModel(small_config(num_classes=3), mode=CLASSIFY)
        rng = np.random.default_rng(5)
        self.imgs = rng.normal(size=(4, 1, 32, 32)).astype(np.float32)

    def test_probs_sum_to_one(self):
        with ndgrad.no_grad():
            _, probs = forward_classify(self.model, self.imgs)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_logit_width(self):
        for k in (2, 3):
            model = VitMaeModel(small_config(num_classes=k), mode=CLASSIFY)
            with ndgrad.no_grad():
                logits, probs = forward_classify(model, self.imgs[0])
            assert tuple(logits.shape) == (k,)
            assert probs.shape == (k,)

    def test_pretrain_model_rejected(self):
        mae = VitMaeModel(small_config(), mode=PRETRAIN)
        with pytest.raises(StateError):
            forward_classify(mae, self.imgs[0])

    def test_argmax_tie_toward_lowest_index(self):
        probs = np.array([[0.4, 0.4, 0.2], [0.2, 0.4, 0.4]])
        np.testing.assert_array_equal(vitmae.predict_class(probs), [0, 1])

    def test_deterministic(self):
        with ndgrad.no_grad():
            a = forward_classify(self.model, self.imgs)[1].tobytes()
            b = forward_classify(self.model, self.imgs)[1].tobytes()
        assert a == b


class TestClassifierFromPretrained:
    def test_encoder_copied_decoder_dropped(self):
        pre = VitMaeModel(small_config(), mode=PRETRAIN)
        # leave a fingerprint on an encoder weight
        pre.params["enc.0.attn.wq"].data += 0.123
        clf = classifier_from_pretrained(pre, num_classes=2)
        assert clf.mode == CLASSIFY
        assert "head.weight" in clf.params
        assert not any(k.startswith("dec") or k == "mask_token" for k in clf.params)
        np.testing.assert_array_equal(clf.params["enc.0.attn.wq"].data,
                                      pre.params["enc.0.attn.wq"].data)

    def test_reference_config_shapes(self):
        cfg = reference_config()
        assert cfg.num_patches == 196
        assert cfg.grid_size == 14


class TestOverfitFixture:
    def test_small_overfit_reaches_full_train_accuracy(self):
        # miniature version of the overfit oracle: 8 separable images
        from sonomae import data as sdata
        rng = np.random.default_rng(11)
        imgs = []
        labels = []
        for i in range(8):
            label = ("normal", "utd", "mcdk")[i % 3]
            spec = sdata.make_spec(label, seed=100 + i, image_size=32,
                                   speckle_sigma=0.15)
            render = sdata.render_phantom(spec)
            imgs.append(sdata.resize_normalize(render.image, 32).data)
            labels.append(("normal", "utd", "mcdk").index(label))
        images = np.stack(imgs)
        labels = np.array(labels)
        model = VitMaeModel(small_config(num_classes=3), mode=CLASSIFY)
        cfg = optim.OptimConfig(learning_rate=1e-3, epochs=120, batch_size=8,
                                warmup_fraction=0.1)
        weights = optim.compute_class_weights(np.bincount(labels, minlength=3))
        result = optim.train_finetune(model, images, labels, images, labels,
                                      weights, cfg, seed=0)
        assert max(r["train_accuracy"] for r in result.history) == 1.0
