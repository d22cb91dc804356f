"""Saliency-map extraction, scoring and rendering tests."""

import numpy as np
import pytest

from sonomae import data, ndgrad, vitmae
from sonomae.ndgrad import ContractError, ShapeError
from sonomae.scorecam import (SaliencyMap, TokenGrid, combine_channel_maps,
                              extract_token_grid, mask_bounding_box, overlay,
                              saliency_mass_fraction, scorecam,
                              write_saliency_outputs)
from sonomae.vitmae import CLASSIFY, PRETRAIN, StateError


def desk_model(num_classes=3, seed=1):
    cfg = vitmae.ModelConfig(image_size=64, patch_size=8, embed_dim=32,
                             encoder_depth=2, encoder_heads=2, decoder_dim=16,
                             decoder_depth=1, decoder_heads=2, mlp_ratio=2.0,
                             num_classes=num_classes, seed=seed)
    return vitmae.VitMaeModel(cfg, mode=CLASSIFY)


@pytest.fixture()
def image():
    spec = data.make_spec("utd", seed=2, image_size=64)
    render = data.render_phantom(spec)
    return data.resize_normalize(render.image, 64)


class TestExtractTokenGrid:
    def test_desk_grid_shape(self, image):
        grid = extract_token_grid(desk_model(), image)
        assert grid.activations.shape == (32, 8, 8)
        assert grid.source_layer == "enc.1.ln1"

    def test_reference_grid_shape(self):
        cfg = vitmae.reference_config(num_classes=2)
        model = vitmae.VitMaeModel(cfg, mode=CLASSIFY)
        img = np.zeros((1, 224, 224), np.float32)
        grid = extract_token_grid(model, img)
        # 197 tokens in, class token dropped, 14 x 14 grid out
        assert grid.activations.shape == (cfg.embed_dim, 14, 14)

    def test_index_correspondence(self, image):
        model = desk_model()
        grid = extract_token_grid(model, image)
        with ndgrad.no_grad():
            _, _, prenorm = vitmae.forward_classify(model, image,
                                                    capture_prenorm=True)
        tokens = prenorm.data[0]  # [1 + N, D]
        g = 8
        for (r, c, d) in [(0, 0, 0), (3, 5, 7), (7, 7, 31), (2, 6, 11)]:
            assert grid.activations[d, r, c] == tokens[1 + r * g + c, d]

    def test_pretrain_model_rejected(self, image):
        cfg = vitmae.ModelConfig(image_size=64, patch_size=8, embed_dim=32,
                                 encoder_depth=2, encoder_heads=2,
                                 decoder_dim=16, decoder_depth=1,
                                 decoder_heads=2, seed=0)
        mae = vitmae.VitMaeModel(cfg, mode=PRETRAIN)
        with pytest.raises(StateError):
            extract_token_grid(mae, image)

    def test_grid_must_be_square(self):
        with pytest.raises(ShapeError):
            TokenGrid(activations=np.zeros((4, 2, 3)), source_layer="x")


class TestCombineChannelMaps:
    def test_bounds(self):
        rng = np.random.default_rng(0)
        maps = rng.uniform(size=(5, 16, 16))
        weights = rng.normal(size=5)
        out = combine_channel_maps(maps, weights)
        assert out.min() == 0.0
        assert out.max() == 1.0

    def test_constant_combination_is_zero(self):
        maps = np.ones((3, 8, 8))
        out = combine_channel_maps(maps, np.zeros(3))
        np.testing.assert_array_equal(out, 0.0)

    def test_duplicating_all_channels_invariant(self):
        rng = np.random.default_rng(1)
        maps = rng.uniform(size=(6, 12, 12))
        weights = rng.normal(size=6)
        base = combine_channel_maps(maps, weights)
        doubled = combine_channel_maps(np.concatenate([maps, maps]),
                                       np.concatenate([weights, weights]))
        np.testing.assert_allclose(base, doubled, atol=1e-12)

    def test_order_invariance(self):
        rng = np.random.default_rng(2)
        maps = rng.uniform(size=(4, 8, 8))
        weights = rng.normal(size=4)
        perm = np.array([2, 0, 3, 1])
        a = combine_channel_maps(maps, weights)
        b = combine_channel_maps(maps[perm], weights[perm])
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestScorecam:
    def test_constant_model_gives_zero_saliency(self, image):
        model = desk_model()
        model.params["head.weight"].data[:] = 0.0
        model.params["head.bias"].data[:] = np.array([0.2, 0.5, 0.3], np.float32)
        sal = scorecam(model, image, target_class=1, channel_budget=8)
        np.testing.assert_array_equal(sal.values, 0.0)

    def test_bounds_and_shape(self, image):
        sal = scorecam(desk_model(), image, target_class=0, channel_budget=8)
        assert sal.values.shape == (64, 64)
        assert sal.values.min() == 0.0
        assert sal.values.max() <= 1.0

    def test_deterministic(self, image):
        a = scorecam(desk_model(), image, target_class=2, channel_budget=8)
        b = scorecam(desk_model(), image, target_class=2, channel_budget=8)
        assert a.values.tobytes() == b.values.tobytes()

    def test_budget_limits_scored_channels(self, image):
        sal = scorecam(desk_model(), image, target_class=0, channel_budget=5)
        assert len(sal.channel_ids) <= 5
        nonzero = np.nonzero(sal.channel_weights)[0]
        assert set(nonzero) <= set(sal.channel_ids)

    def test_budget_over_channels_rejected(self, image):
        with pytest.raises(ContractError):
            scorecam(desk_model(), image, target_class=0, channel_budget=33)

    def test_bad_target_class(self, image):
        with pytest.raises(ContractError):
            scorecam(desk_model(), image, target_class=3, channel_budget=4)

    def test_score_modes(self, image):
        for mode in ("prob_diff", "prob", "logit"):
            sal = scorecam(desk_model(), image, target_class=1,
                           channel_budget=4, score_mode=mode)
            assert sal.values.shape == (64, 64)
        with pytest.raises(ContractError):
            scorecam(desk_model(), image, 1, channel_budget=4, score_mode="banana")

    def test_channels_ranked_by_variance(self, image):
        model = desk_model()
        grid = extract_token_grid(model, image)
        variances = grid.activations.reshape(32, -1).var(axis=1)
        sal = scorecam(model, image, target_class=0, channel_budget=4)
        chosen = set(sal.channel_ids.tolist())
        top4 = set(np.argsort(-variances, kind="stable")[:4].tolist())
        assert chosen == top4


class TestOverlay:
    def _saliency(self, values):
        return SaliencyMap(values=values, target_class=0, channel_budget=1,
                           channel_weights=np.zeros(1), channel_ids=np.array([0]),
                           channel_variances=np.zeros(1))

    def test_zero_saliency_pure_blue_tint(self):
        gray = np.full((8, 8), 100, np.uint8)
        out = overlay(gray, self._saliency(np.zeros((8, 8))), alpha=0.5)
        expected = np.round(0.5 * 100 + 0.5 * np.array([0.0, 0.0, 255.0]))
        np.testing.assert_array_equal(out[0, 0], expected.astype(np.uint8))

    def test_alpha_zero_returns_input(self):
        rng = np.random.default_rng(3)
        gray = rng.integers(0, 256, (10, 10)).astype(np.uint8)
        out = overlay(gray, self._saliency(rng.uniform(size=(10, 10))), alpha=0.0)
        for c in range(3):
            np.testing.assert_array_equal(out[:, :, c], gray)

    def test_saved_overlay_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        gray = rng.integers(0, 256, (16, 16)).astype(np.uint8)
        sal = self._saliency(rng.uniform(size=(16, 16)))
        rendered = overlay(gray, sal, alpha=0.5)
        data.write_pnm(tmp_path / "o.ppm", rendered)
        again = data.read_pnm(tmp_path / "o.ppm")
        assert again.tobytes() == rendered.tobytes()

    def test_size_mismatch(self):
        with pytest.raises(ShapeError):
            overlay(np.zeros((4, 4), np.uint8), self._saliency(np.zeros((8, 8))))

    def test_alpha_range(self):
        with pytest.raises(ContractError):
            overlay(np.zeros((4, 4), np.uint8), self._saliency(np.zeros((4, 4))),
                    alpha=1.5)


class TestSaliencyGeometry:
    def test_mass_fraction(self):
        values = np.zeros((4, 4))
        values[1, 1] = 0.75
        values[3, 3] = 0.25
        sal = SaliencyMap(values=values, target_class=0, channel_budget=1,
                          channel_weights=np.zeros(1), channel_ids=np.array([0]),
                          channel_variances=np.zeros(1))
        region = np.zeros((4, 4), bool)
        region[1, 1] = True
        assert saliency_mass_fraction(sal, region) == pytest.approx(0.75)

    def test_bounding_box(self):
        mask = np.zeros((6, 6), np.uint8)
        mask[2, 1] = 1
        mask[4, 3] = 1
        box = mask_bounding_box(mask)
        assert box[2:5, 1:4].all()
        assert box.sum() == 9

    def test_empty_mask_rejected(self):
        with pytest.raises(ContractError):
            mask_bounding_box(np.zeros((3, 3), np.uint8))


class TestOutputs:
    def test_files_written(self, tmp_path, image):
        model = desk_model()
        sal = scorecam(model, image, target_class=1, channel_budget=6)
        gray = np.round((image.data[0] - image.data.min())
                        / (image.data.max() - image.data.min()) * 255).astype(np.uint8)
        write_saliency_outputs(tmp_path, "case", gray, sal)
        assert (tmp_path / "case_overlay.ppm").exists()
        assert (tmp_path / "case_saliency.pgm").exists()
        lines = (tmp_path / "case_channels.csv").read_text().splitlines()
        assert lines[0] == "channel,variance,weight"
        assert len(lines) == 1 + len(sal.channel_ids)
