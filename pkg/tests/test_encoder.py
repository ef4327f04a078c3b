import numpy as np
import pytest

from semask.encoder import (EncoderConfig, build_encoder_params, count_flops,
                            count_params, encoder_forward, patch_embed,
                            patch_merging)
from semask.model import SegModel
from semask.params import ParamFactory
from semask.semantic import semantic_block_param_count
from semask.tensor import ShapeError, Tensor, check_gradients


def micro_cfg(k=3, window=2):
    return EncoderConfig(window=window, dims=(4, 8, 16, 32), depths=(1, 1, 1, 1),
                         heads=(1, 1, 2, 2), num_classes=k)


class TestConfig:
    def test_presets_match_published_table(self):
        tiny = EncoderConfig.preset("tiny", 150)
        assert tiny.window == 7
        assert tiny.dims == (96, 192, 384, 768)
        assert tiny.depths == (2, 2, 6, 2)
        assert tiny.heads == (3, 6, 12, 24)
        small = EncoderConfig.preset("small", 150)
        assert small.depths == (2, 2, 18, 2)
        base = EncoderConfig.preset("base", 150)
        assert base.window == 12 and base.dims == (128, 256, 512, 1024)
        large = EncoderConfig.preset("large", 150)
        assert large.dims == (192, 384, 768, 1536) and large.heads == (6, 12, 24, 48)

    def test_dims_must_double(self):
        with pytest.raises(ValueError, match="double"):
            EncoderConfig(window=2, dims=(4, 8, 16, 30), depths=(1, 1, 1, 1),
                          heads=(1, 1, 1, 1), num_classes=2)

    def test_four_stages_required(self):
        with pytest.raises(ValueError, match="4 stages"):
            EncoderConfig(window=2, dims=(4, 8), depths=(1, 1), heads=(1, 1),
                          num_classes=2)

    def test_unknown_preset(self):
        with pytest.raises(ValueError, match="unknown preset"):
            EncoderConfig.preset("huge", 2)


class TestPatchEmbed:
    def _params(self, cfg, dtype=np.float32, seed=0):
        return build_encoder_params(cfg, ParamFactory(seed, dtype=dtype)).embed

    def test_zero_weights_uniform_positions(self, rng):
        cfg = micro_cfg()
        p = self._params(cfg)
        p.weight.data[:] = 0.0
        p.bias.data = rng.standard_normal(4).astype(np.float32)
        img = Tensor(rng.standard_normal((1, 8, 8, 3)).astype(np.float32))
        out = patch_embed(img, p, cfg).data
        np.testing.assert_allclose(out, np.broadcast_to(out[:, :1, :1], out.shape),
                                   atol=1e-6)

    def test_locality_single_pixel(self, rng):
        cfg = micro_cfg()
        p = self._params(cfg, seed=1)
        base = np.zeros((1, 16, 16, 3), np.float32)
        poked = base.copy()
        poked[0, 9, 6] = 1.0  # inside patch (2, 1)
        a = patch_embed(Tensor(base), p, cfg).data
        b = patch_embed(Tensor(poked), p, cfg).data
        diff = np.abs(a - b).sum(axis=-1)[0]
        assert diff[2, 1] > 0
        diff[2, 1] = 0
        np.testing.assert_array_equal(diff, 0)

    def test_output_grid(self, rng):
        cfg = micro_cfg()
        out = patch_embed(Tensor(np.zeros((2, 8, 8, 3), np.float32)),
                          self._params(cfg), cfg)
        assert out.shape == (2, 2, 2, 4)

    def test_indivisible_extents_rejected(self):
        cfg = micro_cfg()
        with pytest.raises(ShapeError, match="divisible"):
            patch_embed(Tensor(np.zeros((1, 10, 8, 3), np.float32)),
                        self._params(cfg), cfg)


class TestPatchMerging:
    def _params(self, c=4, dtype=np.float32):
        make = ParamFactory(3, dtype=dtype)
        cfg = micro_cfg()
        return build_encoder_params(cfg, make).stages[1].merging

    def test_constant_input_constant_output(self, rng):
        p = self._params()
        row = rng.standard_normal(4).astype(np.float32)
        x = Tensor(np.broadcast_to(row, (1, 6, 6, 4)).copy())
        out = patch_merging(x, p).data
        assert out.shape == (1, 3, 3, 8)
        np.testing.assert_allclose(out, np.broadcast_to(out[:, :1, :1], out.shape),
                                   atol=1e-6)

    def test_two_by_two_single_position(self, rng):
        out = patch_merging(Tensor(rng.standard_normal((1, 2, 2, 4)).astype(np.float32)),
                            self._params())
        assert out.shape == (1, 1, 1, 8)

    def test_odd_extents_autopad(self, rng):
        out = patch_merging(Tensor(rng.standard_normal((1, 5, 3, 4)).astype(np.float32)),
                            self._params())
        assert out.shape == (1, 3, 2, 8)

    def test_gradient(self, rng):
        p = self._params(dtype=np.float64)
        x = Tensor(rng.standard_normal((1, 4, 4, 4)), dtype=np.float64)

        def loss(t):
            out = patch_merging(t, p)
            return (out * out).sum()

        assert check_gradients(loss, x) <= 1e-4


class TestEncoderForward:
    def test_resolution_schedule_64(self):
        cfg = EncoderConfig.preset("toy", 4)
        params = build_encoder_params(cfg, ParamFactory(0))
        outs = encoder_forward(Tensor(np.zeros((1, 64, 64, 3), np.float32)), params, cfg)
        assert [o.features.shape[1] for o in outs] == [16, 8, 4, 2]
        assert [o.features.shape[3] for o in outs] == [16, 32, 64, 128]

    def test_ceil_schedule_odd_input(self):
        cfg = micro_cfg()
        params = build_encoder_params(cfg, ParamFactory(0))
        outs = encoder_forward(Tensor(np.zeros((1, 20, 12, 3), np.float32)), params, cfg)
        assert [(o.features.shape[1], o.features.shape[2]) for o in outs] == \
            cfg.stage_extents(20, 12)

    def test_priors_have_class_channels(self):
        cfg = micro_cfg(k=5)
        params = build_encoder_params(cfg, ParamFactory(0))
        outs = encoder_forward(Tensor(np.zeros((2, 16, 16, 3), np.float32)), params, cfg)
        for o in outs:
            assert o.prior is not None and o.prior.map.shape[-1] == 5
            assert o.prior.map.shape[:3] == o.features.shape[:3]

    def test_zero_gates_match_baseline_encoder_bitwise(self, rng):
        cfg = micro_cfg()
        img = Tensor(rng.random((2, 16, 16, 3)).astype(np.float32))
        with_sem = build_encoder_params(cfg, ParamFactory(7), semantic=True)
        for stage in with_sem.stages:
            for sem in stage.semantic:
                sem.gate.data = np.asarray(0.0, np.float32)
        baseline = build_encoder_params(cfg, ParamFactory(7), semantic=False)
        a = encoder_forward(img, with_sem, cfg)
        b = encoder_forward(img, baseline, cfg)
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.features.data, sb.features.data)
            assert sb.prior is None and sa.prior is not None

    def test_deterministic_forward(self, rng):
        cfg = micro_cfg()
        img = rng.random((1, 16, 16, 3)).astype(np.float32)
        outs = []
        for _ in range(2):
            params = build_encoder_params(cfg, ParamFactory(5))
            outs.append(encoder_forward(Tensor(img), params, cfg)[-1].features.data)
        np.testing.assert_array_equal(outs[0], outs[1])


class TestCountParams:
    @pytest.mark.parametrize("name,published", [("tiny", 28e6), ("small", 50e6),
                                                ("base", 88e6), ("large", 197e6)])
    def test_preset_backbones_match_table(self, name, published):
        counts = count_params(EncoderConfig.preset(name, 150), decoder_width=128)
        assert abs(counts["backbone"] - published) <= 0.05 * published

    def test_toy_closed_form(self):
        cfg = EncoderConfig(window=2, dims=(8, 16, 32, 64), depths=(1, 1, 1, 1),
                            heads=(1, 2, 4, 8), num_classes=4)
        counts = count_params(cfg, decoder_width=8)
        # hand-derived: blocks = sum(12 C^2 + 13 C + 9 h)
        blocks = sum(12 * c * c + 13 * c + 9 * h
                     for c, h in zip(cfg.dims, cfg.heads))
        embed = 48 * 8 + 8 + 16
        merging = sum(8 * c * c + 10 * c for c in (8, 16, 32))
        assert counts["patch_embed"] == embed
        assert counts["transformer_blocks"] == blocks
        assert counts["patch_merging"] == merging
        assert counts["backbone"] == embed + blocks + merging

    def test_semantic_layer_formula(self):
        cfg = EncoderConfig.preset("tiny", 150)
        counts = count_params(cfg, decoder_width=128)
        want = sum(semantic_block_param_count(c, 150) for c in cfg.dims)
        assert counts["semantic_layers"] == want

    @pytest.mark.parametrize("preset", ["toy", "tiny", "small", "base", "large"])
    def test_counter_matches_instantiation_presets(self, preset):
        cfg = EncoderConfig.preset(preset, 150)
        width = 32 if preset == "toy" else 128
        model = SegModel(cfg, width, init="zeros")
        assert model.num_params() == count_params(cfg, width)["total"]

    def test_counter_matches_instantiation_random_cfg(self, rng):
        for seed in range(3):
            r = np.random.default_rng(seed)
            c0 = int(r.integers(2, 9)) * 2
            heads = [1, 2, 2, 4]
            cfg = EncoderConfig(window=int(r.integers(2, 5)),
                                dims=(c0, 2 * c0, 4 * c0, 8 * c0),
                                depths=tuple(int(r.integers(1, 4)) for _ in range(4)),
                                heads=tuple(heads),
                                num_classes=int(r.integers(2, 7)),
                                semantic_depths=tuple(int(r.integers(1, 3))
                                                      for _ in range(4)))
            width = int(r.integers(4, 17))
            model = SegModel(cfg, width, init="zeros")
            assert model.num_params() == count_params(cfg, width)["total"]
            baseline = SegModel(cfg, width, init="zeros", semantic=False)
            assert baseline.num_params() == count_params(cfg, width, semantic=False)["total"]

    def test_semantic_overhead_tiny_in_band(self):
        counts = count_params(EncoderConfig.preset("tiny", 150), decoder_width=128)
        assert 1.0e6 <= counts["semantic_layers"] <= 3.0e6


class TestCountFlops:
    def test_doubling_area_doubles_window_attention(self):
        cfg = EncoderConfig.preset("tiny", 150)
        # 448 keeps every stage extent divisible by the window, so no padding
        a = count_flops(cfg, 448, 448, 128)
        b = count_flops(cfg, 448, 896, 128)
        assert b["attention"] == 2 * a["attention"]

    def test_semantic_share_below_ten_percent_tiny(self):
        f = count_flops(EncoderConfig.preset("tiny", 150), 512, 512, 128)
        assert f["semantic_layers"] / f["backbone"] < 0.10

    def test_zero_depth_config_counts_no_attention(self):
        cfg = EncoderConfig(window=2, dims=(4, 8, 16, 32), depths=(0, 0, 0, 0),
                            heads=(1, 1, 1, 1), num_classes=2)
        f = count_flops(cfg, 64, 64, 8, semantic=False)
        assert f["attention"] == 0 and f["mlp"] == 0
        assert f["patch_embed"] > 0
