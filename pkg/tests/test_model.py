import numpy as np
import pytest

from semask.encoder import EncoderConfig, count_params
from semask.model import SegModel
from semask.tensor import Tensor, backward, check_gradients


def micro_cfg(k=3):
    return EncoderConfig(window=2, dims=(4, 8, 16, 32), depths=(1, 1, 1, 1),
                         heads=(1, 1, 2, 2), num_classes=k)


class TestModel:
    def test_output_shapes_follow_input(self, rng):
        model = SegModel(micro_cfg(), 8, seed=1)
        for h, w in ((16, 16), (18, 13), (9, 25)):
            out = model.forward(rng.random((2, h, w, 3)).astype(np.float32))
            assert out.main.shape == (2, h, w, 3)
            assert out.prior.shape == (2, h, w, 3)

    def test_named_parameters_sorted_and_complete(self):
        model = SegModel(micro_cfg(), 8, seed=2)
        names = list(model.named_parameters())
        assert names == sorted(names)
        assert model.num_params() == count_params(micro_cfg(), 8)["total"]
        assert "stages.0.semantic.0.gate" in names
        assert "fpn.classifier.weight" in names

    def test_baseline_has_no_prior_and_no_semantic_params(self, rng):
        model = SegModel(micro_cfg(), 8, seed=3, semantic=False)
        assert not any(".semantic." in n for n in model.named_parameters())
        out = model.forward(rng.random((1, 16, 16, 3)).astype(np.float32))
        assert out.prior is None
        for s in out.stages:
            assert s.prior is None
            assert s.pre_features is s.features

    def test_zero_gate_model_matches_baseline_end_to_end(self, rng):
        img = rng.random((1, 16, 16, 3)).astype(np.float32)
        full = SegModel(micro_cfg(), 8, seed=4)
        for name, t in full.params.items():
            if name.endswith(".gate"):
                t.data = np.asarray(0.0, np.float32)
        base = SegModel(micro_cfg(), 8, seed=4, semantic=False)
        a = full.forward(img)
        b = base.forward(img)
        np.testing.assert_array_equal(a.main.data, b.main.data)
        for sa, sb in zip(a.stages, b.stages):
            np.testing.assert_array_equal(sa.features.data, sb.features.data)

    def test_shared_seed_shares_common_parameters(self):
        full = SegModel(micro_cfg(), 8, seed=5)
        base = SegModel(micro_cfg(), 8, seed=5, semantic=False)
        for name, t in base.named_parameters().items():
            np.testing.assert_array_equal(t.data, full.params[name].data, err_msg=name)

    def test_all_parameters_receive_gradients(self, rng):
        model = SegModel(micro_cfg(), 8, seed=6)
        out = model.forward(rng.random((1, 16, 16, 3)).astype(np.float32))
        loss = (out.main * out.main).sum() + (out.prior * out.prior).sum()
        backward(loss)
        for name, t in model.named_parameters().items():
            assert t.grad is not None, f"{name} missing grad"
            assert np.all(np.isfinite(t.grad)), name

    def test_float64_model_full_gradient_check(self, rng):
        """Whole-model check through attention, semantic gates, both
        decoders and the weighted loss; micro extents keep it fast.

        Weights are amplified to a generic parameter point first: at the
        0.02-std init, deep-path gradients sit below finite-difference
        resolution and the relative-error floor misreads them.
        """
        from semask.training import total_loss

        model = SegModel(micro_cfg(), 8, seed=7, dtype=np.float64)
        for name, t in model.params.items():
            if t.ndim >= 2:
                t.data = t.data * 6.0
            if name.endswith(".gate"):
                t.data = np.asarray(0.25, np.float64)
            if name.endswith(".rpe"):
                t.data = rng.standard_normal(t.shape) * 0.3
        img = rng.random((1, 8, 8, 3))
        gt = rng.integers(0, 3, (1, 8, 8))
        gt[0, 0, 0] = 255  # exercise the ignore path

        def loss_fn(_):
            out = model.forward(Tensor(img, dtype=np.float64))
            lt, _, _ = total_loss(out.main, out.prior, gt, 0.4, 255)
            return lt

        for name in ("stages.0.semantic.0.gate", "stages.3.semantic.0.gate",
                     "fpn.classifier.bias", "stages.0.blocks.0.attn.rpe",
                     "stages.3.semantic.0.query.bias"):
            err = check_gradients(loss_fn, model.params[name])
            assert err <= 1e-4, f"{name}: {err}"
