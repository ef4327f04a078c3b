import json

import numpy as np
import pytest

from semask.checkpoint import (MAGIC, CheckpointError, build_model,
                               load_checkpoint, save_checkpoint)
from semask.config import (ConfigError, RunConfig, from_dict, parse_config,
                           profile_defaults)
from semask.encoder import EncoderConfig
from semask.model import SegModel
from semask.training import AdamW


def micro_model(seed=0, semantic=True):
    cfg = EncoderConfig(window=2, dims=(4, 8, 16, 32), depths=(1, 1, 1, 1),
                        heads=(1, 1, 2, 2), num_classes=3)
    return SegModel(cfg, decoder_width=8, seed=seed, semantic=semantic)


class TestCheckpoint:
    def test_roundtrip_preserves_forward_bitwise(self, tmp_path, rng):
        model = micro_model(seed=1)
        path = tmp_path / "m.smsk"
        save_checkpoint(path, model, iteration=42,
                        extra_config={"train_res": 16, "mean": [0.5, 0.5, 0.5],
                                      "ignore_label": 255})
        ck = load_checkpoint(path)
        assert ck.iteration == 42
        restored = build_model(ck)
        img = rng.random((1, 16, 16, 3)).astype(np.float32)
        a = model.forward(img)
        b = restored.forward(img)
        np.testing.assert_array_equal(a.main.data, b.main.data)
        np.testing.assert_array_equal(a.prior.data, b.prior.data)

    def test_save_load_save_byte_identical(self, tmp_path):
        model = micro_model(seed=2)
        opt = AdamW(model.named_parameters(), weight_decay=0.01)
        for t in model.params.values():
            t.grad = np.ones_like(t.data) * 0.1
        opt.step(lr=1e-3)
        p1, p2 = tmp_path / "a.smsk", tmp_path / "b.smsk"
        rng_state = {"batch": {"state": {"key": 123}}}
        save_checkpoint(p1, model, iteration=1, optimizer=opt, rng_state=rng_state)
        ck = load_checkpoint(p1)
        restored = build_model(ck)
        opt2 = AdamW(restored.named_parameters(), weight_decay=0.01)
        opt2.state.step = ck.opt_step
        for name in opt2.state.m:
            opt2.state.m[name] = ck.opt_m[name]
            opt2.state.v[name] = ck.opt_v[name]
        save_checkpoint(p2, restored, iteration=ck.iteration, optimizer=opt2,
                        rng_state=ck.rng_state)
        assert p1.read_bytes() == p2.read_bytes()

    def test_optimizer_state_roundtrip(self, tmp_path):
        model = micro_model(seed=3)
        opt = AdamW(model.named_parameters(), weight_decay=0.0)
        for t in model.params.values():
            t.grad = np.full_like(t.data, 0.3)
        opt.step(lr=1e-2)
        path = tmp_path / "m.smsk"
        save_checkpoint(path, model, optimizer=opt)
        ck = load_checkpoint(path)
        assert ck.opt_step == 1
        name = "patch_embed.weight"
        np.testing.assert_allclose(ck.opt_m[name], opt.state.m[name], rtol=1e-6)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.smsk"
        p.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(p)

    def test_version_mismatch(self, tmp_path):
        model = micro_model(seed=4)
        p = tmp_path / "m.smsk"
        save_checkpoint(p, model)
        raw = bytearray(p.read_bytes())
        raw[4:8] = np.uint32(99).tobytes()
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version 99"):
            load_checkpoint(p)

    def test_truncated_payload(self, tmp_path):
        model = micro_model(seed=5)
        p = tmp_path / "m.smsk"
        save_checkpoint(p, model)
        raw = p.read_bytes()
        p.write_bytes(raw[:len(raw) - 64])
        with pytest.raises(CheckpointError, match="truncated tensor payload"):
            load_checkpoint(p)

    def test_shape_mismatch_names_tensor(self, tmp_path):
        model = micro_model(seed=6)
        p = tmp_path / "m.smsk"
        save_checkpoint(p, model)
        raw = p.read_bytes()
        head_len = int(np.frombuffer(raw[8:12], "<u4")[0])
        header = json.loads(raw[12:12 + head_len])
        header["config"]["decoder_width"] = 16  # inconsistent with stored tensors
        head2 = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        p.write_bytes(raw[:8] + np.uint32(len(head2)).tobytes() + head2
                      + raw[12 + head_len:])
        with pytest.raises(CheckpointError, match="fpn"):
            build_model(load_checkpoint(p))

    def test_rng_state_survives(self, tmp_path):
        from semask.rng import make_rng

        gen = make_rng(3, "train", "batch")
        gen.integers(0, 10, size=5)
        model = micro_model(seed=7)
        p = tmp_path / "m.smsk"
        save_checkpoint(p, model, rng_state={"batch": gen.bit_generator.state})
        ck = load_checkpoint(p)
        gen2 = make_rng(0, "x")
        state = ck.rng_state["batch"]
        state["state"]["counter"] = np.array(state["state"]["counter"], np.uint64)
        state["state"]["key"] = np.array(state["state"]["key"], np.uint64)
        state["buffer"] = np.array(state["buffer"], np.uint64)
        gen2.bit_generator.state = state
        np.testing.assert_array_equal(gen2.integers(0, 1000, 8),
                                      gen.integers(0, 1000, 8))


class TestConfig:
    def test_empty_object_toy_profile_defaults(self):
        cfg = from_dict({})
        assert cfg.profile == "toy" and cfg.preset == "toy"
        assert cfg.train.alpha == pytest.approx(0.4)
        assert cfg.train.total_iters == 500
        assert cfg.data.synth is not None

    def test_paper_profile_defaults(self):
        cfg = from_dict({"profile": "paper", "data": {"root": "/data/x", "synth": None}})
        assert cfg.preset == "tiny"
        assert cfg.num_classes == 150
        assert cfg.train.total_iters == 80_000
        assert cfg.train.warmup_iters == 1_500
        assert cfg.train.crop == 512
        assert cfg.train.batch_size == 16
        assert cfg.train.base_lr == pytest.approx(1e-4)
        assert cfg.train.weight_decay == pytest.approx(1e-4)

    def test_unknown_key_fatal(self):
        with pytest.raises(ConfigError, match="unknown config key 'trian'"):
            from_dict({"trian": {}})
        with pytest.raises(ConfigError, match="train.alhpa"):
            from_dict({"train": {"alhpa": 0.4}})

    def test_alpha_validation_names_field(self):
        with pytest.raises(ConfigError, match="alpha"):
            from_dict({"train": {"alpha": -1.0}})

    def test_warmup_validation(self):
        with pytest.raises(ConfigError, match="warmup"):
            from_dict({"train": {"total_iters": 10, "warmup_iters": 20}})

    def test_classes_validation(self):
        with pytest.raises(ConfigError, match="num_classes"):
            from_dict({"num_classes": 1})

    def test_roundtrip_equality(self):
        cfg = from_dict({"preset": "toy", "num_classes": 6,
                         "train": {"base_lr": 3e-4, "seed": 11}})
        again = from_dict(json.loads(cfg.to_json()))
        assert again == cfg

    def test_parse_error_reports_line_column(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{\n  "preset": toy\n}')
        with pytest.raises(ConfigError, match="line 2"):
            parse_config(p)

    def test_profile_defaults_rejects_unknown(self):
        with pytest.raises(ConfigError, match="profile"):
            profile_defaults("huge")

    def test_scales_type_checked(self):
        with pytest.raises(ConfigError):
            from_dict({"train": {"scales": "big"}})

    def test_default_runconfig_valid(self):
        cfg = RunConfig()
        assert cfg.encoder_config().dims == (16, 32, 64, 128)
