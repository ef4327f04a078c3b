import json

import numpy as np
import pytest

from semask.cli import main


def write_toy_config(path, iters=8, crop=16, n=4, size=16, k=4, seed=5):
    doc = {
        "preset": "toy",
        "num_classes": k,
        "train": {"total_iters": iters, "warmup_iters": 2, "batch_size": 2,
                  "crop": crop, "seed": seed},
        "data": {"synth": {"count": n, "height": size, "width": size, "seed": 3}},
    }
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_toy_config(root / "cfg.json")
    out = root / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["synth", "--out", str(root / "ds"), "--count", "3",
                 "--height", "16", "--width", "16", "--classes", "4",
                 "--seed", "3"]) == 0
    return root, cfg, out


class TestTrain:
    def test_outputs_exist(self, trained):
        root, cfg, out = trained
        assert (out / "checkpoint.smsk").is_file()
        assert (out / "metrics.csv").is_file()
        assert (out / "config.resolved.json").is_file()
        lines = (out / "metrics.csv").read_text().strip().splitlines()
        assert lines[0] == "iter,lr,L1,L2,LT"
        assert len(lines) == 9

    def test_resolved_config_reparses(self, trained):
        from semask.config import from_dict

        root, cfg, out = trained
        doc = json.loads((out / "config.resolved.json").read_text())
        assert from_dict(doc).train.total_iters == 8

    def test_determinism_identical_checkpoints(self, trained, tmp_path):
        root, cfg, out = trained
        out2 = tmp_path / "again"
        assert main(["train", "--config", str(cfg), "--out", str(out2)]) == 0
        assert (out / "checkpoint.smsk").read_bytes() == \
            (out2 / "checkpoint.smsk").read_bytes()
        assert (out / "metrics.csv").read_text() == (out2 / "metrics.csv").read_text()

    def test_lock_prevents_concurrent_use(self, trained, tmp_path, capsys):
        root, cfg, out = trained
        busy = tmp_path / "busy"
        busy.mkdir()
        (busy / ".semask.lock").touch()
        assert main(["train", "--config", str(cfg), "--out", str(busy)]) == 1
        assert "locked" in capsys.readouterr().err

    def test_bad_config_exits_nonzero(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"train": {"alpha": -2}}')
        assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
        assert "alpha" in capsys.readouterr().err


class TestEval:
    def test_single_equals_degenerate_multiscale(self, trained, tmp_path):
        root, cfg, out = trained
        e1, e2 = tmp_path / "e1", tmp_path / "e2"
        ck = str(out / "checkpoint.smsk")
        assert main(["eval", "--checkpoint", ck, "--config", str(cfg),
                     "--single", "--out", str(e1)]) == 0
        assert main(["eval", "--checkpoint", ck, "--config", str(cfg),
                     "--scales", "1.0", "--out", str(e2)]) == 0
        r1 = (e1 / "per_class_single.csv").read_text()
        r2 = (e2 / "per_class_multiscale.csv").read_text()
        assert r1 == r2

    def test_default_reports_both_protocols(self, trained, tmp_path):
        root, cfg, out = trained
        e = tmp_path / "e"
        assert main(["eval", "--checkpoint", str(out / "checkpoint.smsk"),
                     "--config", str(cfg), "--out", str(e)]) == 0
        report = (e / "report.txt").read_text()
        assert "[single] mIoU" in report and "[multiscale] mIoU" in report
        assert (e / "per_class_single.csv").is_file()
        assert (e / "per_class_multiscale.csv").is_file()

    def test_eval_on_disk_dataset(self, trained, tmp_path):
        root, cfg, out = trained
        e = tmp_path / "e"
        assert main(["eval", "--checkpoint", str(out / "checkpoint.smsk"),
                     "--data", str(root / "ds"), "--single", "--out", str(e)]) == 0
        report = (e / "report.txt").read_text()
        assert "mIoU" in report and "samples: 3" in report

    def test_eval_deterministic_across_runs(self, trained, tmp_path):
        root, cfg, out = trained
        ck = str(out / "checkpoint.smsk")
        outs = []
        for sub in ("r1", "r2"):
            dst = tmp_path / sub
            assert main(["eval", "--checkpoint", ck, "--config", str(cfg),
                         "--single", "--out", str(dst)]) == 0
            outs.append((dst / "report.txt").read_text())
        assert outs[0] == outs[1]


class TestInfer:
    def test_writes_mask_pairs(self, trained, tmp_path):
        root, cfg, out = trained
        dst = tmp_path / "preds"
        assert main(["infer", "--checkpoint", str(out / "checkpoint.smsk"),
                     "--data", str(root / "ds"), "--out", str(dst)]) == 0
        preds = sorted(p.name for p in dst.glob("*_pred.png"))
        colors = sorted(p.name for p in dst.glob("*_color.png"))
        assert len(preds) == 3 and len(colors) == 3
        from PIL import Image

        arr = np.asarray(Image.open(dst / preds[0]))
        assert arr.shape == (16, 16) and arr.max() < 4


class TestAnalyze:
    def test_emits_pre_and_post_maps(self, trained, tmp_path):
        root, cfg, out = trained
        dst = tmp_path / "maps"
        image = str(root / "ds" / "images" / "0000.png")
        assert main(["analyze", "--checkpoint", str(out / "checkpoint.smsk"),
                     "--image", image, "--stage", "2", "--pixel", "1,1",
                     "--out", str(dst)]) == 0
        for kind in ("pre", "post"):
            assert (dst / f"stage2_1_1_{kind}.png").is_file()
            sim = np.loadtxt(dst / f"stage2_1_1_{kind}.csv", delimiter=",")
            assert sim.shape == (2, 2)
            assert sim[1, 1] == pytest.approx(1.0, abs=1e-5)
            assert np.all(sim >= -1.0) and np.all(sim <= 1.0)

    def test_analyze_deterministic_across_runs(self, trained, tmp_path):
        root, cfg, out = trained
        image = str(root / "ds" / "images" / "0001.png")
        blobs = []
        for sub in ("m1", "m2"):
            dst = tmp_path / sub
            assert main(["analyze", "--checkpoint", str(out / "checkpoint.smsk"),
                         "--image", image, "--stage", "1", "--pixel", "0,3",
                         "--which", "post", "--out", str(dst)]) == 0
            blobs.append((dst / "stage1_0_3_post.png").read_bytes()
                         + (dst / "stage1_0_3_post.csv").read_bytes())
        assert blobs[0] == blobs[1]


class TestCountAndSynth:
    def test_count_tiny_reports_backbone_near_28m(self, capsys):
        assert main(["count", "--preset", "tiny"]) == 0
        out = capsys.readouterr().out
        row = [l for l in out.splitlines() if l.startswith("tiny")][0]
        backbone = float(row.split()[1])
        assert abs(backbone - 28.0) <= 0.05 * 28.0

    def test_count_deterministic(self, capsys):
        assert main(["count"]) == 0
        first = capsys.readouterr().out
        assert main(["count"]) == 0
        assert capsys.readouterr().out == first

    def test_synth_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for dst in (a, b):
            assert main(["synth", "--out", str(dst), "--count", "2",
                         "--height", "16", "--width", "16", "--classes", "3",
                         "--seed", "11"]) == 0
        for rel in ("images/0000.png", "masks/0001.png"):
            assert (a / rel).read_bytes() == (b / rel).read_bytes()

    def test_unknown_command_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["count", "--bogus"])
        assert exc.value.code == 2


class TestThreadCap:
    def test_cap_applied_when_unset(self, monkeypatch):
        import os

        from semask.cli import _apply_thread_cap

        monkeypatch.setenv("SEMASK_THREADS", "2")
        monkeypatch.delenv("OMP_NUM_THREADS", raising=False)
        _apply_thread_cap()
        assert os.environ["OMP_NUM_THREADS"] == "2"

    def test_existing_value_wins(self, monkeypatch):
        import os

        from semask.cli import _apply_thread_cap

        monkeypatch.setenv("SEMASK_THREADS", "2")
        monkeypatch.setenv("OPENBLAS_NUM_THREADS", "7")
        _apply_thread_cap()
        assert os.environ["OPENBLAS_NUM_THREADS"] == "7"
