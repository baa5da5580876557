import json
import os

import numpy as np
import pytest
from PIL import Image

from gazedetr.checkpoint import load_checkpoint
from gazedetr.cli import build_parser, main, render_overlay
from gazedetr.config import build_config
from gazedetr.data import SynthConfig, load_image, read_dataset, save_ppm, synth_generate, write_dataset
from gazedetr.train import build_records, evaluate_model
from gazedetr.metrics import evaluate_records

TINY = ["--set", "model.d=8", "--set", "model.n_heads=2", "--set", "model.n_queries=4",
        "--set", "model.n_enc_layers=1", "--set", "model.n_dec_layers=1", "--set", "model.d_ff=16",
        "--set", "model.backbone_channels=4,8,8,8", "--set", "train.synth_count=10",
        "--set", "train.batch_size=5", "--set", "train.augment=false", "--set", "train.eval_count=6"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--out", str(out), "--epochs", "2", "--set", "train.checkpoint_every=1"] + TINY) == 0
    return out


@pytest.fixture(scope="module")
def image_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("img") / "scene.ppm"
    save_ppm(path, synth_generate(SynthConfig(), 42).image)
    return path


class TestParser:
    @pytest.mark.parametrize("cmd", ["synth", "train", "eval", "infer", "attn-export"])
    def test_help_lists_flags_with_defaults(self, cmd, capsys):
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for action in build_parser()._subparsers._group_actions[0].choices[cmd]._actions:
            for flag in action.option_strings:
                assert flag in text
        if cmd == "synth":
            assert "(default: 100)" in text

    def test_unknown_flag_rejected(self, capsys):
        assert main(["synth", "--out", "x", "--bogus"]) == 1
        assert "unrecognized arguments: --bogus" in capsys.readouterr().err

    def test_missing_command(self):
        assert main([]) == 1

    def test_bad_override_syntax(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--set", "nodot"]) == 1
        assert main(["synth", "--out", str(tmp_path), "--set", "model.unknown=3"]) == 1


class TestSynth:
    def test_outputs_and_determinism(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["synth", "--count", "100", "--seed", "7", "--out", str(a)]) == 0
        assert main(["synth", "--count", "100", "--seed", "7", "--out", str(b)]) == 0
        assert len(os.listdir(a / "images")) == 100
        assert sorted(os.listdir(a)) == ["annotations.txt", "images", "manifest.json"]
        assert (a / "annotations.txt").read_bytes() == (b / "annotations.txt").read_bytes()
        manifest = json.loads((a / "manifest.json").read_text())
        assert manifest["seed"] == 7 and manifest["synth"]["seed"] == 7 and manifest["count"] == 100
        assert len(read_dataset(a)) == 100

    def test_zero_count(self, tmp_path):
        assert main(["synth", "--count", "0", "--out", str(tmp_path / "z")]) == 1

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["synth", "--count", "2", "--out", str(blocker / "sub")]) == 2

    def test_unsatisfiable_placement(self, tmp_path):
        args = ["synth", "--count", "1", "--out", str(tmp_path / "p"), "--set", "synth.head_count=9,9",
                "--set", "synth.head_radius=0.3,0.3", "--set", "synth.max_retries=3"]
        assert main(args) == 2


class TestTrain:
    def test_artifacts(self, run_dir):
        names = sorted(os.listdir(run_dir))
        assert names == ["config.ini", "epoch0001.ckpt", "epoch0002.ckpt", "final.ckpt", "train_log.jsonl"]
        lines = [json.loads(x) for x in (run_dir / "train_log.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in lines] == [0, 1]
        for r in lines:
            assert {"bbox", "giou", "class", "inout", "gaze", "total", "seconds", "lr"} <= set(r)
        assert "d = 8" in (run_dir / "config.ini").read_text()

    def test_final_checkpoint_matches_last_epoch(self, run_dir):
        _, a, _ = load_checkpoint(run_dir / "final.ckpt")
        _, b, _ = load_checkpoint(run_dir / "epoch0002.ckpt")
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_fixed_seed_reproduces_log(self, run_dir, tmp_path):
        assert main(["train", "--out", str(tmp_path), "--epochs", "2"] + TINY) == 0
        strip = lambda p: [{k: v for k, v in json.loads(x).items() if k != "seconds"}  # noqa: E731
                           for x in p.read_text().splitlines()]
        assert strip(tmp_path / "train_log.jsonl") == strip(run_dir / "train_log.jsonl")
        _, a, _ = load_checkpoint(tmp_path / "final.ckpt")
        _, b, _ = load_checkpoint(run_dir / "final.ckpt")
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_from_dataset_dir(self, tmp_path):
        data = tmp_path / "data"
        assert main(["synth", "--count", "10", "--out", str(data)]) == 0
        assert main(["train", "--out", str(tmp_path / "r"), "--epochs", "1", "--data", str(data)] + TINY) == 0

    def test_missing_dataset(self, tmp_path):
        assert main(["train", "--out", str(tmp_path), "--epochs", "1", "--data", str(tmp_path / "none")] + TINY) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss(self, tmp_path, capsys):
        code = main(["train", "--out", str(tmp_path), "--epochs", "3", "--set", "optim.lr=1e300",
                     "--set", "optim.clip_norm=0"] + TINY)
        assert code == 3
        assert "loss term" in capsys.readouterr().err


class TestEval:
    def test_report_files_and_determinism(self, run_dir, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["eval", "--checkpoint", str(run_dir / "final.ckpt"), "--out", str(a)]) == 0
        assert main(["eval", "--checkpoint", str(run_dir / "final.ckpt"), "--out", str(b)]) == 0
        for name in ("metrics.txt", "metrics.json", "predictions.jsonl"):
            assert (a / name).read_bytes() == (b / name).read_bytes()
        text = (a / "metrics.txt").read_text()
        assert text.startswith("auc=") and "map=" in text and "n_images=6" in text
        assert len((a / "predictions.jsonl").read_text().splitlines()) == 6
        assert json.loads((a / "metrics.json").read_text())["config"]["model"]["d"] == 8

    def test_order_invariance(self, run_dir, tmp_path):
        samples = [synth_generate(SynthConfig(), i) for i in range(12)]
        write_dataset(tmp_path / "fwd", samples)
        write_dataset(tmp_path / "rev", samples[::-1])
        for name in ("fwd", "rev"):
            assert main(["eval", "--checkpoint", str(run_dir / "final.ckpt"), "--data", str(tmp_path / name),
                         "--out", str(tmp_path / f"o_{name}")]) == 0
        assert (tmp_path / "o_fwd" / "metrics.txt").read_text() == (tmp_path / "o_rev" / "metrics.txt").read_text()

    def test_config_mismatch_names_field(self, run_dir, tmp_path, capsys):
        code = main(["eval", "--checkpoint", str(run_dir / "final.ckpt"), "--out", str(tmp_path),
                     "--set", "model.d=16", "--set", "model.n_heads=2"])
        assert code == 1
        assert "model.d" in capsys.readouterr().err

    def test_missing_or_corrupt_checkpoint(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--out", str(tmp_path)]) == 2
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage!")
        assert main(["eval", "--checkpoint", str(bad), "--out", str(tmp_path)]) == 2


class TestEvalOracle:
    def test_ground_truth_as_predictions(self):
        cfg = build_config(environ={})
        samples = [synth_generate(cfg.synth, i) for i in range(8)]
        preds = []
        for s in samples:
            t = s.targets()
            n, N = len(t["boxes"]), 16
            boxes = np.tile([0.05, 0.05, 0.02, 0.02], (N, 1))
            boxes[:n] = t["boxes"]
            logits = np.full(N, -9.0)
            logits[:n] = 9.0
            gaze = np.full((N, 2), 0.5)
            gaze[:n] = t["gaze"]
            inout = np.full(N, -9.0)
            inout[:n] = np.where(t["inout"] > 0, 9.0, -9.0)
            preds.append({"boxes": boxes, "logits": logits, "scores": 1 / (1 + np.exp(-logits)),
                          "gaze": gaze, "inout": inout, "heatmaps": None})
        report = evaluate_records(build_records(preds, samples, cfg.match))
        assert report.map == 1.0 and report.head_ap == 1.0 and report.ap_inout == 1.0
        assert report.avg_dist == 0.0 and report.min_dist == 0.0 and report.gaze_l2 == 0.0


class TestInfer:
    def test_threshold_zero_keeps_all_queries(self, run_dir, image_path, tmp_path):
        out = tmp_path / "d.jsonl"
        assert main(["infer", "--checkpoint", str(run_dir / "final.ckpt"), "--image", str(image_path),
                     "--score-thresh", "0", "--output", str(out)]) == 0
        recs = [json.loads(x) for x in out.read_text().splitlines()]
        assert [r["query"] for r in recs] == [0, 1, 2, 3]
        for r in recs:
            assert set(r) == {"query", "box", "score", "gaze", "inout"}

    def test_threshold_one_is_empty(self, run_dir, image_path, capsys):
        assert main(["infer", "--checkpoint", str(run_dir / "final.ckpt"), "--image", str(image_path),
                     "--score-thresh", "1.0"]) == 0
        assert capsys.readouterr().out == ""

    def test_overlay_pixels_outside_primitives_unchanged(self, run_dir, image_path, tmp_path):
        overlay = tmp_path / "o.png"
        assert main(["infer", "--checkpoint", str(run_dir / "final.ckpt"), "--image", str(image_path),
                     "--score-thresh", "0", "--overlay", str(overlay), "--output", str(tmp_path / "d")]) == 0
        img = load_image(image_path)
        src = np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8)
        got = np.asarray(Image.open(overlay).convert("RGB"))
        dets = [json.loads(x) for x in (tmp_path / "d").read_text().splitlines()]
        _, drawn = render_overlay(img, dets)
        assert drawn.any()
        assert np.array_equal(got[~drawn], src[~drawn])
        assert np.all(got[drawn] == (0, 0, 255))

    def test_unreadable_image(self, run_dir, tmp_path):
        bad = tmp_path / "x.ppm"
        bad.write_text("not an image")
        assert main(["infer", "--checkpoint", str(run_dir / "final.ckpt"), "--image", str(bad)]) == 2
        assert main(["infer", "--checkpoint", str(run_dir / "final.ckpt"), "--image", str(tmp_path / "nope.ppm")]) == 2


class TestAttnExport:
    def test_maps(self, run_dir, image_path, tmp_path):
        assert main(["attn-export", "--checkpoint", str(run_dir / "final.ckpt"), "--image", str(image_path),
                     "--out", str(tmp_path), "--queries", "0,2", "--dump-raw"]) == 0
        assert sorted(os.listdir(tmp_path)) == ["attention.npz", "gaze_q000.pgm", "gaze_q002.pgm",
                                                "head_q000.pgm", "head_q002.pgm"]
        raw = np.load(tmp_path / "attention.npz")
        head, gaze = raw["head"], raw["gaze"]
        assert head.shape == gaze.shape == (2, 4, 8, 8)
        np.testing.assert_allclose(head.reshape(2, 4, -1).sum(-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(gaze.reshape(2, 4, -1).sum(-1), 1.0, atol=1e-12)
        for q in (0, 2):
            with Image.open(tmp_path / f"gaze_q{q:03d}.pgm") as im:
                assert im.mode == "L" and im.size == (8, 8)
                pix = np.asarray(im, dtype=np.float64)
            avg = gaze[:, q].mean(axis=0)
            per_head = sum(gaze[h, q] for h in range(2)) / 2
            assert np.abs(avg - per_head).max() < 1e-12
            expect = np.round((avg - avg.min()) / (avg.max() - avg.min()) * 255)
            np.testing.assert_array_equal(pix, expect)
        assert (tmp_path / "head_q000.pgm").read_bytes()[:2] == b"P5"

    def test_no_query_above_threshold(self, run_dir, image_path, tmp_path, caplog):
        out = tmp_path / "none"
        assert main(["attn-export", "--checkpoint", str(run_dir / "final.ckpt"), "--image", str(image_path),
                     "--out", str(out), "--score-thresh", "1.0"]) == 0
        assert not out.exists()
        assert "nothing exported" in caplog.text

    def test_bad_query_index(self, run_dir, image_path, tmp_path):
        assert main(["attn-export", "--checkpoint", str(run_dir / "final.ckpt"), "--image", str(image_path),
                     "--out", str(tmp_path), "--queries", "9"]) == 1
        assert main(["attn-export", "--checkpoint", str(run_dir / "final.ckpt"), "--image", str(image_path),
                     "--out", str(tmp_path), "--queries", "a"]) == 1
