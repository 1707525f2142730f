"""End-to-end CLI runs on tiny scenes: gen, train, render, eval."""

import json
from pathlib import Path

import pytest

from meshsplat.checkpoint import load_checkpoint
from meshsplat.cli import main, scene_spec_from_text
from meshsplat.errors import ConfigError

TINY_SPEC = """
schema_version = 1
body = chain
segments = 3
image_size = 48
train_frames = 3
test_frames = 2
fuzz_count = 2
fuzz_regions = seg2
texture_resolution = 32
seed = 5
"""

TINY_CONFIG = """
schema_version = 1
seed = 5
iters_stage1 = 4
iters_stage2 = 3
iters_stage3 = 4
batch_size = 2
texture_resolution = 32
knn_k = 3
knn_refresh = 2
"""


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "scene.spec"
    spec.write_text(TINY_SPEC)
    out = root / "ds"
    assert main(["gen", "--spec", str(spec), "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained_dir(dataset_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "train.cfg"
    cfg.write_text(TINY_CONFIG)
    out = root / "train"
    code = main(["train", "--dataset", str(dataset_dir), "--config", str(cfg), "--out", str(out)])
    assert code == 0
    return out


class TestGen:
    def test_manifest_written(self, dataset_dir):
        assert (dataset_dir / "run_manifest.json").exists()
        assert (dataset_dir / "manifest.json").exists()
        assert len(list((dataset_dir / "frames").glob("*.png"))) == 5

    def test_same_spec_identical_bytes(self, dataset_dir, tmp_path):
        spec = tmp_path / "scene.spec"
        spec.write_text(TINY_SPEC)
        out2 = tmp_path / "ds2"
        assert main(["gen", "--spec", str(spec), "--out", str(out2)]) == 0
        for p1 in sorted(dataset_dir.rglob("*.png")):
            p2 = out2 / p1.relative_to(dataset_dir)
            assert p1.read_bytes() == p2.read_bytes()
        assert (dataset_dir / "manifest.json").read_text() == (out2 / "manifest.json").read_text()

    def test_malformed_spec_names_key(self, tmp_path, capsys):
        spec = tmp_path / "bad.spec"
        spec.write_text("schema_version = 1\nimage_sizee = 64\n")
        assert main(["gen", "--spec", str(spec), "--out", str(tmp_path / "o")]) == 2
        assert "image_sizee" in capsys.readouterr().err

    def test_spec_parse_regions(self):
        spec = scene_spec_from_text("schema_version = 1\nfuzz_regions = head, torso\n")
        assert spec.fuzz_regions == ("head", "torso")


class TestTrain:
    def test_outputs_present(self, trained_dir):
        assert (trained_dir / "checkpoint.bin").exists()
        assert (trained_dir / "checkpoint_stage3.bin").exists()
        assert (trained_dir / "train_log.jsonl").exists()
        manifest = json.loads((trained_dir / "run_manifest.json").read_text())
        assert manifest["command"] == "train"
        assert "report" in manifest

    def test_log_lines_structured(self, trained_dir):
        lines = (trained_dir / "train_log.jsonl").read_text().splitlines()
        assert len(lines) == 4 + 3 + 4
        entry = json.loads(lines[0])
        assert entry["stage"] == 1
        assert "l2" in entry and "total" in entry

    def test_previews_written(self, trained_dir):
        previews = list((trained_dir / "previews").glob("*.png"))
        # five maps per preview point, at least first and last of each stage
        assert len(previews) >= 5

    def test_stage1_only_tag(self, dataset_dir, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(TINY_CONFIG)
        out = tmp_path / "s1"
        assert main(["train", "--dataset", str(dataset_dir), "--config", str(cfg),
                     "--out", str(out), "--stages", "1"]) == 0
        ckpt = load_checkpoint(out / "checkpoint.bin")
        assert ckpt.stage == 1
        assert float((ckpt.texture.texels - 0.5).abs().max()) == 0.0

    def test_resume_between_stages(self, dataset_dir, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(TINY_CONFIG)
        full = tmp_path / "full"
        assert main(["train", "--dataset", str(dataset_dir), "--config", str(cfg), "--out", str(full)]) == 0
        part = tmp_path / "part"
        assert main(["train", "--dataset", str(dataset_dir), "--config", str(cfg),
                     "--out", str(part), "--stages", "1"]) == 0
        assert main(["train", "--dataset", str(dataset_dir), "--config", str(cfg),
                     "--out", str(part), "--resume", str(part / "checkpoint.bin")]) == 0
        assert (full / "checkpoint.bin").read_bytes() == (part / "checkpoint.bin").read_bytes()

    def test_echo_config_prints_defaults(self, dataset_dir, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(TINY_CONFIG)
        out = tmp_path / "echo"
        main(["train", "--dataset", str(dataset_dir), "--config", str(cfg),
              "--out", str(out), "--stages", "1", "--echo-config"])
        text = capsys.readouterr().out
        assert "lambda_ssim = 0.1" in text
        assert "lambda_sobel = 1.0" in text
        assert "lambda_knn = 0.01" in text
        assert "lambda_tv = 0.01" in text
        assert "lambda_opacity = 0.001" in text
        assert "lambda_dice = 0.1" in text

    def test_unknown_config_key_exits_2(self, dataset_dir, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("schema_version = 1\nlambda_ssimm = 0.2\n")
        code = main(["train", "--dataset", str(dataset_dir), "--config", str(cfg),
                     "--out", str(tmp_path / "o")])
        assert code == 2
        assert "lambda_ssimm" in capsys.readouterr().err


class TestRender:
    def test_render_frames(self, dataset_dir, trained_dir, tmp_path):
        out = tmp_path / "renders"
        assert main(["render", "--checkpoint", str(trained_dir / "checkpoint.bin"),
                     "--dataset", str(dataset_dir), "--out", str(out),
                     "--mode", "hybrid", "--split", "test"]) == 0
        assert len(list(out.glob("*.png"))) == 2
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["mode"] == "hybrid"

    def test_refine_zero_matches_no_flag(self, dataset_dir, trained_dir, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        base = ["render", "--checkpoint", str(trained_dir / "checkpoint.bin"),
                "--dataset", str(dataset_dir), "--mode", "mesh_only", "--split", "test"]
        assert main(base + ["--out", str(out1)]) == 0
        assert main(base + ["--out", str(out2), "--refine-pose", "0"]) == 0
        for p1 in sorted(out1.glob("*.png")):
            assert p1.read_bytes() == (out2 / p1.name).read_bytes()

    def test_missing_checkpoint_exits_2(self, dataset_dir, tmp_path):
        assert main(["render", "--checkpoint", str(tmp_path / "nope.bin"),
                     "--dataset", str(dataset_dir), "--out", str(tmp_path / "o")]) == 2


class TestEval:
    def test_eval_writes_metrics(self, dataset_dir, trained_dir, tmp_path):
        out = tmp_path / "eval"
        assert main(["eval", "--checkpoint", str(trained_dir / "checkpoint.bin"),
                     "--dataset", str(dataset_dir), "--split", "train", "--out", str(out)]) == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["gaussian_count"] >= 0
        assert len(metrics["per_frame"]) == 3

    def test_eval_deterministic(self, dataset_dir, trained_dir, tmp_path):
        outs = []
        for name in ("e1", "e2"):
            out = tmp_path / name
            assert main(["eval", "--checkpoint", str(trained_dir / "checkpoint.bin"),
                         "--dataset", str(dataset_dir), "--split", "train", "--out", str(out)]) == 0
            m = json.loads((out / "metrics.json").read_text())
            m.pop("wall_clock_sec")
            outs.append(json.dumps(m, sort_keys=True))
        assert outs[0] == outs[1]

    def test_usage_error_exit_code(self):
        assert main(["eval"]) == 1
