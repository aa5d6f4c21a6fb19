"""End-to-end checks of the command-line surface.

Everything goes through cli.main(argv) directly so exit codes and
printed output are observable without spawning subprocesses.
"""

import numpy as np
import pytest
from PIL import Image

from sealand.cli import build_parser, main, resolve_train_settings
from sealand.data import read_manifest
from sealand.train import read_records

TINY_TRAIN = [
    "--depth", "1", "--wide", "4", "--narrow", "2",
    "--tile", "16", "--batch", "2", "--steps", "4",
    "--lr", "0.05", "--seed", "3",
    "--eval-every", "2", "--checkpoint-every", "2",
    "--samples-per-image", "4",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic two-image set plus one short training run."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    run = root / "run"
    assert main(["synth", "--out", str(data), "--count", "2",
                 "--extent", "64", "--seed", "5"]) == 0
    assert main(["train", "--manifest", str(data / "manifest.tsv"),
                 "--out", str(run), *TINY_TRAIN]) == 0
    return root


class TestParsing:
    def test_no_arguments_is_a_usage_error(self, capsys):
        assert main([]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag_is_a_usage_error(self, capsys):
        assert main(["rf", "--bogus", "3"]) == 1
        assert "usage error" in capsys.readouterr().err

    def test_missing_required_flag_is_a_usage_error(self, capsys):
        assert main(["synth", "--count", "2"]) == 1
        capsys.readouterr()

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "synth" in capsys.readouterr().out

    def test_subcommand_help_exits_zero(self, capsys):
        assert main(["train", "--help"]) == 0
        capsys.readouterr()


class TestSettings:
    def parse(self, extra):
        return build_parser().parse_args(["train", "--manifest", "m", "--out", "o", *extra])

    def test_defaults_are_full_scale(self):
        mc, tc = resolve_train_settings(self.parse([]))
        assert (mc.depth, mc.wide, mc.narrow, mc.plus) == (7, 64, 32, True)
        assert (tc.total_steps, tc.batch_size, tc.tile_size) == (10000, 11, 640)
        assert (tc.base_lr, tc.momentum) == (0.1, 0.9)

    def test_desk_preset_shrinks_everything(self):
        mc, tc = resolve_train_settings(self.parse(["--desk"]))
        assert (mc.depth, mc.wide, mc.narrow) == (4, 16, 8)
        assert (tc.total_steps, tc.tile_size, tc.batch_size) == (2000, 64, 8)
        assert tc.base_lr == pytest.approx(1e-3)

    def test_config_file_overrides_preset(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("tile = 32  # small\nlr = 0.02\n")
        mc, tc = resolve_train_settings(self.parse(["--desk", "--config", str(cfg)]))
        assert tc.tile_size == 32
        assert tc.base_lr == pytest.approx(0.02)
        assert tc.total_steps == 2000  # untouched desk value survives

    def test_flag_overrides_config_file(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("tile=32\n")
        _, tc = resolve_train_settings(self.parse(["--config", str(cfg), "--tile", "128"]))
        assert tc.tile_size == 128

    def test_unknown_config_key_is_a_usage_error(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("wat=1\n")
        assert main(["train", "--manifest", "m", "--out", "o", "--config", str(cfg)]) == 1
        assert "unknown setting" in capsys.readouterr().err

    def test_no_plus_flag_reaches_the_model_config(self):
        mc, _ = resolve_train_settings(self.parse(["--no-plus"]))
        assert mc.plus is False


class TestSynth:
    def test_writes_images_and_manifest(self, workspace):
        data = workspace / "data"
        assert (data / "img_000.png").exists()
        assert (data / "img_001_mask.png").exists()
        manifest = read_manifest(data / "manifest.tsv")
        assert len(manifest) == 2

    def test_same_seed_gives_identical_pixels(self, tmp_path):
        for sub in ("a", "b"):
            assert main(["synth", "--out", str(tmp_path / sub), "--count", "1",
                         "--extent", "64", "--seed", "9"]) == 0
        a = np.asarray(Image.open(tmp_path / "a" / "img_000.png"))
        b = np.asarray(Image.open(tmp_path / "b" / "img_000.png"))
        assert np.array_equal(a, b)

    def test_seed_appears_in_manifest_header(self, workspace):
        text = (workspace / "data" / "manifest.tsv").read_text()
        assert "seed=5" in text


class TestTrain:
    def test_run_leaves_checkpoints_and_log(self, workspace):
        run = workspace / "run"
        assert (run / "final.ckpt").exists()
        assert (run / "ckpt_000002.ckpt").exists()
        log = (run / "train_log.tsv").read_text()
        assert "ModelConfig" in log and "TrainConfig" in log

    def test_prints_resolved_config_header(self, workspace, capsys, tmp_path):
        data = workspace / "data"
        assert main(["train", "--manifest", str(data / "manifest.tsv"),
                     "--out", str(tmp_path), *TINY_TRAIN]) == 0
        out = capsys.readouterr().out
        assert "ModelConfig(depth=1" in out
        assert "seed=3" in out

    def test_resume_from_midpoint_checkpoint(self, workspace, tmp_path, capsys):
        data = workspace / "data"
        run = workspace / "run"
        assert main(["train", "--manifest", str(data / "manifest.tsv"),
                     "--out", str(tmp_path), *TINY_TRAIN,
                     "--resume", str(run / "ckpt_000002.ckpt")]) == 0
        capsys.readouterr()
        resumed = (tmp_path / "final.ckpt").read_bytes()
        straight = (run / "final.ckpt").read_bytes()
        assert resumed == straight

    def test_missing_manifest_is_a_runtime_error(self, tmp_path, capsys):
        assert main(["train", "--manifest", str(tmp_path / "nope.tsv"),
                     "--out", str(tmp_path / "r"), *TINY_TRAIN]) == 2
        assert "error" in capsys.readouterr().err


class TestPredict:
    def test_writes_binary_mask(self, workspace, tmp_path, capsys):
        out = tmp_path / "mask.png"
        assert main(["predict", "--ckpt", str(workspace / "run" / "final.ckpt"),
                     "--image", str(workspace / "data" / "img_000.png"),
                     "--out", str(out), "--tile", "16"]) == 0
        capsys.readouterr()
        mask = np.asarray(Image.open(out))
        assert mask.shape == (64, 64)
        assert set(np.unique(mask)) <= {0, 255}

    def test_probs_dump_round_trips(self, workspace, tmp_path, capsys):
        probs_path = tmp_path / "probs.bin"
        assert main(["predict", "--ckpt", str(workspace / "run" / "final.ckpt"),
                     "--image", str(workspace / "data" / "img_000.png"),
                     "--out", str(tmp_path / "m.png"), "--tile", "16",
                     "--probs", str(probs_path)]) == 0
        capsys.readouterr()
        meta, records = read_records(probs_path)
        assert meta["kind"] == "probability_map"
        assert meta["step"] == 4
        probs = records["probs"]
        assert probs.shape == (2, 64, 64)
        assert np.allclose(probs.sum(axis=0), 1.0, atol=1e-5)

    def test_missing_checkpoint_is_a_runtime_error(self, workspace, tmp_path, capsys):
        assert main(["predict", "--ckpt", str(tmp_path / "nope.ckpt"),
                     "--image", str(workspace / "data" / "img_000.png"),
                     "--out", str(tmp_path / "m.png")]) == 2
        capsys.readouterr()

    def test_no_plus_contradicting_checkpoint_is_rejected(self, workspace, tmp_path, capsys):
        rc = main(["predict", "--ckpt", str(workspace / "run" / "final.ckpt"),
                   "--image", str(workspace / "data" / "img_000.png"),
                   "--out", str(tmp_path / "m.png"), "--tile", "16", "--no-plus"])
        assert rc == 2
        assert "--no-plus" in capsys.readouterr().err

    def test_header_reports_checkpoint_and_seed(self, workspace, tmp_path, capsys):
        assert main(["predict", "--ckpt", str(workspace / "run" / "final.ckpt"),
                     "--image", str(workspace / "data" / "img_000.png"),
                     "--out", str(tmp_path / "m.png"), "--tile", "16"]) == 0
        out = capsys.readouterr().out
        assert "seed=3" in out and "step=4" in out


class TestEvaluate:
    def test_writes_table_and_json(self, workspace, tmp_path, capsys):
        report = tmp_path / "report.txt"
        blob = tmp_path / "report.json"
        assert main(["evaluate", "--ckpt", str(workspace / "run" / "final.ckpt"),
                     "--manifest", str(workspace / "data" / "manifest.tsv"),
                     "--out", str(report), "--json", str(blob), "--tile", "16"]) == 0
        out = capsys.readouterr().out
        assert "overall" in out
        text = report.read_text()
        assert "img_000.png" in text and "img_001.png" in text
        assert '"overall"' in blob.read_text()

    def test_missing_manifest_is_a_runtime_error(self, workspace, tmp_path, capsys):
        assert main(["evaluate", "--ckpt", str(workspace / "run" / "final.ckpt"),
                     "--manifest", str(tmp_path / "nope.tsv")]) == 2
        capsys.readouterr()


class TestGradcheck:
    def test_passes_on_a_small_model(self, capsys):
        rc = main(["gradcheck", "--depth", "1", "--size", "8",
                   "--wide", "4", "--narrow", "2"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "max relative error" in out

    def test_indivisible_size_is_a_runtime_error(self, capsys):
        assert main(["gradcheck", "--depth", "2", "--size", "10"]) == 2
        capsys.readouterr()


class TestRf:
    def test_depth_seven_reports_mismatch_against_reference(self, capsys):
        assert main(["rf", "--depth", "7", "--tile", "640"]) == 0
        out = capsys.readouterr().out
        assert "1150" in out
        assert "4220" in out and "MISMATCH" in out
        assert "5 px" in out  # innermost feature extent for a 640 tile

    def test_matching_comparison_says_match(self, capsys):
        assert main(["rf", "--depth", "2", "--compare", "30"]) == 0
        assert "MATCH" in capsys.readouterr().out

    def test_shallow_depth_has_no_default_comparison(self, capsys):
        assert main(["rf", "--depth", "3"]) == 0
        out = capsys.readouterr().out
        assert "70" in out and "4220" not in out
