"""End-to-end runs of every subcommand in temp directories."""

import numpy as np
import pytest

from getam.cli import main
from getam.data import load_dataset
from getam.gtt import read_tensor
from getam.labels import read_label_png
from getam.vit import ModelConfig, VisionTransformer


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    """Small dataset plus a lightly trained checkpoint, shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "data"
    assert main(["gen-data", "--out", str(data_dir), "--n-images", "8",
                 "--classes", "3", "--seed", "4",
                 "--nonsalient-fraction", "0.25"]) == 0
    train_dir = root / "run"
    assert main(["train", "--dataset", str(data_dir), "--out", str(train_dir),
                 "--epochs", "2", "--phase1-epochs", "1", "--seed", "3",
                 "--embed-dim", "8", "--depth", "1", "--heads", "1",
                 "--pamr-iters", "2"]) == 0
    return root, data_dir, train_dir / "checkpoint"


class TestGenData:
    def test_layout(self, world):
        _, data_dir, _ = world
        for sub in ("images", "masks", "saliency"):
            assert (data_dir / sub).exists()
        assert (data_dir / "labels.csv").exists()
        assert len(load_dataset(data_dir)) == 8

    def test_deterministic(self, tmp_path):
        for name in ("a", "b"):
            assert main(["gen-data", "--out", str(tmp_path / name),
                         "--n-images", "3", "--classes", "2", "--seed", "9"]) == 0
        a = (tmp_path / "a" / "images" / "img0000.png").read_bytes()
        b = (tmp_path / "b" / "images" / "img0000.png").read_bytes()
        assert a == b


class TestTrain:
    def test_outputs_exist(self, world):
        root, _, ckpt = world
        assert (ckpt / "manifest.txt").exists()
        metrics = (root / "run" / "metrics.csv").read_text().splitlines()
        assert metrics[0] == "epoch,iter,l_cls,l_seg,l_sal,total,pseudo_miou"
        assert len(metrics) == 1 + 2 * 8


class TestAttribute:
    def test_writes_maps_and_pngs(self, world, tmp_path):
        _, data_dir, ckpt = world
        out = tmp_path / "maps"
        assert main(["attribute", "--dataset", str(data_dir),
                     "--checkpoint", str(ckpt), "--out", str(out),
                     "--method", "getam", "--limit", "3"]) == 0
        gtts = sorted(out.glob("*_getam.gtt"))
        assert gtts
        for path in gtts:
            arr = read_tensor(path)
            assert arr.min() >= 0 and arr.max() <= 1.0
            assert path.with_suffix(".png").exists()

    def test_zero_init_head_gives_zero_maps(self, world, tmp_path):
        _, data_dir, _ = world
        model = VisionTransformer(
            ModelConfig(image_size=32, patch_size=8, d=8, L=1, heads=1, C=3),
            seed=0)
        model.params["cls_head_w"].data[...] = 0.0
        model.params["cls_head_b"].data[...] = 0.0
        ckpt = tmp_path / "zero_ckpt"
        model.save_checkpoint(ckpt)
        out = tmp_path / "maps"
        assert main(["attribute", "--dataset", str(data_dir),
                     "--checkpoint", str(ckpt), "--out", str(out),
                     "--method", "getam", "--limit", "2"]) == 0
        for path in out.glob("*.gtt"):
            np.testing.assert_array_equal(read_tensor(path), 0.0)

    def test_deterministic_bytes(self, world, tmp_path):
        _, data_dir, ckpt = world
        blobs = []
        for name in ("m1", "m2"):
            out = tmp_path / name
            assert main(["attribute", "--dataset", str(data_dir),
                         "--checkpoint", str(ckpt), "--out", str(out),
                         "--method", "gradcam", "--limit", "2",
                         "--seed", "1"]) == 0
            blobs.append(b"".join(p.read_bytes()
                                  for p in sorted(out.glob("*.gtt"))))
        assert blobs[0] == blobs[1]


class TestPseudoLabel:
    def test_alpha_one_mines_nothing(self, world, tmp_path):
        _, data_dir, ckpt = world
        samples = {s.image_id: s for s in load_dataset(data_dir)}
        outs = {}
        for alpha in ("1.0", "0.9"):
            out = tmp_path / f"pl{alpha}"
            assert main(["pseudo-label", "--dataset", str(data_dir),
                         "--checkpoint", str(ckpt), "--out", str(out),
                         "--alpha", alpha, "--pamr-iters", "2"]) == 0
            outs[alpha] = out
        for image_id, sample in samples.items():
            strict = read_label_png(outs["1.0"] / f"{image_id}.png")
            nonsal = sample.saliency == 0
            fg = (strict > 0) & (strict != 255)
            assert not (fg & nonsal).any()

    def test_intermediate_dumps(self, world, tmp_path):
        _, data_dir, ckpt = world
        out = tmp_path / "pl"
        assert main(["pseudo-label", "--dataset", str(data_dir),
                     "--checkpoint", str(ckpt), "--out", str(out),
                     "--limit", "2", "--dump-intermediate",
                     "--pamr-iters", "2"]) == 0
        assert list(out.glob("*_premining.png"))
        assert list(out.glob("*_postmining.png"))


class TestEvalViz:
    def test_eval_writes_report(self, world, tmp_path):
        _, data_dir, ckpt = world
        pl = tmp_path / "pl"
        assert main(["pseudo-label", "--dataset", str(data_dir),
                     "--checkpoint", str(ckpt), "--out", str(pl),
                     "--pamr-iters", "2"]) == 0
        out = tmp_path / "report"
        assert main(["eval", "--dataset", str(data_dir), "--pred", str(pl),
                     "--out", str(out)]) == 0
        lines = (out / "miou.csv").read_text().splitlines()
        assert lines[0] == "image_id,miou,defined"
        assert lines[-1].startswith("mean,")

    def test_viz_reads_only(self, world, tmp_path):
        _, data_dir, ckpt = world
        maps = tmp_path / "maps"
        assert main(["attribute", "--dataset", str(data_dir),
                     "--checkpoint", str(ckpt), "--out", str(maps),
                     "--limit", "3"]) == 0
        before = {p.name: p.read_bytes() for p in maps.iterdir()}
        out = tmp_path / "viz"
        assert main(["viz", "--dataset", str(data_dir), "--maps", str(maps),
                     "--out", str(out)]) == 0
        assert (out / "distribution.png").exists()
        assert list(out.glob("*_overlay.png"))
        after = {p.name: p.read_bytes() for p in maps.iterdir()}
        assert before == after


class TestGradcheckCommand:
    def test_passes_with_exit_zero(self, capsys):
        assert main(["gradcheck", "--seed", "7"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out
        assert "resolved config" in out


class TestErrorHandling:
    def test_missing_dataset_is_validation_error(self, tmp_path, capsys):
        code = main(["train", "--dataset", str(tmp_path / "nope"),
                     "--out", str(tmp_path)])
        assert code == 1
        assert "does not exist" in capsys.readouterr().err

    def test_unknown_flag_rejected(self, capsys):
        assert main(["gen-data", "--does-not-exist", "1"]) == 1

    def test_config_file_defaults(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("n-images = 2\nclasses = 2\n")
        assert main(["gen-data", "--config", str(cfg),
                     "--out", str(tmp_path / "d"), "--seed", "1"]) == 0
        assert "n_images=2" in capsys.readouterr().out
        assert len(load_dataset(tmp_path / "d")) == 2

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("bogus-key = 3\n")
        assert main(["gen-data", "--config", str(cfg),
                     "--out", str(tmp_path / "d")]) == 1
        assert "bogus" in capsys.readouterr().err

    def test_partial_outputs_removed_on_failure(self, world, tmp_path, capsys):
        _, data_dir, ckpt = world
        out = tmp_path / "maps"
        # a label referencing a class the model lacks fails the run midway,
        # after maps for earlier images were already written
        bad_data = tmp_path / "bad_data"
        import shutil
        shutil.copytree(data_dir, bad_data)
        lines = (bad_data / "labels.csv").read_text().splitlines()
        lines[4] = lines[4].rsplit(",", 1)[0] + ',"9"'
        (bad_data / "labels.csv").write_text("\n".join(lines) + "\n")
        code = main(["attribute", "--dataset", str(bad_data),
                     "--checkpoint", str(ckpt), "--out", str(out)])
        assert code == 1
        assert not out.exists() or not any(out.iterdir())

    def test_cleanup_guard_removes_new_files_only(self, tmp_path):
        from getam.cli import _cleanup_on_failure
        out = tmp_path / "out"
        out.mkdir()
        keeper = out / "existing.txt"
        keeper.write_text("keep me")
        with pytest.raises(RuntimeError):
            with _cleanup_on_failure(out):
                (out / "sub").mkdir()
                (out / "sub" / "partial.bin").write_bytes(b"x")
                (out / "partial.txt").write_text("y")
                raise RuntimeError("boom")
        assert keeper.read_text() == "keep me"
        assert not (out / "partial.txt").exists()
        assert not (out / "sub").exists()

    def test_cleanup_guard_removes_created_dir(self, tmp_path):
        from getam.cli import _cleanup_on_failure
        out = tmp_path / "fresh"
        with pytest.raises(RuntimeError):
            with _cleanup_on_failure(out):
                out.mkdir()
                (out / "a.txt").write_text("a")
                raise RuntimeError("boom")
        assert not out.exists()
