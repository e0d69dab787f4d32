import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from satrefine import cli, features, imageops
from satrefine.trainer import SampleSet


def tree_digest(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest.update(path.name.encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


def write_gray_png(path, value, size):
    patch = imageops.ImagePatch(pixels=np.full(size + (1,), value, np.float32))
    imageops.save_image(path, patch)


def write_sprite_png(path, size, color=(255, 40, 40)):
    from PIL import Image

    rgba = np.zeros(size + (4,), dtype=np.uint8)
    rgba[..., 0], rgba[..., 1], rgba[..., 2] = color
    rgba[..., 3] = 255
    Image.fromarray(rgba, mode="RGBA").save(path)


class TestGenToy:
    def test_seeded_runs_are_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["gen-toy", "--out", str(a), "--count", "6", "--seed", "7"]) == 0
        assert cli.main(["gen-toy", "--out", str(b), "--count", "6", "--seed", "7"]) == 0
        assert tree_digest(a) == tree_digest(b)

    def test_different_seeds_differ(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        cli.main(["gen-toy", "--out", str(a), "--count", "4", "--seed", "1"])
        cli.main(["gen-toy", "--out", str(b), "--count", "4", "--seed", "2"])
        assert tree_digest(a) != tree_digest(b)

    def test_pixel_range_and_layout(self, tmp_path):
        cli.main(["gen-toy", "--out", str(tmp_path / "t"), "--count", "3", "--seed", "0"])
        for sub in ("source", "target"):
            files = sorted((tmp_path / "t" / sub).glob("*.png"))
            assert len(files) == 3
            for f in files:
                patch = imageops.load_image(f)
                assert patch.pixels.min() >= 0.0 and patch.pixels.max() <= 1.0

    def test_target_has_texture_source_is_flat(self, tmp_path):
        cli.main(["gen-toy", "--out", str(tmp_path / "t"), "--count", "5", "--seed", "3"])
        def field_std(sub):
            stds = []
            for f in sorted((tmp_path / "t" / sub).glob("*.png")):
                px = imageops.load_image(f).pixels[:, :, 0]
                corner = px[:6, :6]  # background corner, usually object-free
                stds.append(corner.std())
            return np.median(stds)
        assert field_std("target") > 4 * field_std("source")


class TestCompose:
    def make_inputs(self, tmp_path, bg_size=(10, 10), sprite_size=(4, 4)):
        bg_dir, sprite_dir = tmp_path / "bg", tmp_path / "sp"
        bg_dir.mkdir()
        sprite_dir.mkdir()
        write_gray_png(bg_dir / "bg.png", 0.4, bg_size)
        write_sprite_png(sprite_dir / "plane.png", sprite_size)
        return bg_dir, sprite_dir

    def test_manifest_determinism(self, tmp_path):
        bg, sp = self.make_inputs(tmp_path)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        for out in (out_a, out_b):
            code = cli.main(["compose", "--bg", str(bg), "--sprites", str(sp),
                             "--out", str(out), "--count", "6", "--seed", "5"])
            assert code == 0
        assert (out_a / "manifest.json").read_bytes() == (out_b / "manifest.json").read_bytes()
        assert tree_digest(out_a) == tree_digest(out_b)

    def test_placements_stay_inside_valid_grid(self, tmp_path):
        bg, sp = self.make_inputs(tmp_path)
        out = tmp_path / "out"
        assert cli.main(["compose", "--bg", str(bg), "--sprites", str(sp),
                         "--out", str(out), "--count", "10", "--seed", "2"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest) == 10
        background = imageops.load_image(next(iter(Path(bg).glob("*.png"))))
        sprite = imageops.load_sprite(next(iter(Path(sp).glob("*.png"))))
        valid = {(p.x, p.y) for p in imageops.enumerate_placements(background, sprite)}
        assert valid == {(x, y) for x in range(7) for y in range(7)}
        for entry in manifest:
            assert 0 <= entry["x"] <= 6 and 0 <= entry["y"] <= 6

    def test_count_zero_writes_empty_manifest(self, tmp_path):
        out = tmp_path / "out"
        code = cli.main(["compose", "--bg", str(tmp_path / "nonexistent"),
                         "--sprites", str(tmp_path / "nope"),
                         "--out", str(out), "--count", "0", "--seed", "0"])
        assert code == 0
        assert json.loads((out / "manifest.json").read_text()) == []

    def test_unplaceable_sprite_exits_2(self, tmp_path):
        bg, sp = self.make_inputs(tmp_path, bg_size=(10, 10), sprite_size=(12, 12))
        code = cli.main(["compose", "--bg", str(bg), "--sprites", str(sp),
                         "--out", str(tmp_path / "o"), "--count", "1", "--seed", "0"])
        assert code == 2


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as err:
            cli.main(["gen-toy", "--bogus"])
        assert err.value.code == 1

    def test_missing_command_is_usage_error(self):
        with pytest.raises(SystemExit) as err:
            cli.main([])
        assert err.value.code == 1

    def test_missing_input_dir_is_exit_2(self, tmp_path):
        code = cli.main(["train", "--source", str(tmp_path / "none"),
                         "--real", str(tmp_path / "none2"),
                         "--out", str(tmp_path / "o"), "--steps", "1"])
        assert code == 2

    def test_corrupt_feature_file_is_exit_2(self, tmp_path):
        bad = tmp_path / "bad.srft"
        bad.write_bytes(b"XXXX")
        code = cli.main(["eval-mmd", "--synthetic", str(bad), "--refined", str(bad),
                         "--real", str(bad), "--out", str(tmp_path / "r.json")])
        assert code == 2


class TestEvalMmd:
    def test_three_copies_give_exact_zero_linear(self, tmp_path):
        rng = np.random.default_rng(4)
        fs = features.FeatureSet(role="X", matrix=rng.normal(size=(10, 8)).astype(np.float32))
        feat = tmp_path / "same.srft"
        features.write_feat(feat, fs)
        report = tmp_path / "report.json"
        code = cli.main(["eval-mmd", "--synthetic", str(feat), "--refined", str(feat),
                         "--real", str(feat), "--out", str(report)])
        assert code == 0
        payload = json.loads(report.read_text())
        assert len(payload["pairs"]) == 3
        for entry in payload["pairs"]:
            assert entry["estimator"] == "linear-unbiased"
            assert entry["mmd2"] == 0.0

    def test_quadratic_and_subsample(self, tmp_path):
        rng = np.random.default_rng(5)
        x = features.FeatureSet(role="X", matrix=rng.normal(size=(20, 4)).astype(np.float32))
        y = features.FeatureSet(role="Y", matrix=rng.normal(loc=1.0, size=(30, 4)).astype(np.float32))
        fx, fy = tmp_path / "x.srft", tmp_path / "y.srft"
        features.write_feat(fx, x)
        features.write_feat(fy, y)
        report = tmp_path / "r.json"
        code = cli.main(["eval-mmd", "--synthetic", str(fx), "--refined", str(fx),
                         "--real", str(fy), "--out", str(report),
                         "--estimator", "quadratic", "--subsample", "20",
                         "--subsample-seed", "1"])
        assert code == 0
        payload = json.loads(report.read_text())
        assert {p["estimator"] for p in payload["pairs"]} == {"quadratic-unbiased"}

    def test_directory_inputs_use_fallback_features(self, tmp_path):
        out = tmp_path / "toy"
        cli.main(["gen-toy", "--out", str(out), "--count", "6", "--seed", "1"])
        report = tmp_path / "rep.json"
        code = cli.main(["eval-mmd", "--synthetic", str(out / "source"),
                         "--refined", str(out / "source"),
                         "--real", str(out / "target"), "--out", str(report)])
        assert code == 0
        payload = json.loads(report.read_text())
        assert payload["pairs"][0]["mmd2"] == 0.0  # identical directories


class TestTrainRefine:
    def test_train_is_deterministic_and_refine_runs(self, tmp_path):
        toy = tmp_path / "toy"
        cli.main(["gen-toy", "--out", str(toy), "--count", "6", "--seed", "2"])
        args = ["train", "--source", str(toy / "source"), "--real", str(toy / "target"),
                "--steps", "8", "--seed", "3", "--log-every", "1"]
        assert cli.main(args + ["--out", str(tmp_path / "runA")]) == 0
        assert cli.main(args + ["--out", str(tmp_path / "runB")]) == 0
        assert tree_digest(tmp_path / "runA") == tree_digest(tmp_path / "runB")

        code = cli.main(["refine", "--checkpoint", str(tmp_path / "runA" / "checkpoint.srck"),
                         "--in", str(toy / "source"), "--out", str(tmp_path / "refined")])
        assert code == 0
        assert len(list((tmp_path / "refined").glob("*.png"))) == 6


class TestEvalTsne:
    def test_writes_csv_and_set_means(self, tmp_path):
        rng = np.random.default_rng(6)
        paths = {}
        for name, loc in (("x", 0.0), ("xh", 0.5), ("y", 1.0)):
            fs = features.FeatureSet(role=name, matrix=rng.normal(loc=loc, size=(12, 6)).astype(np.float32))
            paths[name] = tmp_path / f"{name}.srft"
            features.write_feat(paths[name], fs)
        csv_path, json_path = tmp_path / "emb.csv", tmp_path / "sum.json"
        code = cli.main(["eval-tsne", "--synthetic", str(paths["x"]),
                         "--refined", str(paths["xh"]), "--real", str(paths["y"]),
                         "--out-csv", str(csv_path), "--out-json", str(json_path),
                         "--perplexity", "8", "--iterations", "150", "--seed", "4"])
        assert code == 0
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "index,label,y1,y2"
        assert len(lines) == 37
        summary = json.loads(json_path.read_text())
        assert set(summary["set_means"]) == {"X", "Xhat", "Ytil"}
        assert summary["iterations"] == 150


class TestConfigFile:
    def test_config_supplies_defaults_and_flags_win(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("count=4\nseed=9\n")
        out_a = tmp_path / "a"
        assert cli.main(["--config", str(cfg), "gen-toy", "--out", str(out_a)]) == 0
        assert len(list((out_a / "source").glob("*.png"))) == 4

        out_b = tmp_path / "b"
        assert cli.main(["--config", str(cfg), "gen-toy", "--out", str(out_b),
                         "--count", "2"]) == 0
        assert len(list((out_b / "source").glob("*.png"))) == 2

    def test_missing_config_is_exit_2(self, tmp_path):
        assert cli.main(["--config", str(tmp_path / "nope.cfg"), "gen-toy",
                         "--out", str(tmp_path / "x")]) == 2
