import json
import struct
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from vgg_exporter import cli, export

# the SRFT file is the contract with the consuming toolkit; read it back
# through that toolkit's loader as the integration check
from satrefine import features as primary_features


def write_test_images(directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    base = (rng.uniform(0, 255, size=(40, 40, 3))).astype(np.uint8)
    Image.fromarray(base, "RGB").save(directory / "a_plane.png")
    Image.fromarray(base, "RGB").save(directory / "b_duplicate.png")  # same pixels
    other = (rng.uniform(0, 255, size=(64, 48, 3))).astype(np.uint8)
    Image.fromarray(other, "RGB").save(directory / "c_other.png")


@pytest.fixture(scope="module")
def exported(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("export")
    images = tmp / "images"
    write_test_images(images)
    out = tmp / "features.srft"
    code = cli.main(["--images", str(images), "--out", str(out),
                     "--random-init", "--seed", "0", "--batch", "8"])
    assert code == 0
    return images, out


class TestExport:
    def test_srft_loads_in_consumer_with_expected_shape(self, exported):
        _, out = exported
        fs = primary_features.read_feat(out, role="Ytil")
        assert fs.n == 3
        assert fs.d == 4096

    def test_post_relu_activations_are_nonnegative(self, exported):
        _, out = exported
        fs = primary_features.read_feat(out)
        assert (fs.matrix >= 0).all()

    def test_duplicate_images_give_bit_identical_rows(self, exported):
        _, out = exported
        fs = primary_features.read_feat(out)
        assert fs.matrix[0].tobytes() == fs.matrix[1].tobytes()
        assert fs.matrix[0].tobytes() != fs.matrix[2].tobytes()

    def test_sidecar_lists_rows_in_lexicographic_order(self, exported):
        _, out = exported
        sidecar = json.loads(out.with_suffix(".json").read_text())
        assert sidecar["files"] == ["a_plane.png", "b_duplicate.png", "c_other.png"]
        assert sidecar["skipped"] == []
        assert sidecar["layer"] == "fc6"
        assert sidecar["post_relu"] is True
        assert (sidecar["n"], sidecar["d"]) == (3, 4096)

    def test_pre_relu_exports_some_negatives(self, tmp_path):
        images = tmp_path / "img"
        write_test_images(images)
        out = tmp_path / "pre.srft"
        code = cli.main(["--images", str(images), "--out", str(out),
                         "--random-init", "--seed", "0", "--pre-relu"])
        assert code == 0
        fs = primary_features.read_feat(out)
        assert (fs.matrix < 0).any()


class TestInputHandling:
    def test_empty_directory_exits_2(self, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert cli.main(["--images", str(empty), "--out", str(tmp_path / "x.srft"),
                         "--random-init"]) == 2
        assert "error" in capsys.readouterr().err

    def test_missing_directory_exits_2(self, tmp_path):
        assert cli.main(["--images", str(tmp_path / "nope"),
                         "--out", str(tmp_path / "x.srft"), "--random-init"]) == 2

    def test_undecodable_image_is_skipped_and_recorded(self, tmp_path):
        images = tmp_path / "img"
        write_test_images(images)
        (images / "broken.png").write_bytes(b"not a png at all")
        out = tmp_path / "f.srft"
        code = cli.main(["--images", str(images), "--out", str(out),
                         "--random-init", "--seed", "1"])
        assert code == 0
        sidecar = json.loads(out.with_suffix(".json").read_text())
        assert sidecar["skipped"] == ["broken.png"]
        assert sidecar["n"] == 3

    def test_list_images_is_sorted_and_filtered(self, tmp_path):
        images = tmp_path / "img"
        images.mkdir()
        for name in ("z.png", "a.jpg", "notes.txt", "m.PNG"):
            (images / name).write_bytes(b"x")
        names = [p.name for p in export.list_images(images)]
        assert names == ["a.jpg", "m.PNG", "z.png"]


class TestSrftWriter:
    def test_header_and_payload_layout(self, tmp_path):
        path = tmp_path / "w.srft"
        matrix = np.arange(6, dtype=np.float32).reshape(2, 3)
        export.write_srft(path, matrix)
        blob = path.read_bytes()
        assert len(blob) == 16 + 24
        assert blob[:4] == b"SRFT"
        assert struct.unpack("<III", blob[4:16]) == (1, 2, 3)
        assert blob[16:] == matrix.astype("<f4").tobytes()
