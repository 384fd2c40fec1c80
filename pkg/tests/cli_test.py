"""Test the ``histoseg`` command line end to end."""

import json
from pathlib import Path
from typing import List

import numpy as np
import numpy.typing as npt
import pytest
from PIL import Image

from histoseg import data
from histoseg.cli import RESOLVED_CONFIG, main

TINY_NETWORK = [
    "--set",
    "network.input_size=[32, 32]",
    "--set",
    "network.width_multiplier=0.125",
    "--set",
    "train.batch_size=4",
]


def _files(root: Path) -> List[Path]:
    return sorted(p for p in root.rglob("*") if p.is_file())


def _box_mask(boxes: List[slice]) -> npt.NDArray[np.bool_]:
    mask = np.zeros((40, 40), bool)
    for rows in boxes:
        mask[rows, rows] = True
    return mask


@pytest.fixture(scope="module")
def trained(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """A one-epoch model trained on twelve synthetic 32 x 32 images."""
    base = tmp_path_factory.mktemp("run")
    synth = ["synth", "--out", str(base / "set"), "--n", "12"]
    assert main([*synth, "--size", "32"]) == 0
    args = ["train", "--data", str(base / "set"), "--out", str(base / "model")]
    assert main([*args, *TINY_NETWORK, "--epochs", "1"]) == 0
    return base


class TestSynth:
    def test_default_split(self, tmp_path: Path) -> None:
        """Test 200 samples split 140/40/20."""
        assert main(["synth", "--out", str(tmp_path)]) == 0
        assert len(list((tmp_path / "images").glob("*.png"))) == 200
        assert len(list((tmp_path / "masks").glob("*.png"))) == 200
        manifest = json.loads((tmp_path / "manifest.json").read_text("utf-8"))
        counts = [len(manifest[k]) for k in ("train", "val", "test")]
        assert counts == [140, 40, 20]

    def test_rerun_is_byte_identical(self, tmp_path: Path) -> None:
        """Test that one seed writes the same bytes twice."""
        for name in "ab":
            argv = ["synth", "--out", str(tmp_path / name), "--n", "6"]
            assert main([*argv, "--seed", "7"]) == 0
        first, second = _files(tmp_path / "a"), _files(tmp_path / "b")
        assert [p.relative_to(tmp_path / "a") for p in first] == [
            p.relative_to(tmp_path / "b") for p in second
        ]
        for a, b in zip(first, second):
            assert a.read_bytes() == b.read_bytes()

    def test_bad_size(self, tmp_path: Path) -> None:
        """Test that a size not divisible by 8 fails with status 1."""
        assert main(["synth", "--out", str(tmp_path), "--size", "65"]) == 1

    def test_bad_fractions(self, tmp_path: Path) -> None:
        """Test that unparsable fractions are a usage error."""
        with pytest.raises(SystemExit):
            main(["synth", "--out", str(tmp_path), "--fractions", "a,b"])


class TestPatch:
    def test_cuts_patches(self, tmp_path: Path) -> None:
        """Test 16 overlapping patches from one 1000 x 1000 image."""
        rng = np.random.default_rng(0)
        (tmp_path / "img").mkdir()
        (tmp_path / "gt").mkdir()
        image = rng.integers(0, 256, (1000, 1000, 3), np.uint8)
        data.save_image(tmp_path / "img" / "slide.png", image)
        data.save_image(tmp_path / "gt" / "slide.png", image[..., 0] > 128)

        out = tmp_path / "patches"
        argv = ["patch", "--images", str(tmp_path / "img")]
        argv += ["--masks", str(tmp_path / "gt"), "--out", str(out)]
        assert main(argv) == 0
        assert len(list((out / "images").glob("slide_*.png"))) == 16
        summary = json.loads((out / "summary.json").read_text("utf-8"))
        assert summary == {
            "size": 256,
            "stride": 256,
            "total": 16,
            "sources": {"slide": 16},
        }

    def test_missing_mask(self, tmp_path: Path) -> None:
        """Test that an image without a mask fails with status 1."""
        (tmp_path / "img").mkdir()
        (tmp_path / "gt").mkdir()
        blank = np.zeros((8, 8, 3), np.uint8)
        data.save_image(tmp_path / "img" / "a.png", blank)
        argv = ["patch", "--images", str(tmp_path / "img"), "--masks"]
        argv += [str(tmp_path / "gt"), "--out", str(tmp_path / "o")]
        assert main(argv) == 1


class TestTrainPredict:
    def test_train_artifacts(self, trained: Path) -> None:
        """Test the files a training run leaves behind."""
        model = trained / "model"
        for name in (RESOLVED_CONFIG, "best.ckpt", "last.ckpt", "log.csv"):
            assert (model / name).is_file()
        resolved = json.loads((model / RESOLVED_CONFIG).read_text("utf-8"))
        assert resolved["train"]["epochs"] == 1
        assert resolved["network"]["width_multiplier"] == 0.125

    def test_zero_epochs(self, tmp_path: Path, trained: Path) -> None:
        """Test that an invalid epoch count fails with status 1."""
        argv = ["train", "--data", str(trained / "set"), "--out", str(tmp_path)]
        assert main([*argv, *TINY_NETWORK, "--epochs", "0"]) == 1

    def test_no_data(self, tmp_path: Path) -> None:
        """Test that training without a dataset fails with status 1."""
        assert main(["train", "--out", str(tmp_path)]) == 1

    @pytest.mark.parametrize("extra", [[], ["--prob"]])
    def test_predict(
        self, tmp_path: Path, trained: Path, extra: List[str]
    ) -> None:
        """Test that the output matches the input extents."""
        rng = np.random.default_rng(2)
        image = rng.integers(0, 256, (30, 27, 3), np.uint8)
        data.save_image(tmp_path / "in.png", image)
        out = tmp_path / "out.png"
        argv = ["predict", "--model", str(trained / "model" / "best.ckpt")]
        argv += ["--image", str(tmp_path / "in.png"), "--out", str(out)]
        assert main([*argv, *extra]) == 0
        with Image.open(out) as result:
            assert result.size == (27, 30)
            values = np.asarray(result)
        if not extra:
            assert set(np.unique(values)) <= {0, 255}

    def test_predict_missing_model(self, tmp_path: Path) -> None:
        """Test that a missing checkpoint fails with status 1."""
        argv = ["predict", "--model", str(tmp_path / "none.ckpt")]
        argv += ["--image", str(tmp_path / "in.png")]
        argv += ["--out", str(tmp_path / "o.png")]
        assert main(argv) == 1


class TestEval:
    def test_identical_masks(self, tmp_path: Path) -> None:
        """Test that masks scored against themselves are perfect."""
        assert main(["synth", "--out", str(tmp_path / "set"), "--n", "4"]) == 0
        masks = str(tmp_path / "set" / "masks")
        report = tmp_path / "report.json"
        argv = ["eval", "--pred", masks, "--gt", masks, "--report", str(report)]
        assert main(argv) == 0
        aggregate = json.loads(report.read_text("utf-8"))["aggregate"]
        for name in ("object_f1", "pixel_f1", "dice", "iou"):
            assert aggregate[name]["percent"] == "100.00"
        assert aggregate["fp"] == aggregate["fn"] == 0

    def test_missed_object(self, tmp_path: Path) -> None:
        """Test that finding two of three objects scores 80.00 object F1."""
        truth = _box_mask([slice(2, 8), slice(15, 22), slice(30, 37)])
        found = _box_mask([slice(2, 8), slice(15, 22)])
        for name, mask in (("gt", truth), ("pred", found)):
            (tmp_path / name).mkdir()
            data.save_image(tmp_path / name / "a.png", mask)

        report = tmp_path / "report.json"
        argv = ["eval", "--pred", str(tmp_path / "pred"), "--gt"]
        assert main([*argv, str(tmp_path / "gt"), "--report", str(report)]) == 0
        aggregate = json.loads(report.read_text("utf-8"))["aggregate"]
        assert aggregate["object_f1"]["percent"] == "80.00"
        assert (aggregate["tp"], aggregate["fp"], aggregate["fn"]) == (2, 0, 1)


def test_flops(capsys: pytest.CaptureFixture[str]) -> None:
    """Test the default table totals."""
    assert main(["flops"]) == 0
    out = capsys.readouterr().out
    assert "240,081,408" in out
    assert "parameters: 215,089" in out


def test_flops_rejects_unknown_key() -> None:
    """Test that a bad override fails with status 1."""
    assert main(["flops", "--set", "network.depth=3"]) == 1


def test_gradcheck_operations(capsys: pytest.CaptureFixture[str]) -> None:
    """Test that every operation passes the finite-difference check."""
    assert main(["gradcheck", "--skip-network"]) == 0
    assert "FAILED" not in capsys.readouterr().out
