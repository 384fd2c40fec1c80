"""Test run configuration loading and overrides."""

import json
from pathlib import Path
from typing import Any, Tuple

import pytest

from histoseg.config import DataConfig, RunConfig, parse_override
from histoseg.errors import ConfigError


@pytest.mark.parametrize(
    ("text", "expected"),
    [
        ("train.epochs=3", ("train", "epochs", 3)),
        ("network.encoder_qa=false", ("network", "encoder_qa", False)),
        ("network.aspp_rates=[2, 4]", ("network", "aspp_rates", [2, 4])),
        ("data.root=set/a", ("data", "root", "set/a")),
    ],
)
def test_parse_override(
    text: str, expected: Tuple[str, str, Any]
) -> None:
    """Test JSON literal values with a string fallback."""
    assert parse_override(text) == expected


@pytest.mark.parametrize("text", ["epochs=3", "train.epochs", "train.=3"])
def test_malformed_override(text: str) -> None:
    """Test that overrides without section, field or value are rejected."""
    with pytest.raises(ConfigError, match="section.field=value"):
        parse_override(text)


class TestRunConfig:
    def test_defaults(self) -> None:
        """Test the default run."""
        run = RunConfig()
        assert run.network.width_multiplier == 0.25
        assert run.train.epochs == 30
        assert run.data == DataConfig()

    def test_overrides_apply_in_order(self) -> None:
        """Test that later overrides win."""
        run = RunConfig().with_overrides(["train.epochs=3", "train.epochs=4"])
        assert run.train.epochs == 4

    def test_loss_section_reaches_training(self) -> None:
        """Test that the loss section is merged into the training settings."""
        run = RunConfig().with_overrides(["loss.alpha=0.5", "loss.gamma=1"])
        assert run.train.loss.alpha == 0.5
        assert run.train.loss.gamma == 1

    def test_tuple_fields_convert(self) -> None:
        """Test that JSON lists become tuples."""
        run = RunConfig().with_overrides(
            ["network.aspp_rates=[2, 4]", "data.resize=[32, 32]"]
        )
        assert run.network.aspp_rates == (2, 4)
        assert run.data.resize == (32, 32)

    @pytest.mark.parametrize(
        ("override", "match"),
        [
            ("optimizer.lr=1", "Unknown config section"),
            ("train.momentum=1", "Unknown config key train.momentum"),
            ("train.loss=1", "Unknown config key train.loss"),
            ("train.epochs=0", "epochs"),
            ("network.input_size=[30, 30]", "input_size"),
        ],
    )
    def test_invalid_override(self, override: str, match: str) -> None:
        """Test that unknown keys and bad values are configuration errors."""
        with pytest.raises(ConfigError, match=match):
            RunConfig().with_overrides([override])

    def test_to_dict_round_trip(self) -> None:
        """Test that the resolved document rebuilds the same run."""
        run = RunConfig().with_overrides(
            ["loss.alpha=0.4", "data.split_seed=9", "train.batch_size=2"]
        )
        document = json.loads(json.dumps(run.to_dict()))
        assert RunConfig.from_dict(document) == run
        assert "loss" not in document["train"]

    def test_load_and_save(self, tmp_path: Path) -> None:
        """Test reading a partial file, then overriding and saving it."""
        path = tmp_path / "run.json"
        path.write_text('{"train": {"epochs": 5}}', "utf-8")
        run = RunConfig.load(path, ["train.seed=7"])
        assert (run.train.epochs, run.train.seed) == (5, 7)

        saved = tmp_path / "saved.json"
        run.save(saved)
        assert RunConfig.load(saved) == run

    @pytest.mark.parametrize(
        "text", ["{not json", "[1, 2]", '{"train": 3}']
    )
    def test_bad_file(self, tmp_path: Path, text: str) -> None:
        """Test that malformed documents are configuration errors."""
        path = tmp_path / "run.json"
        path.write_text(text, "utf-8")
        with pytest.raises(ConfigError):
            RunConfig.load(path)
