"""Run configuration: JSON files plus dotted ``key=value`` overrides.

>>> run = RunConfig.load(None, ["train.epochs=3", "network.width_multiplier=0.5"])
>>> run.train.epochs, run.network.width_multiplier
(3, 0.5)
"""

import json
from pathlib import Path
from typing import Any, Dict, Final, Iterable, Optional, Tuple, Type, Union

import attr
from typing_extensions import Self

from histoseg.data import DEFAULT_FRACTIONS
from histoseg.errors import ConfigError
from histoseg.losses import LossConfig
from histoseg.network import NetworkSpec
from histoseg.trainer import TrainConfig
from histoseg.util import jsonio

__all__ = ("DataConfig", "RunConfig", "parse_override")

PathLike = Union[str, Path]

# ``train.loss`` is addressed through the top-level ``loss`` section.
NESTED_FIELDS: Final = {"train": ("loss",)}


@attr.s(frozen=True, auto_attribs=True, kw_only=True)
class DataConfig:
    """Dataset location, split and preprocessing settings."""

    root: Optional[str] = None
    fractions: Tuple[float, ...] = attr.ib(
        default=DEFAULT_FRACTIONS, converter=tuple
    )
    split_seed: int = 0
    resize: Optional[Tuple[int, int]] = attr.ib(
        default=None,
        converter=attr.converters.optional(tuple),  # type: ignore[misc]
    )


SECTIONS: Final[Dict[str, Type[Any]]] = {
    "network": NetworkSpec,
    "loss": LossConfig,
    "train": TrainConfig,
    "data": DataConfig,
}


def parse_override(text: str) -> Tuple[str, str, Any]:
    """Split ``section.field=value``; values are JSON literals or strings.

    >>> parse_override("loss.alpha=0.3")
    ('loss', 'alpha', 0.3)
    >>> parse_override("data.root=/tmp/set")
    ('data', 'root', '/tmp/set')
    """
    key, sep, raw = text.partition("=")
    section, dot, field = key.strip().partition(".")
    if not sep or not dot or not field:
        msg = f"Override {text!r} is not of the form section.field=value"
        raise ConfigError(msg)

    try:
        value = json.loads(raw)
    except ValueError:
        value = raw

    return section, field, value


def _fields(section: str) -> Tuple[str, ...]:
    skipped = NESTED_FIELDS.get(section, ())
    return tuple(
        a.name for a in attr.fields(SECTIONS[section]) if a.name not in skipped
    )


def _build(section: str, values: Dict[str, Any]) -> Any:
    if section not in SECTIONS:
        msg = f"Unknown config section {section!r}, expected one of {sorted(SECTIONS)}"
        raise ConfigError(msg)

    known = _fields(section)
    for name in values:
        if name not in known:
            msg = f"Unknown config key {section}.{name}"
            raise ConfigError(msg)

    try:
        return SECTIONS[section](**values)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        msg = f"Invalid value in config section {section!r}: {e}"
        raise ConfigError(msg) from e


@attr.s(frozen=True, auto_attribs=True, kw_only=True)
class RunConfig:
    """Every setting of a run, grouped by section."""

    network: NetworkSpec = attr.ib(factory=NetworkSpec)
    loss: LossConfig = attr.ib(factory=LossConfig)
    train_settings: TrainConfig = attr.ib(factory=TrainConfig)
    data: DataConfig = attr.ib(factory=DataConfig)

    @property
    def train(self) -> TrainConfig:
        """Training settings with the ``loss`` section applied."""
        return attr.evolve(self.train_settings, loss=self.loss)

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> Self:
        """Build from ``{section: {field: value}}``; unknown keys are errors."""
        if not isinstance(document, dict):
            msg = "A config document must be a JSON object"
            raise ConfigError(msg)

        built = {}
        for section, values in document.items():
            if not isinstance(values, dict):
                msg = f"Config section {section!r} must be an object"
                raise ConfigError(msg)
            built[section] = _build(section, values)

        return cls(
            network=built.get("network", NetworkSpec()),
            loss=built.get("loss", LossConfig()),
            train_settings=built.get("train", TrainConfig()),
            data=built.get("data", DataConfig()),
        )

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        """Fully resolved settings, the inverse of :meth:`from_dict`."""
        objects = {
            "network": self.network,
            "loss": self.loss,
            "train": self.train_settings,
            "data": self.data,
        }
        return {
            section: {
                name: value
                for name, value in attr.asdict(obj, recurse=False).items()
                if name in _fields(section)
            }
            for section, obj in objects.items()
        }

    def with_overrides(self, overrides: Iterable[str]) -> Self:
        """Apply ``section.field=value`` overrides in order."""
        document = self.to_dict()
        for text in overrides:
            section, field, value = parse_override(text)
            if section not in document:
                msg = f"Unknown config section {section!r} in {text!r}"
                raise ConfigError(msg)
            document[section][field] = value

        return self.from_dict(document)

    @classmethod
    def load(
        cls, path: Optional[PathLike], overrides: Iterable[str] = ()
    ) -> Self:
        """Read ``path`` (or start from defaults) and apply ``overrides``."""
        base = cls()
        if path is not None:
            try:
                document = jsonio.load(path)
            except ValueError as e:
                msg = f"Config file {path} is not valid JSON: {e}"
                raise ConfigError(msg) from e
            base = cls.from_dict(document)

        return base.with_overrides(overrides)

    def save(self, path: PathLike) -> None:
        """Write the resolved config as JSON."""
        jsonio.dump(path, self.to_dict())
