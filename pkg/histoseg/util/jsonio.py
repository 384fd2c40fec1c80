"""JSON files written atomically with a stable layout."""

import json
import os
from pathlib import Path
from typing import Any, Union

__all__ = ("dump", "load", "atomic_write_bytes")

PathLike = Union[str, "os.PathLike[str]"]


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """Write ``data`` next to ``path`` and rename it into place."""
    target = Path(path)
    tmp = target.with_name(f".{target.name}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, target)


def dump(path: PathLike, document: Any) -> None:
    """Write ``document`` as indented JSON with a trailing newline."""
    text = json.dumps(document, indent=2) + "\n"
    atomic_write_bytes(path, text.encode("utf-8"))


def load(path: PathLike) -> Any:
    """Read a JSON document."""
    return json.loads(Path(path).read_text(encoding="utf-8"))
