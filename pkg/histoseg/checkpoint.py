"""Binary checkpoint format.

Layout, all little-endian::

    b"HSEG"  u32 version  u32 tensor count
    per tensor:
        u16 name length, UTF-8 name, u8 dtype (0 float32, 1 float64),
        u8 ndim, u32 extent per axis, raw values

Buffers such as batch norm running statistics are stored with the
parameters.
"""

import logging
import struct
from pathlib import Path
from typing import Dict, Final, Mapping, Optional, Tuple, Union

import numpy as np

from histoseg.errors import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from histoseg.params import ParameterStore
from histoseg.tensor import Array
from histoseg.util.jsonio import atomic_write_bytes

__all__ = (
    "MAGIC",
    "VERSION",
    "encode",
    "decode",
    "save_checkpoint",
    "load_checkpoint",
)

logger = logging.getLogger(__name__)

MAGIC: Final = b"HSEG"
VERSION: Final = 1
DTYPE_CODES: Final = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
CODE_DTYPES: Final = {code: dtype for dtype, code in DTYPE_CODES.items()}

_HEADER: Final = struct.Struct("<4sII")
_NAME_LENGTH: Final = struct.Struct("<H")
_TENSOR_INFO: Final = struct.Struct("<BB")
_EXTENT: Final = struct.Struct("<I")

PathLike = Union[str, Path]


def encode(arrays: Mapping[str, Array]) -> bytes:
    """Serialise named arrays in mapping order."""
    chunks = [_HEADER.pack(MAGIC, VERSION, len(arrays))]
    for name, array in arrays.items():
        dtype = np.dtype(array.dtype).newbyteorder("<")
        if dtype not in DTYPE_CODES:
            msg = f"Tensor {name!r} has unsupported dtype {array.dtype}"
            raise CheckpointError(msg)

        encoded_name = name.encode("utf-8")
        chunks.append(_NAME_LENGTH.pack(len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(_TENSOR_INFO.pack(DTYPE_CODES[dtype], array.ndim))
        chunks.extend(_EXTENT.pack(extent) for extent in array.shape)
        chunks.append(np.ascontiguousarray(array, dtype=dtype).tobytes())

    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            msg = (
                f"Checkpoint ends after {len(self.data)} bytes while "
                f"reading {what}"
            )
            raise CheckpointTruncatedError(msg)

        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: struct.Struct, what: str) -> Tuple[int, ...]:
        return fmt.unpack(self.take(fmt.size, what))


def decode(data: bytes) -> Dict[str, Array]:
    """Parse a checkpoint into named arrays, in file order.

    >>> arrays = decode(encode({"w": np.arange(3, dtype=np.float32)}))
    >>> arrays["w"].tolist()
    [0.0, 1.0, 2.0]
    """
    reader = _Reader(data)
    magic = reader.take(len(MAGIC), "the magic bytes")
    if magic != MAGIC:
        msg = f"Not a checkpoint: magic bytes {magic!r}, expected {MAGIC!r}"
        raise CheckpointMagicError(msg)

    version, count = reader.unpack(struct.Struct("<II"), "the header")
    if version != VERSION:
        msg = f"Unsupported checkpoint version {version}, expected {VERSION}"
        raise CheckpointVersionError(msg)

    arrays: Dict[str, Array] = {}
    for index in range(count):
        (length,) = reader.unpack(_NAME_LENGTH, f"tensor {index} name length")
        name = reader.take(length, f"tensor {index} name").decode("utf-8")
        code, ndim = reader.unpack(_TENSOR_INFO, f"tensor {name!r} header")
        if code not in CODE_DTYPES:
            msg = f"Tensor {name!r} has unknown dtype code {code}"
            raise CheckpointError(msg)

        shape = tuple(
            reader.unpack(_EXTENT, f"tensor {name!r} extents")[0]
            for _ in range(ndim)
        )
        dtype = CODE_DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        raw = reader.take(size, f"tensor {name!r} values")
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    if reader.offset != len(data):
        msg = f"{len(data) - reader.offset} unexpected bytes after the last tensor"
        raise CheckpointError(msg)

    return arrays


def save_checkpoint(path: PathLike, store: ParameterStore) -> None:
    """Write every tensor of ``store``, buffers included."""
    atomic_write_bytes(path, encode(store.arrays()))
    logger.debug("Saved %d tensors to %s", len(store), path)


def load_checkpoint(
    path: PathLike, store: Optional[ParameterStore] = None
) -> Dict[str, Array]:
    """Read a checkpoint, copying it into ``store`` when one is given.

    Loading into a store checks every name and shape before anything is
    overwritten.
    """
    arrays = decode(Path(path).read_bytes())
    if store is not None:
        store.assign(arrays)
        logger.debug("Loaded %d tensors from %s", len(arrays), path)

    return arrays
