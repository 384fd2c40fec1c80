"""Named parameter storage with optimizer slots."""

from typing import Dict, Iterator, Mapping, Tuple

import numpy as np

from histoseg.errors import CheckpointShapeError, ConfigError
from histoseg.tensor import Array, Tensor

__all__ = ("ParameterStore",)


class ParameterStore(Mapping[str, Tensor]):
    """Ordered mapping of unique names to tensors.

    Trainable parameters have ``requires_grad`` set; buffers such as batch
    norm running statistics do not, and are skipped by the optimizer but
    still saved in checkpoints. Iteration follows insertion order.
    """

    def __init__(self) -> None:
        """Construct an empty store."""
        self._tensors: Dict[str, Tensor] = {}
        self._slots: Dict[str, Dict[str, Array]] = {}

    def add(self, name: str, data: Array, *, trainable: bool = True) -> Tensor:
        """Register ``data`` under ``name`` and return its tensor."""
        if name in self._tensors:
            msg = f"Duplicate parameter name {name!r}"
            raise ConfigError(msg)

        tensor = Tensor(data, requires_grad=trainable, name=name)
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        """Look up a tensor by name."""
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        """Iterate names in registration order."""
        return iter(self._tensors)

    def __len__(self) -> int:
        """Number of stored tensors, buffers included."""
        return len(self._tensors)

    def trainable(self) -> Iterator[Tuple[str, Tensor]]:
        """(name, tensor) pairs the optimizer updates."""
        return ((k, t) for k, t in self._tensors.items() if t.requires_grad)

    def slot(self, name: str, kind: str) -> Array:
        """Optimizer state array ``kind`` for parameter ``name``.

        Created as zeros on first access.
        """
        slots = self._slots.setdefault(name, {})
        if kind not in slots:
            slots[kind] = np.zeros_like(self._tensors[name].data)

        return slots[kind]

    def zero_grad(self) -> None:
        """Clear every gradient buffer."""
        for tensor in self._tensors.values():
            tensor.zero_grad()

    def count(self, *, trainable_only: bool = True) -> int:
        """Total number of scalar values."""
        return sum(
            t.size
            for t in self._tensors.values()
            if t.requires_grad or not trainable_only
        )

    def arrays(self) -> Dict[str, Array]:
        """Name -> data array, in registration order."""
        return {name: t.data for name, t in self._tensors.items()}

    def assign(self, arrays: Mapping[str, Array]) -> None:
        """Copy ``arrays`` into the stored tensors in place.

        Names and shapes must match exactly; the first mismatch is reported.
        """
        for name, tensor in self._tensors.items():
            if name not in arrays:
                msg = f"Checkpoint has no tensor named {name!r}"
                raise CheckpointShapeError(msg)

            if arrays[name].shape != tensor.shape:
                msg = (
                    f"Tensor {name!r} has shape {arrays[name].shape} in the "
                    f"checkpoint but {tensor.shape} in the model"
                )
                raise CheckpointShapeError(msg)

        extra = [name for name in arrays if name not in self._tensors]
        if extra:
            msg = f"Checkpoint tensor {extra[0]!r} does not exist in the model"
            raise CheckpointShapeError(msg)

        for name, tensor in self._tensors.items():
            tensor.data[...] = arrays[name]
