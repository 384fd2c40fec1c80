"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the :class:`Tape` active on the current
thread. Outside a tape nothing is recorded, which is how inference runs.

>>> from histoseg import ops
>>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
>>> with Tape():
...     loss = ops.tensor_sum(ops.mul(x, x))
...     backward(loss)
>>> x.grad.tolist()
[2.0, 4.0, 6.0]
"""

import contextlib
import threading
from abc import ABCMeta, abstractmethod
from typing import (
    Any,
    ClassVar,
    Dict,
    Final,
    Iterator,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import attr
import numpy as np
import numpy.typing as npt
from typing_extensions import Self, TypeAlias

from histoseg.errors import ConfigError, GradientError

__all__ = (
    "Array",
    "Tensor",
    "Tape",
    "TapeRecord",
    "Function",
    "backward",
    "precision",
    "get_dtype",
)

Array: TypeAlias = npt.NDArray[np.floating[Any]]
ArrayLike: TypeAlias = Union[npt.ArrayLike, "Tensor"]
Gradients: TypeAlias = Tuple[Optional[Array], ...]

PRECISIONS: Final = {"float32": np.float32, "float64": np.float64}
DEFAULT_PRECISION: Final = "float32"


class _ThreadState(threading.local):
    def __init__(self) -> None:
        self.dtype: "np.dtype[Any]" = np.dtype(PRECISIONS[DEFAULT_PRECISION])
        self.tapes: List["Tape"] = []


_state = _ThreadState()


def get_dtype() -> "np.dtype[Any]":
    """Floating point type new tensors are created with on this thread."""
    return _state.dtype


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Switch between 32-bit training mode and 64-bit verification mode.

    >>> with precision("float64"):
    ...     Tensor([1.0]).data.dtype
    dtype('float64')
    >>> Tensor([1.0]).data.dtype
    dtype('float32')
    """
    try:
        dtype = np.dtype(PRECISIONS[name])
    except KeyError:
        msg = f"Unknown precision {name!r}, expected one of {sorted(PRECISIONS)}"
        raise ConfigError(msg) from None

    previous = _state.dtype
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = previous


class Tensor:
    """N-dimensional real array with an optional gradient buffer.

    The data array is treated as immutable once an operation has produced
    it; only ``grad`` changes after creation. Parameters are the exception:
    the optimizer updates them in place between steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "_tape", "name")

    def __init__(
        self,
        data: ArrayLike,
        *,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ) -> None:
        """Wrap ``data`` converted to the active precision."""
        if isinstance(data, Tensor):
            data = data.data

        self.data: Array = np.asarray(data, dtype=get_dtype())
        self.grad: Optional[Array] = None
        self.requires_grad = requires_grad
        self.tape_id: Optional[int] = None
        self._tape: Optional["Tape"] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        """Extents of every axis."""
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        """Number of axes."""
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        """Number of elements."""
        return int(self.data.size)

    @property
    def tape(self) -> Optional["Tape"]:
        """The tape this tensor was last recorded on."""
        return self._tape

    def item(self) -> float:
        """Value of a single-element tensor as a Python float."""
        if self.size != 1:
            msg = f"item() needs a single element, tensor has shape {self.shape}"
            raise ValueError(msg)

        return float(self.data.reshape(-1)[0])

    def numpy(self) -> Array:
        """The underlying array."""
        return self.data

    def zero_grad(self) -> None:
        """Drop the accumulated gradient."""
        self.grad = None

    def detach(self) -> Self:
        """A new leaf sharing this tensor's data."""
        return self.__class__(self.data, name=self.name)

    def __repr__(self) -> str:
        """Represent the tensor for debugging."""
        label = f"name={self.name!r}, " if self.name else ""
        return (
            f"Tensor({label}shape={self.shape}, dtype={self.data.dtype}, "
            f"requires_grad={self.requires_grad})"
        )


@attr.s(frozen=True, auto_attribs=True)
class TapeRecord:
    """One recorded operation."""

    function: "Function"
    inputs: Tuple[int, ...]
    output: int


class Tape:
    """Ordered record of the operations run while the tape is active.

    Records are appended as operations execute, so every operation's inputs
    are registered before the operation itself. A tape and its tensors
    belong to the thread that entered it.
    """

    def __init__(self) -> None:
        """Construct an empty tape."""
        self.records: List[TapeRecord] = []
        self.tensors: Dict[int, Tensor] = {}

    @staticmethod
    def current() -> Optional["Tape"]:
        """The innermost tape active on this thread, if any."""
        return _state.tapes[-1] if _state.tapes else None

    def __enter__(self) -> Self:
        """Start recording on this thread."""
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc_info: object) -> None:
        """Stop recording."""
        _state.tapes.remove(self)

    def __len__(self) -> int:
        """Number of recorded operations."""
        return len(self.records)

    def register(self, tensor: Tensor) -> int:
        """Assign ``tensor`` a node id on this tape."""
        if tensor.tape is not self or tensor.tape_id is None:
            tensor.tape_id = len(self.tensors)
            tensor._tape = self  # noqa: SLF001
            self.tensors[tensor.tape_id] = tensor

        return tensor.tape_id

    def record(
        self, function: "Function", inputs: Sequence[Tensor], output: Tensor
    ) -> None:
        """Append an operation whose output is ``output``."""
        input_ids = tuple(self.register(t) for t in inputs)
        output_id = self.register(output)
        self.records.append(TapeRecord(function, input_ids, output_id))

    def backward(self, loss: Tensor) -> None:
        """Replay backward rules in reverse order starting from ``loss``."""
        if loss.tape is not self or loss.tape_id is None:
            msg = "Loss was not recorded on this tape"
            raise GradientError(msg)

        grads: Dict[int, Array] = {loss.tape_id: np.ones_like(loss.data)}
        for record in reversed(self.records):
            grad = grads.get(record.output)
            if grad is None:
                continue

            input_grads = record.function.backward(grad)
            for node, input_grad in zip(record.inputs, input_grads):
                if input_grad is None or not self.tensors[node].requires_grad:
                    continue

                previous = grads.get(node)
                grads[node] = (
                    input_grad if previous is None else previous + input_grad
                )

        for node, grad in grads.items():
            tensor = self.tensors[node]
            if not tensor.requires_grad:
                continue

            grad = np.asarray(grad, dtype=tensor.data.dtype)
            if tensor.grad is None:
                tensor.grad = grad.copy()
            else:
                tensor.grad = tensor.grad + grad


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad tensor that reaches ``loss``.

    Gradients accumulate across calls; callers reset them between steps.
    """
    if loss.size != 1 or loss.ndim != 0:
        msg = f"backward() needs a scalar loss, got shape {loss.shape}"
        raise GradientError(msg)

    if loss.tape is None:
        msg = "Loss is not connected to a tape; run the forward pass inside `with Tape():`"
        raise GradientError(msg)

    loss.tape.backward(loss)


class Function(metaclass=ABCMeta):
    """A differentiable operation.

    Subclasses implement :meth:`forward` on raw arrays, keeping whatever they
    need on ``self``, and :meth:`backward` returning one gradient (or None)
    per tensor input.
    """

    differentiable: ClassVar[bool] = True

    @abstractmethod
    def forward(self, *arrays: Array, **kwargs: Any) -> Array:
        """Compute the output array."""
        raise NotImplementedError

    @abstractmethod
    def backward(self, grad: Array) -> Gradients:
        """Map the output gradient to input gradients."""
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs: Any) -> Tensor:
        """Run the operation and record it on the active tape."""
        function = cls()
        out_data = function.forward(*(t.data for t in tensors), **kwargs)

        tape = Tape.current()
        requires_grad = tape is not None and any(
            t.requires_grad for t in tensors
        )
        out = Tensor(out_data, requires_grad=requires_grad)
        if tape is not None and requires_grad:
            tape.record(function, tensors, out)

        return out
