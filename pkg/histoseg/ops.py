"""Differentiable operators used by the segmentation graph.

Images are NCHW. Every operator takes and returns :class:`Tensor` objects
and records itself on the active tape; the ``Function`` subclasses hold
the array-level forward and backward rules.
"""

from typing import Any, Final, Optional, Sequence, Tuple

import attr
import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy import special
from typing_extensions import Literal, Self, TypeAlias

from histoseg.errors import ConfigError, ShapeError
from histoseg.tensor import Array, Function, Gradients, Tensor, get_dtype

__all__ = (
    "Mode",
    "Padding",
    "RunningStats",
    "conv2d",
    "depthwise_conv2d",
    "batch_norm",
    "relu",
    "sigmoid",
    "global_avg_pool",
    "bilinear_resize",
    "concat",
    "add",
    "mul",
    "tensor_sum",
    "mean",
    "reshape",
    "dropout",
    "conv_output_size",
)

Mode: TypeAlias = Literal["train", "infer"]
Padding: TypeAlias = Literal["same", "valid"]

MODES: Final = ("train", "infer")
BN_EPSILON: Final = 1e-5
BN_MOMENTUM: Final = 0.9


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        msg = f"Unknown mode {mode!r}, expected 'train' or 'infer'"
        raise ConfigError(msg)


def _require_nchw(name: str, array: Array) -> None:
    if array.ndim != 4:  # noqa: PLR2004
        msg = f"{name} must be NCHW (4 axes), got shape {array.shape}"
        raise ShapeError(msg)

    if 0 in array.shape:
        msg = f"{name} has a zero extent: {array.shape}"
        raise ShapeError(msg)


def _check_positive(**values: int) -> None:
    for name, value in values.items():
        if value < 1:
            msg = f"{name} must be a positive integer, got {value}"
            raise ConfigError(msg)


def conv_output_size(
    size: int, kernel: int, stride: int, dilation: int, padding: str
) -> Tuple[int, int, int]:
    """Output extent and (before, after) zero padding along one axis.

    Same padding is symmetric with the odd pixel on the bottom/right.

    >>> conv_output_size(256, 3, 2, 1, "same")
    (128, 0, 1)
    >>> conv_output_size(32, 3, 1, 18, "same")
    (32, 18, 18)
    >>> conv_output_size(5, 3, 1, 1, "valid")
    (3, 0, 0)
    """
    effective = dilation * (kernel - 1) + 1
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + effective - size, 0)
        return out, total // 2, total - total // 2

    if padding == "valid":
        out = (size - effective) // stride + 1
        if out < 1:
            msg = (
                f"Input extent {size} is smaller than the effective kernel "
                f"extent {effective} under valid padding"
            )
            raise ShapeError(msg)

        return out, 0, 0

    msg = f"Unknown padding {padding!r}, expected 'same' or 'valid'"
    raise ConfigError(msg)


def _pad_spatial(
    x: Array, kh: int, kw: int, stride: int, dilation: int, padding: str
) -> Tuple[Array, Tuple[int, int, int, int], Tuple[int, int]]:
    _, _, H, W = x.shape
    Ho, top, bottom = conv_output_size(H, kh, stride, dilation, padding)
    Wo, left, right = conv_output_size(W, kw, stride, dilation, padding)
    if top or bottom or left or right:
        x = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))

    return x, (top, bottom, left, right), (Ho, Wo)


def _windows(
    xp: Array, kh: int, kw: int, out: Tuple[int, int], stride: int, dilation: int
) -> Array:
    """Read-only (N, C, kh, kw, Ho, Wo) view of the receptive fields."""
    N, C, _, _ = xp.shape
    sN, sC, sH, sW = xp.strides
    return as_strided(
        xp,
        shape=(N, C, kh, kw, out[0], out[1]),
        strides=(sN, sC, dilation * sH, dilation * sW, stride * sH, stride * sW),
        writeable=False,
    )


def _tap_slice(
    index: int, dilation: int, stride: int, count: int
) -> slice:
    start = index * dilation
    return slice(start, start + stride * (count - 1) + 1, stride)


class Conv2d(Function):
    """Dense 2-D convolution (cross-correlation) via strided windows."""

    def forward(
        self,
        x: Array,
        weight: Array,
        *bias: Array,
        stride: int,
        dilation: int,
        padding: str,
    ) -> Array:
        """Convolve ``x`` with ``weight`` and add the optional bias."""
        _, _, kh, kw = weight.shape
        xp, self.pads, out_hw = _pad_spatial(x, kh, kw, stride, dilation, padding)
        self.patches = _windows(xp, kh, kw, out_hw, stride, dilation)
        self.weight = weight
        self.padded_shape = xp.shape
        self.input_shape = x.shape
        self.stride = stride
        self.dilation = dilation
        self.has_bias = bool(bias)

        out = np.tensordot(self.patches, weight, axes=([1, 2, 3], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2)
        if bias:
            out = out + bias[0][None, :, None, None]

        return np.ascontiguousarray(out)

    def backward(self, grad: Array) -> Gradients:
        """Gradients for input, weight and bias."""
        _, _, kh, kw = self.weight.shape
        _, _, Ho, Wo = grad.shape
        grad_weight = np.tensordot(
            grad, self.patches, axes=([0, 2, 3], [0, 4, 5])
        )

        # (N, Ho, Wo, C, kh, kw)
        grad_cols = np.tensordot(grad, self.weight, axes=([1], [0]))
        grad_padded = np.zeros(self.padded_shape, dtype=grad.dtype)
        for i in range(kh):
            rows = _tap_slice(i, self.dilation, self.stride, Ho)
            for j in range(kw):
                cols = _tap_slice(j, self.dilation, self.stride, Wo)
                grad_padded[:, :, rows, cols] += grad_cols[..., i, j].transpose(
                    0, 3, 1, 2
                )

        top, _, left, _ = self.pads
        _, _, H, W = self.input_shape
        grad_x = grad_padded[:, :, top : top + H, left : left + W]
        if self.has_bias:
            return grad_x, grad_weight, grad.sum(axis=(0, 2, 3))

        return grad_x, grad_weight


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    *,
    stride: int = 1,
    dilation: int = 1,
    padding: Padding = "same",
) -> Tensor:
    """2-D convolution of an NCHW input with an OutC x InC x Kh x Kw kernel.

    Same padding gives ``ceil(in / stride)`` outputs per spatial axis.
    """
    _require_nchw("conv2d input", x.data)
    _check_positive(stride=stride, dilation=dilation)
    if weight.ndim != 4:  # noqa: PLR2004
        msg = f"conv2d weight must be OutC x InC x Kh x Kw, got {weight.shape}"
        raise ShapeError(msg)

    if weight.shape[1] != x.shape[1]:
        msg = (
            f"conv2d input has {x.shape[1]} channels but the weight expects "
            f"{weight.shape[1]} (weight shape {weight.shape})"
        )
        raise ShapeError(msg)

    if bias is not None and bias.shape != (weight.shape[0],):
        msg = f"conv2d bias must have shape ({weight.shape[0]},), got {bias.shape}"
        raise ShapeError(msg)

    tensors = (x, weight) if bias is None else (x, weight, bias)
    return Conv2d.apply(
        *tensors, stride=stride, dilation=dilation, padding=padding
    )


class DepthwiseConv2d(Function):
    """One spatial filter per channel, accumulated tap by tap."""

    def forward(
        self,
        x: Array,
        weight: Array,
        *,
        stride: int,
        dilation: int,
        padding: str,
    ) -> Array:
        """Convolve each channel with its own filter."""
        _, _, kh, kw = weight.shape
        xp, self.pads, (Ho, Wo) = _pad_spatial(
            x, kh, kw, stride, dilation, padding
        )
        self.padded = xp
        self.weight = weight
        self.input_shape = x.shape
        self.stride = stride
        self.dilation = dilation

        N, C, _, _ = x.shape
        out = np.zeros((N, C, Ho, Wo), dtype=x.dtype)
        for i in range(kh):
            rows = _tap_slice(i, dilation, stride, Ho)
            for j in range(kw):
                cols = _tap_slice(j, dilation, stride, Wo)
                out += weight[None, :, 0, i, j, None, None] * xp[:, :, rows, cols]

        return out

    def backward(self, grad: Array) -> Gradients:
        """Gradients for input and weight."""
        _, _, kh, kw = self.weight.shape
        _, _, Ho, Wo = grad.shape
        grad_weight = np.zeros_like(self.weight)
        grad_padded = np.zeros_like(self.padded)
        for i in range(kh):
            rows = _tap_slice(i, self.dilation, self.stride, Ho)
            for j in range(kw):
                cols = _tap_slice(j, self.dilation, self.stride, Wo)
                window = self.padded[:, :, rows, cols]
                grad_weight[:, 0, i, j] = (grad * window).sum(axis=(0, 2, 3))
                grad_padded[:, :, rows, cols] += (
                    grad * self.weight[None, :, 0, i, j, None, None]
                )

        top, _, left, _ = self.pads
        _, _, H, W = self.input_shape
        return grad_padded[:, :, top : top + H, left : left + W], grad_weight


def depthwise_conv2d(
    x: Tensor,
    weight: Tensor,
    *,
    stride: int = 1,
    dilation: int = 1,
    padding: Padding = "same",
) -> Tensor:
    """Per-channel convolution with a C x 1 x Kh x Kw kernel.

    Taps are spaced ``dilation`` pixels apart.
    """
    _require_nchw("depthwise_conv2d input", x.data)
    _check_positive(stride=stride, dilation=dilation)
    if weight.ndim != 4 or weight.shape[1] != 1:  # noqa: PLR2004
        msg = f"depthwise weight must be C x 1 x Kh x Kw, got {weight.shape}"
        raise ShapeError(msg)

    if weight.shape[0] != x.shape[1]:
        msg = (
            f"depthwise_conv2d input has {x.shape[1]} channels but the weight "
            f"has {weight.shape[0]} filters"
        )
        raise ShapeError(msg)

    return DepthwiseConv2d.apply(
        x, weight, stride=stride, dilation=dilation, padding=padding
    )


@attr.s(auto_attribs=True, eq=False)
class RunningStats:
    """Per-channel running mean and variance, updated in place."""

    mean: Array
    var: Array
    momentum: float = BN_MOMENTUM

    @classmethod
    def create(cls, channels: int, momentum: float = BN_MOMENTUM) -> Self:
        """Fresh statistics: zero mean, unit variance."""
        dtype = get_dtype()
        return cls(
            np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum
        )


class BatchNorm(Function):
    """Per-channel normalization over the N, H and W axes."""

    axes: Final = (0, 2, 3)

    def forward(
        self,
        x: Array,
        gamma: Array,
        beta: Array,
        *,
        stats: RunningStats,
        mode: str,
        epsilon: float,
    ) -> Array:
        """Normalize with batch statistics (train) or running ones (infer)."""
        self.training = mode == "train"
        if self.training:
            mean = x.mean(axis=self.axes)
            var = x.var(axis=self.axes)
            count = x.size // x.shape[1]
            unbiased = var * (count / (count - 1)) if count > 1 else var
            m = stats.momentum
            stats.mean[...] = m * stats.mean + (1 - m) * mean
            stats.var[...] = m * stats.var + (1 - m) * unbiased
        else:
            mean = stats.mean
            var = stats.var

        self.inv_std = (1.0 / np.sqrt(var + epsilon)).astype(x.dtype)
        self.xhat = (x - mean[None, :, None, None]) * self.inv_std[
            None, :, None, None
        ]
        self.gamma = gamma
        return gamma[None, :, None, None] * self.xhat + beta[None, :, None, None]

    def backward(self, grad: Array) -> Gradients:
        """Gradients for input, gamma and beta."""
        grad_gamma = (grad * self.xhat).sum(axis=self.axes)
        grad_beta = grad.sum(axis=self.axes)
        grad_xhat = grad * self.gamma[None, :, None, None]
        inv_std = self.inv_std[None, :, None, None]
        if not self.training:
            return grad_xhat * inv_std, grad_gamma, grad_beta

        count = grad.size // grad.shape[1]
        grad_x = (inv_std / count) * (
            count * grad_xhat
            - grad_xhat.sum(axis=self.axes, keepdims=True)
            - self.xhat
            * (grad_xhat * self.xhat).sum(axis=self.axes, keepdims=True)
        )
        return grad_x, grad_gamma, grad_beta


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    *,
    mode: Mode,
    epsilon: float = BN_EPSILON,
) -> Tensor:
    """Batch normalization; train mode also updates ``stats``."""
    _require_nchw("batch_norm input", x.data)
    _check_mode(mode)
    channels = x.shape[1]
    for name, value in (
        ("gamma", gamma.shape),
        ("beta", beta.shape),
        ("running mean", stats.mean.shape),
        ("running variance", stats.var.shape),
    ):
        if value != (channels,):
            msg = f"batch_norm {name} must have shape ({channels},), got {value}"
            raise ShapeError(msg)

    return BatchNorm.apply(
        x, gamma, beta, stats=stats, mode=mode, epsilon=epsilon
    )


class Relu(Function):
    """max(x, 0); the subgradient at 0 is 0."""

    def forward(self, x: Array) -> Array:
        """Clamp negatives to zero."""
        self.mask = x > 0
        return np.maximum(x, x.dtype.type(0))

    def backward(self, grad: Array) -> Gradients:
        """Pass the gradient where the input was positive."""
        return (grad * self.mask,)


def relu(x: Tensor) -> Tensor:
    """Rectified linear unit."""
    return Relu.apply(x)


class Sigmoid(Function):
    """Logistic function."""

    def forward(self, x: Array) -> Array:
        """1 / (1 + exp(-x)), kept strictly inside (0, 1)."""
        s = special.expit(x)
        low = np.finfo(s.dtype).tiny
        high = np.nextafter(s.dtype.type(1), s.dtype.type(0))
        self.out: Array = np.clip(s, low, high)
        return self.out

    def backward(self, grad: Array) -> Gradients:
        """s * (1 - s)."""
        return (grad * self.out * (1 - self.out),)


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic sigmoid."""
    return Sigmoid.apply(x)


class GlobalAvgPool(Function):
    """Spatial mean per channel."""

    def forward(self, x: Array) -> Array:
        """Average over H and W."""
        self.input_shape = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, grad: Array) -> Gradients:
        """Spread 1/(H*W) of the gradient to every cell."""
        _, _, H, W = self.input_shape
        return (np.broadcast_to(grad / (H * W), self.input_shape).copy(),)


def global_avg_pool(x: Tensor) -> Tensor:
    """N x C x H x W -> N x C x 1 x 1 channel means."""
    _require_nchw("global_avg_pool input", x.data)
    return GlobalAvgPool.apply(x)


def _interpolation_matrix(in_size: int, out_size: int, dtype: Any) -> Array:
    """Row-stochastic (out, in) matrix for half-pixel-centre sampling."""
    scale = in_size / out_size
    source = (np.arange(out_size) + 0.5) * scale - 0.5
    source = np.clip(source, 0, in_size - 1)
    low = np.floor(source).astype(np.intp)
    high = np.minimum(low + 1, in_size - 1)
    frac = source - low

    rows = np.arange(out_size)
    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    matrix[rows, low] += 1 - frac
    matrix[rows, high] += frac
    return matrix.astype(dtype)


class BilinearResize(Function):
    """Separable bilinear resampling with half-pixel centres."""

    def forward(self, x: Array, *, out_h: int, out_w: int) -> Array:
        """Resample to (out_h, out_w)."""
        _, _, H, W = x.shape
        self.rows = _interpolation_matrix(H, out_h, x.dtype)
        self.cols = _interpolation_matrix(W, out_w, x.dtype)
        out = np.matmul(np.matmul(self.rows, x), self.cols.T)
        # Convex weights; the clip only absorbs last-bit rounding.
        return np.clip(out, x.min(), x.max())

    def backward(self, grad: Array) -> Gradients:
        """Transpose of the resampling map."""
        return (np.matmul(np.matmul(self.rows.T, grad), self.cols),)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the spatial axes.

    Source coordinate is ``(dst + 0.5) * in / out - 0.5``, clamped to the
    valid range, so every output is a convex combination of at most four
    inputs.
    """
    _require_nchw("bilinear_resize input", x.data)
    _check_positive(out_h=out_h, out_w=out_w)
    return BilinearResize.apply(x, out_h=out_h, out_w=out_w)


class Concat(Function):
    """Join along one axis."""

    def forward(self, *arrays: Array, axis: int) -> Array:
        """Concatenate the inputs."""
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad: Array) -> Gradients:
        """Route each slice of the gradient back to its source."""
        return tuple(np.split(grad, self.splits, axis=self.axis))


def concat(inputs: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate tensors along ``axis`` (channels by default)."""
    if not inputs:
        msg = "concat needs at least one tensor"
        raise ShapeError(msg)

    reference = inputs[0].shape
    for tensor in inputs[1:]:
        other = tensor.shape
        if len(other) != len(reference) or any(
            a != b for k, (a, b) in enumerate(zip(reference, other)) if k != axis
        ):
            msg = f"concat extents differ off axis {axis}: {reference} vs {other}"
            raise ShapeError(msg)

    return Concat.apply(*inputs, axis=axis)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        msg = f"{op} needs identical shapes, got {a.shape} and {b.shape}"
        raise ShapeError(msg)


class Add(Function):
    """Elementwise sum."""

    def forward(self, a: Array, b: Array) -> Array:
        """a + b."""
        return a + b

    def backward(self, grad: Array) -> Gradients:
        """Pass through to both operands."""
        return grad, grad


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise addition of same-shaped tensors."""
    _same_shape("add", a, b)
    return Add.apply(a, b)


class Mul(Function):
    """Elementwise product."""

    def forward(self, a: Array, b: Array) -> Array:
        """a * b."""
        self.a = a
        self.b = b
        return a * b

    def backward(self, grad: Array) -> Gradients:
        """Product rule."""
        return grad * self.b, grad * self.a


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise multiplication of same-shaped tensors."""
    _same_shape("mul", a, b)
    return Mul.apply(a, b)


class Sum(Function):
    """Sum of all elements."""

    def forward(self, x: Array) -> Array:
        """Scalar total."""
        self.input_shape = x.shape
        return np.asarray(x.sum(), dtype=x.dtype)

    def backward(self, grad: Array) -> Gradients:
        """Broadcast the scalar gradient."""
        return (np.full(self.input_shape, grad, dtype=grad.dtype),)


def tensor_sum(x: Tensor) -> Tensor:
    """Scalar sum of every element."""
    return Sum.apply(x)


class Mean(Function):
    """Mean of all elements."""

    def forward(self, x: Array) -> Array:
        """Scalar average."""
        self.input_shape = x.shape
        return np.asarray(x.mean(), dtype=x.dtype)

    def backward(self, grad: Array) -> Gradients:
        """Spread 1/n of the gradient to every element."""
        count = int(np.prod(self.input_shape))
        return (np.full(self.input_shape, grad / count, dtype=grad.dtype),)


def mean(x: Tensor) -> Tensor:
    """Scalar mean of every element."""
    return Mean.apply(x)


class Reshape(Function):
    """Change extents without touching the data order."""

    def forward(self, x: Array, *, shape: Tuple[int, ...]) -> Array:
        """Reshaped view."""
        self.input_shape = x.shape
        return x.reshape(shape)

    def backward(self, grad: Array) -> Gradients:
        """Undo the reshape."""
        return (grad.reshape(self.input_shape),)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Reshape to ``shape`` (which may contain one -1)."""
    try:
        np.empty(x.shape, dtype=np.bool_).reshape(tuple(shape))
    except ValueError as e:
        msg = f"cannot reshape {x.shape} to {tuple(shape)}"
        raise ShapeError(msg) from e

    return Reshape.apply(x, shape=tuple(shape))


class Dropout(Function):
    """Inverted dropout: survivors are scaled by 1 / (1 - rate)."""

    def forward(self, x: Array, *, rate: float, rng: np.random.Generator) -> Array:
        """Zero elements with probability ``rate``."""
        keep = rng.random(x.shape) >= rate
        self.scale = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
        return x * self.scale

    def backward(self, grad: Array) -> Gradients:
        """Same mask and scale as the forward pass."""
        return (grad * self.scale,)


def dropout(
    x: Tensor, rate: float, *, mode: Mode, rng: np.random.Generator
) -> Tensor:
    """Inverted dropout in train mode, identity in infer mode."""
    _check_mode(mode)
    if not 0 <= rate < 1:
        msg = f"dropout rate must be in [0, 1), got {rate}"
        raise ConfigError(msg)

    if mode == "infer" or rate == 0:
        return x

    return Dropout.apply(x, rate=rate, rng=rng)
