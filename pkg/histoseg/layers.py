"""Parameterised layers over the functional operators."""

import math
from typing import Optional, Tuple

import numpy as np

from histoseg import ops
from histoseg.ops import Mode, RunningStats
from histoseg.params import ParameterStore
from histoseg.tensor import Array, Tensor, get_dtype

__all__ = (
    "he_normal",
    "ConvLayer",
    "DepthwiseLayer",
    "BatchNormLayer",
    "ConvBlock",
)


def he_normal(
    rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int
) -> Array:
    """He-normal initial weights: N(0, 2 / fan_in)."""
    scale = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * scale).astype(get_dtype())


class ConvLayer:
    """Dense convolution with an optional bias."""

    def __init__(
        self,
        store: ParameterStore,
        name: str,
        in_channels: int,
        out_channels: int,
        kernel: int = 1,
        *,
        rng: np.random.Generator,
        stride: int = 1,
        dilation: int = 1,
        bias: bool = False,
    ) -> None:
        """Register the kernel (and bias) in ``store`` under ``name``."""
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.dilation = dilation
        self.weight = store.add(
            f"{name}.weight",
            he_normal(
                rng,
                (out_channels, in_channels, kernel, kernel),
                in_channels * kernel * kernel,
            ),
        )
        self.bias: Optional[Tensor] = (
            store.add(f"{name}.bias", np.zeros(out_channels, dtype=get_dtype()))
            if bias
            else None
        )

    def __call__(self, x: Tensor) -> Tensor:
        """Convolve with same padding."""
        return ops.conv2d(
            x,
            self.weight,
            self.bias,
            stride=self.stride,
            dilation=self.dilation,
        )


class DepthwiseLayer:
    """Depthwise convolution, no bias (a batch norm always follows)."""

    def __init__(
        self,
        store: ParameterStore,
        name: str,
        channels: int,
        kernel: int = 3,
        *,
        rng: np.random.Generator,
        stride: int = 1,
        dilation: int = 1,
    ) -> None:
        """Register the per-channel kernels under ``name``."""
        self.name = name
        self.channels = channels
        self.stride = stride
        self.dilation = dilation
        self.weight = store.add(
            f"{name}.weight",
            he_normal(rng, (channels, 1, kernel, kernel), kernel * kernel),
        )

    def __call__(self, x: Tensor) -> Tensor:
        """Convolve each channel with same padding."""
        return ops.depthwise_conv2d(
            x, self.weight, stride=self.stride, dilation=self.dilation
        )


class BatchNormLayer:
    """Batch norm whose running statistics live in the parameter store."""

    def __init__(
        self,
        store: ParameterStore,
        name: str,
        channels: int,
        *,
        epsilon: float = ops.BN_EPSILON,
        momentum: float = ops.BN_MOMENTUM,
    ) -> None:
        """Register gamma, beta and the running buffers under ``name``."""
        dtype = get_dtype()
        self.name = name
        self.epsilon = epsilon
        self.gamma = store.add(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = store.add(f"{name}.beta", np.zeros(channels, dtype=dtype))
        running_mean = store.add(
            f"{name}.running_mean",
            np.zeros(channels, dtype=dtype),
            trainable=False,
        )
        running_var = store.add(
            f"{name}.running_var",
            np.ones(channels, dtype=dtype),
            trainable=False,
        )
        # Shares the buffers' arrays so updates land in the store.
        self.stats = RunningStats(running_mean.data, running_var.data, momentum)

    def __call__(self, x: Tensor, mode: Mode) -> Tensor:
        """Normalize ``x``."""
        return ops.batch_norm(
            x, self.gamma, self.beta, self.stats, mode=mode, epsilon=self.epsilon
        )


class ConvBlock:
    """Convolution, batch norm and (optionally) relu."""

    def __init__(
        self,
        store: ParameterStore,
        name: str,
        in_channels: int,
        out_channels: int,
        kernel: int = 1,
        *,
        rng: np.random.Generator,
        stride: int = 1,
        dilation: int = 1,
        activation: bool = True,
        epsilon: float = ops.BN_EPSILON,
        momentum: float = ops.BN_MOMENTUM,
    ) -> None:
        """Register the convolution under ``name`` and the norm as ``name.bn``."""
        self.conv = ConvLayer(
            store,
            name,
            in_channels,
            out_channels,
            kernel,
            rng=rng,
            stride=stride,
            dilation=dilation,
        )
        self.bn = BatchNormLayer(
            store, f"{name}.bn", out_channels, epsilon=epsilon, momentum=momentum
        )
        self.activation = activation

    @property
    def out_channels(self) -> int:
        """Channels produced."""
        return self.conv.out_channels

    def __call__(self, x: Tensor, mode: Mode) -> Tensor:
        """Apply the block."""
        out = self.bn(self.conv(x), mode)
        return ops.relu(out) if self.activation else out
