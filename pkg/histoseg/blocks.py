"""Quick attention, expanded convolution and ASPP blocks."""

from typing import Final, Tuple

import attr
import numpy as np

from histoseg import ops
from histoseg.errors import ConfigError, ShapeError
from histoseg.layers import BatchNormLayer, ConvBlock, ConvLayer, DepthwiseLayer
from histoseg.ops import Mode
from histoseg.params import ParameterStore
from histoseg.tensor import Tensor

__all__ = (
    "QuickAttentionLayer",
    "BlockConfig",
    "ExpandedConvBlock",
    "ASPPConfig",
    "ASPPBlock",
    "quick_attention_forward",
    "expanded_conv_forward",
    "aspp_forward",
)

DEPTHWISE_KERNEL: Final = 3
ASPP_KERNEL: Final = 3
DEFAULT_ASPP_RATES: Final = (6, 12, 18)


def _check_channels(where: str, x: Tensor, expected: int) -> None:
    if x.ndim != 4 or x.shape[1] != expected:  # noqa: PLR2004
        msg = f"{where} expects NCHW input with {expected} channels, got {x.shape}"
        raise ShapeError(msg)


class QuickAttentionLayer:
    """sigmoid(conv1x1(x)) + x with as many filters as input channels.

    The bias starts at zero, so a zeroed kernel gives exactly ``x + 0.5``.
    """

    def __init__(
        self,
        store: ParameterStore,
        name: str,
        channels: int,
        *,
        rng: np.random.Generator,
    ) -> None:
        """Register the 1x1 kernel and bias under ``name``."""
        self.channels = channels
        self.conv = ConvLayer(
            store, name, channels, channels, 1, rng=rng, bias=True
        )

    @property
    def weight(self) -> Tensor:
        """C x C x 1 x 1 kernel."""
        return self.conv.weight

    @property
    def bias(self) -> Tensor:
        """Per-channel bias."""
        assert self.conv.bias is not None  # noqa: S101
        return self.conv.bias

    def __call__(self, x: Tensor) -> Tensor:
        """Apply the attention unit."""
        return quick_attention_forward(x, self)


def quick_attention_forward(x: Tensor, layer: QuickAttentionLayer) -> Tensor:
    """Quick attention: sigmoid of a 1x1 convolution, added back to ``x``.

    Output shape equals input shape and ``x < QA(x) < x + 1`` elementwise.
    """
    _check_channels("quick attention", x, layer.channels)
    return ops.add(ops.sigmoid(layer.conv(x)), x)


@attr.s(frozen=True, auto_attribs=True)
class BlockConfig:
    """Geometry of one expanded convolution block."""

    index: int
    in_channels: int
    out_channels: int
    stride: int = 1
    dilation: int = 1
    expansion: int = 6

    @property
    def hidden_channels(self) -> int:
        """Width after the 1x1 expansion."""
        return self.in_channels * self.expansion

    @property
    def residual(self) -> bool:
        """Identity skip applies only when input and output shapes match."""
        return self.stride == 1 and self.in_channels == self.out_channels


class ExpandedConvBlock:
    """Inverted residual: expand, depthwise (dilated), linear projection."""

    def __init__(
        self,
        store: ParameterStore,
        name: str,
        config: BlockConfig,
        *,
        rng: np.random.Generator,
        epsilon: float = ops.BN_EPSILON,
        momentum: float = ops.BN_MOMENTUM,
    ) -> None:
        """Register the three convolutions and their norms under ``name``."""
        hidden = config.hidden_channels
        self.config = config
        self.expand = ConvLayer(
            store, f"{name}.expand", config.in_channels, hidden, 1, rng=rng
        )
        self.bn1 = BatchNormLayer(
            store, f"{name}.bn1", hidden, epsilon=epsilon, momentum=momentum
        )
        self.depthwise = DepthwiseLayer(
            store,
            f"{name}.depthwise",
            hidden,
            DEPTHWISE_KERNEL,
            rng=rng,
            stride=config.stride,
            dilation=config.dilation,
        )
        self.bn2 = BatchNormLayer(
            store, f"{name}.bn2", hidden, epsilon=epsilon, momentum=momentum
        )
        self.project = ConvLayer(
            store, f"{name}.project", hidden, config.out_channels, 1, rng=rng
        )
        self.bn3 = BatchNormLayer(
            store,
            f"{name}.bn3",
            config.out_channels,
            epsilon=epsilon,
            momentum=momentum,
        )

    @property
    def residual(self) -> bool:
        """Whether the identity skip is active."""
        return self.config.residual

    def __call__(self, x: Tensor, mode: Mode) -> Tensor:
        """Apply the block."""
        return expanded_conv_forward(x, self, mode)


def expanded_conv_forward(
    x: Tensor, block: ExpandedConvBlock, mode: Mode
) -> Tensor:
    """expand -> bn -> relu -> depthwise -> bn -> relu -> project -> bn (+ x).

    No activation follows the projection.
    """
    _check_channels(
        f"expanded conv block {block.config.index}", x, block.config.in_channels
    )
    out = ops.relu(block.bn1(block.expand(x), mode))
    out = ops.relu(block.bn2(block.depthwise(out), mode))
    out = block.bn3(block.project(out), mode)
    if block.residual:
        out = ops.add(out, x)

    return out


@attr.s(frozen=True, auto_attribs=True)
class ASPPConfig:
    """Channel widths and atrous rates of an ASPP block."""

    in_channels: int
    width: int = 256
    rates: Tuple[int, ...] = attr.ib(default=DEFAULT_ASPP_RATES, converter=tuple)

    def __attrs_post_init__(self) -> None:
        """Validate widths and rates."""
        if self.in_channels < 1 or self.width < 1:
            msg = f"ASPP widths must be positive, got {self}"
            raise ConfigError(msg)

        if not self.rates or any(r < 1 for r in self.rates):
            msg = f"ASPP rates must be positive integers, got {self.rates}"
            raise ConfigError(msg)

    @property
    def concat_channels(self) -> int:
        """Channels entering the fuse convolution."""
        return self.width * (len(self.rates) + 2)


class ASPPBlock:
    """Parallel 1x1, dilated 3x3 and image-pooling branches, fused by 1x1."""

    def __init__(
        self,
        store: ParameterStore,
        name: str,
        config: ASPPConfig,
        *,
        rng: np.random.Generator,
        epsilon: float = ops.BN_EPSILON,
        momentum: float = ops.BN_MOMENTUM,
    ) -> None:
        """Register every branch under ``name``."""
        self.config = config
        self.branch_1x1 = ConvBlock(
            store,
            f"{name}.branch_1x1",
            config.in_channels,
            config.width,
            1,
            rng=rng,
            epsilon=epsilon,
            momentum=momentum,
        )
        self.branch_dilated = tuple(
            ConvBlock(
                store,
                f"{name}.branch_r{rate}",
                config.in_channels,
                config.width,
                ASPP_KERNEL,
                rng=rng,
                dilation=rate,
                epsilon=epsilon,
                momentum=momentum,
            )
            for rate in config.rates
        )
        # The pooled map is 1x1, so this branch has a bias and no norm.
        self.branch_pool = ConvLayer(
            store,
            f"{name}.branch_pool",
            config.in_channels,
            config.width,
            1,
            rng=rng,
            bias=True,
        )
        self.fuse = ConvBlock(
            store,
            f"{name}.fuse",
            config.concat_channels,
            config.width,
            1,
            rng=rng,
            epsilon=epsilon,
            momentum=momentum,
        )

    def __call__(self, x: Tensor, mode: Mode) -> Tensor:
        """Apply the block."""
        return aspp_forward(x, self, mode)


def aspp_forward(x: Tensor, block: ASPPBlock, mode: Mode) -> Tensor:
    """Atrous spatial pyramid pooling; spatial size is preserved."""
    _check_channels("ASPP", x, block.config.in_channels)
    _, _, H, W = x.shape
    pooled = ops.relu(block.branch_pool(ops.global_avg_pool(x)))
    branches = [
        block.branch_1x1(x, mode),
        *(branch(x, mode) for branch in block.branch_dilated),
        ops.bilinear_resize(pooled, H, W),
    ]
    return block.fuse(ops.concat(branches), mode)
