"""The HistoSeg encoder-decoder graph.

The encoder is a MobileNetV2-style stack of sixteen expanded convolution
blocks with output stride 8, followed by ASPP. The decoder pools the ASPP
output, fuses it back, and applies a second quick attention unit that also
receives the encoder's attention output through a 1x1 projection.
"""

import logging
from typing import Callable, Final, List, Optional, Tuple

import attr
import numpy as np

from histoseg import ops
from histoseg.blocks import (
    ASPPBlock,
    ASPPConfig,
    BlockConfig,
    ExpandedConvBlock,
    QuickAttentionLayer,
)
from histoseg.errors import ConfigError, ShapeError
from histoseg.layers import ConvBlock, ConvLayer
from histoseg.ops import Mode
from histoseg.params import ParameterStore
from histoseg.tensor import Tensor

__all__ = (
    "NetworkSpec",
    "HistoSegNet",
    "TraceEntry",
    "make_divisible",
    "block_configs",
    "build",
    "forward",
    "OUTPUT_STRIDE",
    "IN_CHANNELS",
)

logger = logging.getLogger(__name__)

OUTPUT_STRIDE: Final = 8
IN_CHANNELS: Final = 3
STEM_CHANNELS: Final = 32
STEM_KERNEL: Final = 3

# (base width, repeats, stride of the first block) per width group.
WIDTH_GROUPS: Final = (
    (16, 1, 1),
    (24, 2, 2),
    (32, 3, 2),
    (64, 4, 1),
    (96, 3, 1),
    (160, 3, 1),
)
# Blocks 1-6 rate 1, 7-13 rate 2, 14-16 rate 4.
DILATION_SCHEDULE: Final = (1,) * 6 + (2,) * 7 + (4,) * 3
ENCODER_QA_AFTER_BLOCK: Final = 6

TraceEntry = Tuple[str, Tuple[int, ...]]
Hook = Callable[[str, Tensor], None]


def make_divisible(value: float, divisor: int = 8) -> int:
    """Round a channel width to a multiple of ``divisor``.

    Never rounds down by more than ten percent.

    >>> make_divisible(16 * 0.25)
    8
    >>> make_divisible(160 * 0.25)
    40
    >>> make_divisible(256 * 0.25)
    64
    """
    rounded = max(divisor, int(value + divisor / 2) // divisor * divisor)
    if rounded < 0.9 * value:
        rounded += divisor

    return rounded


def _positive_int(
    instance: object, attribute: "attr.Attribute[int]", value: int
) -> None:
    if value < 1:
        msg = f"{attribute.name} must be a positive integer, got {value}"
        raise ConfigError(msg)


def _check_input_size(
    instance: object,
    attribute: "attr.Attribute[Tuple[int, int]]",
    value: Tuple[int, int],
) -> None:
    bad = any(v < 1 or v % OUTPUT_STRIDE for v in value)
    if len(value) != 2 or bad:  # noqa: PLR2004
        msg = (
            f"{attribute.name} must be two positive extents divisible by "
            f"{OUTPUT_STRIDE}, got {value}"
        )
        raise ConfigError(msg)


@attr.s(frozen=True, auto_attribs=True, kw_only=True)
class NetworkSpec:
    """Declarative description of the layer graph.

    Every channel width is scaled by ``width_multiplier`` and rounded to a
    multiple of 8. The three switches remove the attention units and the
    encoder-decoder residual for ablation runs.
    """

    input_size: Tuple[int, int] = attr.ib(
        default=(256, 256), converter=tuple, validator=_check_input_size
    )
    width_multiplier: float = 0.25
    expansion: int = attr.ib(default=6, validator=_positive_int)
    aspp_rates: Tuple[int, ...] = attr.ib(default=(6, 12, 18), converter=tuple)
    aspp_width: int = attr.ib(default=256, validator=_positive_int)
    decoder_width: int = attr.ib(default=256, validator=_positive_int)
    dropout: float = 0.1
    encoder_qa: bool = True
    decoder_qa: bool = True
    qa_residual: bool = True
    bn_epsilon: float = ops.BN_EPSILON
    bn_momentum: float = ops.BN_MOMENTUM

    def __attrs_post_init__(self) -> None:
        """Validate the real-valued fields."""
        if not self.width_multiplier > 0:
            msg = (
                "width_multiplier must be positive, "
                f"got {self.width_multiplier}"
            )
            raise ConfigError(msg)

        if not 0 <= self.dropout < 1:
            msg = f"dropout must be in [0, 1), got {self.dropout}"
            raise ConfigError(msg)

        if not self.aspp_rates or any(r < 1 for r in self.aspp_rates):
            msg = f"aspp_rates must be positive integers, got {self.aspp_rates}"
            raise ConfigError(msg)

        if not self.bn_epsilon > 0 or not 0 <= self.bn_momentum < 1:
            msg = (
                f"Invalid batch norm settings epsilon={self.bn_epsilon} "
                f"momentum={self.bn_momentum}"
            )
            raise ConfigError(msg)

    def width(self, base: int) -> int:
        """Scaled channel width for a base width."""
        return make_divisible(base * self.width_multiplier)

    @property
    def stem_channels(self) -> int:
        """Channels produced by the stem."""
        return self.width(STEM_CHANNELS)

    @property
    def aspp_channels(self) -> int:
        """Scaled ASPP branch and fuse width."""
        return self.width(self.aspp_width)

    @property
    def decoder_channels(self) -> int:
        """Scaled decoder width."""
        return self.width(self.decoder_width)


def block_configs(spec: NetworkSpec) -> List[BlockConfig]:
    """The sixteen expanded convolution blocks in order."""
    configs: List[BlockConfig] = []
    in_channels = spec.stem_channels
    for base, repeats, first_stride in WIDTH_GROUPS:
        out_channels = spec.width(base)
        for repeat in range(repeats):
            index = len(configs) + 1
            configs.append(
                BlockConfig(
                    index=index,
                    in_channels=in_channels,
                    out_channels=out_channels,
                    stride=first_stride if repeat == 0 else 1,
                    dilation=DILATION_SCHEDULE[index - 1],
                    expansion=spec.expansion,
                )
            )
            in_channels = out_channels

    return configs


class HistoSegNet:
    """A built graph: layers bound to one parameter store."""

    def __init__(
        self, spec: NetworkSpec, store: ParameterStore, seed: int
    ) -> None:
        """Create every layer, drawing initial weights from ``seed``."""
        rng = np.random.default_rng(seed)
        eps, momentum = spec.bn_epsilon, spec.bn_momentum
        self.spec = spec
        self.store = store
        self.configs = block_configs(spec)
        self.dropout_rng = np.random.default_rng(seed)

        self.stem = ConvBlock(
            store,
            "stem",
            IN_CHANNELS,
            spec.stem_channels,
            STEM_KERNEL,
            rng=rng,
            stride=2,
            epsilon=eps,
            momentum=momentum,
        )
        self.blocks = [
            ExpandedConvBlock(
                store,
                f"block{c.index}",
                c,
                rng=rng,
                epsilon=eps,
                momentum=momentum,
            )
            for c in self.configs
        ]
        skip_channels = self.configs[ENCODER_QA_AFTER_BLOCK - 1].out_channels
        self.encoder_qa: Optional[QuickAttentionLayer] = (
            QuickAttentionLayer(store, "encoder_qa", skip_channels, rng=rng)
            if spec.encoder_qa
            else None
        )

        deep_channels = self.configs[-1].out_channels
        aspp_width = spec.aspp_channels
        self.aspp = ASPPBlock(
            store,
            "aspp",
            ASPPConfig(deep_channels, aspp_width, spec.aspp_rates),
            rng=rng,
            epsilon=eps,
            momentum=momentum,
        )

        width = spec.decoder_channels
        self.decoder_pool = ConvLayer(
            store, "decoder.pool", aspp_width, width, 1, rng=rng, bias=True
        )
        self.decoder_fuse = ConvBlock(
            store,
            "decoder.fuse",
            aspp_width + width,
            width,
            1,
            rng=rng,
            epsilon=eps,
            momentum=momentum,
        )
        self.decoder_qa: Optional[QuickAttentionLayer] = (
            QuickAttentionLayer(store, "decoder.qa", width, rng=rng)
            if spec.decoder_qa
            else None
        )
        self.decoder_skip: Optional[ConvLayer] = (
            ConvLayer(
                store, "decoder.skip", skip_channels, width, 1, rng=rng, bias=True
            )
            if spec.qa_residual
            else None
        )
        self.head = ConvLayer(store, "head", width, 1, 1, rng=rng, bias=True)

    def reset_rng(self, seed: int) -> None:
        """Reseed the dropout generator."""
        self.dropout_rng = np.random.default_rng(seed)

    def __call__(self, x: Tensor, mode: Mode = "infer") -> Tensor:
        """Run the forward pass."""
        return forward(self, x, mode)

    def trace(self, x: Tensor, mode: Mode = "infer") -> List[TraceEntry]:
        """Shapes of every stage output for input ``x``, in order."""
        entries: List[TraceEntry] = [("input", x.shape)]
        forward(
            self, x, mode, hook=lambda name, t: entries.append((name, t.shape))
        )
        return entries


def build(spec: NetworkSpec, seed: int) -> Tuple[HistoSegNet, ParameterStore]:
    """Initialise a graph for ``spec``.

    Conv weights are He-normal, batch norm gamma is 1 and beta 0. The same
    seed always produces a bit-identical store.
    """
    store = ParameterStore()
    graph = HistoSegNet(spec, store, seed)
    logger.debug(
        "Built network with %d trainable values (width %.3g)",
        store.count(),
        spec.width_multiplier,
    )
    return graph, store


def _check_input(x: Tensor) -> None:
    if x.ndim != 4 or x.shape[1] != IN_CHANNELS:  # noqa: PLR2004
        msg = f"Network input must be N x {IN_CHANNELS} x H x W, got {x.shape}"
        raise ShapeError(msg)

    _, _, H, W = x.shape
    if H % OUTPUT_STRIDE or W % OUTPUT_STRIDE:
        msg = (
            f"Input extents {H}x{W} must be divisible by {OUTPUT_STRIDE}; "
            "pad the image (see histoseg.data.pad_to_multiple)"
        )
        raise ShapeError(msg)


def forward(
    graph: HistoSegNet, x: Tensor, mode: Mode, *, hook: Optional[Hook] = None
) -> Tensor:
    """Map an N x 3 x H x W batch to N x 1 x H x W probabilities in (0, 1)."""
    _check_input(x)

    def emit(name: str, t: Tensor) -> Tensor:
        if hook is not None:
            hook(name, t)
        return t

    _, _, H, W = x.shape
    out = emit("stem", graph.stem(x, mode))
    skip = out
    for block in graph.blocks:
        out = emit(f"block{block.config.index}", block(out, mode))
        if block.config.index == ENCODER_QA_AFTER_BLOCK:
            if graph.encoder_qa is not None:
                out = emit("encoder_qa", graph.encoder_qa(out))
            skip = out

    aspp = emit("aspp", graph.aspp(out, mode))
    _, _, h, w = aspp.shape
    pooled = ops.relu(graph.decoder_pool(ops.global_avg_pool(aspp)))
    pooled = emit("decoder.pool", ops.bilinear_resize(pooled, h, w))
    out = emit(
        "decoder.fuse", graph.decoder_fuse(ops.concat([aspp, pooled]), mode)
    )
    out = ops.dropout(out, graph.spec.dropout, mode=mode, rng=graph.dropout_rng)
    if graph.decoder_qa is not None:
        out = emit("decoder.qa", graph.decoder_qa(out))
    if graph.decoder_skip is not None:
        out = emit("decoder.residual", ops.add(out, graph.decoder_skip(skip)))

    out = emit("head", ops.sigmoid(graph.head(out)))
    return emit("output", ops.bilinear_resize(out, H, W))
