"""Analytic multiply-add and parameter counts.

The walk mirrors :func:`histoseg.network.forward` from shapes alone, so it
doubles as an independent check on :meth:`ParameterStore.count`.
"""

from typing import List, Optional, Tuple

import attr

from histoseg.blocks import ASPP_KERNEL, DEPTHWISE_KERNEL, BlockConfig
from histoseg.network import (
    ENCODER_QA_AFTER_BLOCK,
    IN_CHANNELS,
    STEM_KERNEL,
    NetworkSpec,
    block_configs,
)
from histoseg.ops import conv_output_size

__all__ = ("LayerCost", "FlopReport", "count_flops", "count_parameters")


@attr.s(frozen=True, auto_attribs=True)
class LayerCost:
    """One row of the cost table."""

    name: str
    kind: str
    output_shape: Tuple[int, int, int]
    macs: int
    params: int
    elementwise: int = 0
    attention: bool = False


@attr.s(frozen=True, auto_attribs=True)
class FlopReport:
    """Per-layer costs for one input size."""

    input_size: Tuple[int, int]
    rows: Tuple[LayerCost, ...]

    @property
    def total_macs(self) -> int:
        """Convolution multiply-adds over every layer."""
        return sum(row.macs for row in self.rows)

    @property
    def attention_macs(self) -> int:
        """Multiply-adds spent in quick attention units."""
        return sum(row.macs for row in self.rows if row.attention)

    @property
    def total_params(self) -> int:
        """Trainable values over every layer."""
        return sum(row.params for row in self.rows)

    def format_table(self) -> str:
        """Fixed-width text table with a totals line."""
        lines = [f"{'layer':<28}{'kind':<12}{'output':>16}{'macs':>14}"]
        for row in self.rows:
            shape = "x".join(str(v) for v in row.output_shape)
            flag = " *" if row.attention else ""
            lines.append(
                f"{row.name:<28}{row.kind:<12}{shape:>16}{row.macs:>14,}{flag}"
            )
        lines.append(f"{'total':<56}{self.total_macs:>14,}")
        lines.append(f"{'quick attention (*)':<56}{self.attention_macs:>14,}")
        return "\n".join(lines)


def _bn_params(channels: int, *, norm: bool) -> int:
    return 2 * channels if norm else 0


class _Walker:
    def __init__(self) -> None:
        self.rows: List[LayerCost] = []

    def conv(
        self,
        name: str,
        shape: Tuple[int, int, int],
        out_channels: int,
        kernel: int = 1,
        *,
        stride: int = 1,
        dilation: int = 1,
        bias: bool = False,
        norm: bool = True,
        depthwise: bool = False,
        attention: bool = False,
    ) -> Tuple[int, int, int]:
        in_channels, H, W = shape
        Ho, _, _ = conv_output_size(H, kernel, stride, dilation, "same")
        Wo, _, _ = conv_output_size(W, kernel, stride, dilation, "same")
        taps = kernel * kernel * (1 if depthwise else in_channels)
        macs = out_channels * taps * Ho * Wo
        params = out_channels * taps + (out_channels if bias else 0)
        params += _bn_params(out_channels, norm=norm)
        out_shape = (out_channels, Ho, Wo)
        self.rows.append(
            LayerCost(
                name,
                "depthwise" if depthwise else "conv",
                out_shape,
                macs,
                params,
                out_channels * Ho * Wo if attention else 0,
                attention,
            )
        )
        return out_shape

    def block(
        self, config: BlockConfig, shape: Tuple[int, int, int]
    ) -> Tuple[int, int, int]:
        name = f"block{config.index}"
        hidden = config.hidden_channels
        out = self.conv(f"{name}.expand", shape, hidden)
        out = self.conv(
            f"{name}.depthwise",
            out,
            hidden,
            DEPTHWISE_KERNEL,
            stride=config.stride,
            dilation=config.dilation,
            depthwise=True,
        )
        return self.conv(f"{name}.project", out, config.out_channels)

    def attention(
        self, name: str, shape: Tuple[int, int, int]
    ) -> Tuple[int, int, int]:
        return self.conv(
            name, shape, shape[0], bias=True, norm=False, attention=True
        )


def _walk(spec: NetworkSpec, size: Tuple[int, int]) -> FlopReport:
    walker = _Walker()
    H, W = size
    shape = walker.conv(
        "stem", (IN_CHANNELS, H, W), spec.stem_channels, STEM_KERNEL, stride=2
    )
    skip = shape
    configs = block_configs(spec)
    for config in configs:
        shape = walker.block(config, shape)
        if config.index == ENCODER_QA_AFTER_BLOCK:
            if spec.encoder_qa:
                shape = walker.attention("encoder_qa", shape)
            skip = shape

    width = spec.aspp_channels
    _, h, w = shape
    pooled = (shape[0], 1, 1)
    branches = [walker.conv("aspp.branch_1x1", shape, width)]
    branches.extend(
        walker.conv(
            f"aspp.branch_r{rate}", shape, width, ASPP_KERNEL, dilation=rate
        )
        for rate in spec.aspp_rates
    )
    walker.conv("aspp.branch_pool", pooled, width, bias=True, norm=False)
    concat = (width * (len(branches) + 1), h, w)
    shape = walker.conv("aspp.fuse", concat, width)

    decoder = spec.decoder_channels
    walker.conv("decoder.pool", (width, 1, 1), decoder, bias=True, norm=False)
    shape = walker.conv("decoder.fuse", (width + decoder, h, w), decoder)
    if spec.decoder_qa:
        shape = walker.attention("decoder.qa", shape)
    if spec.qa_residual:
        walker.conv("decoder.skip", skip, decoder, bias=True, norm=False)

    walker.conv("head", shape, 1, bias=True, norm=False)
    return FlopReport(size, tuple(walker.rows))


def count_flops(
    spec: NetworkSpec, size: Optional[Tuple[int, int]] = None
) -> FlopReport:
    """Per-layer multiply-adds for one image of ``size`` (default ``spec.input_size``).

    Pooling, resizing and elementwise terms other than the attention sums
    are not counted.
    """
    H, W = spec.input_size if size is None else size
    return _walk(spec, (H, W))


def count_parameters(spec: NetworkSpec) -> int:
    """Number of trainable values in a graph built from ``spec``.

    >>> count_parameters(NetworkSpec())
    215089
    """
    return count_flops(spec).total_params
