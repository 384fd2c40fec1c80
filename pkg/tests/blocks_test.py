"""Test quick attention, expanded convolution and ASPP blocks."""

from typing import Any, Dict, Tuple

import numpy as np
import pytest
from scipy import special

from histoseg import ops
from histoseg.blocks import (
    ASPPBlock,
    ASPPConfig,
    BlockConfig,
    ExpandedConvBlock,
    QuickAttentionLayer,
    aspp_forward,
    expanded_conv_forward,
    quick_attention_forward,
)
from histoseg.errors import ConfigError, ShapeError
from histoseg.gradcheck import COMPOSED_TOLERANCE, check_gradients
from histoseg.params import ParameterStore
from histoseg.layers import BatchNormLayer
from histoseg.tensor import Tensor, precision


def infer_norm(x: Tensor, layer: BatchNormLayer) -> Tensor:
    """Apply a batch norm layer through the functional operator."""
    return ops.batch_norm(
        x, layer.gamma, layer.beta, layer.stats, mode="infer"
    )


@pytest.fixture()
def rng() -> np.random.Generator:
    """Seeded generator for weights and inputs."""
    return np.random.default_rng(99)


class TestQuickAttention:
    """Test the quick attention unit."""

    def test_zero_weights_add_half(self, rng: np.random.Generator) -> None:
        """Test that zero kernel and bias give x + 0.5."""
        with precision("float64"):
            layer = QuickAttentionLayer(ParameterStore(), "qa", 3, rng=rng)
            layer.weight.data[...] = 0
            x = Tensor(rng.standard_normal((2, 3, 4, 4)))
            out = quick_attention_forward(x, layer)

        assert np.allclose(out.data, x.data + 0.5, rtol=0, atol=1e-12)

    def test_zero_input_gives_sigmoid_bias(
        self, rng: np.random.Generator
    ) -> None:
        """Test that a zero input yields sigmoid(bias) per channel."""
        with precision("float64"):
            layer = QuickAttentionLayer(ParameterStore(), "qa", 2, rng=rng)
            layer.bias.data[...] = [-1.0, 2.0]
            out = layer(Tensor(np.zeros((1, 2, 3, 3))))

        assert np.allclose(out.data[0, 0], special.expit(-1.0))
        assert np.allclose(out.data[0, 1], special.expit(2.0))

    def test_composition_oracle(self, rng: np.random.Generator) -> None:
        """Test against an explicit 1x1 convolution, sigmoid and sum."""
        with precision("float64"):
            layer = QuickAttentionLayer(ParameterStore(), "qa", 4, rng=rng)
            layer.bias.data[...] = rng.standard_normal(4)
            x = Tensor(rng.standard_normal((2, 4, 5, 5)))
            out = layer(x)

        w = layer.weight.data[:, :, 0, 0]
        logits = np.einsum("oc,nchw->nohw", w, x.data)
        logits += layer.bias.data[None, :, None, None]
        expected = 1 / (1 + np.exp(-logits)) + x.data
        assert np.allclose(out.data, expected, rtol=0, atol=1e-12)

    def test_bounds(self, rng: np.random.Generator) -> None:
        """Test x < QA(x) < x + 1 elementwise."""
        with precision("float64"):
            layer = QuickAttentionLayer(ParameterStore(), "qa", 3, rng=rng)
            x = Tensor(rng.standard_normal((1, 3, 6, 6)))
            out = layer(x).data

        assert (out > x.data).all()
        assert (out < x.data + 1).all()

    def test_channel_mismatch(self, rng: np.random.Generator) -> None:
        """Test that the input must have the layer's channel count."""
        layer = QuickAttentionLayer(ParameterStore(), "qa", 3, rng=rng)
        with pytest.raises(ShapeError, match="3 channels"):
            layer(Tensor(np.zeros((1, 4, 2, 2))))

    def test_parameter_names(self, rng: np.random.Generator) -> None:
        """Test that the kernel and bias are registered."""
        store = ParameterStore()
        QuickAttentionLayer(store, "enc.qa", 8, rng=rng)
        assert list(store) == ["enc.qa.weight", "enc.qa.bias"]
        assert store.count() == 8 * 8 + 8


class TestExpandedConv:
    """Test the expanded convolution block."""

    def test_zero_weights_residual_is_identity(
        self, rng: np.random.Generator
    ) -> None:
        """Test that a zeroed branch leaves only the identity skip."""
        with precision("float64"):
            store = ParameterStore()
            block = ExpandedConvBlock(
                store, "b", BlockConfig(1, 4, 4), rng=rng
            )
            for _, tensor in store.trainable():
                if tensor.name and tensor.name.endswith(".weight"):
                    tensor.data[...] = 0
            x = Tensor(rng.standard_normal((1, 4, 6, 6)))
            out = expanded_conv_forward(x, block, "infer")

        assert block.residual
        assert np.allclose(out.data, x.data, rtol=0, atol=1e-12)

    @pytest.mark.parametrize(
        ("config", "shape"),
        [
            (BlockConfig(1, 4, 4, dilation=2), (1, 4, 16, 16)),
            (BlockConfig(2, 4, 8, stride=2), (1, 8, 8, 8)),
            (BlockConfig(3, 8, 8, dilation=4, expansion=1), (1, 8, 16, 16)),
        ],
    )
    def test_output_shape(
        self,
        rng: np.random.Generator,
        config: BlockConfig,
        shape: Tuple[int, ...],
    ) -> None:
        """Test same padding and stride handling."""
        block = ExpandedConvBlock(ParameterStore(), "b", config, rng=rng)
        x = Tensor(rng.standard_normal((1, config.in_channels, 16, 16)))
        assert block(x, "train").shape == shape

    @pytest.mark.parametrize(
        ("config", "residual"),
        [
            (BlockConfig(1, 8, 8), True),
            (BlockConfig(1, 8, 16), False),
            (BlockConfig(1, 8, 8, stride=2), False),
        ],
    )
    def test_residual_rule(self, config: BlockConfig, residual: bool) -> None:
        """Test that the skip needs matching shapes."""
        assert config.residual is residual

    def test_composition_oracle(self, rng: np.random.Generator) -> None:
        """Test bit-identity with the individually applied operators."""
        with precision("float64"):
            block = ExpandedConvBlock(
                ParameterStore(), "b", BlockConfig(1, 3, 3, dilation=2), rng=rng
            )
            x = Tensor(rng.standard_normal((2, 3, 6, 6)))
            out = block(x, "infer")

            h = ops.conv2d(x, block.expand.weight)
            h = ops.relu(infer_norm(h, block.bn1))
            h = ops.depthwise_conv2d(h, block.depthwise.weight, dilation=2)
            h = ops.relu(infer_norm(h, block.bn2))
            h = ops.conv2d(h, block.project.weight)
            h = infer_norm(h, block.bn3)
            expected = ops.add(h, x)

        assert np.array_equal(out.data, expected.data)

    def test_parameter_count(self, rng: np.random.Generator) -> None:
        """Test expand, depthwise, project and three norms."""
        store = ParameterStore()
        ExpandedConvBlock(store, "b", BlockConfig(1, 8, 16), rng=rng)
        hidden = 48
        expected = 8 * hidden + 9 * hidden + hidden * 16
        expected += 2 * (hidden + hidden + 16)
        assert store.count() == expected

    def test_gradients(self, rng: np.random.Generator) -> None:
        """Test block gradients in train mode."""
        with precision("float64"):
            store = ParameterStore()
            block = ExpandedConvBlock(
                store, "b", BlockConfig(1, 2, 2, dilation=2, expansion=2), rng=rng
            )
            x = Tensor(rng.standard_normal((2, 2, 5, 5)), requires_grad=True)
            weights = Tensor(rng.standard_normal((2, 2, 5, 5)))
            leaves = [x, *(t for _, t in store.trainable())]
            result = check_gradients(
                "expanded",
                lambda: ops.tensor_sum(ops.mul(block(x, "train"), weights)),
                leaves,
                tolerance=COMPOSED_TOLERANCE,
                entries_per_input=4,
            )

        assert result.passed, result


class TestASPP:
    """Test atrous spatial pyramid pooling."""

    def test_output_shape(self, rng: np.random.Generator) -> None:
        """Test that spatial size is kept and the fuse width is produced."""
        block = ASPPBlock(ParameterStore(), "aspp", ASPPConfig(8, 16), rng=rng)
        x = Tensor(rng.standard_normal((1, 8, 32, 32)))
        assert block(x, "infer").shape == (1, 16, 32, 32)

    def test_constant_input(self, rng: np.random.Generator) -> None:
        """Test that averaging kernels pass a constant to the fuse layer."""
        with precision("float64"):
            config = ASPPConfig(2, 2, rates=(1, 2))
            store = ParameterStore()
            block = ASPPBlock(store, "aspp", config, rng=rng)
            for branch in (block.branch_1x1, *block.branch_dilated):
                kernel = branch.conv.weight.data
                kernel[...] = 1.0 / (kernel.shape[1] * kernel.shape[2] ** 2)
            block.branch_pool.weight.data[...] = 0.5
            block.fuse.conv.weight.data[...] = rng.uniform(
                0.1, 1, block.fuse.conv.weight.shape
            )
            x = Tensor(np.full((1, 2, 8, 8), 0.7))
            out = aspp_forward(x, block, "infer").data

        scale = 1 / np.sqrt(1 + ops.BN_EPSILON)
        # Normed branches carry 0.7 * scale; the pooled branch has no norm.
        branches = np.concatenate([np.full(6, 0.7 * scale), np.full(2, 0.7)])
        kernel = block.fuse.conv.weight.data[:, :, 0, 0]
        expected = np.maximum(kernel @ branches * scale, 0)
        # Border taps of the dilated branches read zero padding.
        assert np.allclose(out[0, :, 4, 4], expected, rtol=0, atol=1e-12)

    def test_branch_names(self, rng: np.random.Generator) -> None:
        """Test the per-rate branch naming."""
        store = ParameterStore()
        ASPPBlock(store, "aspp", ASPPConfig(8, 8), rng=rng)
        names = set(store)
        for branch in ("branch_1x1", "branch_r6", "branch_r12", "branch_r18"):
            assert f"aspp.{branch}.weight" in names
            assert f"aspp.{branch}.bn.gamma" in names
        assert "aspp.branch_pool.bias" in names
        assert "aspp.fuse.weight" in names

    def test_composition_oracle(self, rng: np.random.Generator) -> None:
        """Test bit-identity with manual branch-by-branch evaluation."""
        with precision("float64"):
            block = ASPPBlock(
                ParameterStore(), "aspp", ASPPConfig(3, 4, rates=(2, 3)), rng=rng
            )
            x = Tensor(rng.standard_normal((1, 3, 8, 8)))
            out = block(x, "infer")

            pooled = ops.relu(
                ops.conv2d(
                    ops.global_avg_pool(x),
                    block.branch_pool.weight,
                    block.branch_pool.bias,
                )
            )
            branches = [
                block.branch_1x1(x, "infer"),
                *(b(x, "infer") for b in block.branch_dilated),
                ops.bilinear_resize(pooled, 8, 8),
            ]
            expected = block.fuse(ops.concat(branches), "infer")

        assert np.array_equal(out.data, expected.data)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"in_channels": 0},
            {"in_channels": 4, "width": 0},
            {"in_channels": 4, "rates": ()},
            {"in_channels": 4, "rates": (6, 0)},
        ],
    )
    def test_config_validation(self, kwargs: Dict[str, Any]) -> None:
        """Test that widths and rates must be positive."""
        with pytest.raises(ConfigError):
            ASPPConfig(**kwargs)

    def test_concat_channels(self) -> None:
        """Test the fuse input width."""
        assert ASPPConfig(8, 64).concat_channels == 64 * 5
