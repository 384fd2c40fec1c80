"""Test network construction and the forward pass."""

from typing import Any, Dict, Tuple

import attr
import numpy as np
import pytest

from histoseg.errors import ConfigError, ShapeError
from histoseg.flops import count_parameters
from histoseg.gradcheck import network_case
from histoseg.network import (
    DILATION_SCHEDULE,
    NetworkSpec,
    block_configs,
    build,
    make_divisible,
)
from histoseg.tensor import Tensor, precision

DEFAULT_PARAMETERS = 215089
DESK = NetworkSpec(input_size=(64, 64))


@pytest.fixture(scope="module")
def desk_graph() -> Any:
    """Desk-scale graph shared by the read-only tests."""
    return build(DESK, seed=0)


def _image(seed: int, size: int = 64, n: int = 1) -> Tensor:
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(0, 1, size=(n, 3, size, size)))


class TestSpec:
    """Test the network spec and its derived widths."""

    @pytest.mark.parametrize(
        ("value", "expected"),
        [(4.0, 8), (8.0, 8), (12.0, 16), (40.0, 40), (64.0, 64), (90.0, 88)],
    )
    def test_make_divisible(self, value: float, expected: int) -> None:
        """Test rounding to multiples of 8 with the 8 floor."""
        assert make_divisible(value) == expected

    def test_default_widths(self) -> None:
        """Test the scaled widths of the default spec."""
        spec = NetworkSpec()
        widths = [c.out_channels for c in block_configs(spec)]
        assert spec.stem_channels == 8
        assert widths == [8, 8, 8, 8, 8, 8, 16, 16, 16, 16, 24, 24, 24, 40, 40, 40]
        assert spec.aspp_channels == 64
        assert spec.decoder_channels == 64

    def test_width_doubling(self) -> None:
        """Test that doubling the multiplier doubles every width."""
        one = block_configs(NetworkSpec(width_multiplier=1.0))
        two = block_configs(NetworkSpec(width_multiplier=2.0))
        for a, b in zip(one, two):
            assert b.out_channels == 2 * a.out_channels
            assert b.hidden_channels == 2 * a.hidden_channels
        assert NetworkSpec(width_multiplier=2.0).aspp_channels == 512

    def test_schedule(self) -> None:
        """Test strides and dilations of the sixteen blocks."""
        configs = block_configs(NetworkSpec())
        assert len(configs) == 16
        assert [c.index for c in configs if c.stride == 2] == [2, 4]
        assert tuple(c.dilation for c in configs) == DILATION_SCHEDULE
        assert [c.residual for c in configs[:4]] == [True, False, True, False]

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"input_size": (250, 256)},
            {"input_size": (0, 8)},
            {"width_multiplier": 0},
            {"dropout": 1.0},
            {"expansion": 0},
            {"aspp_rates": ()},
            {"aspp_width": 0},
            {"bn_momentum": 1.0},
        ],
    )
    def test_invalid(self, kwargs: Dict[str, Any]) -> None:
        """Test that invalid specs are config errors."""
        with pytest.raises(ConfigError):
            NetworkSpec(**kwargs)


class TestBuild:
    """Test parameter initialisation."""

    def test_parameter_count(self) -> None:
        """Test the frozen parameter count of the default spec."""
        _, store = build(NetworkSpec(), seed=0)
        assert store.count() == DEFAULT_PARAMETERS
        assert count_parameters(NetworkSpec()) == DEFAULT_PARAMETERS

    @pytest.mark.parametrize(
        "spec",
        [
            NetworkSpec(width_multiplier=0.5),
            NetworkSpec(encoder_qa=False, decoder_qa=False, qa_residual=False),
            NetworkSpec(aspp_rates=(2, 4), expansion=4),
        ],
    )
    def test_count_matches_walk(self, spec: NetworkSpec) -> None:
        """Test the analytic count against the built store."""
        _, store = build(spec, seed=0)
        assert store.count() == count_parameters(spec)

    def test_same_seed_bit_identical(self) -> None:
        """Test that a seed fully determines the initial store."""
        _, a = build(DESK, seed=3)
        _, b = build(DESK, seed=3)
        _, c = build(DESK, seed=4)
        assert list(a) == list(b)
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)
        assert not np.array_equal(a["stem.weight"].data, c["stem.weight"].data)

    def test_norm_initialisation(self) -> None:
        """Test gamma 1, beta 0 and unit running statistics."""
        _, store = build(DESK, seed=0)
        assert (store["stem.bn.gamma"].data == 1).all()
        assert (store["stem.bn.beta"].data == 0).all()
        assert (store["stem.bn.running_var"].data == 1).all()
        assert not store["stem.bn.running_mean"].requires_grad

    @pytest.mark.parametrize(
        ("switch", "missing"),
        [
            ("encoder_qa", "encoder_qa.weight"),
            ("decoder_qa", "decoder.qa.weight"),
            ("qa_residual", "decoder.skip.weight"),
        ],
    )
    def test_ablation_switches(self, switch: str, missing: str) -> None:
        """Test that each switch removes its layer."""
        _, full = build(DESK, seed=0)
        _, ablated = build(attr.evolve(DESK, **{switch: False}), seed=0)
        assert missing in full
        assert missing not in ablated


class TestForward:
    """Test the forward pass."""

    def test_desk_batch(self, desk_graph: Any) -> None:
        """Test a 2 x 3 x 64 x 64 batch maps to probabilities."""
        graph, _ = desk_graph
        out = graph(_image(0, n=2), "infer")
        assert out.shape == (2, 1, 64, 64)
        assert (out.data > 0).all()
        assert (out.data < 1).all()

    def test_infer_deterministic(self, desk_graph: Any) -> None:
        """Test that infer mode is bit-identical across runs."""
        graph, _ = desk_graph
        x = _image(1)
        assert np.array_equal(graph(x, "infer").data, graph(x, "infer").data)

    def test_train_mode_reseeded(self) -> None:
        """Test that train mode repeats once the dropout stream is reseeded."""
        graph, _ = build(DESK, seed=0)
        x = _image(2, n=2)
        graph.reset_rng(5)
        first = graph(x, "train").data
        graph.reset_rng(5)
        second = graph(x, "train").data
        assert np.array_equal(first, second)

    @pytest.mark.parametrize("size", [(1, 3, 60, 64), (1, 3, 64, 12)])
    def test_indivisible_input(
        self, desk_graph: Any, size: Tuple[int, ...]
    ) -> None:
        """Test the error telling the caller to pad."""
        graph, _ = desk_graph
        with pytest.raises(ShapeError, match="pad_to_multiple"):
            graph(Tensor(np.zeros(size)))

    def test_wrong_channels(self, desk_graph: Any) -> None:
        """Test that the input must be RGB."""
        graph, _ = desk_graph
        with pytest.raises(ShapeError, match="N x 3"):
            graph(Tensor(np.zeros((1, 1, 64, 64))))

    def test_trace(self, desk_graph: Any) -> None:
        """Test the stage shapes and the output-stride plateau."""
        graph, _ = desk_graph
        trace = dict(graph.trace(_image(3)))
        assert trace["input"] == (1, 3, 64, 64)
        assert trace["stem"] == (1, 8, 32, 32)
        assert trace["block2"] == (1, 8, 16, 16)
        for index in range(4, 17):
            assert trace[f"block{index}"][2:] == (8, 8)
        assert trace["encoder_qa"] == trace["block6"]
        assert trace["block16"] == (1, 40, 8, 8)
        assert trace["aspp"] == (1, 64, 8, 8)
        assert trace["decoder.pool"] == (1, 64, 8, 8)
        assert trace["decoder.residual"] == (1, 64, 8, 8)
        assert trace["head"] == (1, 1, 8, 8)
        assert trace["output"] == (1, 1, 64, 64)

    def test_full_resolution_trace(self) -> None:
        """Test the 32 x 32 plateau of a 256 x 256 input up to the output."""
        graph, _ = build(NetworkSpec(), seed=0)
        trace = dict(graph.trace(_image(6, size=256)))
        assert trace["stem"] == (1, 8, 128, 128)
        plateau = [f"block{i}" for i in range(7, 17)]
        plateau += ["aspp", "decoder.pool", "decoder.fuse", "decoder.qa"]
        for name in plateau:
            assert trace[name][2:] == (32, 32), name
        assert trace["output"] == (1, 1, 256, 256)

    def test_trace_order(self, desk_graph: Any) -> None:
        """Test that stages are reported in execution order."""
        graph, _ = desk_graph
        names = [name for name, _ in graph.trace(_image(4))]
        assert names[:3] == ["input", "stem", "block1"]
        assert names.index("encoder_qa") == names.index("block6") + 1
        assert names[-4:] == ["decoder.qa", "decoder.residual", "head", "output"]

    def test_ablated_trace(self) -> None:
        """Test that a QA-free graph skips the attention stages."""
        graph, _ = build(
            NetworkSpec(
                input_size=(64, 64),
                encoder_qa=False,
                decoder_qa=False,
                qa_residual=False,
            ),
            seed=0,
        )
        names = [name for name, _ in graph.trace(_image(5))]
        assert "encoder_qa" not in names
        assert "decoder.qa" not in names
        assert "decoder.residual" not in names
        assert names[-1] == "output"


def test_network_gradients() -> None:
    """Test the reduced-width graph plus multi-loss by finite differences."""
    with precision("float64"):
        result = network_case(0, entries_per_input=3)

    assert result.passed, result
