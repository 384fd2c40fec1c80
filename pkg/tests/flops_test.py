"""Test the analytic cost model."""

import pytest

from histoseg.flops import FlopReport, count_flops, count_parameters
from histoseg.network import NetworkSpec

DEFAULT_MACS = 240_081_408
BLOCK_MACS = 128_925_696
ENCODER_QA_MACS = 65_536
DECODER_QA_MACS = 4_194_304


@pytest.fixture(scope="module")
def report() -> FlopReport:
    """Cost table of the default spec at 256 x 256."""
    return count_flops(NetworkSpec())


def test_total(report: FlopReport) -> None:
    """Test the frozen multiply-add total."""
    assert report.input_size == (256, 256)
    assert report.total_macs == DEFAULT_MACS


def test_blocks_total(report: FlopReport) -> None:
    """Test the share of the sixteen expanded convolution blocks."""
    blocks = sum(r.macs for r in report.rows if r.name.startswith("block"))
    assert blocks == BLOCK_MACS


def test_attention_rows(report: FlopReport) -> None:
    """Test that both quick attention units are separate rows."""
    rows = {r.name: r for r in report.rows if r.attention}
    assert set(rows) == {"encoder_qa", "decoder.qa"}
    assert rows["encoder_qa"].macs == ENCODER_QA_MACS
    assert rows["encoder_qa"].output_shape == (8, 32, 32)
    assert rows["decoder.qa"].macs == DECODER_QA_MACS
    assert rows["decoder.qa"].elementwise == 64 * 32 * 32
    assert report.attention_macs == ENCODER_QA_MACS + DECODER_QA_MACS


def test_ablation_removes_attention() -> None:
    """Test that the QA-free baseline costs exactly the attention less."""
    full = count_flops(NetworkSpec())
    bare = count_flops(
        NetworkSpec(encoder_qa=False, decoder_qa=False, qa_residual=True)
    )
    assert bare.attention_macs == 0
    assert full.total_macs - bare.total_macs == full.attention_macs


def test_spatial_rows_quadruple() -> None:
    """Test that doubling both extents quadruples every spatial row."""
    small = count_flops(NetworkSpec(), (256, 256))
    large = count_flops(NetworkSpec(), (512, 512))
    for a, b in zip(small.rows, large.rows):
        assert a.name == b.name
        if a.output_shape[1:] == (1, 1):
            assert b.macs == a.macs
        else:
            assert b.macs == 4 * a.macs


def test_table_format(report: FlopReport) -> None:
    """Test the printed table lists every row and the totals."""
    table = report.format_table()
    lines = table.splitlines()
    assert len(lines) == len(report.rows) + 3
    assert "240,081,408" in lines[-2]
    assert lines[-1].startswith("quick attention")
    flagged = [line for line in lines if line.endswith("*")]
    assert [line.split()[0] for line in flagged] == ["encoder_qa", "decoder.qa"]


def test_parameters_match_rows(report: FlopReport) -> None:
    """Test that the parameter count sums the rows."""
    assert report.total_params == count_parameters(NetworkSpec())
    assert report.total_params == 215_089
