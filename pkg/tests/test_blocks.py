from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stairnet.blocks import (
    MixAttention,
    MixAttentionConfig,
    StairCell,
    StcConfig,
    TransformationBlock,
    branch_correlation,
    reduction_rate,
    stc_branch_widths,
)
from stairnet.profiler import receptive_field, stair_cell_cost
from stairnet.tensor import ConvSpec, Tensor, no_grad


def test_halving_schedule():
    assert stc_branch_widths(32) == [16, 8, 4, 4]
    assert stc_branch_widths(256) == [128, 64, 32, 32]
    assert stc_branch_widths(12, 3) == [6, 3, 3]
    assert stc_branch_widths(7, 1) == [7]
    with pytest.raises(ValueError, match="divisible"):
        stc_branch_widths(20, 4)


def test_dilations_and_equivalent_kernels():
    cfg = StcConfig(32, base_dilation=1)
    assert cfg.dilations == [1, 2, 3, 4]
    assert [receptive_field(3, d) for d in cfg.dilations] == [3, 5, 7, 9]
    assert StcConfig(64, base_dilation=2).dilations == [2, 3, 4, 5]


def test_unhalved_cell_is_full_width():
    assert StcConfig(32, halving=False).widths == [32] * 4


def test_reduction_rate_grows_with_width():
    assert [reduction_rate(w) for w in (8, 32, 64, 256)] == [2, 2, 4, 16]
    with pytest.raises(ValueError, match="hidden"):
        MixAttentionConfig(2)


@pytest.mark.parametrize("halving", [True, False])
@pytest.mark.parametrize("depthwise", [False, True])
def test_stair_cell_preserves_shape(halving, depthwise, rng):
    cell = StairCell(StcConfig(16, base_dilation=2, halving=halving, depthwise=depthwise), rng,
                     np.float64)
    x = Tensor(rng.standard_normal((2, 16, 9, 7)))
    assert cell(x).shape == x.shape


def test_stair_cell_rejects_wrong_width(rng):
    cell = StairCell(StcConfig(16), rng)
    with pytest.raises(ValueError, match="width 16"):
        cell(Tensor(np.zeros((1, 8, 4, 4), np.float32)))


def test_stair_cell_taps_are_the_chained_layer_outputs(rng):
    cell = StairCell(StcConfig(16, attention=False), rng, np.float64)
    cell.capture = True
    x = Tensor(rng.standard_normal((1, 16, 6, 6)))
    y = cell(x)
    assert [t.shape[1] for t in cell.taps] == [8, 4, 2, 2]
    # without attention the output is the input plus the concatenated taps
    np.testing.assert_allclose(y.data, x.data + np.concatenate([t.data for t in cell.taps], 1))
    h = x
    for layer, tap in zip(cell.layers, cell.taps):
        h = layer(h)
        np.testing.assert_array_equal(h.data, tap.data)


def test_conv_cost_of_halved_cell_is_43_64_of_one_full_layer(rng):
    c, hw = 32, (8, 6)
    cell = StairCell(StcConfig(c, attention=False), None)
    _, macs = stair_cell_cost(cell, hw)
    full = ConvSpec(c, c, 3, bias=False).macs(*hw)
    assert Fraction(macs, full) == Fraction(43, 64)


def test_depthwise_layer_cost_ratio():
    c, hw = 32, (8, 8)
    std = StairCell(StcConfig(c, attention=False, halving=False, branch_count=1), None)
    dw = StairCell(StcConfig(c, attention=False, halving=False, branch_count=1, depthwise=True), None)
    _, m_std = stair_cell_cost(std, hw)
    _, m_dw = stair_cell_cost(dw, hw)
    assert Fraction(m_dw, m_std) == Fraction(1, 9) + Fraction(1, c)


def test_stair_cell_param_count_matches_enumeration(rng):
    for cfg in (StcConfig(32), StcConfig(64, depthwise=True), StcConfig(16, halving=False)):
        cell = StairCell(cfg, rng)
        params, _ = stair_cell_cost(cell, (4, 4))
        assert params == cell.num_parameters()


def test_mix_attention_starts_with_constant_half_gates(rng):
    att = MixAttention(MixAttentionConfig(16), rng, np.float64)
    x = Tensor(rng.standard_normal((2, 16, 5, 5)))
    np.testing.assert_allclose(att.channel_gate(x).data, 0.5)
    np.testing.assert_allclose(att(x).data, 0.25 * x.data, rtol=1e-14)


def test_mix_attention_is_channel_then_spatial(rng):
    att = MixAttention(MixAttentionConfig(8), rng, np.float64)
    for p in att.parameters():
        p.data = rng.standard_normal(p.shape)
    x = rng.standard_normal((1, 8, 4, 5))

    def sig(z):
        return 1 / (1 + np.exp(-z))

    pooled = x.mean(axis=(2, 3))
    hidden = np.maximum(pooled @ att.fc1.weight.data.T + att.fc1.bias.data, 0)
    cg = sig(hidden @ att.fc2.weight.data.T + att.fc2.bias.data)[:, :, None, None]
    xc = x * cg
    masks = np.concatenate([xc.mean(1, keepdims=True), xc.max(1, keepdims=True)], 1)
    from stairnet.tensor import conv2d
    sg = sig(conv2d(Tensor(masks), att.spatial.weight, att.spatial.spec, att.spatial.bias).data)
    np.testing.assert_allclose(att(Tensor(x)).data, xc * sg, rtol=1e-12)


def test_transformation_block_shapes(rng):
    tb = TransformationBlock(64, 2, 3, rng)
    assert tb.mid_channels == 32
    assert tb(Tensor(rng.standard_normal((1, 3, 8, 6)).astype(np.float32))).shape == (1, 64, 8, 6)
    with pytest.raises(ValueError, match="no intermediate"):
        TransformationBlock(4, 8)


# --- branch correlation ----------------------------------------------------------------

def test_correlation_diagonal_and_symmetry(rng):
    taps = [rng.standard_normal((1, c, 6, 6)) for c in (8, 4, 2, 2)]
    m = branch_correlation(taps)
    assert m.shape == (4, 4)
    np.testing.assert_array_equal(np.diag(m), 1.0)
    assert np.max(np.abs(m - m.T)) <= 1e-12
    assert np.all(np.abs(m) <= 1.0)


def test_correlation_of_identical_and_scaled_branches(rng):
    a = rng.standard_normal((1, 4, 5, 5))
    m = branch_correlation([a, a, 3 * a + 1, -a])
    np.testing.assert_allclose(m[0, 1:], [1.0, 1.0, -1.0], atol=1e-12)


def test_constant_branch_gives_undefined_entries(rng):
    taps = [rng.standard_normal((1, 2, 4, 4)), np.full((1, 2, 4, 4), 0.3)]
    m = branch_correlation(taps)
    assert np.isnan(m[0, 1]) and np.isnan(m[1, 0]) and np.isnan(m[1, 1]) and m[0, 0] == 1.0


def test_correlation_of_an_untrained_cell_has_unit_diagonal(rng):
    cell = StairCell(StcConfig(32), rng)
    cell.capture = True
    with no_grad():
        cell.eval()
        cell(Tensor(rng.standard_normal((1, 32, 12, 12)).astype(np.float32)))
    m = branch_correlation(cell.taps)
    np.testing.assert_array_equal(np.diag(m), 1.0)
    assert np.max(np.abs(m - m.T)) <= 1e-12


def test_misaligned_taps_rejected(rng):
    with pytest.raises(ValueError, match="aligned"):
        branch_correlation([np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 4, 5))])


@settings(max_examples=25, deadline=None)
@given(exp=st.integers(0, 3), branches=st.integers(1, 4), dil=st.integers(1, 4),
       halving=st.booleans(), depthwise=st.booleans(), h=st.integers(3, 9), w=st.integers(3, 9))
def test_random_cells_preserve_shape_and_widths(exp, branches, dil, halving, depthwise, h, w):
    width = 8 << exp
    cfg = StcConfig(width, branches, dil, depthwise, attention=True, halving=halving)
    if halving:
        assert sum(cfg.widths) == width
    cell = StairCell(cfg, np.random.default_rng(0))
    with no_grad():
        y = cell(Tensor(np.random.default_rng(1).standard_normal((1, width, h, w)).astype(np.float32)))
    assert y.shape == (1, width, h, w)
    params, _ = stair_cell_cost(cell, (h, w))
    assert params == cell.num_parameters()
