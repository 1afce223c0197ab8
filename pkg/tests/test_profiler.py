import json
from fractions import Fraction

import numpy as np
import pytest

from stairnet.nn import Parameter
from stairnet.net import ModelConfig, build_model
from stairnet.profiler import (
    ParamMismatch,
    depthwise_ratio,
    halving_ratio,
    profile,
    receptive_field,
    reduction_factor,
    stu_receptive_fields,
    verify_runtime_params,
)


def test_receptive_field_formula():
    assert receptive_field(3, 1) == 3
    assert receptive_field(3, 4) == 9
    assert receptive_field(5, 2) == 9
    assert receptive_field(1, 7) == 1
    with pytest.raises(ValueError):
        receptive_field(3, 0)


def test_halving_ratio_against_direct_sum():
    # C*C/2 + C/2*C/4 + C/4*C/8 + C/8*C/8 over C*C
    assert halving_ratio(4) == Fraction(1, 2) + Fraction(1, 8) + Fraction(1, 32) + Fraction(1, 64)
    assert halving_ratio(1) == 1
    assert halving_ratio(2) == Fraction(1, 2) + Fraction(1, 4)
    assert reduction_factor(4) == Fraction(256, 43)


def test_depthwise_ratio_values():
    assert depthwise_ratio(3, 32) == Fraction(1, 9) + Fraction(1, 32)
    assert depthwise_ratio(1, 1) == 2


def test_stu_receptive_field_table():
    assert stu_receptive_fields(ModelConfig()) == {
        "branch1": [3, 5, 7, 9], "branch2": [5, 7, 9, 11],
        "branch3": [7, 9, 11, 13], "branch4": [9, 11, 13, 15]}


@pytest.fixture(scope="module")
def base_report():
    return profile(ModelConfig(stages=1))


def test_report_totals_match_rows(base_report):
    r = base_report
    assert r.params == sum(row.params for row in r.rows)
    assert r.macs == sum(row.macs for row in r.rows)
    for depth in (1, 2, 3):
        g = r.group(depth)
        assert sum(p for p, _ in g.values()) == r.params
        assert sum(m for _, m in g.values()) == r.macs


def test_report_params_equal_model_enumeration(base_report):
    assert base_report.params == build_model(ModelConfig(stages=1), seed=None).num_parameters()


def test_report_serialisation(base_report):
    d = json.loads(base_report.to_json())
    assert d["totals"]["params"] == base_report.params
    assert d["ratios"]["halving_ratio"] == "43/64"
    assert "MACs" in d["note"]
    text = base_report.to_text()
    assert "43/64" in text and "branch4: 9, 11, 13, 15" in text


def test_macs_scale_with_pixels_and_params_do_not(base_report):
    big = profile(ModelConfig(stages=1), (384, 288))
    assert big.params == base_report.params
    assert Fraction(big.macs, base_report.macs) == Fraction(384 * 288, 256 * 192)


def test_depthwise_variant_is_cheaper(base_report):
    dw = profile(ModelConfig(stages=1, depthwise=True))
    assert dw.params < base_report.params and dw.macs < base_report.macs


def test_more_stages_cost_more():
    costs = [profile(ModelConfig(stages=s)) for s in (1, 2, 3)]
    assert costs[0].params < costs[1].params < costs[2].params
    assert costs[0].macs < costs[1].macs < costs[2].macs


def test_verify_runtime_params_catches_an_unaccounted_parameter():
    model = build_model(ModelConfig(trunk_width=8, input_size=(64, 64), stem_width=8,
                                    stem_blocks=1), seed=0)
    assert verify_runtime_params(model)
    model.head.stray = Parameter(np.zeros(3, np.float32))
    with pytest.raises(ParamMismatch, match="head"):
        verify_runtime_params(model)
