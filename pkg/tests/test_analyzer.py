from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isonet.analyzer import (CSV_FIELDS, EXPECTED_RATIOS, analytic_rf_box, analyze, body_totals,
                             impulse_rf_oracle, receptive_fields, recurrence_rf_box, report_csv, report_table, scaling_check)
from isonet.arch import ArchError, MultiplierTransform, apply_multiplier, build_dense1x1, build_isometric, build_pyramid


def test_conv_pyramid_hand_counts():
    r = analyze(build_pyramid(32, 8, [1, 1], 10, layer="conv"))
    b = r.layer("block00")
    # 3x3 conv 8->16 plus four BN vectors
    assert b.params == 8 * 16 * 9 + 4 * 16
    assert b.madds == 16 * 16 * 16 * 9 * 8
    assert r.layer("classifier").params == 32 * 10 + 10
    assert r.total_params - r.trainable_params == 2 * (8 + 16 + 32)
    assert [l.rf_size for l in r.layers] == [3, 5, 9, 37, 37]
    assert r.layer("block01").rf_jump == 4


def test_mv3_block_hand_counts():
    r = analyze(build_isometric(224, 14, 1.0, 16, 1000))
    b = r.layer("block00")
    c, e, z, hw = 64, 384, 96, 14 * 14
    params = (c * e + 4 * e) + (9 * e + 4 * e) + (e * z + z + z * e + e) + (e * c + 4 * c)
    assert b.params == params
    assert b.madds == hw * (c * e + 9 * e + e * c) + 2 * e * z + e * hw
    # SE gating holds two expanded maps plus the residual input
    assert b.activation_elems == 2 * e * hw + c * hw


def test_reference_isometric_totals():
    r = analyze(build_isometric(224, 14, 1.0, 16, 1000))
    assert r.total_params == 4_449_256
    assert r.trainable_params == 4_420_968
    assert r.total_madds == 188_893_184
    assert r.peak_activation_elems == 163_072
    assert r.peak_activation_bytes == 4 * 163_072
    assert not r.layers[0].in_peak and not r.layer("stem").in_peak


def test_peak_independent_of_depth_and_quadratic_in_resolution():
    peaks = {d: analyze(build_isometric(224, d, 1.0, 16, 1000)).peak_activation_elems for d in (7, 14, 28)}
    assert peaks == {7: 40_768, 14: 163_072, 28: 652_288}
    for layers in (8, 32):
        assert analyze(build_isometric(224, 14, 1.0, layers, 1000)).peak_activation_elems == 163_072


def test_dense1x1_scaling_ratios_exact():
    a = build_dense1x1(16, 32, 4)
    for kind in ("width", "resolution", "depth"):
        for alpha in (0.5, 2):
            got = scaling_check(a, kind, alpha)
            assert got == pytest.approx(EXPECTED_RATIOS[kind](alpha), rel=1e-9)


def test_body_totals_requires_body():
    a = build_dense1x1(4, 8, 1)
    a.layers = [l for l in a.layers if l.role != "body"]
    with pytest.raises(ArchError):
        body_totals(analyze(a))


def test_receptive_field_of_isometric_stack():
    a = build_isometric(224, 28, 1.0, 4, 10)
    rfs = receptive_fields(a)
    # S2D block 8, then each 3x3 depthwise adds two cells of 8 pixels
    body = [rfs[a.index(f"block{i:02d}")] for i in range(4)]
    assert [b[0] for b in body] == [8 * (1 + 2 * (i + 1)) for i in range(4)]
    assert all(b[1] == 8 for b in body)


def test_dilated_receptive_field_doubles_growth():
    a = build_isometric(56, 14, 0.25, 3, 10, se=False)
    d = apply_multiplier(a, MultiplierTransform("dilate", 2))
    base = receptive_fields(a)[a.index("block02")][0]
    dil = receptive_fields(d)[d.index("block02")][0]
    assert (dil - 4) == 2 * (base - 4)


def test_upsampling_adapter_gives_fractional_jump():
    a = build_isometric(7, 14, 0.25, 1, 10)
    assert receptive_fields(a)[0][1] == Fraction(1, 2)


@pytest.mark.parametrize("arch", [
    build_isometric(32, 8, 0.25, 2, 10),
    build_pyramid(32, 8, [1, 2], 10, layer="conv"),
    build_pyramid(32, 8, [1, 1, 1], 10),
])
def test_impulse_oracle_matches_analytic(arch):
    for layer in arch.layers:
        if layer.role == "body":
            assert impulse_rf_oracle(arch, layer.id) == analytic_rf_box(arch, layer.id)


def test_dilated_field_is_clipped_on_the_tap_lattice():
    base = build_isometric(16, 8, 0.125, 2, 4, se=False, fc_width=16)
    a = apply_multiplier(base, MultiplierTransform("dilate", 2))
    # centre cell 4 reaches cells 0, 2, 4, 6 and the padding cell 8, so the last row is 13, not 15
    assert recurrence_rf_box(a, "block01") == (0, 17)
    assert analytic_rf_box(a, "block01") == (0, 13) == impulse_rf_oracle(a, "block01")


def test_impulse_oracle_even_kernel_padding():
    # even-sized kernel puts the extra pad after the data
    a = build_pyramid(16, 8, [1, 1], 10, layer="conv")
    for l in a.layers:
        if l.kind == "conv":
            l.params["kernel"] = 4
    for l in a.layers:
        if l.role == "body":
            for unit in (0, 1, 2):
                assert impulse_rf_oracle(a, l.id, unit) == analytic_rf_box(a, l.id, unit)


def test_csv_and_table():
    r = analyze(build_dense1x1(8, 16, 2))
    text = report_csv(r)
    lines = text.strip().split("\n")
    assert lines[0] == ",".join(CSV_FIELDS)
    assert lines[1].startswith("stem,conv1x1,1x3x8x8,1x16x8x8,48,3072,")
    assert len(lines) == len(r.layers) + 1
    assert "total params      730" in report_table(r)


def test_analyze_rejects_invalid_arch():
    a = build_dense1x1(8, 16, 2)
    a.layers[2].params["in_ch"] = 5
    with pytest.raises(ArchError):
        analyze(a)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(1, 2), min_size=1, max_size=3), st.sampled_from(["mv3", "conv"]),
       st.sampled_from([0.5, 2.0]))
def test_generated_pyramid_width_scaling(blocks, layer, alpha):
    a = build_pyramid(8 * 2 ** len(blocks), 64, blocks, 10, layer=layer)
    act, params, madds = scaling_check(a, "width", alpha)
    # biases and the SE gate scale linearly, so only the dominant terms are quadratic
    assert act == pytest.approx(alpha, rel=1e-9)
    assert params == pytest.approx(alpha * alpha, rel=0.15)
    assert madds == pytest.approx(alpha * alpha, rel=0.15)
    assert (params - alpha * alpha) * (alpha - 1) <= 0


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.sampled_from([8, 16]), st.integers(1, 3))
def test_generated_isometric_rf_formula(layers, res, k_exp):
    k = 2 ** k_exp
    a = build_isometric(res * k, res, 0.125, layers, 10, se=False)
    last = f"block{layers - 1:02d}"
    assert receptive_fields(a)[a.index(last)][0] == k * (1 + 2 * layers)
