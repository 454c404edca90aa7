import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isonet.arch import (ArchError, ArchSpec, LayerSpec, MultiplierTransform, apply_multiplier,
                         build_dense1x1, build_isometric, build_pyramid, block_correspondence,
                         infer_shapes, param_shapes, resolution_blocks, round_channels, skip_strides,
                         validate)


@pytest.mark.parametrize("x, want", [(64, 64), (32, 32), (12, 16), (11.9, 8), (20, 24), (4, 8),
                                     (96, 96), (768 * 0.5, 384), (1.5 * 64, 96)])
def test_round_channels(x, want):
    assert round_channels(x) == want


def test_round_channels_underflow():
    with pytest.raises(ArchError):
        round_channels(3.9)


def test_isometric_layout():
    a = build_isometric(224, 14, 1.0, 16, 1000)
    kinds = [l.kind for l in a.layers]
    assert kinds[:2] == ["s2d", "conv1x1"]
    assert kinds.count("mv3_se_block") == 16
    assert kinds[-4:] == ["conv1x1", "avg_pool", "fc", "fc"]
    assert a.layers[0].params["block"] == 16
    blk = a.layer("block00").params
    assert (blk["in_ch"], blk["expand"], blk["out_ch"], blk["kernel"], blk["se_reduction"]) == (64, 384, 64, 3, 4)
    assert blk["residual"]


def test_isometric_upsampling_adapter():
    a = build_isometric(14, 28, 1.0, 2, 10)
    assert a.layers[0].kind == "upsample_input" and a.layers[0].params["factor"] == 2
    assert infer_shapes(a)[1][0][1:] == (3, 28, 28)


def test_width_multiplier_rounding_in_builder():
    a = build_isometric(224, 14, 0.5, 2, 10)
    assert a.layer("stem").params["out_ch"] == 32
    assert a.layer("block00").params["expand"] == 192
    assert a.layer("head_conv").params["out_ch"] == 384
    assert a.layer("fc1").params["out_features"] == 1280


def test_indivisible_resolutions_rejected():
    with pytest.raises(ArchError):
        build_isometric(224, 15)
    with pytest.raises(ArchError):
        build_isometric(14, 21)


def test_json_round_trip(tmp_path):
    a = build_pyramid(32, 16, [2, 2], 10)
    path = tmp_path / "a.json"
    a.save(path)
    b = ArchSpec.load(path)
    assert b.to_dict() == a.to_dict()


def test_malformed_json_raises_arch_error():
    with pytest.raises(ArchError):
        ArchSpec.from_dict({"layers": [{"kind": "fc"}]})


def test_validate_reports_chain_break_and_duplicates():
    a = build_dense1x1(8, 16, 2)
    a.layers[2].params["in_ch"] = 17
    assert any("chain break" in m for m in validate(a))
    b = build_dense1x1(8, 16, 2)
    b.layers[2].id = b.layers[1].id
    assert any("duplicate" in m for m in validate(b))
    c = build_dense1x1(8, 16, 2)
    c.layers[-1].params["act"] = "relu"
    assert any("activation" in m for m in validate(c))


def test_param_names_for_block():
    names = set(param_shapes(build_isometric(16, 8, 0.125, 1, 4).layer("block00")))
    assert "block00.se.w1" in names and "block00.dw.bn.var" in names and "block00.project.w" in names


def test_width_transform_scales_non_fc_layers():
    a = build_isometric(224, 14, 1.0, 4, 1000)
    b = apply_multiplier(a, MultiplierTransform("width", 2))
    assert b.layer("block00").params["out_ch"] == 128
    assert b.layer("block00").params["expand"] == 768
    assert b.layer("head_conv").params["out_ch"] == 1536
    assert b.layer("fc1").params["in_features"] == 1536
    assert b.layer("fc1").params["out_features"] == 1280
    # the input spec is untouched
    assert a.layer("block00").params["out_ch"] == 64


def test_resolution_transform_rebuilds_adapter():
    a = build_isometric(224, 14, 1.0, 2, 10)
    b = apply_multiplier(a, MultiplierTransform("resolution", 0.5))
    assert (b.input_res, b.internal_res) == (112, 7)
    assert b.layers[0].params["block"] == 16
    with pytest.raises(ArchError):
        apply_multiplier(build_isometric(14, 7, 1, 1, 10), MultiplierTransform("resolution", 0.5))


def test_depth_transform_renumbers_and_keeps_strided_layers():
    a = build_pyramid(32, 8, [2, 4], 10)
    b = apply_multiplier(a, MultiplierTransform("depth", 2))
    body = [l for l in b.layers if l.role == "body"]
    assert [l.id for l in body] == [f"block{i:02d}" for i in range(12)]
    assert [l.stride for l in body] == [1, 1, 1, 2] + [1] * 7 + [2]
    c = apply_multiplier(a, MultiplierTransform("depth", 0.5))
    assert [l.stride for l in c.layers if l.role == "body"] == [2, 1, 2]


def test_identity_multipliers():
    a = build_isometric(56, 14, 0.5, 3, 10)
    for kind in ("width", "depth", "resolution"):
        assert apply_multiplier(a, MultiplierTransform(kind, 1)).to_dict() == a.to_dict()


def test_dilate_transform():
    a = build_pyramid(32, 8, [2, 2], 10)
    b = apply_multiplier(a, MultiplierTransform("dilate", 2))
    body = [l for l in b.layers if l.role == "body"]
    assert [l.params.get("dilation", 1) for l in body if l.stride == 1] == [2, 2]
    assert [l.params["kernel"] for l in body if l.stride == 2] == [5, 5]
    with pytest.raises(ArchError):
        MultiplierTransform("dilate", 1.5)


def test_skip_strides_isometric_and_pyramid():
    a = build_isometric(224, 14, 1.0, 2, 10)
    b = skip_strides(a, 56)
    assert b.layers[0].params["block"] == 4 and b.input_res == 56 and b.internal_res == 14
    p = build_pyramid(32, 8, [1, 1, 1], 10)
    q = skip_strides(p, 8)
    assert [l.stride for l in q.layers if l.role == "body"] == [1, 1, 2]
    with pytest.raises(ArchError):
        skip_strides(p, 12)


def test_resolution_blocks_and_correspondence():
    a = build_pyramid(32, 16, [2, 3, 2], 10)
    assert [(b.res, b.channels, b.layers) for b in resolution_blocks(a)] == [(32, 16, 2), (16, 32, 3), (8, 64, 2)]
    rep = block_correspondence(a, 0.5)
    assert rep.exact and rep.aligned == [(0, 1), (1, 2)]
    assert (rep.dropped_first.res, rep.dropped_first.channels) == (32, 8)
    assert (rep.added_last.res, rep.added_last.channels) == (4, 64)


def test_correspondence_degenerate_for_isometric():
    rep = block_correspondence(build_isometric(56, 14, 1.0, 4, 10), 0.5)
    assert rep.degenerate and not rep.exact


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 3), min_size=2, max_size=4), st.sampled_from([8, 16]),
       st.sampled_from(["mv3", "conv"]))
def test_generated_pyramids_validate_and_halve(blocks, base, layer):
    a = build_pyramid(8 * 2 ** len(blocks), base, blocks, 10, layer=layer)
    assert validate(a) == []
    res = [b.res for b in resolution_blocks(a)]
    assert res == [a.input_res // 2 ** i for i in range(len(blocks))]
    assert block_correspondence(a, 0.5).exact


def test_layer_lookup_errors():
    a = build_dense1x1(4, 8, 1)
    with pytest.raises(KeyError):
        a.layer("nope")
    assert a.index("block00") == 1
    assert isinstance(a.layers[0], LayerSpec)
    assert np.prod(infer_shapes(a)[-1][1]) == 10
