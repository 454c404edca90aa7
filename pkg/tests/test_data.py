import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isonet.arch import ArchError, build_isometric, skip_strides
from isonet.data import (CKPT_MAGIC, CheckpointError, DataFormatError, DatasetHandle, InputAdapter, adapt_input,
                         csv_text, decode_checkpoint, decode_ppm, encode_checkpoint, encode_ppm, load_cifar_binary,
                         load_idx, normalize_pixels, read_checkpoint, synth_shapes, trunk_start, write_checkpoint,
                         write_csv, write_idx, write_ppm)


def test_normalize_pixels_range():
    assert normalize_pixels(np.array([0, 255], np.uint8)).tolist() == [-1.0, 1.0]


def test_synth_shapes_deterministic_and_resolution_independent_labels():
    a = synth_shapes(0, 20, resolution=14)
    b = synth_shapes(0, 20, resolution=14)
    c = synth_shapes(0, 20, resolution=56)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, c.labels)
    assert a.images.shape == (20, 3, 14, 14) and c.images.shape == (20, 3, 56, 56)
    assert a.images.min() >= -1 and a.images.max() <= 1
    # frozen regression values for seed 0
    assert synth_shapes(0, 5).labels.tolist() == [4, 4, 9, 3, 4]


def test_synth_shapes_splits_and_classes():
    tr = synth_shapes(0, 50, split="train")
    ev = synth_shapes(0, 50, split="eval")
    assert not np.array_equal(tr.labels, ev.labels)
    assert synth_shapes(1, 200, classes=3).labels.max() == 2
    with pytest.raises(ValueError):
        synth_shapes(0, 1, classes=11)


def test_dataset_handle_validation():
    with pytest.raises(DataFormatError):
        DatasetHandle("x", "train", np.zeros((2, 1, 2, 2)), np.array([0, 5]), 3)
    with pytest.raises(DataFormatError):
        DatasetHandle("x", "train", np.zeros((2, 1, 2, 2)), np.array([0]), 3)
    d = synth_shapes(0, 10)
    assert len(d.subset(4)) == 4 and d.image_shape == (3, 28, 28)


def _idx_pair(tmp_path, n=5, gz=False):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (n, 6, 7), dtype=np.uint8)
    labels = rng.integers(0, 10, n, dtype=np.uint8)
    ip, lp = tmp_path / "t-images-idx3-ubyte", tmp_path / "t-labels-idx1-ubyte"
    write_idx(ip, lp, imgs, labels)
    if gz:
        for p in (ip, lp):
            gp = p.with_name(p.name + ".gz")
            gp.write_bytes(gzip.compress(p.read_bytes()))
        ip, lp = ip.with_name(ip.name + ".gz"), lp.with_name(lp.name + ".gz")
    return imgs, labels, ip, lp


@pytest.mark.parametrize("gz", [False, True])
def test_idx_round_trip(tmp_path, gz):
    imgs, labels, ip, _ = _idx_pair(tmp_path, gz=gz)
    d = load_idx(ip, num_classes=10)
    assert d.images.shape == (5, 1, 6, 7)
    assert np.array_equal(d.images[:, 0], normalize_pixels(imgs))
    assert d.labels.tolist() == labels.tolist()


def test_idx_header_layout(tmp_path):
    imgs, _, ip, _ = _idx_pair(tmp_path)
    raw = ip.read_bytes()
    assert struct.unpack(">4I", raw[:16]) == (0x803, 5, 6, 7)


def test_idx_errors(tmp_path):
    _, _, ip, lp = _idx_pair(tmp_path)
    raw = ip.read_bytes()
    ip.write_bytes(raw[:-1])
    with pytest.raises(DataFormatError, match="payload"):
        load_idx(ip, lp)
    ip.write_bytes(b"\x00\x00\x08\x01" + raw[4:])
    with pytest.raises(DataFormatError, match="magic"):
        load_idx(ip, lp)
    with pytest.raises(DataFormatError, match="infer"):
        load_idx(tmp_path / "plain.bin")


def test_cifar_binary(tmp_path):
    rows = np.zeros((3, 3073), np.uint8)
    rows[:, 0] = [1, 7, 3]
    rows[1, 1] = 255
    (tmp_path / "data_batch_1.bin").write_bytes(rows.tobytes())
    d = load_cifar_binary(tmp_path)
    assert d.images.shape == (3, 3, 32, 32) and d.labels.tolist() == [1, 7, 3]
    assert d.images[1, 0, 0, 0] == 1.0 and d.images[0, 0, 0, 0] == -1.0
    bad = tmp_path / "bad.bin"
    bad.write_bytes(rows.tobytes()[:-5])
    with pytest.raises(DataFormatError):
        load_cifar_binary(bad)
    with pytest.raises(FileNotFoundError):
        load_cifar_binary(tmp_path, split="test")


def test_empty_checkpoint_is_header_only():
    buf = encode_checkpoint({})
    assert buf == CKPT_MAGIC + struct.pack("<II", 1, 0)
    assert decode_checkpoint(buf).entries == {}


def test_checkpoint_entry_layout():
    buf = encode_checkpoint({"ab": np.array([[1.5, 2.0]], np.float32)})
    assert buf[12:14] == struct.pack("<H", 2) and buf[14:16] == b"ab" and buf[16] == 2
    assert struct.unpack("<2I", buf[17:25]) == (1, 2)
    assert np.frombuffer(buf[25:], "<f4").tolist() == [1.5, 2.0]


def test_checkpoint_file_round_trip(tmp_path):
    entries = {"stem.w": np.arange(6, dtype=np.float32).reshape(2, 3, 1, 1), "s": np.float32(3.0) * np.ones(())}
    write_checkpoint(tmp_path / "c.ison", entries)
    got = read_checkpoint(tmp_path / "c.ison").entries
    assert list(got) == list(entries)
    for k in entries:
        assert np.array_equal(got[k], entries[k]) and got[k].shape == entries[k].shape


def test_checkpoint_corruption_names_entry():
    buf = bytearray(encode_checkpoint({"first": np.ones(2, np.float32), "second": np.ones(3, np.float32)}))
    # the dims of "second" start after header + first entry (2+5+1+4+8) + name len + name + rank
    pos = 12 + 20 + 2 + 6 + 1
    buf[pos:pos + 4] = struct.pack("<I", 1000)
    with pytest.raises(CheckpointError, match="second"):
        decode_checkpoint(bytes(buf))
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"NOPE" + bytes(8))
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(encode_checkpoint({}) + b"\x00")


def test_checkpoint_rejects_duplicates():
    one = encode_checkpoint({"w": np.ones(1, np.float32)})
    body = one[12:]
    dup = CKPT_MAGIC + struct.pack("<II", 1, 2) + body + body
    with pytest.raises(CheckpointError, match="duplicate"):
        decode_checkpoint(dup)


names = st.text(st.characters(codec="utf-8", exclude_categories=["Cs"]), min_size=1, max_size=12)
arrays = st.lists(st.integers(1, 4), min_size=0, max_size=4).map(
    lambda dims: np.random.default_rng(sum(dims) + len(dims)).normal(size=dims).astype(np.float32))


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(names, arrays, max_size=5))
def test_checkpoint_round_trip_property(entries):
    got = decode_checkpoint(encode_checkpoint(entries)).entries
    assert list(got) == list(entries)
    for k, v in entries.items():
        assert got[k].shape == v.shape and np.array_equal(got[k], v)


def test_input_adapter_parse():
    assert InputAdapter.parse("upsample:bilinear:4") == InputAdapter("upsample", 4, "bilinear")
    assert InputAdapter.parse("upsample:2").factor == 2
    assert str(InputAdapter.parse("s2d:4")) == "s2d:4"
    with pytest.raises(ValueError):
        InputAdapter.parse("warp")


def test_adapt_input_s2d_shapes_and_pixels():
    x = np.random.default_rng(0).normal(size=(1, 3, 224, 224)).astype(np.float32)
    a = build_isometric(224, 56, 0.25, 1, 10)
    y = adapt_input(x, "native", a)
    assert y.shape == (1, 48, 56, 56)
    assert np.array_equal(np.sort(y.ravel()), np.sort(x.ravel()))
    b = build_isometric(224, 7, 0.25, 1, 10)
    assert adapt_input(x, "s2d:32", b).shape == (1, 3072, 7, 7)
    with pytest.raises(ArchError):
        adapt_input(x, "s2d:16", b)
    with pytest.raises(ArchError):
        adapt_input(x[:, :, :112, :112], "native", b)


def test_adapt_input_bilinear_constant_and_skip_stride():
    a = build_isometric(28, 14, 0.25, 1, 10)
    x = np.full((2, 3, 14, 14), 0.25, np.float32)
    y = adapt_input(x, "upsample:bilinear:2", a)
    assert y.shape == (2, 12, 14, 14) and np.allclose(y, 0.25)
    s = skip_strides(a, 14)
    assert np.array_equal(adapt_input(x, "skip_stride", s), x)
    with pytest.raises(ArchError):
        adapt_input(x, "skip_stride", a)
    assert trunk_start(a) == 1


def test_ppm_round_trip_with_whitespace_bytes(tmp_path):
    rgb = np.array([[[32, 10, 9], [13, 0, 255]]], np.uint8)
    assert encode_ppm(rgb).startswith(b"P6\n2 1\n255\n")
    assert np.array_equal(decode_ppm(encode_ppm(rgb)), rgb)
    write_ppm(tmp_path / "a.ppm", rgb)
    assert np.array_equal(decode_ppm((tmp_path / "a.ppm").read_bytes()), rgb)
    with pytest.raises(DataFormatError):
        decode_ppm(b"P5\n1 1\n255\n\x00")


def test_csv_quoting_and_line_endings(tmp_path):
    text = csv_text(["a", "b"], [[1, "x,y"], [2, 'say "hi"']])
    assert text == 'a,b\r\n1,"x,y"\r\n2,"say ""hi"""\r\n'
    write_csv(tmp_path / "t.csv", ["a"], [[1]])
    assert (tmp_path / "t.csv").read_bytes() == b"a\r\n1\r\n"
