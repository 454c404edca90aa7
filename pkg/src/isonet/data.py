"""Datasets, input adapters and on-disk formats.

Pixel values are normalized to [-1, 1] as ``v / 127.5 - 1`` at load time.

Checkpoint layout (all integers little-endian)::

    b"ISON" | u32 version (=1) | u32 entry count
    per entry: u16 name length | UTF-8 name | u8 rank | rank x u32 dims | float32 payload
"""
from __future__ import annotations

import csv
import gzip
import io
import math
import os
import re
import struct
from dataclasses import dataclass

import numpy as np

from . import ops
from .arch import ADAPTER_KINDS, ArchError, ArchSpec, atomic_write_bytes, atomic_write_text
from .tensor import DTYPE, Rng

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_ROW = 1 + 3072
CKPT_MAGIC = b"ISON"
CKPT_VERSION = 1


class DataFormatError(ValueError):
    """Malformed or truncated dataset/checkpoint file."""


@dataclass
class DatasetHandle:
    name: str
    split: str
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    source: str = "synthetic"

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataFormatError(f"{self.name}: images {self.images.shape} / labels {self.labels.shape} mismatch")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"{self.name}: labels outside [0, {self.num_classes})")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, count: int) -> "DatasetHandle":
        return DatasetHandle(self.name, self.split, self.images[:count], self.labels[:count],
                             self.num_classes, self.source)


def normalize_pixels(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(DTYPE) / DTYPE(127.5) - DTYPE(1.0)).astype(DTYPE)


# -- IDX / CIFAR ---------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = os.fspath(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(buf: bytes, expected_magic: int, path) -> np.ndarray:
    if len(buf) < 4:
        raise DataFormatError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - header != count:
        raise DataFormatError(f"{path}: payload has {len(buf) - header} bytes, dims {dims} need {count}")
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def _labels_path_for(images_path) -> str:
    path = os.fspath(images_path)
    for a, b in (("images-idx3", "labels-idx1"), ("images.idx3", "labels.idx1")):
        if a in path:
            return path.replace(a, b)
    raise DataFormatError(f"cannot infer labels file for {path}; pass labels_path explicitly")


def load_idx(images_path, labels_path=None, *, split: str = "train",
             num_classes: int | None = None) -> DatasetHandle:
    """Load an IDX image/label pair (MNIST layout), images as (N, 1, H, W)."""
    labels_path = labels_path or _labels_path_for(images_path)
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS, labels_path)
    if len(images) != len(labels):
        raise DataFormatError(f"{images_path}: {len(images)} images but {len(labels)} labels")
    k = num_classes if num_classes is not None else int(labels.max()) + 1 if len(labels) else 0
    return DatasetHandle(os.path.basename(os.fspath(images_path)), split,
                         normalize_pixels(images[:, None]), labels.astype(np.int64), k, "idx")


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 (N, H, W) images and (N,) labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    head = struct.pack(">I", IDX_IMAGES) + struct.pack(">3I", *images.shape)
    atomic_write_bytes(images_path, head + images.tobytes())
    atomic_write_bytes(labels_path, struct.pack(">II", IDX_LABELS, len(labels)) + labels.tobytes())


def _parse_cifar(buf: bytes, path) -> tuple[np.ndarray, np.ndarray]:
    if len(buf) == 0 or len(buf) % CIFAR_ROW:
        raise DataFormatError(f"{path}: {len(buf)} bytes is not a whole number of {CIFAR_ROW}-byte rows")
    rows = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_ROW)
    labels = rows[:, 0].astype(np.int64)
    if labels.max() >= 10:
        raise DataFormatError(f"{path}: label {labels.max()} outside CIFAR-10 range")
    return rows[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar_binary(path, split: str = "train") -> DatasetHandle:
    """CIFAR-10 binary batches. ``path`` may be one batch file or the batch directory."""
    path = os.fspath(path)
    if os.path.isdir(path):
        names = ([f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train"
                 else ["test_batch.bin"])
        files = [os.path.join(path, n) for n in names if os.path.exists(os.path.join(path, n))]
        if not files:
            raise FileNotFoundError(f"no CIFAR-10 {split} batches under {path}")
    else:
        files = [path]
    parts = [_parse_cifar(_read_bytes(f), f) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return DatasetHandle(f"cifar10-{split}", split, normalize_pixels(images), labels, 10, "cifar_binary")


# -- synthetic shapes ------------------------------------------------------------

SHAPE_NAMES = ("disk", "square", "triangle_up", "triangle_down", "plus", "cross",
               "ring", "hbars", "vbars", "diamond")


def _shape_mask(cls: int, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    # p, q: local coordinates, object roughly inside the unit disk; q points down
    if cls == 0:
        return p * p + q * q <= 1
    if cls == 1:
        return np.maximum(abs(p), abs(q)) <= 0.8
    if cls in (2, 3):
        q = q if cls == 2 else -q
        return (q <= 0.75) & (abs(p) <= (q + 1) * 0.55)
    if cls in (4, 5):
        if cls == 5:
            p, q = (p - q) * math.sqrt(0.5), (p + q) * math.sqrt(0.5)
        arm = 0.3
        return ((abs(p) <= arm) & (abs(q) <= 1)) | ((abs(q) <= arm) & (abs(p) <= 1))
    if cls == 6:
        r2 = p * p + q * q
        return (r2 <= 1) & (r2 >= 0.5 ** 2)
    if cls == 7:
        return (abs(p) <= 0.95) & (abs(q) >= 0.25) & (abs(q) <= 0.8)
    if cls == 8:
        return (abs(q) <= 0.95) & (abs(p) >= 0.25) & (abs(p) <= 0.8)
    if cls == 9:
        return abs(p) + abs(q) <= 1
    raise ValueError(f"unknown shape class {cls}")


def synth_shapes(seed: int, n: int, classes: int = 10, resolution: int = 28, *,
                 split: str = "train", supersample: int = 4, noise: float = 6.0) -> DatasetHandle:
    """Deterministic labelled renders of geometric shapes at any resolution.

    Scene parameters (class, position, scale, rotation, colours) depend only
    on (seed, split, sample index), so the same scenes can be rendered at
    several resolutions. Rendering integrates coverage on a
    ``supersample`` x ``supersample`` grid per pixel; ``noise`` is the pixel
    noise standard deviation in 0..255 units.
    """
    if not 1 <= classes <= len(SHAPE_NAMES):
        raise ValueError(f"classes must be in 1..{len(SHAPE_NAMES)}, got {classes}")
    if resolution < 1 or n < 0:
        raise ValueError("resolution must be >= 1 and n >= 0")
    root = Rng(seed).stream("synth_shapes").stream(split)
    scene = root.stream("scene")
    labels = scene.integers(0, classes, n)
    size = scene.uniform(n, 0.12, 0.3)
    cx = scene.uniform(n, 0, 1) * (1 - 2 * size - 0.04) + size + 0.02
    cy = scene.uniform(n, 0, 1) * (1 - 2 * size - 0.04) + size + 0.02
    theta = scene.uniform(n, -0.3, 0.3)
    bg = scene.uniform((n, 3), 0, 140)
    fg = np.clip(bg + scene.uniform((n, 3), 60, 115) * np.where(scene.uniform((n, 3)) < 0.5, -1, 1),
                 0, 255)
    fg = np.where(np.abs(fg - bg) < 40, np.clip(bg + 100, 0, 255), fg)
    ss = resolution * supersample
    grid = (np.arange(ss) + 0.5) / ss
    gy, gx = np.meshgrid(grid, grid, indexing="ij")
    pix_noise = root.stream("noise").stream(resolution).normal((n, 3, resolution, resolution), noise)
    out = np.empty((n, 3, resolution, resolution), dtype=np.uint8)
    for i in range(n):
        c, s = math.cos(theta[i]), math.sin(theta[i])
        du, dv = (gx - cx[i]) / size[i], (gy - cy[i]) / size[i]
        p, q = c * du + s * dv, -s * du + c * dv
        cover = _shape_mask(int(labels[i]), p, q).astype(np.float64)
        cover = cover.reshape(resolution, supersample, resolution, supersample).mean(axis=(1, 3))
        img = bg[i][:, None, None] + cover[None] * (fg[i] - bg[i])[:, None, None] + pix_noise[i]
        out[i] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return DatasetHandle(f"synth_shapes-{resolution}", split, normalize_pixels(out),
                         labels.astype(np.int64), classes, "synthetic")


# -- input adapters --------------------------------------------------------------

@dataclass(frozen=True)
class InputAdapter:
    """How an image reaches the first trainable layer.

    ``native``: image at the architecture's input resolution, passed through
    its own adapter layer. ``upsample``: resize by ``factor`` first.
    ``s2d``: space-to-depth straight into the trunk. ``skip_stride``: feed
    the image straight into the trunk of an architecture whose early
    strides were removed.
    """

    kind: str = "native"
    factor: int = 1
    mode: str = "bilinear"

    def __post_init__(self):
        if self.kind not in ("native", "upsample", "s2d", "skip_stride"):
            raise ValueError(f"unknown input adapter {self.kind!r}")
        if self.factor < 1:
            raise ValueError(f"adapter factor must be >= 1, got {self.factor}")

    @classmethod
    def parse(cls, text: str) -> "InputAdapter":
        parts = text.split(":")
        kind = parts[0]
        if kind == "upsample":
            mode = parts[1] if len(parts) > 2 else "bilinear"
            return cls("upsample", int(parts[-1]), mode)
        if kind == "s2d":
            return cls("s2d", int(parts[1]))
        return cls(kind)

    def __str__(self) -> str:
        if self.kind == "upsample":
            return f"upsample:{self.mode}:{self.factor}"
        if self.kind == "s2d":
            return f"s2d:{self.factor}"
        return self.kind


def trunk_start(a: ArchSpec) -> int:
    """Index of the first layer after the input adapter."""
    i = 0
    while i < len(a.layers) and a.layers[i].kind in ADAPTER_KINDS:
        i += 1
    return i


def apply_adapter_layers(x: np.ndarray, a: ArchSpec) -> np.ndarray:
    for layer in a.layers[:trunk_start(a)]:
        p = layer.params
        if layer.kind == "s2d":
            x = ops.space_to_depth(x, p["block"])
        elif layer.kind == "upsample_input":
            x = ops.upsample(x, p["factor"], p.get("mode", "bilinear"))
        else:
            r, b = p["rate"], p.get("block", 1)
            if p.get("order", "s2d_then_s2b") == "s2d_then_s2b":
                x = ops.space_to_batch(ops.space_to_depth(x, b), r)
            else:
                x = ops.space_to_depth(ops.split_tiles(x, r), b)
    return x


def _trunk_channels(a: ArchSpec) -> int:
    layer = a.layers[trunk_start(a)]
    return layer.params.get("in_ch", layer.params.get("in_features"))


def adapt_input(x: np.ndarray, adapter: InputAdapter | str, a: ArchSpec) -> np.ndarray:
    """Turn raw images into the tensor the architecture's trunk consumes."""
    if isinstance(adapter, str):
        adapter = InputAdapter.parse(adapter)
    res = x.shape[2]
    if adapter.kind == "native":
        if res != a.input_res:
            raise ArchError(f"native input is {res}x{res}, architecture expects {a.input_res}")
        return apply_adapter_layers(x, a)
    if adapter.kind == "upsample":
        if res * adapter.factor != a.input_res:
            raise ArchError(f"upsampling {res} by {adapter.factor} does not reach {a.input_res}")
        return apply_adapter_layers(ops.upsample(x, adapter.factor, adapter.mode), a)
    if adapter.kind == "s2d":
        if res % adapter.factor:
            raise ArchError(f"input {res} not divisible by S2D block {adapter.factor}")
        y = ops.space_to_depth(x, adapter.factor)
        if y.shape[2] != a.internal_res or y.shape[1] != _trunk_channels(a):
            raise ArchError(f"S2D output {y.shape[1:]} does not match the trunk input "
                            f"({_trunk_channels(a)}, {a.internal_res}, {a.internal_res})")
        return y
    # skip_stride
    if res != a.internal_res or x.shape[1] != _trunk_channels(a):
        raise ArchError(f"skip-stride input {x.shape[1:]} does not match the trunk input; "
                        "rebuild the architecture with arch.skip_strides first")
    return x


# -- checkpoints ---------------------------------------------------------------------

class CheckpointError(DataFormatError):
    pass


@dataclass
class Checkpoint:
    entries: dict[str, np.ndarray]
    format_version: int = CKPT_VERSION


def encode_checkpoint(entries: dict[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    out.write(CKPT_MAGIC)
    out.write(struct.pack("<II", CKPT_VERSION, len(entries)))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"entry name too long: {name[:40]}...")
        arr = np.asarray(arr)
        if arr.ndim > 255:
            raise CheckpointError(f"{name}: rank {arr.ndim} too large")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return out.getvalue()


def write_checkpoint(path, entries: dict[str, np.ndarray] | Checkpoint) -> None:
    if isinstance(entries, Checkpoint):
        entries = entries.entries
    atomic_write_bytes(path, encode_checkpoint(entries))


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    def need(pos, count, what):
        if pos + count > len(buf):
            raise CheckpointError(f"{source}: truncated while reading {what}")

    need(0, 12, "header")
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{source}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    pos, entries = 12, {}
    for i in range(count):
        need(pos, 2, f"name length of entry {i}")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(pos, nlen, f"name of entry {i}")
        try:
            name = buf[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{source}: entry {i} name is not UTF-8") from exc
        pos += nlen
        need(pos, 1, f"rank of entry {name!r}")
        rank = buf[pos]
        pos += 1
        need(pos, 4 * rank, f"dims of entry {name!r}")
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        need(pos, nbytes, f"payload of entry {name!r} (dims {dims})")
        if name in entries:
            raise CheckpointError(f"{source}: duplicate entry name {name!r}")
        entries[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos) \
            .astype(np.float32).reshape(dims)
        pos += nbytes
    if pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - pos} trailing bytes after {count} entries")
    return Checkpoint(entries, version)


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), os.fspath(path))


# -- images / tables --------------------------------------------------------------------

def encode_ppm(rgb: np.ndarray) -> bytes:
    """Binary PPM (P6) from an (h, w, 3) uint8 array."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (h, w, 3) image, got {rgb.shape}")
    h, w = rgb.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    # exactly one whitespace byte separates maxval from the payload, which may itself start
    # with whitespace-valued bytes
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", buf)
    if m is None or int(m.group(3)) != 255:
        raise DataFormatError("not an 8-bit binary PPM")
    w, h = int(m.group(1)), int(m.group(2))
    data = buf[m.end():]
    if len(data) != w * h * 3:
        raise DataFormatError(f"PPM payload {len(data)} bytes, expected {w * h * 3}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)


def write_ppm(path, rgb: np.ndarray) -> None:
    atomic_write_bytes(path, encode_ppm(rgb))


def csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(header)
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def write_csv(path, header: list[str], rows) -> None:
    atomic_write_text(path, csv_text(header, rows))
