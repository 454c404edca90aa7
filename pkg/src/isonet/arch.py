"""Architecture descriptions, builders and multiplier transforms.

An :class:`ArchSpec` is an ordered list of :class:`LayerSpec` records. Every
layer carries a ``role`` (adapter, stem, body, head) so analyses can isolate
the repeated trunk from the input adapter and the classifier.

Layer kinds and their ``params``::

    s2d             block
    upsample_input  factor, mode
    s2b_pipeline    rate, block, order ("s2d_then_s2b" | "s2b_then_s2d")
    conv1x1         in_ch, out_ch, bn, act, bias
    conv            in_ch, out_ch, kernel, stride, dilation, groups, bn, act, bias
    mv3_se_block    in_ch, expand, out_ch, kernel, stride, dilation, se_reduction, residual
    avg_pool        (none; also averages s2b replicas back into one sample)
    fc              in_features, out_features, act, bias
"""
from __future__ import annotations

import copy
import json
import math
import os
import re
import tempfile
from dataclasses import asdict, dataclass, field
from fractions import Fraction

from .ops import ConvParams
from .tensor import Shape4

LAYER_KINDS = ("s2d", "upsample_input", "s2b_pipeline", "conv1x1", "conv",
               "mv3_se_block", "avg_pool", "fc")
ADAPTER_KINDS = ("s2d", "upsample_input", "s2b_pipeline")
ROLES = ("adapter", "stem", "body", "head")


class ArchError(ValueError):
    """Raised when an architecture cannot be built or executed."""


@dataclass
class LayerSpec:
    id: str
    kind: str
    params: dict = field(default_factory=dict)
    role: str = "body"
    frozen: bool = False

    def conv_params(self) -> ConvParams:
        """ConvParams for conv1x1/conv layers."""
        p = self.params
        if self.kind == "conv1x1":
            return ConvParams(p["in_ch"], p["out_ch"], 1)
        if self.kind == "conv":
            return ConvParams(p["in_ch"], p["out_ch"], p.get("kernel", 3), p.get("stride", 1),
                              p.get("dilation", 1), p.get("groups", 1))
        raise ArchError(f"layer {self.id} ({self.kind}) is not a plain convolution")

    def block_convs(self) -> dict[str, ConvParams]:
        """The three convolutions inside an mv3_se_block."""
        p = self.params
        e = p["expand"]
        return {
            "expand": ConvParams(p["in_ch"], e, 1),
            "dw": ConvParams(e, e, p.get("kernel", 3), p.get("stride", 1), p.get("dilation", 1), e),
            "project": ConvParams(e, p["out_ch"], 1),
        }

    @property
    def stride(self) -> int:
        if self.kind in ("conv", "mv3_se_block"):
            return self.params.get("stride", 1)
        return 1


@dataclass
class ArchSpec:
    layers: list[LayerSpec]
    input_res: int
    internal_res: int
    width_mult: float = 1.0
    depth: int = 0
    num_classes: int = 1000
    in_channels: int = 3
    name: str = "custom"

    def layer(self, layer_id: str) -> LayerSpec:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(f"no layer with id {layer_id!r}")

    def index(self, layer_id: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.id == layer_id:
                return i
        raise KeyError(f"no layer with id {layer_id!r}")

    def copy(self) -> "ArchSpec":
        return copy.deepcopy(self)

    # -- JSON ------------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_res": self.input_res,
            "internal_res": self.internal_res,
            "width_mult": self.width_mult,
            "depth": self.depth,
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "layers": [asdict(layer) for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ArchSpec":
        try:
            layers = [LayerSpec(d["id"], d["kind"], dict(d.get("params", {})),
                                d.get("role", "body"), bool(d.get("frozen", False)))
                      for d in doc["layers"]]
            return cls(layers=layers, input_res=int(doc["input_res"]),
                       internal_res=int(doc["internal_res"]),
                       width_mult=float(doc.get("width_mult", 1.0)),
                       depth=int(doc.get("depth", 0)),
                       num_classes=int(doc.get("num_classes", 1000)),
                       in_channels=int(doc.get("in_channels", 3)),
                       name=str(doc.get("name", "custom")))
        except (KeyError, TypeError) as exc:
            raise ArchError(f"malformed architecture document: {exc!r}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ArchSpec":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path) -> "ArchSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def round_channels(x: float) -> int:
    """Nearest multiple of 8 (half rounds up); anything below 4 underflows."""
    if x < 4:
        raise ArchError(f"channel count {x:g} rounds below the minimum of 8")
    return max(8, int(math.floor(x / 8 + 0.5)) * 8)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# -- parameters ------------------------------------------------------------------

def _bn_shapes(prefix: str, c: int) -> dict:
    return {f"{prefix}.gamma": (c,), f"{prefix}.beta": (c,),
            f"{prefix}.mean": (c,), f"{prefix}.var": (c,)}


def param_shapes(layer: LayerSpec) -> dict[str, tuple]:
    """Names and shapes of every array a layer owns (BN running stats included)."""
    p, lid, out = layer.params, layer.id, {}
    if layer.kind in ("conv1x1", "conv"):
        cp = layer.conv_params()
        out[f"{lid}.w"] = cp.weight_shape
        if p.get("bias", False):
            out[f"{lid}.b"] = (cp.out_ch,)
        if p.get("bn", True):
            out.update(_bn_shapes(f"{lid}.bn", cp.out_ch))
    elif layer.kind == "mv3_se_block":
        convs = layer.block_convs()
        for name in ("expand", "dw"):
            out[f"{lid}.{name}.w"] = convs[name].weight_shape
            out.update(_bn_shapes(f"{lid}.{name}.bn", convs[name].out_ch))
        z = p.get("se_reduction", 4)
        if z:
            e, hidden = p["expand"], p["expand"] // z
            out[f"{lid}.se.w1"] = (hidden, e)
            out[f"{lid}.se.b1"] = (hidden,)
            out[f"{lid}.se.w2"] = (e, hidden)
            out[f"{lid}.se.b2"] = (e,)
        out[f"{lid}.project.w"] = convs["project"].weight_shape
        out.update(_bn_shapes(f"{lid}.project.bn", convs["project"].out_ch))
    elif layer.kind == "fc":
        out[f"{lid}.w"] = (p["out_features"], p["in_features"])
        if p.get("bias", True):
            out[f"{lid}.b"] = (p["out_features"],)
    return out


def is_running_stat(name: str) -> bool:
    return name.endswith(".bn.mean") or name.endswith(".bn.var")


# -- shape inference ---------------------------------------------------------------

def layer_out_shape(layer: LayerSpec, s: Shape4, replicas: int = 1) -> tuple[Shape4, int]:
    """Output shape and replica count after ``layer``; raises ArchError."""
    p, k = layer.params, layer.kind
    n, c, h, w = s
    if k == "s2d":
        b = p["block"]
        if h % b or w % b:
            raise ArchError(f"{layer.id}: spatial {h}x{w} not divisible by S2D block {b}")
        return Shape4(n, c * b * b, h // b, w // b), replicas
    if k == "upsample_input":
        f = p["factor"]
        return Shape4(n, c, h * f, w * f), replicas
    if k == "s2b_pipeline":
        r, b = p["rate"], p.get("block", 1)
        if h % (r * b) or w % (r * b):
            raise ArchError(f"{layer.id}: spatial {h}x{w} not divisible by rate*block {r * b}")
        if p.get("order", "s2d_then_s2b") not in ("s2d_then_s2b", "s2b_then_s2d"):
            raise ArchError(f"{layer.id}: unknown pipeline order {p.get('order')!r}")
        return Shape4(n * r * r, c * b * b, h // (r * b), w // (r * b)), replicas * r * r
    if k in ("conv1x1", "conv"):
        cp = layer.conv_params()
        if c != cp.in_ch:
            raise ArchError(f"{layer.id}: channel chain break, expects {cp.in_ch} input channels, got {c}")
        _, _, ho = cp.pads(h)
        _, _, wo = cp.pads(w)
        return Shape4(n, cp.out_ch, ho, wo), replicas
    if k == "mv3_se_block":
        convs = layer.block_convs()
        if c != p["in_ch"]:
            raise ArchError(f"{layer.id}: channel chain break, expects {p['in_ch']} input channels, got {c}")
        z = p.get("se_reduction", 4)
        if z and p["expand"] % z:
            raise ArchError(f"{layer.id}: expansion {p['expand']} not divisible by SE reduction {z}")
        _, _, ho = convs["dw"].pads(h)
        _, _, wo = convs["dw"].pads(w)
        if p.get("residual", False) and (ho != h or p["in_ch"] != p["out_ch"]):
            raise ArchError(f"{layer.id}: residual connection needs matching input/output shapes")
        return Shape4(n, p["out_ch"], ho, wo), replicas
    if k == "avg_pool":
        if n % replicas:
            raise ArchError(f"{layer.id}: batch {n} not divisible by replica count {replicas}")
        return Shape4(n // replicas, c, 1, 1), 1
    if k == "fc":
        if c * h * w != p["in_features"]:
            raise ArchError(f"{layer.id}: channel chain break, expects {p['in_features']} features, got {c * h * w}")
        return Shape4(n, p["out_features"], 1, 1), replicas
    raise ArchError(f"{layer.id}: unknown layer kind {k!r}")


def infer_shapes(a: ArchSpec, batch: int = 1) -> list[tuple[Shape4, Shape4]]:
    """(input, output) shape per layer; raises ArchError on the first problem."""
    s = Shape4(batch, a.in_channels, a.input_res, a.input_res)
    replicas, out = 1, []
    for layer in a.layers:
        o, replicas = layer_out_shape(layer, s, replicas)
        out.append((s, o))
        s = o
    return out


def validate(a: ArchSpec) -> list[str]:
    """Every reason the architecture is not executable; empty when valid."""
    v = []
    ids = [layer.id for layer in a.layers]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        v.append(f"duplicate layer ids: {', '.join(dupes)}")
    for layer in a.layers:
        if layer.kind not in LAYER_KINDS:
            v.append(f"{layer.id}: unknown layer kind {layer.kind!r}")
        if layer.role not in ROLES:
            v.append(f"{layer.id}: unknown role {layer.role!r}")
    if a.input_res < 1 or a.internal_res < 1:
        v.append(f"resolutions must be >= 1 (input {a.input_res}, internal {a.internal_res})")
    adapters = [layer for layer in a.layers if layer.kind in ADAPTER_KINDS]
    for layer in adapters:
        if layer.kind == "s2d" and a.input_res % max(a.internal_res, 1):
            v.append(f"{layer.id}: input resolution {a.input_res} not divisible by internal resolution {a.internal_res}")
        if layer.kind == "upsample_input" and a.internal_res % max(a.input_res, 1):
            v.append(f"{layer.id}: internal resolution {a.internal_res} not divisible by input resolution {a.input_res}")
    fcs = [i for i, layer in enumerate(a.layers) if layer.kind == "fc"]
    if not a.layers or a.layers[-1].kind != "fc":
        v.append("architecture must end in a fully connected classifier")
    elif a.layers[-1].params["out_features"] != a.num_classes:
        v.append(f"classifier has {a.layers[-1].params['out_features']} outputs, expected {a.num_classes}")
    if a.layers and a.layers[-1].kind == "fc" and a.layers[-1].params.get("act", "none") != "none":
        v.append("classifier layer must not carry an activation")
    if not any(layer.kind == "avg_pool" for layer in a.layers):
        v.append("architecture has no global pooling layer")
    if v:
        return v
    try:
        shapes = infer_shapes(a)
    except (ArchError, ValueError) as exc:
        return [str(exc)]
    for (layer, (_, o)) in zip(a.layers, shapes):
        if layer.kind in ADAPTER_KINDS and o.h != a.internal_res:
            v.append(f"{layer.id}: adapter produces {o.h}x{o.w}, internal resolution is {a.internal_res}")
    if fcs and shapes[fcs[0]][0].h != 1:
        v.append(f"{a.layers[fcs[0]].id}: fully connected layer before global pooling")
    return v


def check(a: ArchSpec) -> ArchSpec:
    problems = validate(a)
    if problems:
        raise ArchError("; ".join(problems))
    return a


# -- builders ------------------------------------------------------------------------

def _adapter(r: int, d: int, in_channels: int = 3) -> tuple[LayerSpec, int]:
    if r >= d:
        if r % d:
            raise ArchError(f"input resolution {r} is not an integer multiple of internal resolution {d}")
        k = r // d
        return LayerSpec("adapter", "s2d", {"block": k}, role="adapter"), in_channels * k * k
    if d % r:
        raise ArchError(f"internal resolution {d} is not an integer multiple of input resolution {r}")
    return (LayerSpec("adapter", "upsample_input", {"factor": d // r, "mode": "bilinear"}, role="adapter"),
            in_channels)


def mv3_block(lid: str, ch: int, expand: int, out_ch: int | None = None, *, kernel: int = 3,
              stride: int = 1, dilation: int = 1, se_reduction: int = 4,
              residual: bool | None = None) -> LayerSpec:
    out_ch = ch if out_ch is None else out_ch
    if residual is None:
        residual = stride == 1 and ch == out_ch
    return LayerSpec(lid, "mv3_se_block", {
        "in_ch": ch, "expand": expand, "out_ch": out_ch, "kernel": kernel, "stride": stride,
        "dilation": dilation, "se_reduction": se_reduction, "residual": residual})


def build_isometric(r: int, d: int, m: float = 1.0, l: int = 16, num_classes: int = 1000, *,
                    bottleneck: int = 64, expansion: int = 6, head_width: int = 768,
                    fc_width: int = 1280, se: bool = True, se_reduction: int = 4,
                    stem_act: str = "hard_swish", stem_bn: bool = True, head_act: str = "hard_swish",
                    in_channels: int = 3) -> ArchSpec:
    """Isometric network: adapter, 1x1 stem, ``l`` identical MV3 blocks, head.

    The width multiplier scales the stem, blocks and final 1x1 conv but not
    the two fully connected layers. Expansion width is ``expansion`` times
    the already rounded bottleneck.
    """
    if l < 1:
        raise ArchError(f"need at least one block, got l={l}")
    adapter, ch = _adapter(r, d, in_channels)
    b = round_channels(bottleneck * m)
    e = expansion * b
    head = round_channels(head_width * m)
    layers = [adapter,
              LayerSpec("stem", "conv1x1", {"in_ch": ch, "out_ch": b, "bn": stem_bn, "act": stem_act},
                        role="stem")]
    for i in range(l):
        layers.append(mv3_block(f"block{i:02d}", b, e, se_reduction=se_reduction if se else 0,
                                residual=True))
    layers += [
        LayerSpec("head_conv", "conv1x1", {"in_ch": b, "out_ch": head, "bn": True, "act": "hard_swish"},
                  role="head"),
        LayerSpec("pool", "avg_pool", {}, role="head"),
        LayerSpec("fc1", "fc", {"in_features": head, "out_features": fc_width, "act": head_act},
                  role="head"),
        LayerSpec("classifier", "fc", {"in_features": fc_width, "out_features": num_classes,
                                        "act": "none"}, role="head"),
    ]
    return check(ArchSpec(layers, r, d, m, l, num_classes, in_channels, name="isometric"))


def build_pyramid(input_res: int, base_channels: int, blocks: list[int], num_classes: int = 10, *,
                  layer: str = "mv3", expand_ratio: int = 4, se: bool = False,
                  in_channels: int = 3) -> ArchSpec:
    """Stride pyramid following r_i = r_{i-1}/s_i, c_i = s_i c_{i-1}.

    Resolution block ``p`` holds ``blocks[p]`` layers, the last of which has
    stride 2 and doubles the channel count.
    """
    layers = [LayerSpec("stem", "conv", {"in_ch": in_channels, "out_ch": base_channels, "kernel": 3,
                                         "stride": 1, "bn": True, "act": "hard_swish"}, role="stem")]
    c, i = base_channels, 0
    for count in blocks:
        if count < 1:
            raise ArchError("every resolution block needs at least one layer")
        for j in range(count):
            stride = 2 if j == count - 1 else 1
            out = c * stride
            lid = f"block{i:02d}"
            if layer == "mv3":
                layers.append(mv3_block(lid, c, c * expand_ratio, out, stride=stride,
                                        se_reduction=4 if se else 0))
            elif layer == "conv":
                layers.append(LayerSpec(lid, "conv", {"in_ch": c, "out_ch": out, "kernel": 3,
                                                      "stride": stride, "bn": True, "act": "hard_swish"}))
            else:
                raise ArchError(f"unknown pyramid layer type {layer!r}")
            c, i = out, i + 1
    layers += [LayerSpec("pool", "avg_pool", {}, role="head"),
               LayerSpec("classifier", "fc", {"in_features": c, "out_features": num_classes,
                                               "act": "none"}, role="head")]
    return check(ArchSpec(layers, input_res, input_res, 1.0, sum(blocks), num_classes,
                          in_channels, name="pyramid"))


def build_dense1x1(res: int, width: int, depth: int, num_classes: int = 10,
                   in_channels: int = 3) -> ArchSpec:
    """Stem plus ``depth`` plain 1x1 convs (no BN, no bias): the scaling test family."""
    layers = [LayerSpec("stem", "conv1x1", {"in_ch": in_channels, "out_ch": width, "bn": False,
                                            "act": "relu"}, role="stem")]
    for i in range(depth):
        layers.append(LayerSpec(f"block{i:02d}", "conv1x1",
                                {"in_ch": width, "out_ch": width, "bn": False, "act": "relu"}))
    layers += [LayerSpec("pool", "avg_pool", {}, role="head"),
               LayerSpec("classifier", "fc", {"in_features": width, "out_features": num_classes,
                                               "act": "none"}, role="head")]
    return check(ArchSpec(layers, res, res, 1.0, depth, num_classes, in_channels, name="dense1x1"))


# -- transforms ------------------------------------------------------------------------

@dataclass(frozen=True)
class MultiplierTransform:
    kind: str
    factor: float

    def __post_init__(self):
        if self.kind not in ("width", "resolution", "depth", "dilate"):
            raise ArchError(f"unknown multiplier kind {self.kind!r}")
        if not self.factor > 0:
            raise ArchError(f"multiplier must be positive, got {self.factor}")
        if self.kind == "dilate" and (int(self.factor) != self.factor or self.factor < 1):
            raise ArchError(f"dilation rate must be an integer >= 1, got {self.factor}")


def _scale_int(value: int, alpha: float, what: str) -> int:
    scaled = Fraction(value) * Fraction(alpha).limit_denominator(10**6)
    if scaled.denominator != 1:
        raise ArchError(f"{what} {value} x {alpha:g} is not an integer")
    if scaled < 1:
        raise ArchError(f"{what} {value} x {alpha:g} falls below 1")
    return int(scaled)


def _rechain(a: ArchSpec) -> None:
    """Propagate channel counts forward so every layer's input matches."""
    c = a.in_channels
    for layer in a.layers:
        p = layer.params
        if layer.kind in ("conv1x1", "conv", "mv3_se_block"):
            p["in_ch"] = c
            if layer.kind == "conv" and p.get("groups", 1) > 1:
                p["groups"] = p["out_ch"] = c
        if layer.kind == "fc":
            p["in_features"] = c
        if layer.kind == "s2d":
            c *= p["block"] ** 2
        elif layer.kind == "s2b_pipeline":
            c *= p.get("block", 1) ** 2
        elif layer.kind in ("conv1x1", "conv", "mv3_se_block"):
            c = p["out_ch"]
        elif layer.kind == "fc":
            c = p["out_features"]


def _width(a: ArchSpec, alpha: float) -> ArchSpec:
    for layer in a.layers:
        p = layer.params
        if layer.kind in ("conv1x1", "conv"):
            p["out_ch"] = round_channels(p["out_ch"] * alpha)
        elif layer.kind == "mv3_se_block":
            old_out, old_e = p["out_ch"], p["expand"]
            p["out_ch"] = round_channels(old_out * alpha)
            ratio = Fraction(old_e, old_out)
            if ratio.denominator == 1:
                p["expand"] = int(ratio) * p["out_ch"]
            else:
                p["expand"] = round_channels(old_e * alpha)
    _rechain(a)
    a.width_mult = a.width_mult * alpha
    return a


def _resolution(a: ArchSpec, alpha: float) -> ArchSpec:
    r = _scale_int(a.input_res, alpha, "input resolution")
    d = _scale_int(a.internal_res, alpha, "internal resolution")
    for i, layer in enumerate(a.layers):
        if layer.kind in ("s2d", "upsample_input"):
            new, _ = _adapter(r, d)
            new.id, new.role, new.frozen = layer.id, layer.role, layer.frozen
            if new.kind == layer.kind == "upsample_input":
                new.params["mode"] = layer.params.get("mode", "bilinear")
            a.layers[i] = new
    a.input_res, a.internal_res = r, d
    _rechain(a)
    return a


def _renumber_body(layers: list[LayerSpec]) -> None:
    i = 0
    for layer in layers:
        if layer.role == "body":
            m = re.match(r"^(.*?)(\d+)$", layer.id)
            prefix = m.group(1) if m else layer.id
            layer.id = f"{prefix}{i:02d}"
            i += 1


def _depth(a: ArchSpec, alpha: float) -> ArchSpec:
    first = next((i for i, l in enumerate(a.layers) if l.role == "body"), None)
    if first is None:
        raise ArchError("architecture has no body layers to scale in depth")
    last = max(i for i, l in enumerate(a.layers) if l.role == "body")
    body = a.layers[first:last + 1]
    stages, cur = [], []
    for layer in body:
        cur.append(layer)
        if layer.stride > 1:
            stages.append(cur)
            cur = []
    if cur:
        stages.append(cur)
    new_body = []
    for stage in stages:
        strided = stage[-1] if stage[-1].stride > 1 else None
        repeat = [l for l in stage if l is not strided]
        total = _round_half_up(len(stage) * alpha)
        n_repeat = max(total - (1 if strided else 0), 0)
        if repeat:
            template = repeat[0]
            new_body += [copy.deepcopy(repeat[min(i, len(repeat) - 1)] if i < len(repeat) else template)
                         for i in range(n_repeat)]
        if strided is not None:
            new_body.append(strided)
    if not new_body:
        raise ArchError(f"depth multiplier {alpha:g} removes every body layer")
    a.layers = a.layers[:first] + new_body + a.layers[last + 1:]
    _renumber_body(a.layers)
    _rechain(a)
    a.depth = sum(1 for l in a.layers if l.role == "body")
    return a


def _dilate(a: ArchSpec, rate: int) -> ArchSpec:
    for layer in a.layers:
        p = layer.params
        depthwise = layer.kind == "mv3_se_block" or (layer.kind == "conv" and p.get("groups", 1) > 1)
        if not depthwise:
            continue
        if layer.stride == 1:
            p["dilation"] = rate
        else:
            p["kernel"] = 5
    return a


def apply_multiplier(a: ArchSpec, t: MultiplierTransform) -> ArchSpec:
    """Return a transformed copy; the input spec is left untouched."""
    out = a.copy()
    if t.kind == "width":
        if t.factor != 1:
            _width(out, t.factor)
    elif t.kind == "resolution":
        _resolution(out, t.factor)
    elif t.kind == "depth":
        if t.factor != 1:
            _depth(out, t.factor)
    else:
        _dilate(out, int(t.factor))
    return check(out)


def skip_strides(a: ArchSpec, input_res: int) -> ArchSpec:
    """Feed a lower-resolution image by removing early downsampling.

    For isometric specs the S2D adapter block shrinks; for pyramids the
    first stride-2 layers become stride 1 until resolutions line up.
    """
    out = a.copy()
    if input_res > a.input_res or a.input_res % input_res:
        raise ArchError(f"cannot skip strides from {a.input_res} down to {input_res}")
    factor = a.input_res // input_res
    adapter = next((l for l in out.layers if l.kind == "s2d"), None)
    if adapter is not None:
        if adapter.params["block"] % factor:
            raise ArchError(f"S2D block {adapter.params['block']} cannot absorb a factor {factor}")
        adapter.params["block"] //= factor
        out.input_res = input_res
        _rechain(out)
        return check(out)
    for layer in out.layers:
        if factor == 1:
            break
        if layer.kind in ("conv", "mv3_se_block") and layer.stride == 2:
            layer.params["stride"] = 1
            if layer.kind == "mv3_se_block":
                layer.params["residual"] = layer.params["in_ch"] == layer.params["out_ch"]
            factor //= 2
    if factor != 1:
        raise ArchError("not enough stride-2 layers to skip")
    out.input_res = out.internal_res = input_res
    return check(out)


# -- Eq. (1) correspondence ------------------------------------------------------------

@dataclass
class ResolutionBlock:
    res: int
    channels: int
    layers: int


@dataclass
class CorrespondenceReport:
    blocks_res: list[ResolutionBlock]
    blocks_width: list[ResolutionBlock]
    aligned: list[tuple[int, int]]
    mismatched: list[tuple[int, int]]
    dropped_first: ResolutionBlock | None
    added_last: ResolutionBlock | None
    degenerate: bool
    note: str = ""

    @property
    def exact(self) -> bool:
        return not self.degenerate and not self.mismatched

    @property
    def shared_blocks(self) -> int:
        return len(self.aligned)


def resolution_blocks(a: ArchSpec) -> list[ResolutionBlock]:
    """Group body layers into runs sharing one input (resolution, channels)."""
    blocks: list[ResolutionBlock] = []
    for layer, (s, _) in zip(a.layers, infer_shapes(a)):
        if layer.role != "body":
            continue
        if blocks and (blocks[-1].res, blocks[-1].channels) == (s.h, s.c):
            blocks[-1].layers += 1
        else:
            blocks.append(ResolutionBlock(s.h, s.c, 1))
    return blocks


def block_correspondence(a: ArchSpec, alpha: float = 0.5) -> CorrespondenceReport:
    """Align the resolution-scaled and width-scaled variants block by block.

    Block p of the resolution-scaled network should carry the same
    (resolution, channels) as block p+1 of the width-scaled one; what is left
    over is the first width-scaled block and the last resolution-scaled one.
    """
    a_r = apply_multiplier(a, MultiplierTransform("resolution", alpha))
    a_c = apply_multiplier(a, MultiplierTransform("width", alpha))
    br, bc = resolution_blocks(a_r), resolution_blocks(a_c)
    if not any(l.stride > 1 for l in a.layers if l.role == "body") or len(bc) < 2:
        return CorrespondenceReport(br, bc, [], [], None, None, True,
                                    "no downsampling in the body: the shared part vanishes")
    aligned, mismatched = [], []
    for p in range(min(len(br), len(bc) - 1)):
        pair = (p, p + 1)
        same = (br[p].res, br[p].channels) == (bc[p + 1].res, bc[p + 1].channels)
        (aligned if same else mismatched).append(pair)
    return CorrespondenceReport(br, bc, aligned, mismatched, bc[0], br[-1], False)
