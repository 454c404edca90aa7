"""Static accounting over an ArchSpec.

MAdds count only multiply-accumulates inside matrix products (convs, FCs,
the two SE projections plus the per-element SE gate). BN, activations,
pooling, rearrangements and residual adds are free.

Activation footprint is the largest live set over layers. Inside an MV3
block the expanded tensors and the held residual input all count. Layers
that touch the network input or its lossless rearrangement (the adapter and
the stem reading from it) are reported but excluded from the peak, since
they stream the caller-owned image.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .arch import (ADAPTER_KINDS, ArchError, ArchSpec, LayerSpec, MultiplierTransform,
                   apply_multiplier, infer_shapes, param_shapes, validate)
from .network import Network
from .tensor import Shape4

BYTES_PER_ELEM = 4


@dataclass
class LayerReport:
    id: str
    kind: str
    in_shape: Shape4
    out_shape: Shape4
    params: int
    madds: int
    activation_elems: int
    rf_size: int
    rf_jump: Fraction
    rf_start: Fraction = Fraction(0)
    in_peak: bool = True
    role: str = "body"


@dataclass
class ArchReport:
    layers: list[LayerReport]
    total_params: int = 0
    trainable_params: int = 0
    total_madds: int = 0
    peak_activation_elems: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def peak_activation_bytes(self) -> int:
        return self.peak_activation_elems * BYTES_PER_ELEM

    def layer(self, layer_id: str) -> LayerReport:
        return next(r for r in self.layers if r.id == layer_id)

    def body(self) -> list[LayerReport]:
        return [r for r in self.layers if r.role == "body"]


def _elems(s: Shape4) -> int:
    return s.n * s.c * s.h * s.w


def _conv_madds(cp, out: Shape4) -> int:
    return out.n * out.h * out.w * cp.out_ch * cp.kernel * cp.kernel * (cp.in_ch // cp.groups)


def layer_cost(layer: LayerSpec, s_in: Shape4, s_out: Shape4) -> tuple[int, int]:
    """(madds, activation_elems) for one layer."""
    p, k = layer.params, layer.kind
    if k in ("conv1x1", "conv"):
        return _conv_madds(layer.conv_params(), s_out), _elems(s_in) + _elems(s_out)
    if k == "fc":
        return s_out.n * p["in_features"] * p["out_features"], _elems(s_in) + _elems(s_out)
    if k == "mv3_se_block":
        convs = layer.block_convs()
        n, e = s_in.n, p["expand"]
        e_in = Shape4(n, e, s_in.h, s_in.w)
        e_out = Shape4(n, e, s_out.h, s_out.w)
        madds = _conv_madds(convs["expand"], e_in) + _conv_madds(convs["dw"], e_out)
        madds += _conv_madds(convs["project"], s_out)
        z = p.get("se_reduction", 4)
        if z:
            madds += n * 2 * e * (e // z) + _elems(e_out)
        x, y = _elems(s_in), _elems(s_out)
        skip = x if p.get("residual", False) else 0
        live = [x + _elems(e_in),
                _elems(e_in) + _elems(e_out) + skip,
                _elems(e_out) + y + skip]
        if z:
            live.append(2 * _elems(e_out) + skip)
        if skip:
            live.append(x + 2 * y)
        return madds, max(live)
    return 0, _elems(s_in) + _elems(s_out)


def receptive_fields(a: ArchSpec) -> list[tuple[int, Fraction, Fraction]]:
    """Per layer (rf_size, rf_jump, rf_start) in input-image pixels.

    rf' = rf + (k - 1) * dilation * jump, jump' = jump * stride and
    start' = start - pad_before * jump. S2D acts as a k x k stride-k conv,
    global pooling as a conv covering its whole input, polyphase S2B
    multiplies the jump by the rate, and input upsampling divides it.
    """
    rf, jump, start = Fraction(1), Fraction(1), Fraction(0)
    out = []

    def step(k, dil, s, pad):
        nonlocal rf, jump, start
        rf = rf + (k - 1) * dil * jump
        start = start - pad * jump
        jump = jump * s

    for layer, (s_in, s_out) in zip(a.layers, infer_shapes(a)):
        p, kind = layer.params, layer.kind
        if kind == "s2d":
            step(p["block"], 1, p["block"], 0)
        elif kind == "upsample_input":
            jump = jump / p["factor"]
        elif kind == "s2b_pipeline":
            b, r = p.get("block", 1), p["rate"]
            step(b, 1, b, 0)
            if p.get("order", "s2d_then_s2b") == "s2d_then_s2b":
                jump = jump * r
        elif kind in ("conv1x1", "conv"):
            cp = layer.conv_params()
            step(cp.kernel, cp.dilation, cp.stride, cp.pads(s_in.h)[0])
        elif kind == "mv3_se_block":
            cp = layer.block_convs()["dw"]
            step(cp.kernel, cp.dilation, cp.stride, cp.pads(s_in.h)[0])
        elif kind == "avg_pool":
            step(s_in.h, 1, s_in.h, 0)
        out.append((int(rf) if rf.denominator == 1 else rf, jump, start))
    return out


def analyze(a: ArchSpec) -> ArchReport:
    problems = validate(a)
    if problems:
        raise ArchError("; ".join(problems))
    shapes = infer_shapes(a)
    rfs = receptive_fields(a)
    reports = []
    stem_seen = False
    for layer, (s_in, s_out), (rf, jump, start) in zip(a.layers, shapes, rfs):
        madds, act = layer_cost(layer, s_in, s_out)
        pshapes = param_shapes(layer)
        params = sum(int(np.prod(s)) for s in pshapes.values())
        in_peak = layer.kind not in ADAPTER_KINDS
        if layer.role == "stem" and not stem_seen:
            in_peak = False
            stem_seen = True
        reports.append(LayerReport(layer.id, layer.kind, s_in, s_out, params, madds, act,
                                   rf, jump, start, in_peak, layer.role))
    trainable = sum(int(np.prod(s)) for l in a.layers for n, s in param_shapes(l).items()
                    if not (n.endswith(".bn.mean") or n.endswith(".bn.var")))
    peak_candidates = [r.activation_elems for r in reports if r.in_peak]
    return ArchReport(reports,
                      total_params=sum(r.params for r in reports),
                      trainable_params=trainable,
                      total_madds=sum(r.madds for r in reports),
                      peak_activation_elems=max(peak_candidates) if peak_candidates else 0)


def body_totals(report: ArchReport) -> tuple[int, int, int]:
    """(peak activation, params, madds) over body layers only."""
    body = report.body()
    if not body:
        raise ArchError("architecture has no body layers")
    return (max(r.activation_elems for r in body), sum(r.params for r in body),
            sum(r.madds for r in body))


def scaling_check(a: ArchSpec, kind: str, alpha: float) -> tuple[float, float, float]:
    """Measured (activation, params, madds) ratios of the scaled body to the original."""
    scaled = apply_multiplier(a, MultiplierTransform(kind, alpha))
    base = body_totals(analyze(a))
    new = body_totals(analyze(scaled))
    return tuple(n / b for n, b in zip(new, base))


EXPECTED_RATIOS = {
    "width": lambda a: (a, a * a, a * a),
    "resolution": lambda a: (a * a, 1.0, a * a),
    "depth": lambda a: (1.0, a, a),
}


# -- impulse oracle ---------------------------------------------------------------------

def _oracle_params(net: Network) -> None:
    for name, v in net.params.items():
        leaf = name.rsplit(".", 1)[1]
        if leaf in ("w", "w1", "w2"):
            fan_in = int(np.prod(v.shape[1:]))
            net.params[name] = np.full(v.shape, 1.0 / fan_in, dtype=net.dtype)
        else:
            net.params[name] = np.zeros_like(v)


def impulse_rf_oracle(a: ArchSpec, layer_id: str, unit: int | None = None) -> tuple[int, int]:
    """Measured receptive-field box (first, last input row) of one output unit.

    All weights are set to positive constants with zero biases; BN and SE
    gates are bypassed, so the network is a monotone map of non-negative
    inputs whose support is exactly the influence pattern. A batch of
    full-row line impulses, one per input row, reveals which rows reach the
    chosen unit (default: the centre unit of the layer's output grid).
    """
    if any(l.kind in ("s2b_pipeline", "upsample_input") for l in a.layers):
        raise ArchError("impulse oracle does not support replica or upsampling adapters")
    net = Network(a, dtype=np.float64, bypass_bn=True, bypass_se=True)
    _oracle_params(net)
    size = a.input_res
    x = np.zeros((size, a.in_channels, size, size))
    x[np.arange(size), :, np.arange(size), :] = 1.0
    y = net.forward(x, stop=layer_id)
    if y.ndim == 2:
        y = y.reshape(y.shape[0], -1, 1, 1)
    if unit is None:
        unit = y.shape[2] // 2
    col = y.shape[3] // 2
    hit = np.nonzero(y[:, :, unit, col].sum(axis=1) > 0)[0]
    if hit.size == 0:
        raise ArchError(f"no input row reaches unit {unit} of {layer_id}")
    return int(hit.min()), int(hit.max())


def _row_taps(layer: LayerSpec, s_in: Shape4):
    """(kernel, stride, dilation, pad_before) of a layer along the row axis."""
    kind, p = layer.kind, layer.params
    if kind == "s2d":
        return p["block"], p["block"], 1, 0
    if kind in ("conv1x1", "conv"):
        cp = layer.conv_params()
        return cp.kernel, cp.stride, cp.dilation, cp.pads(s_in.h)[0]
    if kind == "mv3_se_block":
        cp = layer.block_convs()["dw"]
        return cp.kernel, cp.stride, cp.dilation, cp.pads(s_in.h)[0]
    if kind == "avg_pool":
        return s_in.h, s_in.h, 1, 0
    if kind == "fc":
        return 1, 1, 1, 0
    raise ArchError(f"no row geometry for layer kind {kind}")


def analytic_rf_box(a: ArchSpec, layer_id: str, unit: int | None = None) -> tuple[int, int]:
    """Analytic (first, last) input row reaching ``unit`` of ``layer_id``.

    The unit's row support is walked back through each layer's taps
    (o -> s*o - pad + dil*t), dropping taps that land in padding. Dilated
    stacks reach the input on a lattice, so clipping only at the image edge
    would overstate the box; clipping at every layer is exact.
    """
    i = a.index(layer_id)
    shapes = infer_shapes(a)
    if unit is None:
        unit = shapes[i][1].h // 2
    rows = {unit}
    for layer, (s_in, _) in zip(reversed(a.layers[:i + 1]), reversed(shapes[:i + 1])):
        k, s, dil, pad = _row_taps(layer, s_in)
        rows = {r for o in rows for t in range(k)
                if 0 <= (r := s * o - pad + dil * t) < s_in.h}
        if not rows:
            raise ArchError(f"unit {unit} of {layer_id} sees only padding")
    return min(rows), max(rows)


def recurrence_rf_box(a: ArchSpec, layer_id: str, unit: int | None = None) -> tuple[Fraction, Fraction]:
    """Unclipped box from the rf/jump/start recurrence."""
    i = a.index(layer_id)
    rf, jump, start = receptive_fields(a)[i]
    if unit is None:
        unit = infer_shapes(a)[i][1].h // 2
    first = start + unit * jump
    return first, first + rf - 1


# -- export ---------------------------------------------------------------------------

CSV_FIELDS = ["id", "kind", "in_shape", "out_shape", "params", "madds", "activation_elems",
              "rf_size", "rf_jump", "in_peak"]


def _shape_str(s: Shape4) -> str:
    return "x".join(str(v) for v in s)


def report_rows(report: ArchReport) -> list[list[str]]:
    return [[r.id, r.kind, _shape_str(r.in_shape), _shape_str(r.out_shape), str(r.params),
             str(r.madds), str(r.activation_elems), str(r.rf_size), str(r.rf_jump),
             "1" if r.in_peak else "0"] for r in report.layers]


def report_csv(report: ArchReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    w.writerows(report_rows(report))
    return buf.getvalue()


def report_table(report: ArchReport) -> str:
    rows = [CSV_FIELDS] + report_rows(report)
    widths = [max(len(r[i]) for r in rows) for i in range(len(CSV_FIELDS))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.append("")
    lines.append(f"total params      {report.total_params:,} ({report.total_params / 1e6:.2f}M)")
    lines.append(f"trainable params  {report.trainable_params:,} ({report.trainable_params / 1e6:.2f}M)")
    lines.append(f"total madds       {report.total_madds:,} ({report.total_madds / 1e6:.1f}M)")
    lines.append(f"peak activation   {report.peak_activation_elems:,} elems "
                 f"({report.peak_activation_bytes:,} bytes)")
    return "\n".join(lines) + "\n"
