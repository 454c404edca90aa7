"""Constructive checks of the exact operator identities.

S2D fold: space_to_depth(k) followed by a 1x1 conv is a k x k stride-k conv
with permuted weights. Dilation/batch: an isometric trunk whose depthwise
convs are dilated by r computes, up to pooling, the same thing as the
undilated trunk run on the r^2 polyphase components of its input.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .arch import (ArchError, ArchSpec, LayerSpec, MultiplierTransform, _rechain, apply_multiplier,
                   check)
from .data import apply_adapter_layers, trunk_start
from .network import Network, init_params
from .tensor import DTYPE, Rng

S2D_FOLD_TOL = 1e-5
DILATION_TOL = 1e-4


@dataclass
class EquivReport:
    max_abs_diff: float
    mean_abs_diff: float
    shapes_checked: list = field(default_factory=list)
    tolerance: float = 0.0
    passed: bool = False
    # the two compared outputs, kept for per-element export
    path_a: np.ndarray | None = field(default=None, repr=False, compare=False)
    path_b: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.passed = bool(self.max_abs_diff <= self.tolerance)

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} max_abs_diff={self.max_abs_diff:.3e} tol={self.tolerance:g}"

    def diff_rows(self) -> list[list[str]]:
        """One row per compared element: flat index, both values, absolute difference."""
        if self.path_a is None or self.path_b is None:
            return []
        a = np.asarray(self.path_a, np.float64).ravel()
        b = np.asarray(self.path_b, np.float64).ravel()
        return [[str(i), repr(float(u)), repr(float(v)), repr(float(abs(u - v)))]
                for i, (u, v) in enumerate(zip(a, b))]


def _report(a: np.ndarray, b: np.ndarray, tol: float, shapes) -> EquivReport:
    diff = np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))
    return EquivReport(float(diff.max(initial=0.0)), float(diff.mean()) if diff.size else 0.0,
                       list(shapes), tol, path_a=a, path_b=b)


# -- S2D fold ----------------------------------------------------------------------

def fold_s2d_conv(k: int, w: np.ndarray, in_ch: int | None = None) -> np.ndarray:
    """1x1 weights acting on S2D(k) output -> (out, c_in, k, k) stride-k weights.

    W'[o, ci, cy, cx] = W[o, (cy*k + cx)*c_in + ci].
    """
    w2 = w.reshape(w.shape[0], -1)
    if w2.shape[1] % (k * k):
        raise ValueError(f"1x1 conv input channels {w2.shape[1]} not divisible by k^2={k * k}")
    c = w2.shape[1] // (k * k)
    if in_ch is not None and c != in_ch:
        raise ValueError(f"1x1 conv expects {w2.shape[1]} channels, S2D of {in_ch} gives {in_ch * k * k}")
    return np.ascontiguousarray(w2.reshape(-1, k, k, c).transpose(0, 3, 1, 2))


def unfold_s2d_conv(w: np.ndarray) -> np.ndarray:
    """Inverse of fold_s2d_conv: (out, c_in, k, k) -> (out, k*k*c_in, 1, 1)."""
    o, c, k, _ = w.shape
    return np.ascontiguousarray(w.transpose(0, 2, 3, 1)).reshape(o, k * k * c, 1, 1)


def check_s2d_fold(x: np.ndarray, w: np.ndarray, k: int, tol: float = S2D_FOLD_TOL) -> EquivReport:
    """Compare conv1x1(space_to_depth(x, k), w) with the folded strided conv."""
    c = x.shape[1]
    if w.ndim == 2:
        w = w[:, :, None, None]
    if w.shape[1] != c * k * k:
        raise ValueError(f"weights expect {w.shape[1]} channels, S2D gives {c * k * k}")
    a = ops.conv2d(ops.space_to_depth(x, k), w, None, ops.ConvParams(c * k * k, w.shape[0]))
    wf = fold_s2d_conv(k, w, c)
    b = ops.conv2d(x, wf, None, ops.ConvParams(c, w.shape[0], kernel=k, stride=k, padding="valid"))
    return _report(a, b, tol, [a.shape])


def random_s2d_fold_case(seed: int, k: int, n: int = 2, c: int = 3, out_ch: int = 8,
                         cells: int = 2) -> EquivReport:
    rng = Rng(seed).stream("s2d_fold")
    size = k * cells
    x = rng.stream("x").normal((n, c, size, size)).astype(DTYPE)
    w = rng.stream("w").normal((out_ch, c * k * k, 1, 1), 1.0 / k).astype(DTYPE)
    return check_s2d_fold(x, w, k)


# -- dilation == batched polyphase ensemble -------------------------------------------

def _require_dilation_ready(a: ArchSpec, rate: int) -> None:
    if rate < 1:
        raise ValueError(f"rate must be >= 1, got {rate}")
    for layer in a.layers:
        if layer.kind == "mv3_se_block" and layer.params.get("se_reduction", 0):
            raise ValueError(
                f"{layer.id}: squeeze-excite is enabled. Its global squeeze averages over the whole "
                "map in the dilated path but over one polyphase replica in the batched path, so "
                "the two are not equivalent; build the trunk with se=False")
        if layer.role != "adapter" and layer.stride > 1:
            raise ValueError(f"{layer.id}: stride {layer.stride}; the equivalence needs a stride-free trunk")
        if layer.kind == "s2b_pipeline":
            raise ValueError("architecture already carries a replica adapter")
    if a.internal_res % rate:
        raise ValueError(f"internal resolution {a.internal_res} not divisible by rate {rate}")


def randomize_check_params(params: dict, seed: int) -> None:
    """Non-trivial BN statistics and unit-gain FC weights.

    Default init leaves BN an identity and logits near 1e-2, which would make
    a 1e-4 tolerance meaningless.
    """
    rng = Rng(seed).stream("check_params")
    for name in sorted(params):
        leaf = name.rsplit(".", 1)[1]
        v = params[name]
        r = rng.stream(name)
        if (name.startswith("fc") or name.startswith("classifier")) and leaf == "w":
            params[name] = r.normal(v.shape, float(np.sqrt(1.0 / v.shape[1]))).astype(v.dtype)
            continue
        if ".bn." not in name:
            continue
        if leaf in ("gamma", "var"):
            params[name] = r.uniform(v.shape, 0.5, 1.5).astype(v.dtype)
        else:
            params[name] = r.normal(v.shape, 0.2).astype(v.dtype)


def check_dilation_batch_equiv(a: ArchSpec, rate: int, x: np.ndarray, seed: int = 0,
                               params: dict | None = None, tol: float = DILATION_TOL) -> EquivReport:
    """Dilated trunk on the full map vs undilated trunk on its r^2 polyphase replicas.

    Both paths share every weight and run BN in inference mode. The replica
    features are averaged at the global pool, which equals pooling the full
    dilated map; the head then runs once per sample.
    """
    _require_dilation_ready(a, rate)
    if params is None:
        params = init_params(a, seed)
        randomize_check_params(params, seed)
    dilated = apply_multiplier(a, MultiplierTransform("dilate", rate))
    start = trunk_start(a)
    t = apply_adapter_layers(np.asarray(x, DTYPE), a)
    logits_a = Network(dilated, params).forward(t, start=start)
    t_b = ops.space_to_batch(t, rate)
    logits_b = Network(a, params).forward(t_b, start=start, replicas=rate * rate)
    return _report(logits_a, logits_b, tol, [logits_a.shape, t_b.shape])


# -- parallel pipelines -------------------------------------------------------------

PIPELINE_ORDERS = ("s2b_then_s2d", "s2d_then_s2b")


def build_parallel_pipeline(order: str, r: int, k: int = 1) -> LayerSpec:
    """Input adapter producing r^2 replicas per image.

    ``s2b_then_s2d``: contiguous patches, each then S2D(k).
    ``s2d_then_s2b``: S2D(k) first, then the r^2 shifted-grid subsamples.
    """
    if order not in PIPELINE_ORDERS:
        raise ValueError(f"order must be one of {PIPELINE_ORDERS}, got {order!r}")
    if r < 1 or k < 1:
        raise ValueError("rate and block must be >= 1")
    return LayerSpec("adapter", "s2b_pipeline", {"rate": r, "block": k, "order": order}, role="adapter")


def apply_pipeline(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    r, k = layer.params["rate"], layer.params["block"]
    if x.shape[2] % (r * k) or x.shape[3] % (r * k):
        raise ArchError(f"input {x.shape[2]}x{x.shape[3]} not divisible by r*k={r * k}")
    if layer.params["order"] == "s2d_then_s2b":
        return ops.space_to_batch(ops.space_to_depth(x, k), r)
    return ops.space_to_depth(ops.split_tiles(x, r), k)


def pipeline_arch(a: ArchSpec, order: str, r: int) -> ArchSpec:
    """Swap an isometric spec's S2D adapter for an r^2-replica pipeline."""
    first = a.layers[0]
    if first.kind != "s2d":
        raise ArchError("parallel pipelines replace an S2D adapter")
    k = first.params["block"] // r if order == "s2b_then_s2d" else first.params["block"]
    if order == "s2b_then_s2d" and first.params["block"] % r:
        raise ArchError(f"S2D block {first.params['block']} not divisible by rate {r}")
    out = a.copy()
    out.layers[0] = build_parallel_pipeline(order, r, k)
    out.internal_res = a.internal_res // r if order == "s2d_then_s2b" else a.input_res // (r * k)
    _rechain(out)
    return check(out)


def pixel_cover_check(order: str, r: int, k: int, res: int, channels: int = 3) -> tuple[bool, int]:
    """Brute-force: every input pixel lands in exactly one replica, exactly once.

    Returns (ok, replica count).
    """
    n_pix = channels * res * res
    x = np.arange(n_pix, dtype=np.float64).reshape(1, channels, res, res)
    y = apply_pipeline(x, build_parallel_pipeline(order, r, k))
    counts = np.bincount(y.astype(np.int64).ravel(), minlength=n_pix)
    return bool(y.size == n_pix and np.all(counts == 1)), y.shape[0]
