"""Forward and backward kernels for every operator the networks use.

Each ``op`` has a matching ``op_backward`` that takes the saved forward
inputs and the upstream gradient. All functions are pure and keep the
dtype of their inputs (float32 in networks, float64 in gradient checks).

Same-zero padding splits an odd total pad as (floor, ceil) on
(top/left, bottom/right). Bilinear resampling uses half-pixel centers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BN_EPS = 1e-3
BN_MOMENTUM = 0.99


@dataclass(frozen=True)
class ConvParams:
    in_ch: int
    out_ch: int
    kernel: int = 1
    stride: int = 1
    dilation: int = 1
    groups: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.dilation < 1 or self.groups < 1:
            raise ValueError(f"kernel, stride, dilation and groups must be >= 1: {self}")
        if self.in_ch % self.groups or self.out_ch % self.groups:
            raise ValueError(f"channels ({self.in_ch}, {self.out_ch}) not divisible by groups={self.groups}")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_ch, self.in_ch // self.groups, self.kernel, self.kernel)

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_ch == self.out_ch and self.groups > 1

    def effective_kernel(self) -> int:
        return (self.kernel - 1) * self.dilation + 1

    def pads(self, size: int) -> tuple[int, int, int]:
        """Return (pad_before, pad_after, out_size) along one spatial axis."""
        eff = self.effective_kernel()
        if self.padding == "valid":
            out = (size - eff) // self.stride + 1
            if out < 1:
                raise ValueError(f"valid conv with effective kernel {eff} does not fit size {size}")
            return 0, 0, out
        out = -(-size // self.stride)
        total = max((out - 1) * self.stride + eff - size, 0)
        return total // 2, total - total // 2, out


@dataclass(frozen=True)
class SqueezeExciteParams:
    channels: int
    reduction: int = 4

    def __post_init__(self):
        if self.reduction < 1 or self.channels % self.reduction:
            raise ValueError(f"channels {self.channels} not divisible by reduction {self.reduction}")

    @property
    def hidden(self) -> int:
        return self.channels // self.reduction


# -- convolution -------------------------------------------------------------

def _pad(x, p: ConvParams):
    ph0, ph1, ho = p.pads(x.shape[2])
    pw0, pw1, wo = p.pads(x.shape[3])
    if ph0 or ph1 or pw0 or pw1:
        x = np.pad(x, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))
    return x, (ph0, ph1, pw0, pw1), ho, wo


def _tap(xp, ky, kx, p: ConvParams, ho, wo):
    y0, x0 = ky * p.dilation, kx * p.dilation
    s = p.stride
    return xp[:, :, y0:y0 + (ho - 1) * s + 1:s, x0:x0 + (wo - 1) * s + 1:s]


def _im2col(xp, p: ConvParams, ho, wo):
    n, c = xp.shape[:2]
    k = p.kernel
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, :, ky, kx] = _tap(xp, ky, kx, p, ho, wo)
    g = p.groups
    return cols.reshape(n, g, (c // g) * k * k, ho * wo)


def _flat_padded(x, p: ConvParams):
    """Zero-pad and flatten spatial dims so every stride-1 tap is one contiguous slice."""
    n, c, h, w = x.shape
    ph0, ph1, _ = p.pads(h)
    pw0, pw1, _ = p.pads(w)
    wp = w + pw0 + pw1
    xp = np.zeros((n, c, h + ph0 + ph1 + 1, wp), dtype=x.dtype)
    xp[:, :, ph0:ph0 + h, pw0:pw0 + w] = x
    return xp.reshape(n, c, -1), (ph0, pw0, wp)


def _dw_s1_forward(x, w, p: ConvParams):
    n, c, h, wd = x.shape
    xf, (_, _, wp) = _flat_padded(x, p)
    length = h * wp
    y = np.zeros((n, c, length), dtype=np.result_type(x, w))
    tmp = np.empty_like(y)
    for ky in range(p.kernel):
        for kx in range(p.kernel):
            off = (ky * wp + kx) * p.dilation
            np.multiply(xf[:, :, off:off + length], w[:, 0, ky, kx][None, :, None], out=tmp)
            y += tmp
    return y.reshape(n, c, h, wp)[:, :, :, :wd]


def _dw_s1_backward(x, w, gy, p: ConvParams):
    n, c, h, wd = x.shape
    xf, (ph0, pw0, wp) = _flat_padded(x, p)
    length = h * wp
    gext = np.zeros((n, c, h, wp), dtype=gy.dtype)
    gext[:, :, :, :wd] = gy
    gext = gext.reshape(n, c, length)
    gxf = np.zeros_like(xf, dtype=np.result_type(x, gy))
    gw = np.zeros_like(w, dtype=np.result_type(w, gy))
    tmp = np.empty_like(gext)
    for ky in range(p.kernel):
        for kx in range(p.kernel):
            off = (ky * wp + kx) * p.dilation
            gw[:, 0, ky, kx] = np.einsum("ncl,ncl->c", gext, xf[:, :, off:off + length])
            np.multiply(gext, w[:, 0, ky, kx][None, :, None], out=tmp)
            gxf[:, :, off:off + length] += tmp
    gx = gxf.reshape(n, c, -1, wp)[:, :, ph0:ph0 + h, pw0:pw0 + wd]
    return np.ascontiguousarray(gx), gw


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, p: ConvParams) -> np.ndarray:
    """Cross-correlation with stride, dilation, groups and zero padding."""
    if x.ndim != 4 or x.shape[1] != p.in_ch:
        raise ValueError(f"input {x.shape} does not have {p.in_ch} channels")
    if w.shape != p.weight_shape:
        raise ValueError(f"weight shape {w.shape} != expected {p.weight_shape}")
    n = x.shape[0]
    if p.kernel == 1 and p.stride == 1 and p.groups == 1:
        h, wd = x.shape[2:]
        y = np.matmul(w.reshape(p.out_ch, p.in_ch), x.reshape(n, p.in_ch, h * wd))
        y = y.reshape(n, p.out_ch, h, wd)
    elif p.depthwise and p.stride == 1:
        y = _dw_s1_forward(x, w, p)
    else:
        xp, _, ho, wo = _pad(x, p)
        if p.depthwise:
            y = np.zeros((n, p.out_ch, ho, wo), dtype=np.result_type(x, w))
            for ky in range(p.kernel):
                for kx in range(p.kernel):
                    y += _tap(xp, ky, kx, p, ho, wo) * w[:, 0, ky, kx][None, :, None, None]
        else:
            cols = _im2col(xp, p, ho, wo)
            g = p.groups
            wg = w.reshape(g, p.out_ch // g, -1)
            y = np.matmul(wg[None], cols).reshape(n, p.out_ch, ho, wo)
    if b is not None:
        y = y + b.reshape(1, -1, 1, 1)
    return y


def conv2d_backward(x, w, gy, p: ConvParams, has_bias: bool = False):
    """Return (grad_x, grad_w, grad_b or None)."""
    n = x.shape[0]
    gb = gy.sum(axis=(0, 2, 3)) if has_bias else None
    if p.kernel == 1 and p.stride == 1 and p.groups == 1:
        h, wd = x.shape[2:]
        x2 = x.reshape(n, p.in_ch, h * wd)
        g2 = gy.reshape(n, p.out_ch, h * wd)
        wm = w.reshape(p.out_ch, p.in_ch)
        gw = np.einsum("nol,ncl->oc", g2, x2).reshape(w.shape)
        gx = np.matmul(wm.T, g2).reshape(x.shape)
        return gx, gw, gb
    if p.depthwise and p.stride == 1:
        gx, gw = _dw_s1_backward(x, w, gy, p)
        return gx, gw, gb
    xp, (ph0, _, pw0, _), ho, wo = _pad(x, p)
    gxp = np.zeros_like(xp, dtype=np.result_type(x, gy))
    gw = np.zeros_like(w, dtype=np.result_type(w, gy))
    s = p.stride
    if p.depthwise:
        wt = w[:, 0]
        for ky in range(p.kernel):
            for kx in range(p.kernel):
                tap = _tap(xp, ky, kx, p, ho, wo)
                gw[:, 0, ky, kx] = np.einsum("nchw,nchw->c", gy, tap)
                y0, x0 = ky * p.dilation, kx * p.dilation
                gxp[:, :, y0:y0 + (ho - 1) * s + 1:s, x0:x0 + (wo - 1) * s + 1:s] += (
                    gy * wt[:, ky, kx][None, :, None, None])
    else:
        g = p.groups
        cols = _im2col(xp, p, ho, wo)
        gyg = gy.reshape(n, g, p.out_ch // g, ho * wo)
        gw = np.einsum("ngol,ngcl->goc", gyg, cols).reshape(w.shape)
        wg = w.reshape(g, p.out_ch // g, -1)
        gcols = np.matmul(np.swapaxes(wg, 1, 2)[None], gyg)
        gcols = gcols.reshape(n, p.in_ch, p.kernel, p.kernel, ho, wo)
        for ky in range(p.kernel):
            for kx in range(p.kernel):
                y0, x0 = ky * p.dilation, kx * p.dilation
                gxp[:, :, y0:y0 + (ho - 1) * s + 1:s, x0:x0 + (wo - 1) * s + 1:s] += gcols[:, :, ky, kx]
    h, wd = x.shape[2:]
    gx = gxp[:, :, ph0:ph0 + h, pw0:pw0 + wd]
    return np.ascontiguousarray(gx), gw, gb


# -- rearrangements ------------------------------------------------------------

def _check_divisible(x, k):
    if k < 1:
        raise ValueError(f"block size must be >= 1, got {k}")
    if x.shape[2] % k or x.shape[3] % k:
        raise ValueError(f"spatial dims {x.shape[2:]} not divisible by block size {k}")


def space_to_depth(x: np.ndarray, k: int) -> np.ndarray:
    """(n, c, h, w) -> (n, c*k*k, h/k, w/k); channel index is (cy*k + cx)*c + ci."""
    _check_divisible(x, k)
    n, c, h, w = x.shape
    t = x.reshape(n, c, h // k, k, w // k, k).transpose(0, 3, 5, 1, 2, 4)
    return t.reshape(n, k * k * c, h // k, w // k)


def depth_to_space(x: np.ndarray, k: int) -> np.ndarray:
    n, ck, h, w = x.shape
    if k < 1 or ck % (k * k):
        raise ValueError(f"channels {ck} not divisible by k^2 for k={k}")
    c = ck // (k * k)
    t = x.reshape(n, k, k, c, h, w).transpose(0, 3, 4, 1, 5, 2)
    return t.reshape(n, c, h * k, w * k)


def space_to_batch(x: np.ndarray, k: int) -> np.ndarray:
    """Polyphase split: (n, c, h, w) -> (n*k*k, c, h/k, w/k).

    Output batch index is ``i*k*k + cy*k + cx``; replica (cy, cx) holds the
    input pixels (y*k + cy, x*k + cx).
    """
    _check_divisible(x, k)
    n, c, h, w = x.shape
    t = x.reshape(n, c, h // k, k, w // k, k).transpose(0, 3, 5, 1, 2, 4)
    return t.reshape(n * k * k, c, h // k, w // k)


def batch_to_space(x: np.ndarray, k: int) -> np.ndarray:
    nk, c, h, w = x.shape
    if k < 1 or nk % (k * k):
        raise ValueError(f"batch {nk} not divisible by k^2 for k={k}")
    n = nk // (k * k)
    t = x.reshape(n, k, k, c, h, w).transpose(0, 3, 4, 1, 5, 2)
    return t.reshape(n, c, h * k, w * k)


def split_tiles(x: np.ndarray, r: int) -> np.ndarray:
    """Cut each image into r*r contiguous tiles stacked along the batch axis."""
    _check_divisible(x, r)
    n, c, h, w = x.shape
    t = x.reshape(n, c, r, h // r, r, w // r).transpose(0, 2, 4, 1, 3, 5)
    return t.reshape(n * r * r, c, h // r, w // r)


def merge_tiles(x: np.ndarray, r: int) -> np.ndarray:
    nr, c, h, w = x.shape
    if r < 1 or nr % (r * r):
        raise ValueError(f"batch {nr} not divisible by r^2 for r={r}")
    n = nr // (r * r)
    t = x.reshape(n, r, r, c, h, w).transpose(0, 3, 1, 4, 2, 5)
    return t.reshape(n, c, h * r, w * r)


# Permutations backprop through their inverse.
space_to_depth_backward = depth_to_space
depth_to_space_backward = space_to_depth
space_to_batch_backward = batch_to_space
batch_to_space_backward = space_to_batch
split_tiles_backward = merge_tiles


# -- resampling ----------------------------------------------------------------

def _bilinear_matrix(size: int, factor: int, dtype) -> np.ndarray:
    out = size * factor
    src = (np.arange(out) + 0.5) / factor - 0.5
    src = np.clip(src, 0, size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, size - 1)
    frac = src - lo
    m = np.zeros((out, size), dtype=np.float64)
    m[np.arange(out), lo] += 1 - frac
    m[np.arange(out), hi] += frac
    return m.astype(dtype)


def upsample(x: np.ndarray, factor: int, mode: str = "bilinear") -> np.ndarray:
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"upsample factor must be an integer >= 1, got {factor}")
    if factor == 1:
        return x.copy()
    if mode == "nearest":
        return x.repeat(factor, axis=2).repeat(factor, axis=3)
    if mode == "zero_fill":
        n, c, h, w = x.shape
        y = np.zeros((n, c, h * factor, w * factor), dtype=x.dtype)
        y[:, :, ::factor, ::factor] = x
        return y
    if mode == "bilinear":
        mh = _bilinear_matrix(x.shape[2], factor, x.dtype)
        mw = _bilinear_matrix(x.shape[3], factor, x.dtype)
        return np.einsum("yh,nchw,xw->ncyx", mh, x, mw, optimize=True)
    raise ValueError(f"unknown upsample mode {mode!r}")


def upsample_backward(gy: np.ndarray, factor: int, mode: str = "bilinear") -> np.ndarray:
    if factor == 1:
        return gy.copy()
    if mode == "nearest":
        n, c, h, w = gy.shape
        return gy.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))
    if mode == "zero_fill":
        return np.ascontiguousarray(gy[:, :, ::factor, ::factor])
    if mode == "bilinear":
        mh = _bilinear_matrix(gy.shape[2] // factor, factor, gy.dtype)
        mw = _bilinear_matrix(gy.shape[3] // factor, factor, gy.dtype)
        return np.einsum("yh,ncyx,xw->nchw", mh, gy, mw, optimize=True)
    raise ValueError(f"unknown upsample mode {mode!r}")


# -- pointwise nonlinearities ---------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, gy):
    return gy * (x > 0)


def hard_sigmoid(x):
    return np.clip((x + 3) / 6, 0, 1).astype(x.dtype, copy=False)


def hard_sigmoid_backward(x, gy):
    # closed interval: breakpoints take the interior slope
    return gy * ((x >= -3) & (x <= 3)) / 6


def hard_swish(x):
    return x * hard_sigmoid(x)


def hard_swish_backward(x, gy):
    inner = (x >= -3) & (x <= 3)
    d = (2 * x + 3) / 6
    d *= inner
    d += x > 3
    return gy * d


ACTIVATIONS = {
    "none": (lambda x: x, lambda x, gy: gy),
    "relu": (relu, relu_backward),
    "hard_swish": (hard_swish, hard_swish_backward),
}


# -- pooling / dense -------------------------------------------------------------

def global_avg_pool(x):
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(x_shape, gy):
    n, c, h, w = x_shape
    return np.broadcast_to(gy / (h * w), x_shape).copy()


def fully_connected(x, w, b):
    """x: (n, in) or (n, in, 1, 1); w: (out, in)."""
    x2 = x.reshape(x.shape[0], -1)
    if x2.shape[1] != w.shape[1]:
        raise ValueError(f"fc input width {x2.shape[1]} != weight fan-in {w.shape[1]}")
    y = x2 @ w.T
    if b is not None:
        y = y + b
    return y


def fully_connected_backward(x, w, gy, has_bias=True):
    x2 = x.reshape(x.shape[0], -1)
    gx = (gy @ w).reshape(x.shape)
    gw = gy.T @ x2
    gb = gy.sum(axis=0) if has_bias else None
    return gx, gw, gb


# -- batch norm ------------------------------------------------------------------

def _chan(v):
    return v.reshape(1, -1, 1, 1)


def batch_norm(x, gamma, beta, running_mean, running_var, mode: str = "train",
               eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
    """Per-channel normalization over (n, h, w).

    Returns ``(y, new_running_mean, new_running_var, cache)``. Inference mode
    leaves running statistics untouched. Variance is the biased batch
    variance.
    """
    if mode == "train":
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 1:
            raise ValueError("batch_norm on an empty batch")
        mean = np.einsum("nchw->c", x) / m
        xhat = x - _chan(mean)
        var = np.einsum("nchw,nchw->c", xhat, xhat) / m
        new_mean = momentum * running_mean + (1 - momentum) * mean
        new_var = momentum * running_var + (1 - momentum) * var
        inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
        xhat *= _chan(inv)
        y = xhat * _chan(gamma)
        y += _chan(beta)
        return y.astype(x.dtype, copy=False), new_mean, new_var, (xhat, inv, mode)
    if mode != "infer":
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    inv = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype, copy=False)
    scale = gamma * inv
    y = x * _chan(scale)
    y += _chan(beta - running_mean * scale)
    return y.astype(x.dtype, copy=False), running_mean, running_var, (x, running_mean, inv, mode)


def batch_norm_backward(cache, gamma, gy):
    """Return (grad_x, grad_gamma, grad_beta)."""
    if cache[-1] == "infer":
        x, mean, inv, _ = cache
        xhat = (x - _chan(mean)) * _chan(inv)
        ggamma = np.einsum("nchw,nchw->c", gy, xhat)
        return gy * _chan(gamma * inv), ggamma, np.einsum("nchw->c", gy)
    xhat, inv, _ = cache
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    gbeta = np.einsum("nchw->c", gy)
    ggamma = np.einsum("nchw,nchw->c", gy, xhat)
    # gx = gamma*inv * (gy - mean(gy) - xhat * mean(gy*xhat))
    scale = gamma * inv
    gx = xhat * _chan(-ggamma / m)
    gx += gy
    gx *= _chan(scale)
    gx -= _chan(scale * gbeta / m)
    return gx, ggamma, gbeta


# -- squeeze-excite ----------------------------------------------------------------

def squeeze_excite(x, w1, b1, w2, b2, p: SqueezeExciteParams):
    """Gate channels by hard_sigmoid(w2 @ relu(w1 @ mean_hw(x) + b1) + b2).

    w1: (hidden, channels), w2: (channels, hidden). Returns (y, cache).
    """
    if x.shape[1] != p.channels:
        raise ValueError(f"SE expects {p.channels} channels, got {x.shape[1]}")
    if w1.shape != (p.hidden, p.channels) or w2.shape != (p.channels, p.hidden):
        raise ValueError(f"SE weight shapes {w1.shape}, {w2.shape} do not match {p}")
    s = x.mean(axis=(2, 3))
    z1 = s @ w1.T + b1
    a = relu(z1)
    z2 = a @ w2.T + b2
    gate = hard_sigmoid(z2)
    return x * gate[:, :, None, None], (s, z1, a, z2, gate)


def squeeze_excite_backward(x, w1, w2, cache, gy):
    """Return (grad_x, grad_w1, grad_b1, grad_w2, grad_b2)."""
    s, z1, a, z2, gate = cache
    h, w = x.shape[2:]
    ggate = (gy * x).sum(axis=(2, 3))
    gz2 = hard_sigmoid_backward(z2, ggate)
    gw2 = gz2.T @ a
    gb2 = gz2.sum(axis=0)
    ga = gz2 @ w2
    gz1 = relu_backward(z1, ga)
    gw1 = gz1.T @ s
    gb1 = gz1.sum(axis=0)
    gs = gz1 @ w1
    gx = gy * gate[:, :, None, None] + (gs / (h * w))[:, :, None, None]
    return gx, gw1, gb1, gw2, gb2


# -- loss ----------------------------------------------------------------------------

def softmax_cross_entropy(logits, labels, label_smoothing: float = 0.0):
    """Mean cross-entropy over the batch; returns (loss, grad_logits)."""
    n, k = logits.shape
    if n == 0:
        raise ValueError("cross-entropy of an empty batch")
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    target = np.full((n, k), label_smoothing / k, dtype=logits.dtype)
    target[np.arange(n), labels] += 1.0 - label_smoothing
    loss = float(-(target * logp).sum() / n)
    grad = (np.exp(logp) - target) / n
    return loss, grad.astype(logits.dtype, copy=False)
