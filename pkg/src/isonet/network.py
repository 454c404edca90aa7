"""Execute an ArchSpec: parameter init, forward pass, reverse-mode backward."""
from __future__ import annotations

import numpy as np

from . import ops
from .arch import ArchSpec, LayerSpec, check, is_running_stat, param_shapes
from .tensor import DTYPE, Rng, truncated_normal

FC_INIT_STDDEV = 0.01


def init_params(a: ArchSpec, seed: int = 0, dtype=DTYPE) -> dict[str, np.ndarray]:
    """Deterministic initial parameters.

    Conv (and SE) weights: truncated normal, stddev sqrt(2 / fan_in).
    FC weights: truncated normal, stddev 0.01. BN gamma=1, beta=0, running
    mean 0, running var 1. Biases 0. Each array draws from its own stream
    keyed by name, so editing one layer never shifts another's values.
    """
    root = Rng(seed).stream("init")
    params = {}
    for layer in a.layers:
        for name, shape in param_shapes(layer).items():
            leaf = name.rsplit(".", 1)[1]
            if leaf in ("w", "w1", "w2"):
                if layer.kind == "fc":
                    std = FC_INIT_STDDEV
                else:
                    std = float(np.sqrt(2.0 / int(np.prod(shape[1:]))))
                params[name] = truncated_normal(shape, root.stream(name), std, dtype)
            elif leaf in ("gamma", "var"):
                params[name] = np.ones(shape, dtype=dtype)
            else:
                params[name] = np.zeros(shape, dtype=dtype)
    return params


def trainable_names(params: dict) -> list[str]:
    return [k for k in params if not is_running_stat(k)]


class Network:
    """Forward/backward over an ArchSpec with explicit parameter dict.

    ``bypass_bn`` and ``bypass_se`` turn normalization and SE gating into
    identities; the receptive-field oracle and some equivalence checks use
    them. s2b replicas created by an ``s2b_pipeline`` adapter are averaged
    back into one sample at the global pooling layer.
    """

    def __init__(self, arch: ArchSpec, params: dict | None = None, *, seed: int = 0,
                 dtype=DTYPE, bypass_bn: bool = False, bypass_se: bool = False):
        self.arch = check(arch)
        self.dtype = np.dtype(dtype)
        self.params = init_params(arch, seed, dtype) if params is None else params
        self.bypass_bn = bypass_bn
        self.bypass_se = bypass_se
        self._tape: list | None = None
        missing = [n for l in arch.layers for n in param_shapes(l) if n not in self.params]
        if missing:
            raise KeyError(f"parameters missing for: {', '.join(missing[:5])}")

    # -- building blocks ---------------------------------------------------------
    def _bn(self, prefix, x, train):
        if self.bypass_bn:
            return x, None
        p = self.params
        y, nm, nv, cache = ops.batch_norm(x, p[f"{prefix}.gamma"], p[f"{prefix}.beta"],
                                          p[f"{prefix}.mean"], p[f"{prefix}.var"],
                                          "train" if train else "infer")
        if train:
            p[f"{prefix}.mean"] = nm.astype(self.dtype)
            p[f"{prefix}.var"] = nv.astype(self.dtype)
        return y, cache

    def _bn_back(self, prefix, cache, gy, grads):
        if cache is None:
            return gy
        gx, gg, gb = ops.batch_norm_backward(cache, self.params[f"{prefix}.gamma"], gy)
        grads[f"{prefix}.gamma"] = gg
        grads[f"{prefix}.beta"] = gb
        return gx

    def _conv_unit(self, prefix, x, cp, bn, act, bias, train):
        w = self.params[f"{prefix}.w"]
        b = self.params.get(f"{prefix}.b") if bias else None
        z = ops.conv2d(x, w, b, cp)
        zb, bn_cache = self._bn(f"{prefix}.bn", z, train) if bn else (z, None)
        y = ops.ACTIVATIONS[act][0](zb)
        return y, (x, cp, bn, act, bias, zb, bn_cache)

    def _conv_unit_back(self, prefix, cache, gy, grads):
        x, cp, bn, act, bias, zb, bn_cache = cache
        g = ops.ACTIVATIONS[act][1](zb, gy)
        if bn:
            g = self._bn_back(f"{prefix}.bn", bn_cache, g, grads)
        gx, gw, gb = ops.conv2d_backward(x, self.params[f"{prefix}.w"], g, cp, has_bias=bias)
        grads[f"{prefix}.w"] = gw
        if bias:
            grads[f"{prefix}.b"] = gb
        return gx

    # -- per-kind forward ------------------------------------------------------------
    def _layer_forward(self, layer: LayerSpec, x, train):
        p, k, lid = layer.params, layer.kind, layer.id
        if k == "s2d":
            return ops.space_to_depth(x, p["block"]), None
        if k == "upsample_input":
            return ops.upsample(x, p["factor"], p.get("mode", "bilinear")), None
        if k == "s2b_pipeline":
            r, b = p["rate"], p.get("block", 1)
            if p.get("order", "s2d_then_s2b") == "s2d_then_s2b":
                y = ops.space_to_batch(ops.space_to_depth(x, b), r)
            else:
                y = ops.space_to_depth(ops.split_tiles(x, r), b)
            self._replicas *= r * r
            return y, None
        if k in ("conv1x1", "conv"):
            return self._conv_unit(lid, x, layer.conv_params(), p.get("bn", True),
                                   p.get("act", "none"), p.get("bias", False), train)
        if k == "mv3_se_block":
            convs = layer.block_convs()
            e, c1 = self._conv_unit(f"{lid}.expand", x, convs["expand"], True, "hard_swish", False, train)
            d, c2 = self._conv_unit(f"{lid}.dw", e, convs["dw"], True, "hard_swish", False, train)
            se_cache = None
            if p.get("se_reduction", 4) and not self.bypass_se:
                sp = ops.SqueezeExciteParams(p["expand"], p["se_reduction"])
                P = self.params
                s, se_cache = ops.squeeze_excite(d, P[f"{lid}.se.w1"], P[f"{lid}.se.b1"],
                                                 P[f"{lid}.se.w2"], P[f"{lid}.se.b2"], sp)
            else:
                s = d
            y, c3 = self._conv_unit(f"{lid}.project", s, convs["project"], True, "none", False, train)
            if p.get("residual", False):
                y = y + x
            return y, (c1, c2, d, se_cache, c3)
        if k == "avg_pool":
            y = ops.global_avg_pool(x)
            r = self._replicas
            if r > 1:
                y = y.reshape(-1, r, *y.shape[1:]).mean(axis=1)
            cache = (x.shape, r)
            self._replicas = 1
            return y, cache
        if k == "fc":
            w, b = self.params[f"{lid}.w"], self.params.get(f"{lid}.b")
            z = ops.fully_connected(x, w, b)
            y = ops.ACTIVATIONS[p.get("act", "none")][0](z)
            return y.reshape(y.shape[0], -1, 1, 1), (x, z)
        raise ValueError(f"unknown layer kind {k!r}")

    def _layer_backward(self, layer: LayerSpec, cache, gy, grads):
        p, k, lid = layer.params, layer.kind, layer.id
        if k == "s2d":
            return ops.space_to_depth_backward(gy, p["block"])
        if k == "upsample_input":
            return ops.upsample_backward(gy, p["factor"], p.get("mode", "bilinear"))
        if k == "s2b_pipeline":
            r, b = p["rate"], p.get("block", 1)
            if p.get("order", "s2d_then_s2b") == "s2d_then_s2b":
                return ops.space_to_depth_backward(ops.space_to_batch_backward(gy, r), b)
            return ops.split_tiles_backward(ops.space_to_depth_backward(gy, b), r)
        if k in ("conv1x1", "conv"):
            return self._conv_unit_back(lid, cache, gy, grads)
        if k == "mv3_se_block":
            c1, c2, d, se_cache, c3 = cache
            g = self._conv_unit_back(f"{lid}.project", c3, gy, grads)
            if se_cache is not None:
                P = self.params
                g, gw1, gb1, gw2, gb2 = ops.squeeze_excite_backward(
                    d, P[f"{lid}.se.w1"], P[f"{lid}.se.w2"], se_cache, g)
                grads.update({f"{lid}.se.w1": gw1, f"{lid}.se.b1": gb1,
                              f"{lid}.se.w2": gw2, f"{lid}.se.b2": gb2})
            g = self._conv_unit_back(f"{lid}.dw", c2, g, grads)
            g = self._conv_unit_back(f"{lid}.expand", c1, g, grads)
            if p.get("residual", False):
                g = g + gy
            return g
        if k == "avg_pool":
            x_shape, r = cache
            if r > 1:
                gy = np.repeat(gy, r, axis=0) / r
            return ops.global_avg_pool_backward(x_shape, gy)
        if k == "fc":
            x, z = cache
            g = ops.ACTIVATIONS[p.get("act", "none")][1](z, gy.reshape(z.shape))
            has_b = f"{lid}.b" in self.params
            gx, gw, gb = ops.fully_connected_backward(x, self.params[f"{lid}.w"], g, has_b)
            grads[f"{lid}.w"] = gw
            if has_b:
                grads[f"{lid}.b"] = gb
            return gx
        raise ValueError(f"unknown layer kind {k!r}")

    # -- public API ---------------------------------------------------------------------
    def forward(self, x: np.ndarray, *, train: bool = False, record: bool = False,
                start: int = 0, stop: str | None = None, replicas: int = 1) -> np.ndarray:
        """Run layers ``start`` .. ``stop`` (inclusive, by id; default: all).

        ``train`` switches BN to batch statistics and updates running stats.
        ``record`` keeps what backward needs. ``replicas`` declares that
        consecutive groups of that many batch entries belong to one sample
        (merged at global pooling). Classifier output is returned as
        (n, classes).
        """
        x = np.asarray(x, dtype=self.dtype)
        self._replicas = replicas
        for layer in self.arch.layers[:start]:
            if layer.kind == "s2b_pipeline":
                self._replicas *= layer.params["rate"] ** 2
        self._tape = [] if (record or train) else None
        for layer in self.arch.layers[start:]:
            x, cache = self._layer_forward(layer, x, train)
            if self._tape is not None:
                self._tape.append((layer, cache))
            if stop is not None and layer.id == stop:
                return x
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out: np.ndarray) -> tuple[dict, np.ndarray]:
        """Gradients for every trainable parameter touched, plus grad of the input."""
        if self._tape is None:
            raise RuntimeError("backward() needs a forward pass with record=True or train=True")
        grads: dict[str, np.ndarray] = {}
        g = grad_out
        last = self._tape[-1][0]
        if last.kind == "fc":
            g = g.reshape(g.shape[0], -1, 1, 1)
        for layer, cache in reversed(self._tape):
            g = self._layer_backward(layer, cache, g, grads)
        return grads, g

    def predict(self, x: np.ndarray, batch_size: int = 256, start: int = 0) -> np.ndarray:
        out = [self.forward(x[i:i + batch_size], start=start) for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)
