"""Desk-scale training, evaluation and gradient checking."""
from __future__ import annotations

import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .arch import ArchSpec, atomic_write_text, build_isometric, check, infer_shapes
from .data import (Checkpoint, DatasetHandle, InputAdapter, adapt_input, csv_text, trunk_start,
                   write_checkpoint, write_ppm)
from .equivalence import fold_s2d_conv
from .network import Network, init_params, trainable_names
from .tensor import DTYPE, Rng


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class OptimizerConfig:
    kind: str = "sgd_momentum"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-5
    decay: float = 0.9
    eps: float = 1e-3

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "rmsprop"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 5
    batch_size: int = 64
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    lr_schedule: str = "cosine"
    freeze: list = field(default_factory=list)
    input_adapter: str = "native"
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must be in [0, 1)")
        InputAdapter.parse(self.input_adapter)

    def lr_at(self, step: int, total: int) -> float:
        base = self.optimizer.lr
        if self.lr_schedule == "constant" or total <= 1:
            return base
        return 0.5 * base * (1.0 + math.cos(math.pi * step / total))


GRAD_CHECK_FLOOR = 1e-6

LOG_FIELDS = ["epoch", "train_loss", "train_acc", "eval_acc", "lr", "wall_seconds"]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    eval_acc: float
    lr: float
    wall_seconds: float


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    best_epoch: int = 0

    def to_csv(self, timing: bool = False) -> str:
        """CSV text. Wall time is left out by default so repeated runs are byte-identical."""
        fields = LOG_FIELDS if timing else LOG_FIELDS[:-1]
        rows = []
        for r in self.rows:
            vals = [str(r.epoch), repr(r.train_loss), repr(r.train_acc), repr(r.eval_acc), repr(r.lr)]
            if timing:
                vals.append(f"{r.wall_seconds:.3f}")
            rows.append(vals)
        return csv_text(fields, rows)


# -- optimizer ---------------------------------------------------------------------

def _decays(name: str) -> bool:
    return name.rsplit(".", 1)[1] in ("w", "w1", "w2")


class Optimizer:
    def __init__(self, cfg: OptimizerConfig, names: list[str]):
        self.cfg = cfg
        self.names = names
        self.slots: dict[str, list[np.ndarray]] = {}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        c = self.cfg
        for name in self.names:
            g = grads.get(name)
            if g is None:
                continue
            w = params[name]
            if c.weight_decay and _decays(name):
                g = g + c.weight_decay * w
            if c.kind == "sgd_momentum":
                slot = self.slots.setdefault(name, [np.zeros_like(w)])
                slot[0] = c.momentum * slot[0] + g
                params[name] = (w - lr * slot[0]).astype(w.dtype)
            else:
                ms, mom = self.slots.setdefault(name, [np.ones_like(w), np.zeros_like(w)])
                ms = c.decay * ms + (1 - c.decay) * g * g
                mom = c.momentum * mom + lr * g / np.sqrt(ms + c.eps)
                self.slots[name] = [ms, mom]
                params[name] = (w - mom).astype(w.dtype)


# -- helpers -------------------------------------------------------------------------

def frozen_names(a: ArchSpec, params: dict, freeze: list) -> set[str]:
    ids = set(freeze) | {l.id for l in a.layers if l.frozen}
    known = {l.id for l in a.layers}
    unknown = ids - known
    if unknown:
        raise ValueError(f"freeze list names unknown layers: {sorted(unknown)}")
    return {n for n in params if n.split(".", 1)[0] in ids}


def params_from_checkpoint(ckpt: Checkpoint | dict, a: ArchSpec) -> dict:
    entries = ckpt.entries if isinstance(ckpt, Checkpoint) else ckpt
    expected = init_params(a, 0)
    missing = [n for n in expected if n not in entries]
    if missing:
        raise ValueError(f"checkpoint lacks {len(missing)} parameters, e.g. {missing[0]!r}")
    extra = [n for n in entries if n not in expected]
    if extra:
        raise ValueError(f"checkpoint has entries unknown to the architecture, e.g. {extra[0]!r}")
    for n, v in expected.items():
        if entries[n].shape != v.shape:
            raise ValueError(f"{n}: checkpoint shape {entries[n].shape} != architecture shape {v.shape}")
    return {n: np.array(entries[n], dtype=DTYPE) for n in expected}


def _prepare(a: ArchSpec, data: DatasetHandle, adapter: str) -> np.ndarray:
    if data.num_classes != a.num_classes:
        raise ValueError(f"dataset has {data.num_classes} classes, architecture head has {a.num_classes}")
    return adapt_input(data.images, adapter, a)


def _predict(net: Network, x: np.ndarray, start: int, batch_size: int = 256) -> np.ndarray:
    out = [np.argmax(net.forward(x[i:i + batch_size], start=start), axis=1)
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# -- public API -------------------------------------------------------------------------

def evaluate(ckpt: Checkpoint | dict, a: ArchSpec, data: DatasetHandle, adapter: str = "native",
             batch_size: int = 256) -> float:
    """Top-1 accuracy over ``data``; BN in inference mode."""
    params = params_from_checkpoint(ckpt, a)
    x = _prepare(a, data, adapter)
    if len(x) == 0:
        raise ValueError("evaluation set is empty")
    pred = _predict(Network(a, params), x, trunk_start(a), batch_size)
    return float(np.mean(pred == data.labels))


def train(a: ArchSpec, cfg: TrainConfig, data: DatasetHandle, eval_data: DatasetHandle | None = None,
          out: str | os.PathLike | None = None, progress=None) -> tuple[Checkpoint, TrainLog]:
    """Train from a seeded init and return (best-eval checkpoint, log).

    Batches come from a per-epoch permutation drawn from the seed; a final
    partial batch is dropped. Without ``eval_data`` the training set is
    scored. When ``out`` is given the best checkpoint goes to ``out`` and
    the log to ``out`` + ".log.csv".
    """
    check(a)
    eval_data = eval_data if eval_data is not None else data
    x = _prepare(a, data, cfg.input_adapter)
    x_eval = _prepare(a, eval_data, cfg.input_adapter)
    y = data.labels
    start = trunk_start(a)
    net = Network(a, seed=cfg.seed)
    params = net.params
    frozen = frozen_names(a, params, cfg.freeze)
    snapshot = {n: params[n].copy() for n in frozen}
    opt = Optimizer(cfg.optimizer, [n for n in trainable_names(params) if n not in frozen])
    shuffle = Rng(cfg.seed).stream("shuffle")
    n = len(y)
    bs = min(cfg.batch_size, n)
    steps_per_epoch = max(1, n // bs)
    total = steps_per_epoch * cfg.epochs
    log = TrainLog()
    best, best_acc, step = None, -1.0, 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = shuffle.stream(epoch).permutation(n)
        loss_sum, correct, seen, lr = 0.0, 0, 0, cfg.lr_at(step, total)
        for b in range(steps_per_epoch):
            idx = order[b * bs:(b + 1) * bs]
            lr = cfg.lr_at(step, total)
            logits = net.forward(x[idx], train=True, start=start)
            loss, g = ops.softmax_cross_entropy(logits, y[idx], cfg.label_smoothing)
            if not math.isfinite(loss):
                dump = None
                if out is not None:
                    dump = os.fspath(out) + ".diverged"
                    write_checkpoint(dump, params)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}", dump)
            grads, _ = net.backward(g)
            opt.step(params, grads, lr)
            for name, v in snapshot.items():
                params[name] = v.copy()
            loss_sum += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == y[idx]))
            seen += len(idx)
            step += 1
        acc = float(np.mean(_predict(net, x_eval, start) == eval_data.labels))
        log.rows.append(EpochRecord(epoch, loss_sum / seen, correct / seen, acc, lr,
                                    time.perf_counter() - t0))
        if acc > best_acc:
            best_acc, log.best_epoch = acc, epoch
            best = {k: v.copy() for k, v in params.items()}
        if progress is not None:
            progress(log.rows[-1])
    ckpt = Checkpoint(best)
    if out is not None:
        write_checkpoint(out, ckpt)
        atomic_write_text(os.fspath(out) + ".log.csv", log.to_csv())
    return ckpt, log


# -- gradient check -------------------------------------------------------------------

def toy_arch(se: bool = True, blocks: int = 2, num_classes: int = 4) -> ArchSpec:
    """Tiny isometric MV3_SE net (8x8 map, 8 channels) for gradient checks."""
    return build_isometric(8, 8, 1.0, blocks, num_classes, bottleneck=8, expansion=1,
                           head_width=8, fc_width=8, se=se)


def _loss_fn(net: Network, x, y, start):
    logits = net.forward(x, train=True, start=start)
    return ops.softmax_cross_entropy(logits, y)


def grad_check(a: ArchSpec, seed: int = 0, *, batch: int = 4, h: float = 1e-5,
               max_coords: int | None = None, return_details: bool = False):
    """Max relative error of analytic vs central-difference gradients, float64.

    Parameters are the seeded init with unit-gain FC weights and random
    biases. Relative error is |a - n| / max(|a| + |n|, 1e-6); the floor sits
    well above float64 central-difference noise (about 1e-11 here), so
    structurally zero gradients (a BN shift feeding another train-mode BN)
    do not read as large relative errors. Coordinates where the
    two-sided estimate at h and h/2 disagree (a kink of relu/hard_swish
    straddled by the probe) are excluded and counted.
    """
    rng = Rng(seed).stream("grad_check")
    net = Network(a, seed=seed, dtype=np.float64)
    params = net.params
    # unit-gain FC weights: with the 0.01 init the trunk gradients sit near
    # 1e-8, where central-difference roundoff dominates the comparison
    for layer in a.layers:
        if layer.kind == "fc":
            w = params[f"{layer.id}.w"]
            params[f"{layer.id}.w"] = rng.stream(layer.id).normal(w.shape, math.sqrt(1.0 / w.shape[1]))
    for name in trainable_names(params):
        if name.endswith(".b") or ".bn.beta" in name or ".se.b" in name:
            params[name] = rng.stream(name).normal(params[name].shape, 0.1)
    start = trunk_start(a)
    s_in = infer_shapes(a, batch)[start][0]
    x = rng.stream("x").normal((batch, s_in.c, s_in.h, s_in.w))
    y = rng.stream("y").integers(0, a.num_classes, batch)

    _, g = _loss_fn(net, x, y, start)
    grads, _ = net.backward(g)
    worst, excluded, checked = 0.0, 0, 0
    pick = rng.stream("coords")
    for name in trainable_names(params):
        w = params[name]
        flat = w.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(pick.stream(name).permutation(flat.size)[:max_coords])
        ga = grads.get(name, np.zeros_like(w)).reshape(-1)

        def central(i, step):
            orig = flat[i]
            flat[i] = orig + step
            lp, _ = _loss_fn(net, x, y, start)
            flat[i] = orig - step
            lm, _ = _loss_fn(net, x, y, start)
            flat[i] = orig
            return (lp - lm) / (2 * step)

        for i in coords:
            n1 = central(i, h)
            n2 = central(i, h / 2)
            if abs(n1 - n2) > 1e-4 * max(abs(n1) + abs(n2), 1e-3):
                excluded += 1
                continue
            err = abs(ga[i] - n1) / max(abs(ga[i]) + abs(n1), GRAD_CHECK_FLOOR)
            worst = max(worst, err)
            checked += 1
    if return_details:
        return worst, {"checked": checked, "excluded": excluded}
    return worst


# -- filter dump --------------------------------------------------------------------------

def first_layer_filters(params: dict, a: ArchSpec) -> np.ndarray:
    """First trainable layer as (out, c_in, k, k) spatial filters."""
    i = trunk_start(a)
    layer = a.layers[i]
    w = params[f"{layer.id}.w"]
    if layer.kind == "conv1x1" and i > 0 and a.layers[0].kind == "s2d":
        return fold_s2d_conv(a.layers[0].params["block"], w, a.in_channels)
    if layer.kind in ("conv1x1", "conv"):
        return w
    raise ValueError(f"first trainable layer {layer.id} is a {layer.kind}, not a convolution")


def filter_images(filters: np.ndarray) -> np.ndarray:
    """(out, c, k, k) -> (out, k, k, 3) uint8, min-max normalized per filter.

    Constant filters map to mid gray. Single-channel filters are replicated
    to RGB; filters with other channel counts use their first three.
    """
    f = filters.astype(np.float64)
    if f.shape[1] == 1:
        f = np.repeat(f, 3, axis=1)
    f = f[:, :3]
    lo = f.min(axis=(1, 2, 3), keepdims=True)
    hi = f.max(axis=(1, 2, 3), keepdims=True)
    span = hi - lo
    norm = np.where(span > 0, (f - lo) / np.where(span > 0, span, 1.0), 0.5)
    return np.rint(norm * 255).astype(np.uint8).transpose(0, 2, 3, 1)


def montage(images: np.ndarray, pad: int = 1) -> np.ndarray:
    n, k = images.shape[0], images.shape[1]
    cols = int(math.ceil(math.sqrt(n)))
    rows = int(math.ceil(n / cols))
    out = np.zeros((rows * (k + pad) + pad, cols * (k + pad) + pad, 3), dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        y0, x0 = pad + r * (k + pad), pad + c * (k + pad)
        out[y0:y0 + k, x0:x0 + k] = images[i]
    return out


def dump_first_layer_filters(ckpt: Checkpoint | dict, a: ArchSpec, path, *,
                             with_montage: bool = False) -> list[str]:
    """Write one PPM per first-layer filter into directory ``path``."""
    params = params_from_checkpoint(ckpt, a)
    imgs = filter_images(first_layer_filters(params, a))
    os.makedirs(path, exist_ok=True)
    written = []
    for i, img in enumerate(imgs):
        p = os.path.join(path, f"filter_{i:04d}.ppm")
        write_ppm(p, img)
        written.append(p)
    if with_montage:
        p = os.path.join(path, "montage.ppm")
        write_ppm(p, montage(imgs))
        written.append(p)
    return written


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
