"""End-to-end acceptance criteria, one test each.

Each test records PASS/FAIL through the ``criterion`` fixture; the summary
is printed at the end of the pytest run.
"""
import csv
import itertools

import numpy as np
import pytest

from isonet.analyzer import (EXPECTED_RATIOS, analytic_rf_box, analyze, impulse_rf_oracle, receptive_fields,
                             recurrence_rf_box, scaling_check)
from isonet.arch import (ArchSpec, MultiplierTransform, apply_multiplier, build_dense1x1, build_isometric,
                         build_pyramid, block_correspondence, infer_shapes, resolution_blocks)
from isonet.cli import run
from isonet.data import synth_shapes
from isonet.equivalence import check_dilation_batch_equiv, random_s2d_fold_case
from isonet.tensor import Rng
from isonet.trainer import GRAD_CHECK_FLOOR, OptimizerConfig, TrainConfig, grad_check, toy_arch, train


def test_01_shape_fidelity(tmp_path, criterion):
    with criterion(1, "shape fidelity", 1.0) as c:
        path = tmp_path / "a.json"
        assert run(["build-arch", "--preset", "isometric", "--res", "14", "--input", "224", "--mult", "1",
                    "--layers", "16", "--classes", "1000", "--out", str(path), "--quiet"]) == 0
        assert run(["analyze", "--arch", str(path), "--quiet"]) == 0
        a = ArchSpec.load(path)
        shapes = {l.id: s_out for l, (_, s_out) in zip(a.layers, infer_shapes(a))}
        want = {"adapter": (768, 14, 14), "head_conv": (768, 14, 14), "pool": (768, 1, 1),
                "fc1": (1280, 1, 1), "classifier": (1000, 1, 1)}
        want.update({f"block{i:02d}": (64, 14, 14) for i in range(16)})
        got = {k: tuple(shapes[k])[1:] for k in want}
        c.detail = f"{len(want)} layer shapes checked"
        assert got == want


def test_02_parameter_anchors(criterion):
    with criterion(2, "parameter anchors", 1.0) as c:
        small = analyze(build_isometric(224, 14, 1.0, 16, 1000))
        big = analyze(build_isometric(224, 28, 2.0, 32, 1000))
        c.detail = (f"d14/m1/l16 total={small.total_params:,} trainable={small.trainable_params:,}; "
                    f"d28/m2/l32 total={big.total_params:,} trainable={big.trainable_params:,}")
        # both counting conventions fall inside the tolerance
        for n in (small.total_params, small.trainable_params):
            assert abs(n / 4.4e6 - 1) <= 0.02
        for n in (big.total_params, big.trainable_params):
            assert abs(n / 20e6 - 1) <= 0.05


def test_03_scaling_laws(criterion):
    with criterion(3, "scaling laws", 1.0) as c:
        family = [build_dense1x1(res, width, depth) for res, width, depth in
                  [(8, 16, 2), (16, 32, 4), (14, 64, 6), (28, 48, 8)]]
        worst = 0.0
        for a, kind, alpha in itertools.product(family, ("width", "resolution", "depth"), (0.5, 2)):
            got = scaling_check(a, kind, alpha)
            want = EXPECTED_RATIOS[kind](alpha)
            worst = max(worst, max(abs(g / w - 1) for g, w in zip(got, want)))
        c.detail = f"{len(family) * 6} cases, worst rel dev {worst:.1e}"
        assert worst <= 1e-12


def test_04_s2d_fold(criterion):
    with criterion(4, "S2D-fold equivalence", 10.0) as c:
        worst = 0.0
        for case in range(20):
            k = (2, 4, 8)[case % 3]
            rep = random_s2d_fold_case(case, k, n=1 + case % 2, c=1 + case % 4, out_ch=4 + case % 5,
                                       cells=1 + case % 3)
            worst = max(worst, rep.max_abs_diff)
        c.detail = f"20 cases, max_abs_diff {worst:.2e}"
        assert worst <= 1e-5


def test_05_dilation_batch(criterion):
    with criterion(5, "dilation == space-to-batch ensemble", 30.0) as c:
        archs = [build_isometric(16, 8, 0.125, 4, 10, fc_width=16, se=False),
                 build_isometric(32, 8, 0.25, 4, 10, fc_width=32, se=False)]
        worst, runs = 0.0, 0
        for seed in range(10):
            a = archs[seed % 2]
            x = Rng(seed).stream("acceptance_x").normal((2, 3, a.input_res, a.input_res)).astype(np.float32)
            for rate in (2, 4):
                rep = check_dilation_batch_equiv(a, rate, x, seed=seed)
                worst = max(worst, rep.max_abs_diff)
                runs += 1
        c.detail = f"{runs} runs, max logit diff {worst:.2e}"
        assert worst <= 1e-4


def _rf_archs():
    archs = []
    for k, d, layers in [(1, 16, 3), (2, 8, 4), (4, 8, 2), (8, 4, 2)]:
        archs.append(("isometric", k, build_isometric(k * d, d, 0.125, layers, 4, se=False, fc_width=16)))
    for k, d, layers in [(1, 16, 3), (2, 8, 3), (4, 8, 2)]:
        base = build_isometric(k * d, d, 0.125, layers, 4, se=False, fc_width=16)
        archs.append(("dilated", k, apply_multiplier(base, MultiplierTransform("dilate", 2))))
    archs.append(("pyramid", 1, build_pyramid(32, 8, [1, 2], 4, layer="conv")))
    archs.append(("pyramid", 1, build_pyramid(32, 8, [2, 1, 1], 4)))
    archs.append(("pyramid", 1, build_pyramid(16, 8, [1, 1], 4, layer="conv")))
    archs.append(("pyramid", 1, build_pyramid(64, 8, [1, 1, 1], 4, layer="conv")))
    archs.append(("isometric", 2, build_isometric(32, 16, 0.125, 2, 4, fc_width=16)))
    return archs


def test_06_receptive_field_oracle(criterion):
    with criterion(6, "receptive-field oracle", 30.0) as c:
        archs = _rf_archs()
        assert len(archs) == 12
        layers_checked = interior = 0
        for family, k, a in archs:
            rfs = receptive_fields(a)
            n = 0
            for i, layer in enumerate(a.layers):
                if layer.role != "body":
                    continue
                box = analytic_rf_box(a, layer.id)
                assert impulse_rf_oracle(a, layer.id) == box, (family, layer.id)
                # the rf recurrence agrees wherever the field stays inside the image
                lo, hi = recurrence_rf_box(a, layer.id)
                assert lo <= box[0] and box[1] <= hi
                if lo >= 0 and hi < a.input_res:
                    assert box == (lo, hi)
                    interior += 1
                layers_checked += 1
                n += 1
                if family == "isometric":
                    assert rfs[i][0] == k * (1 + 2 * n)
                elif family == "dilated":
                    assert rfs[i][0] == k * (1 + 4 * n)
        c.detail = f"12 archs, {layers_checked} body layers exact ({interior} unclipped)"


def test_07_gradient_check(criterion):
    with criterion(7, "gradient correctness", 60.0) as c:
        errs = [grad_check(toy_arch(), seed) for seed in range(5)]
        c.detail = f"max rel err {max(errs):.2e} over 5 seeds (floor {GRAD_CHECK_FLOOR:g})"
        assert max(errs) < 1e-4


def test_08_block_correspondence(criterion):
    with criterion(8, "resolution/width block correspondence", 1.0) as c:
        count = 0
        for blocks in ([2, 2, 2], [1, 3, 2, 2], [3, 1, 1, 2, 1], [2, 2]):
            for base, layer in ((16, "mv3"), (8, "conv")):
                a = build_pyramid(8 * 2 ** len(blocks), base, blocks, 10, layer=layer)
                rep = block_correspondence(a, 0.5)
                assert rep.exact and not rep.mismatched, rep.note
                assert rep.aligned == [(p, p + 1) for p in range(len(resolution_blocks(a)) - 1)]
                count += 1
        c.detail = f"{count} pyramids, all interior blocks aligned"


def test_09_peak_activation_ordering(criterion):
    with criterion(9, "peak-activation ordering", 1.0) as c:
        peak = {d: analyze(build_isometric(224, d, 1.0, 16, 1000)).peak_activation_elems for d in (7, 14, 28)}
        by_l = {l: analyze(build_isometric(224, 14, 1.0, l, 1000)).peak_activation_elems for l in (4, 8, 16, 32)}
        c.detail = f"d7={peak[7]:,} d14={peak[14]:,} d28={peak[28]:,}; over l {sorted(set(by_l.values()))}"
        assert peak[7] < peak[14] < peak[28]
        assert len(set(by_l.values())) == 1


# desk-scale configuration for the directional finding
DIRECTIONAL = dict(m=0.125, layers=8, classes=10, train_n=3000, eval_n=500, epochs=5, batch=32, lr=0.2)


def _directional_run(input_res, internal_res, seed):
    cfg = DIRECTIONAL
    a = build_isometric(input_res, internal_res, cfg["m"], cfg["layers"], cfg["classes"])
    tr = synth_shapes(0, cfg["train_n"], cfg["classes"], input_res, split="train")
    ev = synth_shapes(0, cfg["eval_n"], cfg["classes"], input_res, split="eval")
    tc = TrainConfig(seed=seed, epochs=cfg["epochs"], batch_size=cfg["batch"],
                     optimizer=OptimizerConfig(lr=cfg["lr"]))
    _, log = train(a, tc, tr, ev)
    return log.rows[log.best_epoch - 1].eval_acc


@pytest.mark.slow
def test_10_directional_resolution(criterion):
    with criterion(10, "directional resolution finding", 900.0) as c:
        runs = {"d14_in56_s2d": (56, 14), "d14_in14": (14, 14), "d7_in14": (14, 7)}
        acc = {name: [_directional_run(r, d, seed) for seed in range(3)] for name, (r, d) in runs.items()}
        mean = {k: float(np.mean(v)) for k, v in acc.items()}
        c.detail = ", ".join(f"{k}={mean[k]:.3f}" for k in runs)
        assert mean["d14_in56_s2d"] >= mean["d14_in14"] >= mean["d7_in14"] - 0.02


def _files(*paths):
    return [p.read_bytes() for p in paths]


def test_11_reproducibility(tmp_path, criterion):
    with criterion(11, "bit-identical reruns", 300.0) as c:
        arch = tmp_path / "a.json"
        assert run(["build-arch", "--res", "8", "--input", "16", "--mult", "0.125", "--layers", "2",
                    "--classes", "4", "--fc-width", "32", "--out", str(arch), "--quiet"]) == 0
        outputs = []
        for rep in ("1", "2"):
            d = tmp_path / rep
            d.mkdir()
            ck = d / "m.ison"
            assert run(["train", "--arch", str(arch), "--seed", "7", "--samples", "128", "--eval-samples", "64",
                        "--epochs", "2", "--batch-size", "32", "--lr", "0.1", "--out", str(ck), "--quiet"]) == 0
            sw = d / "sweep.csv"
            assert run(["sweep", "--arch", str(arch), "--mults", "0.5,1", "--res-list", "4,8", "--train",
                        "--seed", "3", "--samples", "64", "--eval-samples", "32", "--epochs", "1",
                        "--batch-size", "32", "--out", str(sw), "--quiet"]) == 0
            outputs.append(_files(ck, d / "m.ison.log.csv", sw))
        rows = list(csv.DictReader(open(tmp_path / "1" / "sweep.csv", newline="")))
        assert len(rows) == 4 and all(r["accuracy"] for r in rows)
        same = [a == b for a, b in zip(*outputs)]
        c.detail = f"checkpoint/log/sweep identical: {same}"
        assert all(same)
