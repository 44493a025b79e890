"""Acceptance suite: one check per numbered criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (lines repeated in the terminal
summary) or directly with ``python3 tests/test_acceptance.py``.
"""

from __future__ import annotations

import filecmp
import json
import sys
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from hoblock import nn
from hoblock.analysis import count_costs, probe_receptive_field
from hoblock.autodiff import Var
from hoblock.checks import run_gradchecks
from hoblock.cli import main as cli_main
from hoblock.config import parse_config, sub_seed
from hoblock.hblock import (
    CONTEXT_MENU,
    KERNEL_MENU,
    GeneratorPlan,
    HBlock,
    HBlockConfig,
    dynamic_depthwise_apply,
    generate_weights_singleconv,
    singleconv_param_count,
)
from hoblock.models import BackboneSpec, InsertionPlan, build_backbone, build_model
from hoblock.synth import generate_clips, shuffle_frames
from hoblock.tensor import OffsetGrid
from hoblock.train import compare_orders, train

sys.path.insert(0, str(Path(__file__).parent))
from oracles import conv3d_naive, dynamic_apply_naive, singleconv_naive  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
RESULTS: list[str] = []


def report(tag: str, ok: bool, detail: str) -> bool:
    line = f"criterion {tag}: {'PASS' if ok else 'FAIL'} ({detail})"
    RESULTS.append(line)
    print(line)
    return ok


# 1 -------------------------------------------------------------------------


def test_01_gradient_fidelity():
    t0 = time.perf_counter()
    reports = run_gradchecks(seed=0, tol=1e-4, h=1e-5)
    elapsed = time.perf_counter() - t0
    worst = max(reports.items(), key=lambda kv: kv[1].max_rel_err)
    hb = [k for k in reports if k.startswith("hblock")]
    ok = all(r.passed for r in reports.values()) and elapsed < 120 and len(hb) == 6
    assert report("1", ok, f"{len(reports)} checks incl. {len(hb)} H-block variants, worst {worst[0]} "
                           f"{worst[1].max_rel_err:.2e} <= 1e-4, {elapsed:.1f}s < 120s")


# 2 -------------------------------------------------------------------------


def test_02_oracle_equivalence():
    rng = np.random.default_rng(2)
    worst = {"conv3d": 0.0, "group_conv": 0.0, "dynamic_apply": 0.0, "singleconv": 0.0}
    cases = 20
    for _ in range(cases):
        x = rng.standard_normal((1, 2, 3, 4, 4))
        w = rng.standard_normal((3, 2) + tuple(rng.choice([1, 3], size=3)))
        b = rng.standard_normal((1, 3, 1, 1, 1))
        d = np.abs(nn.conv3d(Var(x), Var(w), Var(b)).value - conv3d_naive(x, w, b)).max()
        worst["conv3d"] = max(worst["conv3d"], d)

        g = int(rng.choice([2, 4]))
        xg = rng.standard_normal((1, 4, 3, 4, 4))
        wg = rng.standard_normal((2 * g, 4 // g, 3, 3, 3))
        d = np.abs(nn.conv3d(Var(xg), Var(wg), groups=g).value - conv3d_naive(xg, wg, groups=g)).max()
        worst["group_conv"] = max(worst["group_conv"], d)

        grid = OffsetGrid.from_shape(str(rng.choice(KERNEL_MENU)))
        xd = rng.standard_normal((2, 2, 3, 5, 5))
        wd = rng.standard_normal((2, len(grid) * 2, 3, 5, 5))
        d = np.abs(dynamic_depthwise_apply(Var(xd), Var(wd), grid).value - dynamic_apply_naive(xd, wd, grid.shape)).max()
        worst["dynamic_apply"] = max(worst["dynamic_apply"], d)

        xs = rng.standard_normal((1, 2, 3, 3, 3))
        th = rng.standard_normal((27 * 2, 2, 3, 3, 3))
        d = np.abs(generate_weights_singleconv(Var(xs), Var(th)).value - singleconv_naive(xs, th, 27, (3, 3, 3))).max()
        worst["singleconv"] = max(worst["singleconv"], d)
    ok = all(v <= 1e-12 for v in worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert report("2", ok, f"{cases} random cases each, max abs diff {detail} <= 1e-12")


# 3 -------------------------------------------------------------------------


def test_03_normalization():
    errs = {}
    for name, dtype, tol in (("f32", np.float32, 1e-6), ("f64", np.float64, 1e-12)):
        rng = np.random.default_rng(3)
        worst = 0.0
        for gen, C in (("convnet", 27), ("single-conv", 3)):
            block = HBlock(HBlockConfig(C, "3x3x3", "5x5x5", gen), rng, dtype=dtype, init="uniform")
            for p in block.parameters():
                p.value = (rng.standard_normal(p.shape) * 2).astype(dtype)
            x = Var(rng.standard_normal((2, C, 3, 5, 5)).astype(dtype))
            w = block.weights(x).value
            sums = w.astype(np.float64).reshape(2, 27, C, 3, 5, 5).sum(axis=1)
            worst = max(worst, float(np.abs(sums - 1).max()))
        errs[name] = (worst, tol)
    ok = all(e <= t for e, t in errs.values())
    assert report("3", ok, ", ".join(f"{k} max |sum-1| {e:.1e} <= {t:g}" for k, (e, t) in errs.items()))


# 4 -------------------------------------------------------------------------


def test_04_degeneration():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 27, 3, 5, 5))
    block = HBlock(HBlockConfig(27, "3x3x3", "5x5x5", residual=False))
    for p in block.generator.convs[2].parameters():
        p.value = np.zeros_like(p.value)
    box = conv3d_naive(x, np.full((27, 1, 3, 3, 3), 1 / 27), groups=27)
    d_box = float(np.abs(block(Var(x)).value - box).max())

    grid = OffsetGrid.from_shape("3x5x5")
    C, K = 3, len(grid)
    wq = rng.standard_normal((K, C))
    xs = rng.standard_normal((2, C, 3, 6, 6))
    frozen = np.broadcast_to(wq.reshape(1, K * C, 1, 1, 1), (2, K * C, 3, 6, 6)).copy()
    static = conv3d_naive(xs, wq.T.reshape(C, 1, *grid.shape), groups=C)
    d_static = float(np.abs(dynamic_depthwise_apply(Var(xs), Var(frozen), grid).value - static).max())
    ok = d_box <= 1e-12 and d_static <= 1e-12
    assert report("4", ok, f"zeroed generator vs box average {d_box:.1e}, frozen weights vs static depthwise "
                           f"{d_static:.1e}, both <= 1e-12")


# 5 -------------------------------------------------------------------------


def test_05_paper_arithmetic():
    checked, bad = 0, []
    for k in KERNEL_MENU:
        for c in CONTEXT_MENU:
            R, Rc = OffsetGrid.from_shape(k), OffsetGrid.from_shape(c)
            if not Rc.covers(R):
                continue
            for C in (1, 4, 27, 64):
                n = HBlock(HBlockConfig(C, R, Rc, generator="single-conv"), init="meta").num_params()
                checked += 1
                if n != C * C * len(R) * len(Rc) or n != singleconv_param_count(C, R, Rc):
                    bad.append((k, c, C))
    plan = GeneratorPlan.build(64, OffsetGrid.from_shape("3x3x3"), OffsetGrid.from_shape("5x5x5"))
    vol = sum(plan.kernel_volumes), len(OffsetGrid.from_shape("5x5x5"))
    plan19 = GeneratorPlan.build(19, OffsetGrid.from_shape("1x3x3"), OffsetGrid.from_shape("3x3x3"))
    div = plan19.layers[1].out_channels // 9
    ok = not bad and vol == (39, 125) and div == 2 and plan19.layers[1].out_channels == 18
    assert report("5", ok, f"(a) {checked} menu configs match C^2|R||R'|, (b) {vol[0]} vs {vol[1]}, "
                           f"(c) C=19, |R|=9 gives {div}*9={plan19.layers[1].out_channels} mid channels")


# 6 -------------------------------------------------------------------------


def test_06_receptive_fields():
    matches = []
    for c in CONTEXT_MENU:
        plan = GeneratorPlan.build(27, OffsetGrid.from_shape("3x3x3"), OffsetGrid.from_shape(c))
        got = probe_receptive_field(plan.layers)
        matches.append(got == OffsetGrid.from_shape(c).shape)
    assert report("6", all(matches), f"{sum(matches)}/{len(matches)} Table 1 rows exact")


# 7 -------------------------------------------------------------------------

TABLE2 = {  # output (T, H, W) per row for T = 32
    "conv1": (32, 112, 112),
    "pool1": (32, 56, 56),
    "res2": (32, 56, 56),
    "pool2": (16, 56, 56),
    "res3": (16, 28, 28),
    "res4": (16, 14, 14),
    "res5": (16, 14, 14),
}


def test_07_backbone_shapes():
    spec = BackboneSpec(width_scale=1, input_shape=(32, 224, 224), in_channels=3, num_classes=400)
    shapes = build_backbone(spec, meta=True).stage_shapes()
    rows = [name for name, thw in TABLE2.items() if shapes[name][2:] == thw]
    assert report("7", len(rows) == len(TABLE2), f"{len(rows)}/{len(TABLE2)} Table 2 rows, res5 {shapes['res5'][1:]}")


# 8 -------------------------------------------------------------------------

FULL = BackboneSpec(width_scale=1, input_shape=(32, 224, 224), in_channels=3, num_classes=400)
SPOT = {
    "conv1.conv": 64 * 32 * 112 * 112 * (3 * 5 * 7 * 7),
    "res2.1.conv2": 64 * 32 * 56 * 56 * (64 * 9),
    "res3.1.shortcut": 512 * 16 * 28 * 28 * 256,
    "res3.h1.apply": 512 * 16 * 28 * 28 * 27,
    "fc.linear": 400 * 2048,
}


@lru_cache(maxsize=None)
def _full_costs():
    base = count_costs(build_backbone(FULL, meta=True), (1, 3, 32, 224, 224))
    plan = InsertionPlan.preset("5-block", HBlockConfig(1, "3x3x3", "5x5x5"))
    ho = count_costs(build_model(FULL, plan, meta=True), (1, 3, 32, 224, 224))
    return base, ho


def test_08a_spot_layer_flops():
    rows = {r.name: r.macs for r in _full_costs()[1].rows}
    hits = [n for n, m in SPOT.items() if rows.get(n) == m]
    assert report("8a", len(hits) == len(SPOT), f"{len(hits)}/{len(SPOT)} spot layers equal hand-computed MACs")


def test_08b_flop_ratio():
    base, ho = _full_costs()
    target = 368 / 326
    ratios = {c: ho.total_flops(c) / base.total_flops(c) for c in ("MAC=1", "MAC=2")}
    ok = any(abs(r - target) <= 0.15 for r in ratios.values())
    detail = ", ".join(f"{c} {r:.3f}" for c, r in ratios.items())
    assert report("8b", ok, f"HO(5-block)/baseline {detail}; target {target:.3f} +- 0.15; "
                            f"baseline {base.total_flops('MAC=2') / 1e9:.0f} GFLOPs at MAC=2")


# 9 -------------------------------------------------------------------------

XOR_SEEDS = (0, 1, 2)


@lru_cache(maxsize=None)
def _xor_runs():
    raw = json.loads((ROOT / "configs" / "xor.json").read_text())
    runs = []
    for seed in XOR_SEEDS:
        cfg = parse_config(dict(raw, seed=seed))
        task = cfg.xor_task()
        tr, te = generate_clips(task, "train"), generate_clips(task, "test")
        t0 = time.perf_counter()
        rep = compare_orders(cfg.backbone, cfg.plan(), (tr[0], tr[1], te[0], te[1]), cfg.train_config(),
                             sub_seed(seed, "init"), cfg.np_dtype)
        pair_time = time.perf_counter() - t0
        sh = sub_seed(seed, "shuffle")
        model = build_model(cfg.backbone, cfg.plan(), seed=sub_seed(seed, "init"), dtype=cfg.np_dtype)
        shuffled = train(model, shuffle_frames(tr[0], sh), tr[1], shuffle_frames(te[0], sh + 1), te[1],
                         cfg.train_config(), echo=None)
        runs.append((seed, rep.higher_order_acc, rep.static_acc, shuffled.eval_acc, pair_time))
    return runs


def _fmt(values):
    return "/".join(f"{v:.3f}" for v in values)


@pytest.mark.slow
def test_09a_xor_higher_order():
    runs = _xor_runs()
    accs = [r[1] for r in runs]
    minutes = max(r[4] for r in runs) / 60
    assert report("9a", min(accs) >= 0.90, f"H-block test acc {_fmt(accs)} over seeds {XOR_SEEDS}, "
                                          f">= 0.90 required; {minutes:.1f} min per H+S pair")


@pytest.mark.slow
def test_09b_xor_static_control():
    accs = [r[2] for r in _xor_runs()]
    assert report("9b", max(accs) <= 0.70, f"static-depthwise test acc {_fmt(accs)}, <= 0.70 required")


@pytest.mark.slow
def test_09c_xor_frame_shuffled():
    accs = [r[3] for r in _xor_runs()]
    assert report("9c", max(accs) <= 0.55, f"frame-shuffled H-block test acc {_fmt(accs)}, <= 0.55 required")


# 10 ------------------------------------------------------------------------


def test_10_determinism(tmp_path):
    raw = json.loads((ROOT / "configs" / "smoke.json").read_text())
    raw["train"]["epochs"] = 2
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(raw))
    for run in ("a", "b"):
        assert cli_main(["train", "--config", str(cfg), "--out", str(tmp_path / run)]) == 0
    same_log = (tmp_path / "a" / "log.tsv").read_bytes() == (tmp_path / "b" / "log.tsv").read_bytes()
    cmp = filecmp.dircmp(tmp_path / "a" / "checkpoint", tmp_path / "b" / "checkpoint")
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / "checkpoint", tmp_path / "b" / "checkpoint",
                                           cmp.common_files, shallow=False)
    ok = same_log and not mismatch and not errors and not cmp.left_only and not cmp.right_only
    assert report("10", ok, f"log.tsv identical: {same_log}, {len(cmp.common_files)} checkpoint files, "
                            f"{len(mismatch)} differ")


if __name__ == "__main__":
    import tempfile

    from threadpoolctl import threadpool_limits

    threadpool_limits(1)
    failed = 0
    for name, fn in sorted((k, v) for k, v in dict(globals()).items() if k.startswith("test_")):
        try:
            if "tmp_path" in fn.__code__.co_varnames[: fn.__code__.co_argcount]:
                with tempfile.TemporaryDirectory() as d:
                    fn(Path(d))
            else:
                fn()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
