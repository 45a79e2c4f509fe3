"""Acceptance criteria, one test each. Every test records a PASS/FAIL line."""

import csv
import dataclasses
import io
import json
import math
import time

import numpy as np

from amam.aa import AABlockParams, FusionMode, aa_forward, aa_heads
from amam.checks import random_eval_instance, random_pyramid_config, to_records
from amam.cli import run
from amam.io import decode_amtn, encode_amtn, read_amtn, write_amtn
from amam.metrics import (
    Box,
    ap_range,
    average_precision,
    dump_eval_json,
    iou,
    match_greedy,
    parse_eval_json,
    precision_recall,
)
from amam.pyramid import AmamConfig, amam_forward, init_amam
from amam.tensor import Tensor
from amam.train import LrSchedule, lr_at, toy_train
from conftest import ACCEPTANCE_LINES
from oracles import brute_force_ap, grid_iou


def record(label, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_gradient_fidelity(tmp_path):
    start = time.perf_counter()
    worst = {1e-6: 0.0, 1e-4: 0.0}  # keyed by each target's tolerance
    codes = []
    for seed in (0, 1, 2):
        res = run(["gradcheck", "--seed", str(seed), "--out", str(tmp_path / f"g{seed}.txt")])
        codes.append(res.exit_code)
        for line in res.report_path.read_text().splitlines()[2:]:
            name, err, tol, _ = line.split()
            worst[float(tol)] = max(worst[float(tol)], float(err))
    elapsed = time.perf_counter() - start
    prim, comp = worst[1e-6], worst[1e-4]
    ok = codes == [0, 0, 0] and prim < 1e-6 and comp < 1e-4 and elapsed < 300
    record("gradient fidelity", ok,
           f"primitive max {prim:.1e} (<1e-6), composite max {comp:.1e} (<1e-4), 3 seeds, {elapsed:.1f}s")


def test_shape_contract():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    bad = 0
    for _ in range(50):
        cfg, pyr = random_pyramid_config(rng)
        if amam_forward(pyr, init_amam(cfg)).shapes != pyr.shapes:
            bad += 1
    elapsed = time.perf_counter() - start
    record("shape contract", bad == 0 and elapsed < 60, f"50 random pyramids, {bad} mismatches, {elapsed:.1f}s")


def test_alpha_beta_constraint():
    rng = np.random.default_rng(0)
    p = AABlockParams.create(8, 2, rng=rng)
    worst_sum, inside = 0.0, True
    for logit in np.concatenate([rng.uniform(-30, 30, 990), [0.0, -1e-9, 1e-9, 30.0, -30.0, 7.5, -7.5, 1, -1, 0.5]]):
        p.alpha_logits.data = np.array([logit])
        a, b = p.alphas()[0], p.betas()[0]
        worst_sum = max(worst_sum, abs(a + b - 1.0))
        inside &= bool(0.0 < a < 1.0)
    record("alpha + beta = 1", worst_sum == 0.0 and inside, f"1000 logits, max |a+b-1| = {worst_sum:g}, a in (0,1): {inside}")


def test_fusion_mode_equivalence():
    rng = np.random.default_rng(0)
    worst, distinct = 0.0, True
    for _ in range(20):
        p = AABlockParams.create(16, 4, rng=rng)
        p.alpha_logits.data = np.zeros(3)
        avg = dataclasses.replace(p, fusion_mode=FusionMode.AVERAGE)
        add = dataclasses.replace(p, fusion_mode=FusionMode.ADD)
        x = Tensor(rng.standard_normal((1, 16, 4, 4)))
        ya, yb = aa_forward(x, p).data, aa_forward(x, avg).data
        worst = max(worst, float(np.abs(ya - yb).max()))
        distinct &= not np.allclose(aa_forward(x, add).data, yb)
    record("fusion modes", worst <= 1e-12 and distinct,
           f"adaptive(0) vs average max diff {worst:.1e} (<=1e-12), add differs from average: {distinct}")


def test_cascade_locality():
    rng = np.random.default_rng(0)
    violations = 0
    for trial in range(20):
        mode = list(FusionMode)[trial % 4]
        p = AABlockParams.create(16, 4, rng=rng, fusion_mode=mode)
        p.alpha_logits.data = rng.standard_normal(3)
        x = rng.standard_normal((1, 16, 3, 3))
        j = int(rng.integers(1, 4))
        y = x.copy()
        y[:, 4 * j:4 * j + 4] += rng.standard_normal((1, 4, 3, 3))
        base, pert = aa_heads(Tensor(x), p), aa_heads(Tensor(y), p)
        violations += sum(base[i].data.tobytes() != pert[i].data.tobytes() for i in range(j))
    record("cascade locality", violations == 0, f"h=4, 20 trials, {violations} earlier heads changed")


def test_metric_oracle_equivalence():
    rng = np.random.default_rng(0)
    worst, count_errors, non_monotone = 0.0, 0, 0
    thresholds = np.linspace(0.05, 1.0, 20)
    for _ in range(500):
        raw_dets, raw_gts = random_eval_instance(rng)
        dets, gts = to_records(raw_dets, raw_gts)
        for thr in (0.5, 0.75):
            worst = max(worst, abs(average_precision(dets, gts, thr) - brute_force_ap(raw_dets, raw_gts, thr)))
        m = match_greedy(dets, gts, 0.5)
        n_gt = sum(len(v) for v in gts.values())
        pr = precision_recall(m.tp, m.fp, m.fn)
        exp_p = sum(m.labels) / len(dets) if dets else 0.0
        if m.tp != sum(m.labels) or pr.precision != exp_p or pr.recall != m.tp / n_gt:
            count_errors += 1
        aps = [average_precision(dets, gts, t) for t in thresholds]
        non_monotone += any(b > a for a, b in zip(aps, aps[1:]))
    ok = worst <= 1e-9 and count_errors == 0 and non_monotone == 0
    record("metric oracle", ok, f"500 instances, AP max diff {worst:.1e} (<=1e-9), "
                                f"P/R mismatches {count_errors}, non-monotone {non_monotone}")


def test_iou_hand_cases():
    same = iou(Box(0, 0, 2, 2), Box(0, 0, 2, 2))
    apart = iou(Box(0, 0, 1, 1), Box(5, 5, 6, 6))
    third = iou(Box(0, 0, 2, 2), Box(1, 0, 3, 2))
    ref = grid_iou((0, 0, 2, 2), (1, 0, 3, 2), cells=4)
    ok = abs(same - 1.0) <= 1e-12 and abs(apart) <= 1e-12 and abs(third - ref) <= 1e-12
    record("IoU hand cases", ok, f"identical {same}, disjoint {apart}, overlap {third:.15f} vs grid {ref:.15f}")


def test_lr_schedule_endpoints():
    s = LrSchedule.from_epochs(500, iters_per_epoch=1, warmup_epochs=3)
    start, end = lr_at(s.warmup_iters, s), lr_at(s.total_iters, s)
    # 497 cosine iterations put the midpoint between two iterations; use even spans for it
    mid = lr_at(250, LrSchedule(total_iters=500))
    mid_warm = lr_at(254, LrSchedule(total_iters=504, warmup_iters=4))
    ok = all(abs(a - b) <= 1e-12 for a, b in ((start, 0.01), (end, 0.002), (mid, 0.006), (mid_warm, 0.006)))
    record("LR schedule", ok, f"lr(warmup)={start!r}, lr(end)={end!r}, midpoint {mid!r} / {mid_warm!r}")


def test_toy_training_efficacy():
    start = time.perf_counter()
    trace = toy_train(AmamConfig(), steps=200, seed=0)
    elapsed = time.perf_counter() - start
    first, last = float(np.mean(trace[:20])), float(np.mean(trace[-20:]))
    finite = all(math.isfinite(v) for v in trace)
    ok = finite and last <= 0.5 * first and elapsed < 600
    record("toy training", ok, f"first-20 mean {first:.4f}, last-20 mean {last:.4f}, "
                               f"ratio {last / first:.3f} (<=0.5), finite {finite}, {elapsed:.0f}s")


def test_ablation_structure(tmp_path):
    steps, batch = 2, 2
    res = run(["ablate", "--steps", str(steps), "--batch-size", str(batch), "--out", str(tmp_path / "a.csv")])
    rows = list(csv.DictReader(io.StringIO(res.report_path.read_text())))
    heads = sorted({int(r["heads"]) for r in rows if r["me"] == r["aa"] == "on"})
    modes = sorted({r["fusion"] for r in rows})
    cells = {(r["me"], r["aa"]) for r in rows}
    finite = all(math.isfinite(float(r["final_loss"])) for r in rows)
    off = [r for r in rows if r["me"] == r["aa"] == "off"]
    baseline = toy_train(None, steps, 0, batch_size=batch)[-1]
    exact = len(off) == 1 and float(off[0]["final_loss"]) == float(f"{baseline:.9g}")
    cfg = AmamConfig(heads=4, enabled_me=False, enabled_aa=False)
    exact &= toy_train(cfg, steps, 0, batch_size=batch) == toy_train(None, steps, 0, batch_size=batch)
    ok = (res.exit_code == 0 and len(rows) == 24 and heads == [1, 2, 4, 8, 16]
          and modes == sorted(m.value for m in FusionMode) and len(cells) == 4 and finite and exact)
    record("ablation grid", ok, f"{len(rows)} cells, heads {heads}, {len(modes)} fusion modes, "
                                f"{len(cells)} ME/AA cells, finite {finite}, (off,off) == baseline {exact}")


def test_format_round_trips(tmp_path):
    rng = np.random.default_rng(0)
    mismatches = 0
    for k in range(100):
        shape = tuple(int(v) for v in rng.integers(1, 6, size=4))
        arr = (rng.standard_normal(shape) * 10 ** rng.uniform(-5, 5)).astype(np.float32)
        write_amtn(tmp_path / "t.amtn", arr)
        back = read_amtn(tmp_path / "t.amtn")
        mismatches += back.shape != arr.shape or back.tobytes() != arr.tobytes()
        mismatches += decode_amtn(encode_amtn(arr)).tobytes() != arr.tobytes()
    json_ok = True
    for _ in range(50):
        dets, gts = to_records(*random_eval_instance(rng))
        text = json.dumps(dump_eval_json(dets, gts))
        d2, g2 = parse_eval_json(json.loads(text))
        json_ok &= sorted(map(repr, d2)) == sorted(map(repr, dets)) and g2 == gts
        json_ok &= ap_range(d2, g2).to_json() == ap_range(dets, gts).to_json()
        json_ok &= json.dumps(dump_eval_json(d2, g2)) == text
    record("format round trips", mismatches == 0 and json_ok,
           f"100 AMTN tensors, {mismatches} mismatches; detection JSON lossless {json_ok}")
