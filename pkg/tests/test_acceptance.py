"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -s`` to see the summary lines
inline; they are also written through pytest's terminal when captured.
"""

import dataclasses
import inspect
import math
import random
import time
from itertools import product

import numpy as np
import pytest

from helpers import TINY, go_closure, gs_closure, tiny_problem
from vickam.cli import load_config, main
from vickam.fftcorr import bench_corr, xcorr_fft, xcorr_naive
from vickam.nnhead import GLOBAL_BLOCKS, INTEGRATION_BLOCKS, grad_check
from vickam.pipeline import TrainConfig, loss_main, loss_pre, stage1_run, stage2_run
from vickam.prototypes import BoxAnnotation
from vickam.relmaps import AffineTransform, stamp_relation_maps
from vickam.synthgen import SynthConfig, gen_dataset
from vickam.tensors import seeded_fill


@pytest.fixture
def report(capsys):
    def emit(n, name, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {name}" + (f" ({detail})" if detail else ""))
        assert ok, f"criterion {n} failed: {detail}"
    return emit


def bundled(name):
    raw = load_config(name)
    synth = SynthConfig.from_json(raw["synth"])
    sizes = dict(K_g=synth.K_g, K_a=synth.K_a, h=synth.h, w=synth.w, C=synth.C, p=synth.p)
    return synth, TrainConfig.from_json(raw["train"]).with_sizes(sizes)


def run_task(synth, train, **ablation):
    ds = gen_dataset(synth)
    bank, rm, weights, _ = stage1_run(ds.train, train)
    _, metrics = stage2_run(ds.train_groups, bank, rm, dataclasses.replace(train, **ablation),
                            init_params=weights, test_set=ds.test)
    return metrics.mca_overall


def test_01_correlation_oracle_sweep(report):
    sizes = list(range(5, 17)) + [90]
    t0 = time.perf_counter()
    worst, cases = 0.0, 0
    for h, w, p, C in product(sizes, sizes, (1, 3, 5, 7), (1, 2, 8)):
        if p > min(h, w):
            continue
        seed = cases
        x, pk = seeded_fill((h, w, C), seed), seeded_fill((p, p, C), seed + 1)
        ref = xcorr_naive(x, pk)
        err = np.max(np.abs(xcorr_fft(x, pk) - ref)) / (1.0 + np.max(np.abs(ref)))
        worst, cases = max(worst, err), cases + 1
    x, pk = seeded_fill((90, 160, 8), 42), seeded_fill((7, 7, 8), 43)
    ref = xcorr_naive(x, pk)
    worst = max(worst, np.max(np.abs(xcorr_fft(x, pk) - ref)) / (1.0 + np.max(np.abs(ref))))
    elapsed = time.perf_counter() - t0
    report(1, "FFT correlation matches naive oracle", worst <= 1e-6 and elapsed < 60,
           f"{cases + 1} cases, max rel err {worst:.2e}, {elapsed:.1f}s")


def test_02_benchmark(report):
    t0 = time.perf_counter()
    big = {r["backend"]: r for r in bench_corr(90, 160, 8, 31, repeats=5)}
    small = {r["backend"]: r for r in bench_corr(90, 160, 8, 7, repeats=5)}
    elapsed = time.perf_counter() - t0
    speedup = big["naive"]["median_ns"] / big["fft"]["median_ns"]
    ok = (speedup >= 2.0 and all(r["agreement"] for r in small.values()) and set(small) == {"naive", "fft"}
          and elapsed < 120)
    report(2, "FFT backend beats naive at p=31", ok,
           f"p=31 speedup {speedup:.1f}x, p=7 naive {small['naive']['median_ns'] / 1e6:.1f}ms "
           f"fft {small['fft']['median_ns'] / 1e6:.1f}ms agreement {small['fft']['agreement']}, {elapsed:.1f}s")


def test_03_gradient_check(report):
    assert (TINY.K_g, TINY.K_a, TINY.h, TINY.w, TINY.C, TINY.D, TINY.d) == (2, 2, 4, 4, 2, 3, 2)
    t0 = time.perf_counter()
    params, table, x, mhat, _, y, _ = tiny_problem()
    gs = grad_check(gs_closure(x, y), params, n_coords=10 ** 6)
    trainable_y = tiny_problem(train_y=True)[0]
    go = {}
    for p, use_semantics in ((params, True), (params, False), (trainable_y, True)):
        r = grad_check(go_closure(mhat, table, y, use_semantics=use_semantics), p, n_coords=10 ** 6)
        go = {k: max(go.get(k, 0.0), v) for k, v in r.items()}
    elapsed = time.perf_counter() - t0
    covered = set(gs) >= set(GLOBAL_BLOCKS) and set(go) >= set(INTEGRATION_BLOCKS) | {"Y"}
    worst = max(gs["max"], go["max"])
    report(3, "analytic gradients match finite differences", covered and worst <= 1e-4 and elapsed < 30,
           f"max rel err {worst:.2e} over {len(gs) + len(go) - 2} blocks, {elapsed:.1f}s")


def test_04_prototype_recovery(report):
    t0 = time.perf_counter()
    probe = SynthConfig(K_g=4, K_a=3, h=24, w=32, C=4, p=5, n_train=120, n_test=0, seed=11)
    templates = gen_dataset(dataclasses.replace(probe, n_train=4)).truth["templates"].astype(np.float64)
    rms = min(math.sqrt(float(np.mean(t ** 2))) for t in templates)
    cfg = dataclasses.replace(probe, noise_sigma=0.1 * rms)
    ds = gen_dataset(cfg)
    bank, _, _, _ = stage1_run(ds.train, TrainConfig(r=5, epochs_stage1=0).with_sizes(
        dict(K_g=4, K_a=3, h=24, w=32, C=4, p=5)))
    cosines = [float(bank.prototypes[k].ravel() @ t.ravel()
                     / (np.linalg.norm(bank.prototypes[k]) * np.linalg.norm(t)))
               for k, t in enumerate(templates)]
    elapsed = time.perf_counter() - t0
    ok = min(bank.counts) >= 100 and min(cosines) >= 0.95 and elapsed < 60
    report(4, "prototypes recover generator templates", ok,
           f"counts {bank.counts.tolist()}, min cosine {min(cosines):.4f}, {elapsed:.1f}s")


def brute_force_counts(annotated, n_groups, n_actions, h, w, r):
    half = r // 2
    out = np.zeros((n_groups, n_actions, h, w), dtype=np.int64)
    for g, aff, boxes in annotated:
        for b in boxes:
            cx, by = (b.x0 + b.x1) / 2, b.y1
            u = math.floor(aff.c * cx + aff.d * by + aff.ty + 0.5)
            v = math.floor(aff.a * cx + aff.b * by + aff.tx + 0.5)
            for i in range(h):
                for j in range(w):
                    if abs(i - u) <= half and abs(j - v) <= half:
                        out[g, b.action_id, i, j] += 1
    return out


def test_05_relation_map_counts(report):
    rng = random.Random(2024)
    K_g, K_a, h, w, r = 4, 3, 24, 32, 5
    annotated = []
    for _ in range(1000):
        x0, y0 = rng.uniform(-4, w + 2), rng.uniform(-4, h + 2)
        box = BoxAnnotation(x0, y0, x0 + rng.uniform(0.5, 5), y0 + rng.uniform(0.5, 5), rng.randrange(K_a))
        aff = AffineTransform(rng.uniform(0.8, 1.2), rng.uniform(-0.1, 0.1), rng.uniform(-2, 2),
                              rng.uniform(-0.1, 0.1), rng.uniform(0.8, 1.2), rng.uniform(-2, 2))
        annotated.append((rng.randrange(K_g), aff, [box]))
    t0 = time.perf_counter()
    rm = stamp_relation_maps(annotated, K_g, K_a, h, w, r)
    expect = brute_force_counts(annotated, K_g, K_a, h, w, r)
    elapsed = time.perf_counter() - t0
    equal = rm.raw_counts.dtype.kind in "iu" and np.array_equal(rm.raw_counts, expect)
    report(5, "relation-map counts equal brute force", equal and elapsed < 10,
           f"1000 annotations, {int(expect.sum())} covered cells, {rm.skipped_points} skipped, {elapsed:.2f}s")


def test_06_standard_task(report):
    synth, train = bundled("standard")
    assert (synth.K_g, synth.K_a, synth.h, synth.w, synth.C, synth.p, train.r) == (4, 3, 24, 32, 4, 5, 5)
    assert (synth.n_train, synth.n_test) == (200, 100) and train.epochs_stage2 <= 50
    t0 = time.perf_counter()
    mca = run_task(synth, train)
    elapsed = time.perf_counter() - t0
    report(6, "standard task test MCA", mca >= 0.90 and elapsed < 300, f"MCA {mca:.3f}, {elapsed:.1f}s")


def test_07_hard_variant_necessity(report):
    synth, train = bundled("hard")
    assert synth.hard_variant
    t0 = time.perf_counter()
    full = run_task(synth, train)
    gs_only = run_task(synth, train, use_action_maps=False)
    extra = {name: run_task(synth, train, **kw) for name, kw in
             [("no-augmentation", dict(use_augmentation=False)), ("no-semantics", dict(use_semantics=False))]}
    elapsed = time.perf_counter() - t0
    chance = 1.0 / synth.K_g
    ok = gs_only <= chance + 0.10 and full >= 0.85 and full - gs_only >= 0.10 and elapsed < 600
    ablations = ", ".join(f"{k} {v:.3f}" for k, v in extra.items())
    report(7, "action maps are necessary on the hard variant", ok,
           f"full {full:.3f}, gs-only {gs_only:.3f}, {ablations}, {elapsed:.1f}s")


def test_08_loss_arithmetic(report):
    lam_pre = inspect.signature(loss_pre).parameters["lambda_pre"].default
    lam_main = inspect.signature(loss_main).parameters["lambda_main"].default
    defaults = (lam_pre, lam_main) == (1.0, 3.0) == (TrainConfig().lambda_pre, TrainConfig().lambda_main)
    # uniform logits over K classes have cross-entropy exactly log(K)
    pre = loss_pre(np.zeros(4), 1, [np.zeros(3), np.zeros(3)], [0, 2])
    main_ = loss_main(np.zeros(4), np.zeros(4), 3)
    half = loss_pre(np.zeros(2), 0, [np.zeros(3)], [1], lambda_pre=0.5)
    ok = (defaults and pre == math.log(4) + math.log(3) + math.log(3)
          and main_ == math.log(4) + 3.0 * math.log(4) and half == math.log(2) + 0.5 * math.log(3))
    report(8, "loss arithmetic matches hand values", ok, f"L_pre {pre!r}, L_main {main_!r}")


def run_cli_chain(root):
    for argv in (["synth", "--config", "standard", "--out", root / "data"],
                 ["stage1", "--data", root / "data", "--config", "standard", "--out", root / "k"],
                 ["stage2", "--data", root / "data", "--knowledge", root / "k", "--config", "standard",
                  "--out", root / "run"],
                 ["eval", "--data", root / "data", "--knowledge", root / "k", "--checkpoint", root / "run"]):
        assert main([str(a) for a in argv]) == 0


def test_09_determinism(report, tmp_path, capsys):
    run_cli_chain(tmp_path / "a")
    run_cli_chain(tmp_path / "b")
    capsys.readouterr()
    files = ["run/final_metrics.json", "run/eval/final_metrics.json", "k/final_metrics.json"]
    files += sorted(str(p.relative_to(tmp_path / "a")) for p in (tmp_path / "a").glob("*/**/*")
                    if p.is_file() and ("checkpoints" in p.parts or "stage1" in p.parts))
    differ = [f for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    report(9, "two seeded end-to-end runs are bit-identical", not differ and len(files) > 3,
           f"{len(files)} files compared" + (f", differing: {differ}" if differ else ""))


def test_10_train_fraction_trend(report):
    synth, train = bundled("standard")
    fractions = (0.1, 0.25, 0.5, 1.0)
    t0 = time.perf_counter()
    scores = {f: [] for f in fractions}
    for seed in range(3):
        ds = gen_dataset(dataclasses.replace(synth, seed=seed))
        cfg = dataclasses.replace(train, seed=seed)
        bank, rm, weights, _ = stage1_run(ds.train, cfg)
        for f in fractions:
            _, m = stage2_run(ds.train_groups, bank, rm, dataclasses.replace(cfg, train_fraction=f),
                              init_params=weights, test_set=ds.test)
            scores[f].append(m.mca_overall)
    means = [float(np.mean(scores[f])) for f in fractions]
    elapsed = time.perf_counter() - t0
    ok = all(b >= a - 0.02 for a, b in zip(means, means[1:]))
    report(10, "MCA does not drop as the train fraction grows", ok,
           ", ".join(f"{f}: {m:.3f}" for f, m in zip(fractions, means)) + f", {elapsed:.1f}s")
