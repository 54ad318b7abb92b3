"""One test per acceptance criterion; each records a PASS/FAIL line for the session summary."""

import subprocess
import sys
import time

import numpy as np
import pytest
import yaml
from scipy.stats import spearmanr

from acceptance_log import record
from conftest import fixture_run_config
from oracles import central_difference_grad, merge_sort_ranking, random_score_table, \
    softmax_objective
from spurank.dataset import SyntheticConfig, generate_synthetic, load_image
from spurank.detection import DetectionBox, MockDetector, batch_score
from spurank.features import MockBackbone, extract_features
from spurank.linear_head import TrainConfig, objective_and_grad, predict, train_head
from spurank.perturbation import NoiseConfig, build_mask, inject_noise
from spurank.ranking import build_rankings, rank_class, select_subset, stratified_eval_sets

SEEDS = (0, 1, 2, 3, 4)
PIPELINE_CPU_LIMIT_S = 300.0


def test_criterion_01_ranking_fidelity(tmp_path):
    t0 = time.process_time()
    manifest, truth = generate_synthetic(SyntheticConfig(num_classes=10, per_class=300), tmp_path)
    truth = {g.image_id: g for g in truth}
    ranking = build_rankings(batch_score(manifest, MockDetector(truth)), manifest, "train")
    cpu = time.process_time() - t0
    rhos = []
    for c, ids in ranking.per_class.items():
        assert len(ids) == 300
        rhos.append(spearmanr(np.arange(1, 301), [truth[i].occlusion for i in ids]).statistic)
    ok = min(rhos) >= 0.99 and cpu < 30.0
    record(1, ok, f"min per-class Spearman {min(rhos):.5f} (>= 0.99), {cpu:.1f}s CPU (< 30s)")
    assert min(rhos) >= 0.99
    assert cpu < 30.0


def test_criterion_02_sorting_oracle():
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(1000):
        items = random_score_table(rng, int(rng.integers(1, 501)))
        if rank_class(items) != merge_sort_ranking(items):
            mismatches += 1
    record(2, mismatches == 0, f"{mismatches} mismatches in 1000 tables (sizes 1-500, ties)")
    assert mismatches == 0


def test_criterion_03_noise_exactness(small_fixture):
    cfg, root, manifest, truth = small_fixture
    rng = np.random.default_rng(3)
    records = list(manifest.records)
    worst, leaks, bad_degenerate, n_empty = 0.0, 0, 0, 0
    for case in range(500):
        rec = records[rng.integers(len(records))]
        x = load_image(manifest.path_of(rec))
        h, w = x.shape[:2]
        kind = rng.integers(4)
        if kind == 0:
            boxes = []
        elif kind == 1:
            boxes = [DetectionBox(0, 0, w, h, float(rng.random()))]
        else:
            x0, x1 = np.sort(rng.uniform(0, w, 2))
            y0, y1 = np.sort(rng.uniform(0, h, 2))
            boxes = [DetectionBox(x0, y0, x1 + 1e-3, y1 + 1e-3, float(rng.random()))
                     for _ in range(int(rng.integers(1, 4)))] if x1 + 1e-3 <= w and \
                y1 + 1e-3 <= h else []
        mask = build_mask(h, w, boxes, rec.image_id)
        alpha = float(rng.choice([10, 100, 250]))
        region = str(rng.choice(["fg", "bg"]))
        out, degenerate = inject_noise(x, mask, NoiseConfig(alpha, region, seed=case))
        sel = mask.m if region == "fg" else ~mask.m
        if not sel.any():
            n_empty += 1
            bad_degenerate += int(not degenerate or not np.array_equal(out, x))
            continue
        worst = max(worst, abs(np.linalg.norm(out - x) / alpha - 1))
        leaks += int(not np.array_equal(out[~sel], x.astype(np.float64)[~sel]))
        bad_degenerate += int(degenerate)
    ok = worst <= 1e-4 and leaks == 0 and bad_degenerate == 0 and n_empty > 0
    record(3, ok, f"max |norm/alpha - 1| = {worst:.2e} (<= 1e-4), {leaks} region leaks, "
                  f"{n_empty} empty-region cases, {bad_degenerate} flag errors")
    assert ok


def test_criterion_04_gradient():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(20):
        C, d, n = int(rng.integers(2, 6)), int(rng.integers(1, 11)), int(rng.integers(1, 51))
        X, y = rng.normal(size=(n, d)), rng.integers(0, C, n)
        W, b = rng.normal(size=(C, d)), rng.normal(size=C)
        _, gW, gb = objective_and_grad(W, b, X, y, 1e-4)
        fW, fb = central_difference_grad(lambda: softmax_objective(W, b, X, y, 1e-4), [W, b],
                                         h=1e-5)
        a, f = np.r_[gW.ravel(), gb], np.r_[fW.ravel(), fb]
        rel = np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)
        worst = max(worst, float(rel.max()))
    record(4, worst <= 1e-5, f"max relative error {worst:.2e} over 20 problems (<= 1e-5)")
    assert worst <= 1e-5


def test_criterion_05_trainer_stability(full_fixture):
    cfg, root, manifest, truth, table = full_fixture
    ranking = build_rankings(table, manifest, "train")
    ids = select_subset(ranking, "top", 100).image_ids()
    feats = extract_features(ids, manifest, MockBackbone())
    a = train_head(feats, TrainConfig(l2_lambda=1e-4, seed=0))
    b = train_head(feats, TrainConfig(l2_lambda=1e-4, seed=1))
    # the same rows presented in another order give a second, non-identical trajectory
    perm = np.random.default_rng(5).permutation(feats.n)
    shuffled = type("Rows", (), {"values": feats.values[perm], "labels": feats.labels[perm],
                                 "backbone_id": feats.backbone_id})()
    c = train_head(shuffled, TrainConfig(l2_lambda=1e-4, seed=2))
    X = feats.values
    lines = []
    ok = True
    for name, other in (("seed", b), ("seed+row order", c)):
        agree = float(np.mean(predict(a, X)[0] == predict(other, X)[0]))
        diff = max(float(np.max(np.abs(a.W - other.W))), float(np.max(np.abs(a.b - other.b))))
        ok &= agree >= 0.999 and diff <= 1e-4
        lines.append(f"{name}: agreement {agree:.4f}, max |param diff| {diff:.1e}")
    record(5, ok, "; ".join(lines))
    assert ok


@pytest.mark.slow
def test_criterion_06_directional_slices(seed_runs):
    wins, details, worst_cpu = 0, [], 0.0
    for seed in SEEDS:
        by_label, _, cpu = seed_runs.get(seed)
        worst_cpu = max(worst_cpu, cpu)
        top = [s["accuracy"] for s in by_label["top"]["stratified"]["slices"]]
        bot = [s["accuracy"] for s in by_label["bot"]["stratified"]["slices"]]
        top_low, bot_low = np.mean(top[:10]), np.mean(bot[:10])
        spread_top, spread_bot = max(top) - min(top), max(bot) - min(bot)
        win = top_low > bot_low and spread_bot < spread_top
        wins += win
        details.append(f"s{seed}:{'y' if win else 'n'}({top_low:.2f}>{bot_low:.2f},"
                       f"{spread_bot:.2f}<{spread_top:.2f})")
    ok = wins >= 4 and worst_cpu < PIPELINE_CPU_LIMIT_S
    record(6, ok, f"{wins}/5 seeds; max pipeline CPU {worst_cpu:.0f}s; " + " ".join(details))
    assert wins >= 4
    assert worst_cpu < PIPELINE_CPU_LIMIT_S


@pytest.mark.slow
def test_criterion_07_fg_noise_hurts_more(seed_runs):
    wins, details = 0, []
    for seed in SEEDS:
        by_label, _, _ = seed_runs.get(seed)
        rows = by_label["top"]["noise"]["rows"]
        largest = max(r["alpha"] for r in rows)
        acc = {r["region"]: r["accuracy"] for r in rows if r["alpha"] == largest}
        win = acc["fg"] < acc["bg"]
        wins += win
        details.append(f"s{seed}:{'y' if win else 'n'}({acc['fg']:.3f}<{acc['bg']:.3f})")
    record(7, wins >= 4, f"{wins}/5 seeds at alpha={largest:g}; " + " ".join(details))
    assert wins >= 4


@pytest.mark.slow
def test_criterion_08_cold_runs_byte_identical(tmp_path):
    outs = []
    for name in ("a", "b"):
        cfg = tmp_path / f"{name}.yaml"
        cfg.write_text(yaml.safe_dump(fixture_run_config(f"out-{name}", 0)))
        proc = subprocess.run([sys.executable, "-m", "spurank", "run", "--config", str(cfg)],
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outs.append((tmp_path / f"out-{name}" / "summary.json").read_bytes())
    same = outs[0] == outs[1]
    record(8, same, f"summary.json {'identical' if same else 'differs'} "
                    f"({len(outs[0])} bytes) across two cold `spurank run` invocations")
    assert same


def test_criterion_09_stratified_partition(full_fixture):
    cfg, root, manifest, truth, table = full_fixture
    ranking = build_rankings(table, manifest, "val")
    slices = stratified_eval_sets(ranking)
    problems = 0
    for c in manifest.classes:
        val = sorted(r.image_id for r in manifest.split("val") if r.class_id == c)
        got = [s.members[c] for s in slices if c in s.members]
        problems += int(sorted(got) != val or len(set(got)) != len(got))
    record(9, problems == 0, f"{len(slices)} slices; {problems} classes violate the partition")
    assert problems == 0


def test_criterion_10_real_backend_recipe():
    record(10, None, "manual smoke test with real detector/backbone adapters; see README")
    pytest.skip("manual: needs real detector and backbone weights plus an ImageNet subsample")
