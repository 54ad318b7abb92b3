import copy
import json
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest
import yaml
from scipy.stats import spearmanr

from spurank.pipeline import (ConfigError, StageError, config_from_dict, hash_obj, load_config,
                              output_lock, run_pipeline)
from spurank.report import load_results_csv

SMALL = {
    "synthetic": {"num_classes": 3, "per_class": 30, "val_per_class": 10, "ood_per_class": 5,
                  "seed": 1},
    "strategies": ["top", "bot"],
    "k_values": [10],
    "eval": {"i_max": 8, "alphas": [10, 100]},
}


def small(out, **overrides):
    d = copy.deepcopy(SMALL)
    d["output_dir"] = str(out)
    d.update(overrides)
    return config_from_dict(d)


def summary_bytes(out):
    return (out / "summary.json").read_bytes()


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "out"
    report = run_pipeline(small(out))
    return report, out


def test_structure(small_run):
    report, out = small_run
    assert [(r["strategy"], r["k"]) for r in report.results] == [("top", 10), ("bot", 10)]
    for r in report.results:
        assert len(r["stratified"]["slices"]) == 8
        assert len(r["noise"]["rows"]) == 4
        assert r["ood"]["n"] == 15
        assert (out / r["head_file"]).exists()
    for name in ("summary.json", "results.csv", "summary.csv", "scores.jsonl",
                 "ranking_train.jsonl", "ranking_val.jsonl", "subsets/top-k10.jsonl",
                 "run_log.json"):
        assert (out / name).exists(), name
    assert not (out / ".lock").exists()
    text = summary_bytes(out).decode()
    assert str(out) not in text


def test_csv_row_count(small_run):
    report, out = small_run
    rows = load_results_csv(out / "results.csv")
    expected = sum(len(r["stratified"]["slices"]) + len(r["noise"]["rows"]) + 2
                   for r in report.results)
    assert len(rows) == expected


def test_warm_rerun_identical(small_run):
    report, out = small_run
    before = summary_bytes(out)
    run_pipeline(small(out))
    assert summary_bytes(out) == before
    assert json.loads((out / "run_log.json").read_text())["cache"] == "match"


def test_cold_runs_identical(small_run, tmp_path):
    _, out = small_run
    run_pipeline(small(tmp_path / "again"))
    assert summary_bytes(tmp_path / "again") == summary_bytes(out)


def test_parallel_run_identical(small_run, tmp_path, monkeypatch):
    _, out = small_run
    monkeypatch.setenv("SPURANK_THREADS", "3")
    report = run_pipeline(small(tmp_path / "par"))
    assert report.provenance["threads"] == 3
    a = json.loads(summary_bytes(out))
    b = json.loads(summary_bytes(tmp_path / "par"))
    for d in (a, b):
        for key in ("threads", "config_hash"):
            d["provenance"].pop(key)
    assert a == b


@pytest.mark.parametrize("victim", ["scores.jsonl", "features-mock-backbone_v1_d64_s0.bin",
                                    "features-mock-backbone_v1_d64_s0.bin.idx", "key.json"])
def test_deleting_a_cache_reproduces_numbers(small_run, tmp_path, victim):
    _, out = small_run
    work = tmp_path / "out"
    shutil.copytree(out, work)
    (work / "cache" / victim).unlink()
    run_pipeline(small(work))
    assert summary_bytes(work) == summary_bytes(out)


def test_cache_mismatch_resets(small_run, tmp_path):
    _, out = small_run
    work = tmp_path / "out"
    shutil.copytree(out, work)
    report = run_pipeline(small(work, template="a picture of a {class_name}"))
    assert json.loads((work / "run_log.json").read_text())["cache"] == "mismatch"
    assert report.config["template"] == "a picture of a {class_name}"


def test_config_hash_sensitive_to_every_field(small_run, tmp_path):
    report, _ = small_run
    base = report.provenance["config_hash"]
    variants = [
        {"seed": 5}, {"k_values": [11]}, {"strategies": ["top"]},
        {"template": "x {class_name}"}, {"aggregation": "top3"}, {"invert_naming": True},
        {"train": {"l2_lambda": 1e-3}}, {"eval": {"i_max": 7, "alphas": [10, 100]}},
        {"synthetic": {**SMALL["synthetic"], "seed": 2}}, {"backbones": ["mock:32"]},
    ]
    seen = {base}
    for v in variants:
        d = copy.deepcopy(SMALL)
        d.update(v)
        cfg = config_from_dict({"output_dir": "x", **d})
        h = hash_obj({"config": cfg.echo(), **{k: v for k, v in report.provenance.items()
                                                 if k != "config_hash"}})
        assert h not in seen
        seen.add(h)
    # provenance fields are covered too
    prov = {k: v for k, v in report.provenance.items() if k != "config_hash"}
    recomputed = hash_obj({"config": report.config, **prov})
    assert recomputed == base
    prov["backend_id"] = "other"
    assert hash_obj({"config": report.config, **prov}) != base


def test_invert_naming(tmp_path):
    report = run_pipeline(small(tmp_path / "inv", invert_naming=True, eval={"i_max": 3,
                                                                          "noise": False}))
    assert [(r["strategy"], r["label"]) for r in report.results] == [("top", "bot"),
                                                                     ("bot", "top")]
    assert report.results[0]["noise"] is None


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="unknown keys"):
        config_from_dict({"output_dir": "x", "synthetic": {}, "colour": 1})
    with pytest.raises(ConfigError, match="strategies"):
        config_from_dict({"output_dir": "x", "synthetic": {}, "strategies": ["best"]})
    with pytest.raises(ConfigError, match="output_dir"):
        config_from_dict({"synthetic": {}})
    with pytest.raises(ConfigError, match="manifest"):
        config_from_dict({"output_dir": "x"})
    with pytest.raises(ConfigError, match="synthetic"):
        config_from_dict({"output_dir": "x", "synthetic": {"per_class": 0}})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")


def test_yaml_config(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump({"output_dir": "out", **SMALL,
                                 "train": {"l2_lambda": "1e-4", "tolerance": "1e-6"}}))
    cfg = load_config(p)
    assert cfg.train.l2_lambda == 1e-4 and cfg.eval.alphas == [10.0, 100.0]
    assert cfg.resolve(cfg.output_dir) == tmp_path / "out"


def test_k_too_large_is_stage_error(tmp_path):
    with pytest.raises(StageError, match="select"):
        run_pipeline(small(tmp_path / "big", k_values=[31]))
    assert not (tmp_path / "big" / ".lock").exists()


def test_lock(tmp_path):
    out = tmp_path / "locked"
    out.mkdir()
    (out / ".lock").write_text(str(os.getpid()))
    with pytest.raises(StageError, match="in use"):
        with output_lock(out):
            pass
    # a lock left by a dead process is taken over
    dead = subprocess.run([sys.executable, "-c", "import os; print(os.getpid())"],
                          capture_output=True, text=True).stdout.strip()
    (out / ".lock").write_text(dead)
    with output_lock(out):
        assert (out / ".lock").read_text() == str(os.getpid())
    assert not (out / ".lock").exists()


def test_explicit_manifest_and_subprocess_backends(small_fixture, tmp_path):
    cfg, root, manifest, truth = small_fixture
    gt = root / "ground_truth.jsonl"
    common = {"output_dir": str(tmp_path / "o"), "manifest": str(root / "manifest.jsonl"),
              "strategies": ["top", "rnd"], "k_values": [5],
              "eval": {"i_max": 4, "alphas": [100]}}
    direct = run_pipeline(config_from_dict({**common, "backend": f"mock:{gt}"}))
    piped = run_pipeline(config_from_dict({
        **common, "output_dir": str(tmp_path / "p"),
        "backend": f"{sys.executable} -m spurank mock-detector --ground-truth {gt}",
        "backend_id": "mock-detector/v1",
        "backbones": [f"{sys.executable} -m spurank mock-backbone"]}))
    strip = lambda rep: [{k: v for k, v in r.items() if k not in ("backbone_id", "head_file")}
                         for r in rep.results]
    assert strip(direct) == strip(piped)


def test_skipped_images_are_excluded(small_fixture, tmp_path):
    cfg, root, manifest, truth = small_fixture
    work = tmp_path / "fx"
    shutil.copytree(root, work)
    victim = manifest.split("val")[0]
    (work / victim.path).write_bytes(b"corrupt")
    report = run_pipeline(config_from_dict({
        "output_dir": str(tmp_path / "o"), "manifest": str(work / "manifest.jsonl"),
        "backend": f"mock:{work / 'ground_truth.jsonl'}", "strategies": ["top"],
        "k_values": [5], "eval": {"i_max": 9, "alphas": [10]}}))
    assert [s["image_id"] for s in report.score_skips] == [victim.image_id]
    # the class that lost an image has no rank-10 member; slices stop at 9 anyway
    assert sum(s["n"] for s in report.results[0]["stratified"]["slices"]) == 9 * 3


def test_top_head_accuracy_falls_with_rank(seed_runs):
    by_label, _, _ = seed_runs.get(0)
    acc = [s["accuracy"] for s in by_label["top"]["stratified"]["slices"]]
    assert len(acc) == 50
    assert spearmanr(acc, np.arange(1, 51)).statistic < 0
