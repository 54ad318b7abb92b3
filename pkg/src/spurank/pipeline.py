"""End-to-end runs: score -> rank -> select -> extract -> train -> evaluate.

Every stage writes its artifact under the output directory.  Detection scores
and features are cached under ``<out>/cache`` and reused while the cache key
(manifest hash, backend and prompt) is unchanged.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import shutil
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ._io import dumps, num_threads, sha256_file
from .dataset import SyntheticConfig, generate_synthetic, load_manifest, make_manifest
from .detection import AGGREGATIONS, DEFAULT_TEMPLATE, batch_score, make_detector, write_score_table
from .features import extract_features, make_backbone
from .linear_head import TrainConfig, evaluate_accuracy, load_head, save_head, train_head
from .perturbation import (CLAMPING, REGIONS, OODMapping, eval_noise_sweep, eval_ood,
                           eval_stratified, load_ood_mapping)
from .ranking import (STRATEGIES, build_rankings, display_name, select_subset,
                      stratified_eval_sets, write_ranking, write_subset)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


@dataclass
class EvalConfig:
    split: str = "val"
    i_max: int = 50
    alphas: list[float] = field(default_factory=lambda: [10.0, 100.0, 250.0])
    regions: list[str] = field(default_factory=lambda: list(REGIONS))
    ood_split: str | None = "ood"
    ood_mapping: str | None = None  # None: identity over the manifest's class names
    noise: bool = True


@dataclass
class PipelineConfig:
    output_dir: str
    manifest: str | None = None
    backend: str | None = None
    backend_id: str | None = None
    backbones: list[str] = field(default_factory=lambda: ["mock"])
    template: str = DEFAULT_TEMPLATE
    aggregation: str = "max"
    strategies: list[str] = field(default_factory=lambda: list(STRATEGIES))
    k_values: list[int] = field(default_factory=lambda: [50, 100, 200])
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    invert_naming: bool = False
    synthetic: SyntheticConfig | None = None
    contact_sheets: dict | None = None  # {"classes": [...], "n_low": 4, "n_high": 4}
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        if not self.strategies:
            raise ConfigError("strategies must be nonempty")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad:
            raise ConfigError(f"unknown strategies {bad}; choose from {STRATEGIES}")
        if not self.k_values or any(int(k) < 1 for k in self.k_values):
            raise ConfigError("k_values must be positive integers")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}")
        if self.manifest is None and self.synthetic is None:
            raise ConfigError("either 'manifest' or 'synthetic' is required")
        if self.manifest is not None and self.backend is None:
            raise ConfigError("'backend' is required with an explicit manifest")
        if not self.backbones:
            raise ConfigError("backbones must be nonempty")
        if self.eval.i_max < 1:
            raise ConfigError("eval.i_max must be >= 1")
        bad = [r for r in self.eval.regions if r not in REGIONS]
        if bad:
            raise ConfigError(f"unknown regions {bad}")
        if any(a < 0 for a in self.eval.alphas):
            raise ConfigError("alphas must be >= 0")

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def echo(self) -> dict:
        """The config as written (relative paths kept), for hashing and reports."""
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        d.pop("output_dir")
        return d


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    data = dict(data)
    try:
        for name, value in data.items():
            # YAML 1.1 reads "1e-6" as a string
            default = fields[name].default
            if isinstance(default, float) and isinstance(value, (str, int)):
                data[name] = float(value)
            elif isinstance(default, int) and not isinstance(default, bool) \
                    and isinstance(value, str):
                data[name] = int(value)
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict, base_dir: str | os.PathLike = ".") -> PipelineConfig:
    data = dict(data)
    if "output_dir" not in data:
        raise ConfigError("output_dir is required")
    if "train" in data:
        data["train"] = _build(TrainConfig, data["train"] or {}, "train")
    if "eval" in data:
        data["eval"] = _build(EvalConfig, data["eval"] or {}, "eval")
    if data.get("synthetic") is not None:
        syn = dict(data["synthetic"])
        if "image_size" in syn:
            syn["image_size"] = tuple(syn["image_size"])
        data["synthetic"] = _build(SyntheticConfig, syn, "synthetic")
    for key in ("k_values",):
        if key in data:
            data[key] = [int(k) for k in data[key]]
    if "eval" in data:
        data["eval"].alphas = [float(a) for a in data["eval"].alphas]
        data["eval"].i_max = int(data["eval"].i_max)
    data["base_dir"] = str(base_dir)
    return _build(PipelineConfig, data, "config")


def load_config(path: str | os.PathLike) -> PipelineConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data or {}, base_dir=path.parent)


def hash_obj(obj: Any) -> str:
    return hashlib.sha256(dumps(obj).encode("utf-8")).hexdigest()


@contextmanager
def output_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        try:
            pid = int(lock.read_text().strip() or 0)
        except (OSError, ValueError):
            pid = 0
        if pid and _alive(pid):
            raise StageError("lock", f"{out_dir} is in use by process {pid}") from None
        lock.unlink(missing_ok=True)
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


@contextmanager
def stage(name: str, timings: dict):
    t0 = time.perf_counter()
    log.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0


def _slug(s: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in s)[:80]


@dataclass
class EvalReport:
    provenance: dict
    config: dict
    results: list[dict]
    score_skips: list[dict]

    def to_json(self) -> dict:
        return {"provenance": self.provenance, "config": self.config,
                "results": self.results, "score_skips": self.score_skips}

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        return cls(obj["provenance"], obj["config"], obj["results"], obj["score_skips"])


def _prepare_cache(cache_dir: Path, key: dict) -> str:
    """Reset ``cache_dir`` when its recorded key differs from ``key``."""
    key_file = cache_dir / "key.json"
    status = "fresh"
    if key_file.exists():
        old = json.loads(key_file.read_text(encoding="utf-8"))
        if old == key:
            status = "match"
        else:
            log.warning("cache provenance mismatch in %s; discarding stale caches", cache_dir)
            shutil.rmtree(cache_dir)
            status = "mismatch"
    cache_dir.mkdir(parents=True, exist_ok=True)
    key_file.write_text(dumps(key), encoding="utf-8")
    return status


def run_pipeline(config: PipelineConfig) -> EvalReport:
    out = config.resolve(config.output_dir)
    timings: dict[str, float] = {}
    with output_lock(out):
        report, run_log = _run(config, out, timings)
    run_log["timings_s"] = timings
    (out / "run_log.json").write_text(json.dumps(run_log, indent=2, sort_keys=True),
                                      encoding="utf-8")
    return report


def _run(config: PipelineConfig, out: Path, timings: dict):
    from .report import emit_contact_sheet, emit_report

    run_log: dict[str, Any] = {}
    # fixture
    if config.synthetic is not None and config.manifest is None:
        with stage("fixture", timings):
            fx = out / "fixture"
            want = dumps(dataclasses.asdict(config.synthetic))
            stamp = fx / "config.json"
            if not (stamp.exists() and stamp.read_text(encoding="utf-8") == want):
                if fx.exists():
                    shutil.rmtree(fx)
                generate_synthetic(config.synthetic, fx)
                stamp.write_text(want, encoding="utf-8")
            manifest_path = fx / "manifest.jsonl"
            backend_spec = config.backend or f"mock:{fx / 'ground_truth.jsonl'}"
    else:
        manifest_path = config.resolve(config.manifest)
        backend_spec = config.backend

    with stage("load", timings):
        manifest = load_manifest(manifest_path)
        manifest_hash = sha256_file(manifest_path)

    detector = make_detector(backend_spec, config.backend_id)
    backbones = [make_backbone(b) for b in config.backbones]
    ev = config.eval
    provenance = {
        "manifest_sha256": manifest_hash,
        "backend_id": detector.backend_id,
        "backbone_ids": [b.backbone_id for b in backbones],
        "seeds": {"global": config.seed, "rnd_subsets": config.seed, "noise": config.seed,
                  "train_init": config.train.seed,
                  "fixture": config.synthetic.seed if config.synthetic else None},
        "threads": num_threads(),
        "clamping": CLAMPING,
        "naming": "rank-anchored (inverted)" if config.invert_naming else "score-anchored",
    }
    provenance["config_hash"] = hash_obj({"config": config.echo(), **provenance})

    cache_dir = out / "cache"
    cache_key = {"manifest_sha256": manifest_hash, "backend_id": detector.backend_id,
                 "template": config.template, "aggregation": config.aggregation}
    run_log["cache"] = _prepare_cache(cache_dir, cache_key)

    with stage("score", timings):
        wanted = [r for r in manifest.records if r.split in ("train", ev.split)]
        table = batch_score(manifest, detector, cache_dir / "scores.jsonl", config.template,
                            config.aggregation, records=wanted)
        write_score_table(table, out / "scores.jsonl")
        skipped = {s.image_id for s in table.skips}
        if skipped:
            log.warning("%d images skipped during scoring", len(skipped))
        kept = make_manifest(manifest.root, [r for r in manifest.records
                                             if r.image_id not in skipped],
                             manifest.classes, manifest.base_dir)

    with stage("rank", timings):
        train_rank = build_rankings(table, kept, "train")
        eval_rank = build_rankings(table, kept, ev.split)
        write_ranking(train_rank, out / "ranking_train.jsonl")
        write_ranking(eval_rank, out / f"ranking_{ev.split}.jsonl")
        slices = stratified_eval_sets(eval_rank, ev.i_max)

    subsets = {}
    with stage("select", timings):
        (out / "subsets").mkdir(exist_ok=True)
        for k in config.k_values:
            for strat in config.strategies:
                sub = select_subset(train_rank, strat, k, config.seed)
                write_subset(sub, out / "subsets" / f"{strat}-k{k}.jsonl")
                subsets[(strat, k)] = sub

    ood_records = [r for r in kept.records if ev.ood_split and r.split == ev.ood_split]
    if ood_records:
        mapping = (load_ood_mapping(config.resolve(ev.ood_mapping)) if ev.ood_mapping
                   else OODMapping.identity(kept.classes))
    eval_records = [r for r in kept.records if r.split == ev.split]
    kept_by_id = kept.by_id()

    results = []
    for bb in backbones:
        tag = _slug(bb.backbone_id)
        with stage("extract", timings):
            ids = sorted({i for s in subsets.values() for i in s.image_ids()}
                         | {r.image_id for r in eval_records}
                         | {r.image_id for r in ood_records})
            feats = extract_features(ids, kept, bb, cache_dir / f"features-{tag}.bin")
        for (strat, k), sub in subsets.items():
            with stage("train", timings):
                head_rel = f"heads/{tag}/{strat}-k{k}.head"
                (out / head_rel).parent.mkdir(parents=True, exist_ok=True)
                trained = train_head(feats.take(sub.image_ids()), config.train,
                                     class_ids=sorted(kept.classes))
                save_head(trained, out / head_rel)
                # evaluate exactly what was written to disk
                head = load_head(out / head_rel)
                train_acc = evaluate_accuracy(head, feats.take(sub.image_ids())).accuracy
            with stage("eval", timings):
                eval_feats = feats.take([r.image_id for r in eval_records])
                strat_rep = eval_stratified(eval_feats, head, slices)
                noise_rep = (eval_noise_sweep(bb, head, kept, eval_records, table, ev.alphas,
                                              ev.regions, config.seed) if ev.noise else None)
                ood_rep = None
                if ood_records:
                    ood_feats = feats.take([r.image_id for r in ood_records])
                    names = [kept_by_id[i].class_name for i in ood_feats.image_ids]
                    ood_rep = eval_ood(ood_feats, head, names, mapping)
            info = trained.train_info
            results.append({
                "backbone_id": bb.backbone_id,
                "strategy": strat,
                "label": display_name(strat, config.invert_naming),
                "k": k,
                "head_file": head_rel,
                "train": {"objective": info["objective"], "iterations": info["iterations"],
                          "grad_norm": info["grad_norm"], "status": info["status"],
                          "train_accuracy": train_acc},
                "stratified": dataclasses.asdict(strat_rep),
                "noise": dataclasses.asdict(noise_rep) if noise_rep else None,
                "ood": dataclasses.asdict(ood_rep) if ood_rep else None,
            })
        if hasattr(bb, "close"):
            bb.close()
    if hasattr(detector, "close"):
        detector.close()

    report = EvalReport(provenance, config.echo(), results,
                        [{"image_id": s.image_id, "reason": s.reason} for s in table.skips])
    with stage("report", timings):
        emit_report(report, out)
        sheets = config.contact_sheets or {}
        for c in sheets.get("classes", []):
            emit_contact_sheet(train_rank, kept, int(c), int(sheets.get("n_low", 4)),
                               int(sheets.get("n_high", 4)),
                               out / "contact_sheets" / f"class-{int(c):03d}.png")
    return report, run_log
