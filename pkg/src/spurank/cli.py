"""``spurank`` command line.  Exit codes: 0 ok, 2 config/usage error, 3 stage failure."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import detection, features, linear_head, perturbation, ranking, report
from .dataset import (ManifestError, SyntheticConfig, generate_synthetic, load_manifest,
                      validate_manifest)
from .pipeline import ConfigError, StageError, load_config, run_pipeline

log = logging.getLogger("spurank")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _floats(s: str) -> list[float]:
    return [float(v) for v in s.split(",") if v.strip()]


def _words(s: str) -> list[str]:
    return [v.strip() for v in s.split(",") if v.strip()]


def _dump(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_synth(args):
    cfg = SyntheticConfig(num_classes=args.num_classes, per_class=args.per_class,
                          val_per_class=args.val_per_class, ood_per_class=args.ood_per_class,
                          p_spur_train=args.p_spur_train, p_spur_val=args.p_spur_val,
                          seed=args.seed)
    manifest, _ = generate_synthetic(cfg, args.out)
    print(f"wrote {len(manifest.records)} images to {args.out}")


def cmd_validate(args):
    problems = validate_manifest(load_manifest(args.manifest), check_files=args.check_files)
    for p in problems:
        print(f"{p.kind}\t{p.image_id}\t{p.message}")
    return EXIT_OK if not problems else EXIT_STAGE


def cmd_score(args):
    manifest = load_manifest(args.manifest)
    backend = detection.make_detector(args.backend, args.backend_id)
    recs = [r for r in manifest.records if not args.split or r.split in args.split]
    table = detection.batch_score(manifest, backend, args.cache, args.template, args.aggregation,
                                  retries=args.retries, records=recs)
    if hasattr(backend, "close"):
        backend.close()
    if args.out:
        detection.write_score_table(table, args.out)
    for s in table.skips:
        log.warning("skipped %s: %s", s.image_id, s.reason)
    print(f"scored {len(table.records)} images, {len(table.skips)} skipped")


def cmd_rank(args):
    manifest = load_manifest(args.manifest)
    table = detection.read_score_table(args.scores)
    rk = ranking.build_rankings(table, manifest, args.split)
    ranking.write_ranking(rk, args.out)
    print(f"ranked {sum(len(v) for v in rk.per_class.values())} {args.split} images "
          f"in {len(rk.per_class)} classes")


def cmd_select(args):
    rk = ranking.read_ranking(args.ranking)
    sub = ranking.select_subset(rk, args.strategy, args.k, args.seed)
    ranking.write_subset(sub, args.out)
    print(f"selected {len(sub.image_ids())} images ({args.strategy} k={args.k})")


def cmd_extract(args):
    manifest = load_manifest(args.manifest)
    bb = features.make_backbone(args.backbone)
    if args.subset:
        ids = ranking.read_subset(args.subset).image_ids()
    else:
        ids = [r.image_id for r in manifest.records if not args.split or r.split in args.split]
    fm = features.extract_features(ids, manifest, bb, args.cache)
    if hasattr(bb, "close"):
        bb.close()
    print(f"{fm.n} feature rows of dimension {fm.d} in {args.cache}")


def cmd_train(args):
    manifest = load_manifest(args.manifest)
    sub = ranking.read_subset(args.subset)
    fm = features.load_cached_features(args.features, sub.image_ids(), manifest)
    cfg = linear_head.TrainConfig(l2_lambda=args.l2, max_iters=args.max_iters,
                                  tolerance=args.tol, seed=args.seed)
    head = linear_head.train_head(fm, cfg, class_ids=sorted(manifest.classes))
    linear_head.save_head(head, args.out)
    info = head.train_info
    print(f"trained on {fm.n} rows: objective {info['objective']:.6g}, "
          f"{info['iterations']} iterations, {info['status']}")


def cmd_eval_strata(args):
    manifest = load_manifest(args.manifest)
    head = linear_head.load_head(args.head)
    rk = ranking.read_ranking(args.ranking, split="val")
    slices = ranking.stratified_eval_sets(rk, args.imax)
    ids = sorted({i for s in slices for i in s.image_ids()})
    fm = features.load_cached_features(args.features, ids, manifest)
    rep = perturbation.eval_stratified(fm, head, slices)
    _dump(dataclasses.asdict(rep), args.out)


def cmd_eval_noise(args):
    manifest = load_manifest(args.manifest)
    head = linear_head.load_head(args.head)
    bb = features.make_backbone(args.backbone)
    table = detection.read_score_table(args.scores)
    recs = manifest.split(args.split)
    rep = perturbation.eval_noise_sweep(bb, head, manifest, recs, table, _floats(args.alphas),
                                        _words(args.regions), args.seed)
    if hasattr(bb, "close"):
        bb.close()
    _dump(dataclasses.asdict(rep), args.out)


def cmd_eval_ood(args):
    manifest = load_manifest(args.manifest)
    head = linear_head.load_head(args.head)
    mapping = (perturbation.load_ood_mapping(args.mapping) if args.mapping
               else perturbation.OODMapping.identity(manifest.classes))
    recs = manifest.split(args.split)
    fm = features.load_cached_features(args.features, [r.image_id for r in recs], manifest)
    by_id = manifest.by_id()
    rep = perturbation.eval_ood(fm, head, [by_id[i].class_name for i in fm.image_ids], mapping)
    _dump(dataclasses.asdict(rep), args.out)


def cmd_run(args):
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    rep = run_pipeline(cfg)
    print(f"{len(rep.results)} heads evaluated; config hash {rep.provenance['config_hash'][:12]}")


def cmd_contact_sheet(args):
    manifest = load_manifest(args.manifest)
    rk = ranking.read_ranking(args.ranking)
    report.emit_contact_sheet(rk, manifest, args.class_id, args.n_low, args.n_high, args.out)
    print(f"wrote {args.out}")


def cmd_mock_detector(args):
    """Serve the mock detector over the line protocol on stdin/stdout."""
    det = detection.MockDetector(args.ground_truth)
    for line in sys.stdin:
        if not line.strip():
            continue
        req = json.loads(line)
        resp = {"request_id": req.get("request_id")}
        try:
            if args.fail_substring and args.fail_substring in req["image_path"]:
                raise detection.BackendError("injected failure")
            boxes = det.detect(req["image_path"], req.get("queries", []))
            resp["boxes"] = [b.to_json() for b in boxes]
        except Exception as exc:
            resp["error"] = f"{type(exc).__name__}: {exc}"
        sys.stdout.write(json.dumps(resp) + "\n")
        sys.stdout.flush()


def cmd_mock_backbone(args):
    """Serve the mock backbone over the line protocol on stdin/stdout."""
    bb = features.MockBackbone(d=args.d)
    for line in sys.stdin:
        if not line.strip():
            continue
        req = json.loads(line)
        resp = {"request_id": req.get("request_id")}
        try:
            resp["embedding"] = [float(v) for v in bb.embed(features.decode_backbone_request(req))]
        except Exception as exc:
            resp["error"] = f"{type(exc).__name__}: {exc}"
        sys.stdout.write(json.dumps(resp) + "\n")
        sys.stdout.flush()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spurank", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render the synthetic spurious-background fixture")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--num-classes", type=int, default=10)
    s.add_argument("--per-class", type=int, default=300)
    s.add_argument("--val-per-class", type=int, default=50)
    s.add_argument("--ood-per-class", type=int, default=50)
    s.add_argument("--p-spur-train", type=float, default=0.9)
    s.add_argument("--p-spur-val", type=float, default=0.5)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("validate", help="check a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--check-files", action="store_true")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("score", help="detector scores for every image")
    s.add_argument("--manifest", required=True)
    s.add_argument("--backend", required=True,
                   help="backend command line, or mock:<ground_truth.jsonl>")
    s.add_argument("--backend-id", default=None)
    s.add_argument("--template", default=detection.DEFAULT_TEMPLATE)
    s.add_argument("--aggregation", default="max", choices=detection.AGGREGATIONS)
    s.add_argument("--cache", required=True)
    s.add_argument("--split", type=_words, default=None, help="comma-separated splits")
    s.add_argument("--retries", type=int, default=2)
    s.add_argument("--out", default=None, help="write the sorted score table here")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("rank", help="per-class spuriosity ranking")
    s.add_argument("--manifest", required=True)
    s.add_argument("--scores", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rank)

    s = sub.add_parser("select", help="resolve a top/mid/bot/rnd subset")
    s.add_argument("--ranking", required=True)
    s.add_argument("--strategy", required=True, choices=ranking.STRATEGIES)
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("extract", help="frozen-backbone features into a cache")
    s.add_argument("--manifest", required=True)
    s.add_argument("--backbone", required=True, help="backbone command line, or mock")
    s.add_argument("--cache", required=True)
    s.add_argument("--split", type=_words, default=None)
    s.add_argument("--subset", default=None, help="only the images of this subset file")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train", help="retrain the linear head on a subset")
    s.add_argument("--manifest", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--subset", required=True)
    s.add_argument("--l2", type=float, default=1e-4)
    s.add_argument("--max-iters", type=int, default=1000)
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval-strata", help="accuracy per spuriosity-rank slice")
    s.add_argument("--manifest", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--head", required=True)
    s.add_argument("--ranking", required=True, help="ranking file of the evaluation split")
    s.add_argument("--imax", type=int, default=50)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_eval_strata)

    s = sub.add_parser("eval-noise", help="foreground/background noise sweep")
    s.add_argument("--manifest", required=True)
    s.add_argument("--backbone", required=True)
    s.add_argument("--head", required=True)
    s.add_argument("--scores", required=True)
    s.add_argument("--split", default="val")
    s.add_argument("--alphas", default="10,100,250")
    s.add_argument("--regions", default="fg,bg")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_eval_noise)

    s = sub.add_parser("eval-ood", help="OOD accuracy with class-subset restriction")
    s.add_argument("--manifest", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--head", required=True)
    s.add_argument("--mapping", default=None, help="'<ood class> <base class_id>' per line")
    s.add_argument("--split", default="ood")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_eval_ood)

    s = sub.add_parser("run", help="full pipeline from a YAML config")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("contact-sheet", help="most/least spurious images of a class")
    s.add_argument("--manifest", required=True)
    s.add_argument("--ranking", required=True)
    s.add_argument("--class-id", type=int, required=True)
    s.add_argument("--n-low", type=int, default=4)
    s.add_argument("--n-high", type=int, default=4)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_contact_sheet)

    s = sub.add_parser("mock-detector", help="serve the mock detector on stdin/stdout")
    s.add_argument("--ground-truth", required=True)
    s.add_argument("--fail-substring", default=None)
    s.set_defaults(func=cmd_mock_detector)

    s = sub.add_parser("mock-backbone", help="serve the mock backbone on stdin/stdout")
    s.add_argument("--d", type=int, default=features.MOCK_DIM)
    s.set_defaults(func=cmd_mock_backbone)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        code = args.func(args)
    except (ConfigError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
