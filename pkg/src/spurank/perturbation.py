"""Foreground/background noise injection and the three evaluation families.

Noise is added in [0, 1] image space, before the backbone, without clamping:

    x_fg = x + alpha * f(n * m)        x_bg = x + alpha * f(n * (1 - m))

with ``n`` i.i.d. standard normal, ``m`` the best detection box rasterised to a
binary mask and ``f(v) = v / ||v||_2`` (``f(0) = 0``).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._io import keyed_rng
from .dataset import DatasetManifest, ImageRecord, load_image
from .detection import DetectionBox, ScoreTable, box_order
from .features import BackboneAdapter, FeatureMatrix
from .linear_head import LinearHead, accuracy_from_predictions, predict
from .ranking import EvalSlice

REGIONS = ("fg", "bg")
CLAMPING = "none"


@dataclass
class ForegroundMask:
    m: np.ndarray  # H x W bool
    source_box: DetectionBox | None
    image_id: str = ""

    @property
    def no_detection(self) -> bool:
        return self.source_box is None


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def build_mask(height: int, width: int, boxes: Sequence[DetectionBox],
               image_id: str = "") -> ForegroundMask:
    """Rasterise the best box: pixel (r, c) is foreground iff x0 <= c < x1 and y0 <= r < y1.

    Box corners are rounded half-up to integers first.  No boxes gives an
    all-zero mask flagged ``no_detection``.
    """
    m = np.zeros((height, width), dtype=bool)
    if not boxes:
        return ForegroundMask(m, None, image_id)
    for b in boxes:
        b.check_bounds(width, height)
    best = min(boxes, key=box_order)
    x0, y0 = _round_half_up(best.x_min), _round_half_up(best.y_min)
    x1, y1 = _round_half_up(best.x_max), _round_half_up(best.y_max)
    m[y0:y1, x0:x1] = True
    return ForegroundMask(m, best, image_id)


@dataclass(frozen=True)
class NoiseConfig:
    alpha: float
    region: str = "fg"
    seed: int = 0

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.region not in REGIONS:
            raise ValueError(f"region must be one of {REGIONS}, got {self.region!r}")


def noise_tensor(shape: tuple[int, ...], seed: int, image_id: str) -> np.ndarray:
    return keyed_rng(seed, "noise", image_id).standard_normal(shape)


def inject_noise(x: np.ndarray, mask: ForegroundMask, config: NoiseConfig,
                 image_id: str | None = None) -> tuple[np.ndarray, bool]:
    """Return ``(x_noisy, degenerate)``.

    ``degenerate`` is True when the selected region is empty; ``x`` then comes
    back unchanged.  Output is float64; pixels outside the region equal ``x``.
    """
    if config.alpha < 0:
        raise ValueError("alpha must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[:2] != mask.m.shape:
        raise ValueError(f"mask shape {mask.m.shape} does not match image shape {x.shape}")
    sel = mask.m if config.region == "fg" else ~mask.m
    sel3 = np.broadcast_to(sel[..., None], x.shape)
    if not sel.any():
        return x.copy(), True
    iid = mask.image_id if image_id is None else image_id
    v = np.where(sel3, noise_tensor(x.shape, config.seed, iid), 0.0)
    norm = np.linalg.norm(v)
    if config.alpha == 0 or norm == 0.0:
        return x.copy(), norm == 0.0
    return np.where(sel3, x + (config.alpha / norm) * v, x), False


# --------------------------------------------------------------------------
# noise sweep

@dataclass
class NoiseRow:
    alpha: float
    region: str
    accuracy: float | None
    n: int
    excluded: int  # images whose selected region was empty


@dataclass
class NoiseReport:
    clean_accuracy: float
    n: int
    rows: list[NoiseRow]
    failures: list[tuple[str, str]] = field(default_factory=list)
    seed: int = 0
    clamping: str = CLAMPING


def _masks_for(records: Sequence[ImageRecord], manifest: DatasetManifest,
               score_table: ScoreTable):
    out, failures = [], []
    for rec in records:
        srec = score_table.records.get(rec.image_id)
        if srec is None:
            failures.append((rec.image_id, "no score record (needed for the mask)"))
            continue
        try:
            img = load_image(manifest.path_of(rec))
            mask = build_mask(img.shape[0], img.shape[1], srec.boxes, rec.image_id)
        except Exception as exc:
            failures.append((rec.image_id, f"{type(exc).__name__}: {exc}"))
            continue
        out.append((rec, img, mask))
    return out, failures


def eval_noise_sweep(backbone: BackboneAdapter, head: LinearHead, manifest: DatasetManifest,
                     records: Sequence[ImageRecord], score_table: ScoreTable,
                     alphas: Sequence[float] = (10, 100, 250),
                     regions: Sequence[str] = REGIONS, seed: int = 0) -> NoiseReport:
    """Accuracy for every (alpha, region) pair with per-image noise injected pre-embedding."""
    for a in alphas:
        NoiseConfig(a)
    for r in regions:
        NoiseConfig(0.0, r)
    items, failures = _masks_for(sorted(records, key=lambda r: r.image_id), manifest, score_table)
    if not items:
        raise ValueError("no evaluable images for the noise sweep")
    labels = np.array([rec.class_id for rec, _, _ in items])
    clean = np.stack([backbone.embed(img) for _, img, _ in items])
    clean_acc = accuracy_from_predictions(predict(head, clean)[0], labels).accuracy

    rows = []
    for alpha in alphas:
        for region in regions:
            cfg = NoiseConfig(float(alpha), region, seed)
            feats, keep = [], []
            for j, (rec, img, mask) in enumerate(items):
                noisy, degenerate = inject_noise(img, mask, cfg, rec.image_id)
                if degenerate:
                    continue
                feats.append(backbone.embed(noisy))
                keep.append(j)
            excluded = len(items) - len(keep)
            if keep:
                pred = predict(head, np.stack(feats))[0]
                acc = accuracy_from_predictions(pred, labels[keep]).accuracy
            else:
                acc = None
            rows.append(NoiseRow(float(alpha), region, acc, len(keep), excluded))
    return NoiseReport(clean_acc, len(items), rows, failures, seed)


# --------------------------------------------------------------------------
# stratified evaluation

@dataclass
class SliceResult:
    index: int
    accuracy: float
    n: int
    skipped: list[int]


@dataclass
class StratifiedReport:
    slices: list[SliceResult]
    mean: float

    def accuracies(self) -> list[float]:
        return [s.accuracy for s in self.slices]


def eval_stratified(features: FeatureMatrix, head: LinearHead,
                    eval_slices: Sequence[EvalSlice]) -> StratifiedReport:
    """Accuracy per rank slice and their unweighted mean.

    ``features`` must cover every image in the slices (extract them with the
    backbone first).
    """
    if not eval_slices:
        raise ValueError("no evaluation slices")
    pred, _ = predict(head, features)
    pos = {iid: i for i, iid in enumerate(features.image_ids)}
    out = []
    for sl in eval_slices:
        rows = [pos[iid] for iid in sl.image_ids()]
        acc = accuracy_from_predictions(pred[rows], features.labels[rows])
        out.append(SliceResult(sl.index, acc.accuracy, acc.n, list(sl.skipped)))
    mean = float(sum(s.accuracy for s in out) / len(out))
    return StratifiedReport(out, mean)


# --------------------------------------------------------------------------
# OOD evaluation

@dataclass
class OODMapping:
    mapping: dict[str, int]  # ood class_name -> base class_id

    @property
    def restricted(self) -> list[int]:
        return sorted(set(self.mapping.values()))

    @classmethod
    def identity(cls, classes: dict[int, str]) -> "OODMapping":
        return cls({name: cid for cid, name in classes.items()})


def load_ood_mapping(path: str | os.PathLike) -> OODMapping:
    """Lines of ``<ood class name><whitespace><base class_id>``; ``#`` starts a comment."""
    mapping = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.rsplit(None, 1)
            try:
                name, cid = parts[0].strip(), int(parts[1])
            except (IndexError, ValueError):
                raise ValueError(f"{path}:{lineno}: expected '<name> <class_id>'") from None
            if name in mapping and mapping[name] != cid:
                raise ValueError(f"{path}:{lineno}: {name!r} mapped twice")
            mapping[name] = cid
    return OODMapping(mapping)


@dataclass
class OODReport:
    restricted_accuracy: float
    unrestricted_accuracy: float
    n: int
    restricted_classes: list[int]


def eval_ood(features: FeatureMatrix, head: LinearHead, class_names: Sequence[str],
             mapping: OODMapping) -> OODReport:
    """Accuracy with logits restricted to the mapped class subset, and without.

    ``class_names`` gives the OOD class name of each feature row.
    """
    unmapped = sorted({n for n in class_names if n not in mapping.mapping})
    if unmapped:
        raise ValueError(f"OOD classes without a mapping: {unmapped}")
    if len(class_names) != features.n or features.n == 0:
        raise ValueError("need one class name per (nonempty) feature row")
    missing = [c for c in mapping.restricted if c not in head.class_ids]
    if missing:
        raise ValueError(f"mapped base classes {missing} not in the head")
    target = np.array([mapping.mapping[n] for n in class_names])
    logits = head.logits(features.values)
    ids = np.asarray(head.class_ids)
    cols = [head.class_ids.index(c) for c in mapping.restricted]  # ascending class_id
    restricted_pred = ids[cols][np.argmax(logits[:, cols], axis=1)]
    full_pred = ids[np.argmax(logits, axis=1)]
    return OODReport(float(np.mean(restricted_pred == target)),
                     float(np.mean(full_pred == target)), features.n, mapping.restricted)
