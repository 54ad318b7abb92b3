"""Per-class spuriosity rankings, training subsets and rank-stratified slices.

Naming follows the detector score: ``top`` is the k highest-scoring images of a
class (clearest object, least spurious), ``bot`` the k lowest-scoring.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Iterable

from ._io import keyed_rng, read_jsonl, write_jsonl
from .dataset import DatasetManifest

STRATEGIES = ("top", "mid", "bot", "rnd")


class RankingError(ValueError):
    pass


def rank_class(scores: Iterable[tuple[str, float]]) -> list[str]:
    """Image ids by descending score; ties go to the smaller image_id."""
    items = list(scores)
    if not items:
        raise RankingError("cannot rank an empty class")
    for iid, s in items:
        if not math.isfinite(s):
            raise RankingError(f"non-finite score {s} for {iid!r}")
    return [iid for iid, _ in sorted(items, key=lambda t: (-t[1], t[0]))]


@dataclass
class SpuriosityRanking:
    per_class: dict[int, list[str]]
    scores: dict[str, float]
    split: str = "train"

    def __post_init__(self):
        self.per_class = {c: list(v) for c, v in sorted(self.per_class.items())}
        self._rank = {iid: i + 1 for ids in self.per_class.values() for i, iid in enumerate(ids)}

    def rank(self, image_id: str) -> int:
        return self._rank[image_id]


def build_rankings(table, manifest: DatasetManifest, split: str) -> SpuriosityRanking:
    """Rank every image of ``split`` within its class using ``table`` (a ScoreTable)."""
    scores = table.scores() if hasattr(table, "scores") else dict(table)
    by_class: dict[int, list[tuple[str, float]]] = {}
    missing = []
    for rec in manifest.records:
        if rec.split != split:
            continue
        if rec.image_id not in scores:
            missing.append(rec.image_id)
            continue
        by_class.setdefault(rec.class_id, []).append((rec.image_id, scores[rec.image_id]))
    if missing:
        more = f" (+{len(missing) - 5} more)" if len(missing) > 5 else ""
        raise RankingError(f"no score for {split} images {missing[:5]}{more}")
    per_class = {c: rank_class(items) for c, items in by_class.items()}
    used = {iid: scores[iid] for ids in per_class.values() for iid in ids}
    return SpuriosityRanking(per_class, used, split)


@dataclass
class SubsetSpec:
    strategy: str
    k: int
    seed: int
    resolved: dict[int, list[str]] = field(default_factory=dict)

    def image_ids(self) -> list[str]:
        return sorted(iid for ids in self.resolved.values() for iid in ids)


def subset_window(n: int, k: int, strategy: str) -> range:
    """0-based rank positions for the deterministic strategies."""
    if strategy == "top":
        return range(0, k)
    if strategy == "bot":
        return range(n - k, n)
    if strategy == "mid":
        m = (n - k) // 2
        return range(m, m + k)
    raise ValueError(f"no fixed window for strategy {strategy!r}")


def select_subset(ranking: SpuriosityRanking, strategy: str, k: int, seed: int = 0) -> SubsetSpec:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if k < 1:
        raise ValueError("k must be >= 1")
    short = {c: len(ids) for c, ids in ranking.per_class.items() if len(ids) < k}
    if short:
        c = min(short)
        raise RankingError(f"class {c} has {short[c]} images, fewer than k={k}")
    resolved = {}
    for c, ids in ranking.per_class.items():
        n = len(ids)
        if strategy == "rnd":
            # seeded per class, so adding classes never changes existing draws
            picks = keyed_rng(seed, "rnd-subset", c).choice(n, size=k, replace=False)
            resolved[c] = [ids[i] for i in sorted(picks)]
        else:
            resolved[c] = [ids[i] for i in subset_window(n, k, strategy)]
    return SubsetSpec(strategy, k, seed, resolved)


def display_name(strategy: str, invert: bool = False) -> str:
    """Report label; ``invert`` flips top/bot to the rank-anchored convention."""
    if invert:
        return {"top": "bot", "bot": "top"}.get(strategy, strategy)
    return strategy


@dataclass
class EvalSlice:
    index: int  # 1-based rank i
    members: dict[int, str]  # class_id -> image_id at rank i
    skipped: list[int]  # classes with fewer than i images

    def image_ids(self) -> list[str]:
        return sorted(self.members.values())


def stratified_eval_sets(ranking: SpuriosityRanking, i_max: int | None = None) -> list[EvalSlice]:
    """Slice i holds the rank-i image of every class that has at least i images.

    ``i_max`` is capped at the largest class size, so every slice is nonempty.
    """
    largest = max((len(v) for v in ranking.per_class.values()), default=0)
    if i_max is None:
        i_max = largest
    if i_max < 1:
        raise ValueError("i_max must be >= 1")
    out = []
    for i in range(1, min(i_max, largest) + 1):
        members, skipped = {}, []
        for c, ids in ranking.per_class.items():
            if len(ids) >= i:
                members[c] = ids[i - 1]
            else:
                skipped.append(c)
        out.append(EvalSlice(i, members, skipped))
    return out


# --------------------------------------------------------------------------
# files

def write_ranking(ranking: SpuriosityRanking, path: str | os.PathLike) -> None:
    write_jsonl(path, ({"class_id": c, "image_id": iid, "rank": r + 1,
                        "score": ranking.scores[iid]}
                       for c, ids in ranking.per_class.items() for r, iid in enumerate(ids)))


def read_ranking(path: str | os.PathLike, split: str = "train") -> SpuriosityRanking:
    rows: dict[int, list[tuple[int, str]]] = {}
    scores = {}
    for _, obj in read_jsonl(path):
        rows.setdefault(int(obj["class_id"]), []).append((int(obj["rank"]), obj["image_id"]))
        scores[obj["image_id"]] = float(obj["score"])
    per_class = {}
    for c, items in rows.items():
        items.sort()
        if [r for r, _ in items] != list(range(1, len(items) + 1)):
            raise RankingError(f"{path}: ranks for class {c} are not 1..{len(items)}")
        per_class[c] = [iid for _, iid in items]
    return SpuriosityRanking(per_class, scores, split)


def write_subset(subset: SubsetSpec, path: str | os.PathLike) -> None:
    write_jsonl(path, ({"class_id": c, "image_id": iid}
                       for c, ids in subset.resolved.items() for iid in ids))


def read_subset(path: str | os.PathLike, strategy: str = "?", k: int | None = None,
                seed: int = 0) -> SubsetSpec:
    resolved: dict[int, list[str]] = {}
    for _, obj in read_jsonl(path):
        resolved.setdefault(int(obj["class_id"]), []).append(obj["image_id"])
    sizes = {len(v) for v in resolved.values()}
    if k is None:
        k = sizes.pop() if len(sizes) == 1 else 0
    return SubsetSpec(strategy, k, seed, dict(sorted(resolved.items())))
