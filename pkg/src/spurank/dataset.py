"""Dataset manifests and the synthetic spurious-background fixture.

A manifest is a JSONL file.  Line 1 is a header ``{"root": ..., "classes": {...}}``
and every following line is one image record.  ``root`` is resolved relative to
the directory holding the manifest file, so a fixture directory can be moved.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from ._io import dumps, keyed_rng, num_threads, read_jsonl, write_jsonl

SPLITS = ("train", "val", "ood")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    class_id: int
    class_name: str
    split: str
    path: str

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "class_id": self.class_id,
            "class_name": self.class_name,
            "split": self.split,
            "path": self.path,
        }


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    records: tuple[ImageRecord, ...]
    classes: dict[int, str]
    base_dir: Path = field(default=Path("."), compare=False)

    @property
    def root_dir(self) -> Path:
        root = Path(self.root)
        return root if root.is_absolute() else self.base_dir / root

    def path_of(self, record: ImageRecord) -> Path:
        return self.root_dir / record.path

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.image_id: r for r in self.records}

    def split(self, name: str) -> list[ImageRecord]:
        return [r for r in self.records if r.split == name]

    def header(self) -> dict:
        return {"root": self.root, "classes": {str(k): v for k, v in sorted(self.classes.items())}}


def make_manifest(root: str, records: Iterable[ImageRecord], classes: dict[int, str],
                  base_dir: str | os.PathLike = ".") -> DatasetManifest:
    """Build a manifest, sorting records by image_id and enforcing the invariants."""
    recs = tuple(sorted(records, key=lambda r: r.image_id))
    manifest = DatasetManifest(root=str(root), records=recs, classes=dict(classes),
                               base_dir=Path(base_dir))
    problems = [p for p in validate_manifest(manifest, check_files=False)]
    if problems:
        raise ManifestError(problems[0].message)
    return manifest


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(manifest.header()) + "\n")
        for rec in manifest.records:
            fh.write(dumps(rec.to_json()) + "\n")
    os.replace(tmp, path)


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    header = None
    records: list[ImageRecord] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed line ({exc.msg})") from None
            if header is None:
                if not isinstance(obj, dict) or "root" not in obj or "classes" not in obj:
                    raise ManifestError(f"{path}:{lineno}: header must carry 'root' and 'classes'")
                try:
                    classes = {int(k): str(v) for k, v in obj["classes"].items()}
                except (AttributeError, ValueError):
                    raise ManifestError(f"{path}:{lineno}: malformed class map") from None
                header = obj
                continue
            try:
                rec = ImageRecord(
                    image_id=str(obj["image_id"]),
                    class_id=int(obj["class_id"]),
                    class_name=str(obj["class_name"]),
                    split=str(obj["split"]),
                    path=str(obj["path"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: malformed record ({exc!r})") from None
            if rec.image_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate image_id {rec.image_id!r}")
            if rec.class_id not in classes:
                raise ManifestError(
                    f"{path}:{lineno}: class_id {rec.class_id} of {rec.image_id!r} not in class map")
            seen.add(rec.image_id)
            records.append(rec)
    if header is None:
        raise ManifestError(f"{path}: empty manifest (no header line)")
    return make_manifest(header["root"], records, classes, base_dir=path.parent)


@dataclass(frozen=True)
class Problem:
    kind: str  # duplicate-id | unknown-class | empty-name | bad-split | bad-path | missing-file | unreadable-file
    image_id: str
    message: str


def validate_manifest(manifest: DatasetManifest, check_files: bool = False) -> list[Problem]:
    """Every invariant violation as a list entry; an empty list means valid."""
    out: list[Problem] = []
    seen: set[str] = set()
    for rec in manifest.records:
        rid = rec.image_id
        if rid in seen:
            out.append(Problem("duplicate-id", rid, f"duplicate image_id {rid!r}"))
        seen.add(rid)
        if rec.class_id not in manifest.classes:
            out.append(Problem("unknown-class", rid,
                               f"class_id {rec.class_id} of {rid!r} not in class map"))
        if not rec.class_name:
            out.append(Problem("empty-name", rid, f"empty class_name for {rid!r}"))
        if rec.split not in SPLITS:
            out.append(Problem("bad-split", rid, f"split {rec.split!r} of {rid!r} not in {SPLITS}"))
        p = Path(rec.path)
        if p.is_absolute() or ".." in p.parts:
            out.append(Problem("bad-path", rid, f"path {rec.path!r} escapes the manifest root"))
            continue
        if check_files:
            full = manifest.path_of(rec)
            if not full.is_file():
                out.append(Problem("missing-file", rid, f"missing file {full}"))
            elif not os.access(full, os.R_OK):
                out.append(Problem("unreadable-file", rid, f"unreadable file {full}"))
    return out


def load_image(path: str | os.PathLike) -> np.ndarray:
    """H x W x 3 float32 in [0, 1]."""
    with Image.open(path) as im:
        im.load()
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / np.float32(255.0)


# --------------------------------------------------------------------------
# synthetic fixture

GLYPH_GRID = 8
GLYPH_SIZE = 32
TEXTURE_STD = 0.06
INK = np.zeros(3)
_PALETTE_LEVELS = (64, 128, 192, 255)


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int = 10
    per_class: int = 300
    image_size: tuple[int, int] = (64, 64)
    p_spur_train: float = 0.9
    p_spur_val: float = 0.5
    seed: int = 0
    val_per_class: int = 50
    ood_per_class: int = 50
    p_spur_ood: float = 0.0

    def __post_init__(self):
        for name in ("p_spur_train", "p_spur_val", "p_spur_ood"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")
        if self.val_per_class < 0 or self.ood_per_class < 0:
            raise ValueError("val_per_class and ood_per_class must be >= 0")
        if not 2 <= self.num_classes <= len(_PALETTE_LEVELS) ** 3:
            raise ValueError(f"num_classes must lie in [2, {len(_PALETTE_LEVELS) ** 3}]")
        h, w = self.image_size
        if h < GLYPH_SIZE or w < GLYPH_SIZE:
            raise ValueError(f"image_size must be at least {GLYPH_SIZE}x{GLYPH_SIZE}")


@dataclass(frozen=True)
class SyntheticGroundTruth:
    image_id: str
    occlusion: float
    bg_correlated: bool
    fg_box: tuple[int, int, int, int]  # x_min, y_min, x_max, y_max (half-open)
    bg_class: int

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "occlusion": self.occlusion,
                "bg_correlated": self.bg_correlated, "fg_box": list(self.fg_box),
                "bg_class": self.bg_class}

    @classmethod
    def from_json(cls, obj: dict) -> "SyntheticGroundTruth":
        return cls(obj["image_id"], float(obj["occlusion"]), bool(obj["bg_correlated"]),
                   tuple(int(v) for v in obj["fg_box"]), int(obj["bg_class"]))


def class_palette(num_classes: int) -> np.ndarray:
    """num_classes x 3 RGB colours in [0, 1], pairwise >= 63/255 apart in some channel."""
    levels = np.array(_PALETTE_LEVELS, dtype=np.float64) / 255.0
    grid = np.array(np.meshgrid(levels, levels, levels, indexing="ij")).reshape(3, -1).T
    order = keyed_rng(0, "palette").permutation(len(grid))
    return grid[order[:num_classes]]


def class_glyph(class_id: int) -> np.ndarray:
    """Deterministic GLYPH_GRID x GLYPH_GRID boolean bitmap for a class."""
    rng = keyed_rng(0, "glyph", int(class_id))
    while True:
        g = rng.random((GLYPH_GRID, GLYPH_GRID)) < 0.5
        if 0.3 <= g.mean() <= 0.7:
            return g


def class_name_for(class_id: int) -> str:
    return f"glyph-{class_id:02d}"


def synthetic_image_id(class_id: int, split: str, index: int) -> str:
    return f"{split}-c{class_id:03d}-{index:05d}"


def render_background(config: SyntheticConfig, class_id: int, split: str, image_id: str,
                      ) -> tuple[np.ndarray, bool, int]:
    """Textured background in [0, 1]; depends only on (seed, image_id, palette choice)."""
    h, w = config.image_size
    p_spur = {"train": config.p_spur_train, "val": config.p_spur_val,
              "ood": config.p_spur_ood}[split]
    rng = keyed_rng(config.seed, "background", image_id)
    correlated = bool(rng.random() < p_spur)
    if correlated:
        bg_class = class_id
    else:
        others = [c for c in range(config.num_classes) if c != class_id]
        bg_class = int(others[rng.integers(len(others))])
    colour = class_palette(config.num_classes)[bg_class]
    bg = np.clip(colour[None, None, :] + rng.normal(0.0, TEXTURE_STD, size=(h, w, 3)), 0.0, 1.0)
    return bg, correlated, bg_class


def glyph_box(image_size: tuple[int, int]) -> tuple[int, int, int, int]:
    # fixed, centred placement: the mock backbone's random projection cannot
    # recognise a translated glyph linearly
    h, w = image_size
    y0, x0 = (h - GLYPH_SIZE) // 2, (w - GLYPH_SIZE) // 2
    return (x0, y0, x0 + GLYPH_SIZE, y0 + GLYPH_SIZE)


def blend_glyph(bg: np.ndarray, class_id: int, occlusion: float,
                box: tuple[int, int, int, int]) -> np.ndarray:
    """Draw the class glyph into ``box``, alpha-blended toward the background by ``occlusion``."""
    x0, y0, x1, y1 = box
    cell = GLYPH_SIZE // GLYPH_GRID
    ink_mask = np.kron(class_glyph(class_id), np.ones((cell, cell), dtype=bool))
    img = bg.copy()
    region = img[y0:y1, x0:x1]
    blended = (1.0 - occlusion) * INK[None, None, :] + occlusion * region
    region[ink_mask] = blended[ink_mask]
    return img


def render_synthetic(config: SyntheticConfig, class_id: int, split: str, index: int,
                     ) -> tuple[str, np.ndarray, SyntheticGroundTruth]:
    """Render one image as uint8 H x W x 3 together with its ground truth."""
    image_id = synthetic_image_id(class_id, split, index)
    bg, correlated, bg_class = render_background(config, class_id, split, image_id)
    # separate stream, so the occlusion draw never shifts the background
    occlusion = float(keyed_rng(config.seed, "foreground", image_id).random())
    box = glyph_box(config.image_size)
    pixels = np.rint(blend_glyph(bg, class_id, occlusion, box) * 255.0).astype(np.uint8)
    return image_id, pixels, SyntheticGroundTruth(image_id, occlusion, correlated, box, bg_class)


def generate_synthetic(config: SyntheticConfig, root: str | os.PathLike,
                       ) -> tuple[DatasetManifest, list[SyntheticGroundTruth]]:
    """Render the fixture under ``root``; writes manifest.jsonl and ground_truth.jsonl there."""
    root = Path(root)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create fixture root {root}: {exc}") from exc
    if not os.access(root, os.W_OK):
        raise PermissionError(f"fixture root {root} is not writable")

    jobs = []
    counts = {"train": config.per_class, "val": config.val_per_class, "ood": config.ood_per_class}
    for split, n in counts.items():
        for c in range(config.num_classes):
            for i in range(n):
                jobs.append((c, split, i))

    def work(job):
        c, split, i = job
        image_id, pixels, gt = render_synthetic(config, c, split, i)
        rel = f"images/{image_id}.png"
        Image.fromarray(pixels).save(root / rel, format="PNG", optimize=False)
        return ImageRecord(image_id, c, class_name_for(c), split, rel), gt

    threads = num_threads()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]

    classes = {c: class_name_for(c) for c in range(config.num_classes)}
    manifest = make_manifest(".", [r for r, _ in results], classes, base_dir=root)
    truth = sorted((g for _, g in results), key=lambda g: g.image_id)
    write_manifest(manifest, root / "manifest.jsonl")
    write_ground_truth(truth, root / "ground_truth.jsonl")
    return manifest, truth


def write_ground_truth(truth: Iterable[SyntheticGroundTruth], path: str | os.PathLike) -> None:
    write_jsonl(path, (g.to_json() for g in truth))


def load_ground_truth(path: str | os.PathLike) -> dict[str, SyntheticGroundTruth]:
    return {obj["image_id"]: SyntheticGroundTruth.from_json(obj) for _, obj in read_jsonl(path)}
