"""Build a spurank manifest for a 10-class ImageNet subsample.

Expects ``<imagenet>/train/<wnid>/*.JPEG`` and ``<imagenet>/val/<wnid>/*.JPEG``
(validation images sorted into class folders).  Every image is resized so the
short side is 256, centre-cropped to 224 and written as PNG, so noise injected
by the pipeline lands on the exact pixels the backbone sees.  ``--ood`` points
at an ImageNet-A style folder of ``<wnid>/`` directories; those that match a
chosen class become the ``ood`` split and ``ood_mapping.txt``.
"""

import argparse
import random
from pathlib import Path

from PIL import Image

from spurank.dataset import ImageRecord, make_manifest, write_manifest

# the ten Imagenette classes
DEFAULT_CLASSES = {
    "n01440764": "tench", "n02102040": "English springer", "n02979186": "cassette player",
    "n03000684": "chain saw", "n03028079": "church", "n03394916": "French horn",
    "n03417042": "garbage truck", "n03425413": "gas pump", "n03445777": "golf ball",
    "n03888605": "parachute",
}


def crop224(src: Path, dst: Path) -> None:
    with Image.open(src) as im:
        im = im.convert("RGB")
        w, h = im.size
        s = 256 / min(w, h)
        im = im.resize((max(256, round(w * s)), max(256, round(h * s))), Image.BICUBIC)
        w, h = im.size
        left, top = (w - 224) // 2, (h - 224) // 2
        im.crop((left, top, left + 224, top + 224)).save(dst, format="PNG")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--imagenet", required=True, type=Path)
    ap.add_argument("--out", required=True, type=Path)
    ap.add_argument("--ood", type=Path, default=None)
    ap.add_argument("--train-per-class", type=int, default=600)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    classes = {i: name for i, name in enumerate(DEFAULT_CLASSES.values())}
    (args.out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    sources = [("train", args.imagenet / "train"), ("val", args.imagenet / "val")]
    if args.ood:
        sources.append(("ood", args.ood))
    for split, root in sources:
        for cid, wnid in enumerate(DEFAULT_CLASSES):
            folder = root / wnid
            if not folder.is_dir():
                continue
            files = sorted(p for p in folder.iterdir() if p.is_file())
            if split == "train" and len(files) > args.train_per_class:
                files = sorted(rng.sample(files, args.train_per_class))
            for src in files:
                image_id = f"{split}-{wnid}-{src.stem}"
                rel = f"images/{image_id}.png"
                crop224(src, args.out / rel)
                records.append(ImageRecord(image_id, cid, classes[cid], split, rel))
    write_manifest(make_manifest(".", records, classes), args.out / "manifest.jsonl")
    present = sorted({r.class_id for r in records if r.split == "ood"})
    with open(args.out / "ood_mapping.txt", "w", encoding="utf-8") as fh:
        fh.write("# <ood class name> <base class_id>\n")
        for cid in present:
            fh.write(f"{classes[cid]} {cid}\n")
    print(f"{len(records)} images, {len(present)} OOD classes -> {args.out}")


if __name__ == "__main__":
    main()
