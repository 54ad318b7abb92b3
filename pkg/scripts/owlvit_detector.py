"""OWL-ViT served over the spurank detector line protocol (stdin -> stdout).

Needs ``torch`` and ``transformers`` plus the model weights.
"""

import argparse
import json
import sys

import torch
from PIL import Image
from transformers import OwlViTForObjectDetection, OwlViTProcessor


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", default="google/owlvit-base-patch32")
    ap.add_argument("--threshold", type=float, default=0.01)
    ap.add_argument("--max-boxes", type=int, default=20)
    args = ap.parse_args()

    processor = OwlViTProcessor.from_pretrained(args.model)
    model = OwlViTForObjectDetection.from_pretrained(args.model).eval()
    torch.set_grad_enabled(False)

    for line in sys.stdin:
        if not line.strip():
            continue
        req = json.loads(line)
        resp = {"request_id": req.get("request_id")}
        try:
            with Image.open(req["image_path"]) as im:
                image = im.convert("RGB")
            inputs = processor(text=[req["queries"]], images=image, return_tensors="pt")
            outputs = model(**inputs)
            w, h = image.size
            det = processor.post_process_object_detection(
                outputs, threshold=args.threshold, target_sizes=torch.tensor([[h, w]]))[0]
            boxes = []
            for box, score, label in zip(det["boxes"].tolist(), det["scores"].tolist(),
                                         det["labels"].tolist()):
                x0, y0 = max(0.0, box[0]), max(0.0, box[1])
                x1, y1 = min(float(w), box[2]), min(float(h), box[3])
                if x1 > x0 and y1 > y0:
                    boxes.append({"x_min": x0, "y_min": y0, "x_max": x1, "y_max": y1,
                                  "score": min(1.0, max(0.0, score)), "query_index": int(label)})
            boxes.sort(key=lambda b: -b["score"])
            resp["boxes"] = boxes[: args.max_boxes]
        except Exception as exc:
            resp["error"] = f"{type(exc).__name__}: {exc}"
        sys.stdout.write(json.dumps(resp) + "\n")
        sys.stdout.flush()


if __name__ == "__main__":
    main()
