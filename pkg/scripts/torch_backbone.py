"""Pretrained penultimate-layer features served over the spurank backbone line protocol.

``--arch resnet50`` uses torchvision's ImageNet weights (2048-d pooled features);
``--arch deit_small`` uses facebook/deit-small-patch16-224 from transformers
(384-d CLS token).  Inputs arrive in [0, 1]; only channel normalisation is
applied here, so images should already be 224 x 224.
"""

import argparse
import json
import sys

import numpy as np
import torch

from spurank.features import decode_backbone_request

MEAN = np.array([0.485, 0.456, 0.406])
STD = np.array([0.229, 0.224, 0.225])


def load(arch):
    if arch == "resnet50":
        from torchvision.models import ResNet50_Weights, resnet50
        net = resnet50(weights=ResNet50_Weights.IMAGENET1K_V2)
        net.fc = torch.nn.Identity()
        return net.eval()
    if arch == "deit_small":
        from transformers import ViTModel
        net = ViTModel.from_pretrained("facebook/deit-small-patch16-224", add_pooling_layer=False)
        return lambda x: net(pixel_values=x).last_hidden_state[:, 0]
    raise SystemExit(f"unknown arch {arch}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--arch", default="resnet50", choices=["resnet50", "deit_small"])
    args = ap.parse_args()
    net = load(args.arch)
    torch.set_grad_enabled(False)

    for line in sys.stdin:
        if not line.strip():
            continue
        req = json.loads(line)
        resp = {"request_id": req.get("request_id")}
        try:
            img = np.asarray(decode_backbone_request(req), dtype=np.float64)
            x = torch.from_numpy(((img - MEAN) / STD).transpose(2, 0, 1)[None].astype(np.float32))
            if x.shape[-2:] != (224, 224):
                x = torch.nn.functional.interpolate(x, size=(224, 224), mode="bilinear",
                                                    align_corners=False)
            resp["embedding"] = net(x)[0].double().tolist()
        except Exception as exc:
            resp["error"] = f"{type(exc).__name__}: {exc}"
        sys.stdout.write(json.dumps(resp) + "\n")
        sys.stdout.flush()


if __name__ == "__main__":
    main()
