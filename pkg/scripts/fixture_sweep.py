"""Run the full pipeline on the synthetic fixture for several seeds and tabulate the results.

    python scripts/fixture_sweep.py --out runs/sweep --seeds 0 1 2 --k 50 100 200
"""

import argparse
import json
from pathlib import Path

import numpy as np

from spurank.pipeline import config_from_dict, run_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--k", type=int, nargs="+", default=[100])
    ap.add_argument("--strategies", nargs="+", default=["top", "mid", "bot", "rnd"])
    ap.add_argument("--no-noise", action="store_true", help="skip the noise sweep (faster)")
    args = ap.parse_args()

    rows = []
    for seed in args.seeds:
        out = Path(args.out) / f"seed{seed}"
        cfg = config_from_dict({
            "output_dir": str(out), "synthetic": {"seed": seed}, "seed": seed,
            "strategies": args.strategies, "k_values": args.k,
            "eval": {"noise": not args.no_noise},
        })
        report = run_pipeline(cfg)
        for r in report.results:
            acc = [s["accuracy"] for s in r["stratified"]["slices"]]
            row = {"seed": seed, "label": r["label"], "k": r["k"],
                   "mean": r["stratified"]["mean"], "low10": float(np.mean(acc[:10])),
                   "spread": max(acc) - min(acc),
                   "ood": r["ood"]["restricted_accuracy"] if r["ood"] else None}
            if r["noise"]:
                top_alpha = max(n["alpha"] for n in r["noise"]["rows"])
                for n in r["noise"]["rows"]:
                    if n["alpha"] == top_alpha:
                        row[f"{n['region']}@{top_alpha:g}"] = n["accuracy"]
            rows.append(row)

    keys = list(rows[0])
    print("\t".join(keys))
    for row in rows:
        print("\t".join(f"{row.get(k):.3f}" if isinstance(row.get(k), float) else str(row.get(k))
                        for k in keys))
    (Path(args.out) / "sweep.json").write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
