"""Compare the full decoder with the plain-attention, shared-query variant.

Both fine-tunes start from the same pretrained encoder, so only the decoder
differs.  Run after scripts/run_desk_pipeline.py:

    python scripts/ablation.py [--root runs/desk]
"""
import argparse
import json
from pathlib import Path

import numpy as np

from phenoyield.pipeline import run_pipeline

VARIANTS = {
    "no_bank": {"model": {"use_bank": False}},
    "no_cpa": {"model": {"use_cpa": False}},
    "no_bank_no_cpa": {"model": {"use_bank": False, "use_cpa": False}},
}


def mean_rmse(runs: Path) -> tuple[float, dict]:
    test = json.loads((runs / "eval" / "report.json").read_text())["test"]
    return float(np.mean([m["rmse"] for m in test.values()])), {c: round(m["rmse"], 3) for c, m in test.items()}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", default="runs/desk")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    root = Path(args.root)
    base = json.loads((root / "config.json").read_text())
    ckpt = root / "runs" / "pretrain" / "pretrain.pyck"
    if not ckpt.exists():
        raise SystemExit(f"{ckpt} not found; run scripts/run_desk_pipeline.py first")

    rows = {"full": mean_rmse(root / "runs")}
    for name, override in VARIANTS.items():
        cfg = {k: v for k, v in base.items() if k not in ("out", "data")}
        cfg["model"] = {**cfg.get("model", {}), **override["model"]}
        runs = run_pipeline(root / "ablation" / name, config=cfg, seed=args.seed, data=base["data"],
                            stages=("finetune", "eval"), pretrain_ckpt=ckpt)
        rows[name] = mean_rmse(runs)
    for name, (mean, per_crop) in rows.items():
        print(f"{name:16s} mean rmse {mean:8.3f}  {per_crop}")


if __name__ == "__main__":
    main()
