"""End-to-end runs through the command-line entry point."""
from __future__ import annotations

import json
from pathlib import Path

from .cli import main

STAGES = ("pretrain", "finetune", "eval", "realtime", "robustness")


class StageFailed(RuntimeError):
    pass


def _run(argv: list[str]) -> None:
    code = main(argv)
    if code != 0:
        raise StageFailed(f"`phenoyield {' '.join(argv)}` exited with {code}")


def run_pipeline(root: str | Path, config: dict | None = None, seed: int = 0, gen_config: dict | None = None,
                 data: str | Path | None = None, stages=STAGES, pretrain_ckpt: str | Path | None = None) -> Path:
    """Generate data (unless ``data`` is given) and run ``stages`` under ``root``.

    ``pretrain_ckpt`` makes fine-tuning start from an existing encoder checkpoint.

    Writes ``root/config.json``; stage outputs land in ``root/runs/<stage>/``.
    Returns the runs directory.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cfg = dict(config or {})
    cfg["out"] = str(root / "runs")
    if data is None:
        cfg["data"] = str(root / "data")
        gen_path = root / "gen.json"
        gen_path.write_text(json.dumps(gen_config or {}, sort_keys=True), encoding="utf-8")
    else:
        cfg["data"] = str(data)
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(cfg, indent=1, sort_keys=True), encoding="utf-8")
    common = ["--config", str(cfg_path), "--seed", str(seed)]
    if data is None:
        _run(["gen-data", *common, "--gen-config", str(gen_path)])
    for stage in stages:
        extra = ["--ckpt", str(pretrain_ckpt)] if stage == "finetune" and pretrain_ckpt else []
        _run([stage, *common, *extra])
    return root / "runs"


def artifact_hashes(runs: str | Path) -> dict[str, str]:
    """sha256 of every recorded artifact, keyed by ``<stage>/<file>``."""
    out = {}
    for record in sorted(Path(runs).glob("*/run.json")):
        stage = record.parent.name
        for name, digest in json.loads(record.read_text(encoding="utf-8"))["artifacts"].items():
            out[f"{stage}/{name}"] = digest
    return out
