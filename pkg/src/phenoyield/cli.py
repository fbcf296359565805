"""Command-line entry point: ``phenoyield <command> [flags]``.

``gen-data`` writes the dataset directory; every other command writes into
``<out>/<command>/`` so that stages and reports sit side by side.  Each command
writes ``run.json`` (resolved config plus sha256 of each artifact) there.  Failures exit nonzero with a one-line JSON error on
stderr.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, write_schema
from .datagen import FormatError, GenConfig, fit_ols_oracle, generate_dataset, read_dataset
from .encoder import ConfigurationError
from .evalkit import (evaluate, per_crop_metrics, realtime_eval, robustness_eval, sensitivity_probe,
                      write_report)
from .trainer import (Checkpoint, TrainingDiverged, build_model, calendar_for, crop_selection, run_finetune,
                      run_pretrain)

log = logging.getLogger("phenoyield")

COMMANDS = ("gen-data", "pretrain", "finetune", "eval", "realtime", "robustness", "gradcheck")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_run_json(out: Path, command: str, cfg: RunConfig, artifacts: list[Path], extra: dict | None = None
                   ) -> Path:
    record = {
        "command": command,
        "config": cfg.to_dict(),
        "artifacts": {p.relative_to(out).as_posix() if p.is_relative_to(out) else str(p): sha256_file(p)
                      for p in sorted(artifacts)},
    }
    if extra:
        record.update(extra)
    path = out / "run.json"
    path.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (see config_schema.json)")
    common.add_argument("--seed", type=int, help="override config seed")
    common.add_argument("--out", help="output directory (overrides config 'out')")
    common.add_argument("--data", help="dataset directory (overrides config 'data')")
    common.add_argument("--crops", help="comma-separated crop names to keep")
    common.add_argument("--single-crop", help="train and evaluate one crop with a shared query")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="phenoyield", description="Crop yield pipeline on synthetic data.")
    sub = parser.add_subparsers(dest="command", required=True)
    gen = sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    gen.add_argument("--gen-config", help="JSON object of generator settings")
    sub.add_parser("pretrain", parents=[common], help="contrastive encoder pretraining")
    ft = sub.add_parser("finetune", parents=[common], help="decoder training on a frozen encoder")
    ft.add_argument("--ckpt", help="pretrain checkpoint (default <out>/pretrain/pretrain.pyck)")
    ft.add_argument("--from-scratch", action="store_true", help="use a random frozen encoder instead")
    for name, text in (("eval", "test metrics, OLS oracle and sensitivities"),
                       ("realtime", "metrics for growing-season prefixes"),
                       ("robustness", "stable vs volatile weather cohorts")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--ckpt", help="model checkpoint (default <out>/finetune/finetune.pyck)")
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    gc.add_argument("--instances", type=int, default=20)
    sub.add_parser("schema", parents=[common], help="write the config JSON schema")
    return parser


def resolve_config(args) -> RunConfig:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if args.data is not None:
        overrides["data"] = args.data
    if args.crops:
        overrides["crops"] = [c.strip() for c in args.crops.split(",") if c.strip()]
    if args.single_crop:
        overrides["single_crop"] = args.single_crop
    return load_config(args.config, overrides)


def _load_dataset(cfg: RunConfig):
    if not Path(cfg.data).is_dir():
        raise FileNotFoundError(f"dataset directory {cfg.data!r} does not exist (run gen-data first)")
    return read_dataset(cfg.data)


def _load_for_eval(cfg: RunConfig, args, out: Path):
    ds = _load_dataset(cfg)
    path = Path(args.ckpt) if args.ckpt else out.parent / "finetune" / "finetune.pyck"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {str(path)!r} not found")
    ckpt = Checkpoint.load(path)
    model = build_model(cfg, ds)
    if ckpt.stage == "pretrain":
        ckpt.restore_into(model, "encoder.")
        log.warning("evaluating a pretrain checkpoint: the decoder is untrained")
    else:
        ckpt.restore_into(model)
    return ds, model, path


def _test_idx(cfg: RunConfig, ds) -> np.ndarray:
    keep = set(crop_selection(cfg, ds))
    return np.array([i for i in ds.indices("test") if ds.records[i].crop_id in keep], dtype=int)


def cmd_gen_data(cfg: RunConfig, args, out: Path) -> list[Path]:
    raw = {}
    if args.gen_config:
        raw = json.loads(Path(args.gen_config).read_text(encoding="utf-8"))
    ds = generate_dataset(GenConfig.from_dict(raw), cfg.seed, out)
    log.info("wrote %d samples to %s", len(ds), out)
    return sorted(p for p in out.iterdir() if p.name != "run.json")


def cmd_pretrain(cfg, args, out) -> list[Path]:
    ds = _load_dataset(cfg)
    res = run_pretrain(cfg, ds, out)
    return [out / "pretrain.pyck", out / "train_log.jsonl"] if res.history else [out / "pretrain.pyck"]


def cmd_finetune(cfg, args, out) -> list[Path]:
    ds = _load_dataset(cfg)
    ckpt = None
    if not args.from_scratch:
        path = Path(args.ckpt) if args.ckpt else out.parent / "pretrain" / "pretrain.pyck"
        if not path.exists():
            raise ConfigurationError(f"no pretrain checkpoint at {str(path)!r}; pass --ckpt or --from-scratch")
        ckpt = Checkpoint.load(path)
    res = run_finetune(cfg, ds, ckpt, out, from_scratch=args.from_scratch)
    (out / "finetune_metrics.json").write_text(json.dumps(res.metrics, indent=1, sort_keys=True) + "\n",
                                               encoding="utf-8")
    return [out / "finetune.pyck", out / "train_log.jsonl", out / "finetune_metrics.json"]


def cmd_eval(cfg, args, out) -> list[Path]:
    ds, model, _ = _load_for_eval(cfg, args, out)
    idx = _test_idx(cfg, ds)
    cal = calendar_for(cfg, ds)
    _, metrics = evaluate(model, ds, idx, cal)
    oracle = fit_ols_oracle(ds)
    sections = {
        "test": metrics,
        "oracle": per_crop_metrics(ds, idx, oracle.predict(ds, idx)),
        "sensitivity": sensitivity_probe(model, ds, cal, cfg.probe_variable, cfg.probe_delta, idx),
    }
    for crop, m in metrics.items():
        print(f"{crop:14s} rmse={m.rmse:.4g} r2={m.r2 if m.r2 is None else round(m.r2, 4)} n={m.n}")
    return list(write_report(out, sections))


def cmd_realtime(cfg, args, out) -> list[Path]:
    ds, model, _ = _load_for_eval(cfg, args, out)
    curve = realtime_eval(model, ds, calendar_for(cfg, ds), _test_idx(cfg, ds))
    for crop, pts in curve.points.items():
        print(crop, " ".join(f"t{t}:{m.rmse:.3g}" for t, m in pts))
    return list(write_report(out, {"realtime": curve}))


def cmd_robustness(cfg, args, out) -> list[Path]:
    ds, model, _ = _load_for_eval(cfg, args, out)
    rob = robustness_eval(model, ds, calendar_for(cfg, ds), cfg.volatility_quantile, _test_idx(cfg, ds))
    for cohort, v in rob["pooled"].items():
        print(f"{cohort:9s} n={v['metrics'].n} rmse={v['metrics'].rmse:.4g} log_rmse={v['log_rmse']:.4f}")
    return list(write_report(out, {"robustness": rob}))


def cmd_gradcheck(cfg, args, out) -> list[Path]:
    from .gradsuite import full_suite

    reports = full_suite(cfg.seed, instances=args.instances)
    blob = {}
    for name, rep in reports.items():
        print(f"{name:28s} {rep.summary()}")
        blob[name] = {"passed": rep.passed, "max_error": rep.max_error, "worst": rep.worst,
                      "checked": rep.checked, "errors": rep.errors, "diagnostic": rep.diagnostic}
    path = out / "gradcheck.json"
    path.write_text(json.dumps(blob, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    failed = [k for k, r in reports.items() if not r.passed]
    if failed:
        raise GradientCheckFailed(f"{len(failed)} gradient checks failed: {', '.join(failed[:5])}")
    return [path]


class GradientCheckFailed(RuntimeError):
    pass


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "realtime": cmd_realtime,
    "robustness": cmd_robustness,
    "gradcheck": cmd_gradcheck,
}

EXIT_CODES = {FormatError: 5, ConfigError: 3, ConfigurationError: 3, FileNotFoundError: 4,
              TrainingDiverged: 6, GradientCheckFailed: 7}


def _thread_limit():
    raw = os.environ.get("PHENO_THREADS")
    if not raw:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"PHENO_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"PHENO_THREADS must be a positive integer, got {raw!r}")
    return threadpool_limits(limits=n)


def _fail(exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "schema":
            out = Path(args.out or ".")
            out.mkdir(parents=True, exist_ok=True)
            write_schema(out / "config_schema.json")
            return 0
        if args.command == "gen-data":
            out = Path(args.out or cfg.data)
        else:
            out = Path(cfg.out) / args.command
        out.mkdir(parents=True, exist_ok=True)
        with _thread_limit():
            artifacts = HANDLERS[args.command](cfg, args, out)
        write_run_json(out, args.command, cfg, [p for p in artifacts if p.exists()])
        return 0
    except (ValueError, KeyError, IndexError, OSError, RuntimeError) as exc:
        code = next((c for cls, c in EXIT_CODES.items() if isinstance(exc, cls)), 1)
        return _fail(exc, code)


if __name__ == "__main__":
    raise SystemExit(main())
