"""Metrics and evaluation protocols: standard, real-time prefixes, weather
volatility cohorts and per-crop temperature sensitivity."""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .datagen import PRECIP, TEMP, Dataset
from .decoder import growing_season_mask
from .model import PhenoYieldNet

log = logging.getLogger(__name__)

REPORT_VERSION = 1


@dataclass(frozen=True)
class MetricTriple:
    rmse: float
    r2: float | None
    corr: float | None
    n: int


def compute_metrics(predictions, targets) -> MetricTriple:
    """RMSE, R^2 = 1 - SSE/SST and Pearson correlation.

    R^2 and correlation are ``None`` when the targets are constant; correlation
    is also ``None`` for constant predictions.
    """
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 1:
        raise ValueError(f"need equal-length 1-d arrays, got {p.shape} and {y.shape}")
    if len(y) < 2:
        raise ValueError("need at least two samples")
    err = p - y
    rmse = math.sqrt(float(np.mean(err * err)))
    yc = y - y.mean()
    sst = float(yc @ yc)
    if sst == 0.0:
        return MetricTriple(rmse, None, None, len(y))
    r2 = 1.0 - float(err @ err) / sst
    pc = p - p.mean()
    spp = float(pc @ pc)
    corr = None if spp == 0.0 else float(np.clip((pc @ yc) / math.sqrt(spp * sst), -1.0, 1.0))
    return MetricTriple(rmse, r2, corr, len(y))


def per_crop_metrics(dataset: Dataset, idx, predictions) -> dict[str, MetricTriple]:
    idx = np.asarray(idx)
    crops = dataset.crop_ids(idx)
    y = dataset.yields(idx)
    out = {}
    for spec in dataset.crops:
        sel = crops == spec.crop_id
        if sel.sum() >= 2:
            out[spec.name] = compute_metrics(predictions[sel], y[sel])
    return out


def evaluate(model: PhenoYieldNet, dataset: Dataset, idx, calendar, latent: np.ndarray | None = None
             ) -> tuple[np.ndarray, dict[str, MetricTriple]]:
    """Predictions for ``idx`` under the growing-season mask and their per-crop metrics."""
    idx = np.asarray(idx)
    Z = latent[idx] if latent is not None else model.encode(dataset.sits[idx], dataset.mts[idx])
    pred = model.predict_from_latent(Z, dataset.crop_ids(idx), calendar)
    return pred, per_crop_metrics(dataset, idx, pred)


# -- real-time prefixes ------------------------------------------------------------------------
@dataclass
class RealtimeCurve:
    points: dict[str, list[tuple[int, MetricTriple]]]

    def rmse_at(self, crop: str, t: int) -> float:
        for tt, m in self.points[crop]:
            if tt == t:
                return m.rmse
        raise KeyError(f"no point at t={t} for {crop}")


def realtime_eval(model: PhenoYieldNet, dataset: Dataset, calendar, idx=None) -> RealtimeCurve:
    """Metrics per crop when only observations up to t are available, t = sos..eos.

    Inputs at timesteps in (t, eos] are zeroed in both modalities before
    encoding (the same zeroing used for contrastive views) and attention is
    restricted to [sos, t].  At t = eos nothing changes, so the last point
    equals the standard evaluation exactly.
    """
    idx = dataset.indices("test") if idx is None else np.asarray(idx)
    crops = dataset.crop_ids(idx)
    T = dataset.manifest.dims["T"]
    points: dict[str, list[tuple[int, MetricTriple]]] = {}
    for spec in dataset.crops:
        sel = idx[crops == spec.crop_id]
        if len(sel) < 2:
            continue
        sos, eos = calendar[spec.crop_id]
        y = dataset.yields(sel)
        ids = dataset.crop_ids(sel)
        curve = []
        for t in range(sos, eos + 1):
            sits = dataset.sits[sel].copy()
            mts = dataset.mts[sel].copy()
            sits[:, t + 1: eos + 1] = 0
            mts[:, t + 1: eos + 1] = 0
            Z = model.encode(sits, mts)
            mask = growing_season_mask(T, ids, {spec.crop_id: (sos, t)})
            pred = model.predict_from_latent(Z, ids, calendar, mask=mask)
            curve.append((t, compute_metrics(pred, y)))
        points[spec.name] = curve
    return RealtimeCurve(points)


# -- stable vs volatile weather ------------------------------------------------------------------
def weather_cv(dataset: Dataset, idx=None, eps: float = 1e-6) -> np.ndarray:
    """Per-sample coefficient of variation of the weather, averaged over variables.

    Computed over the sample crop's growing season; variables whose mean is
    within ``eps`` of zero are left out of the average.
    """
    idx = np.arange(len(dataset)) if idx is None else np.asarray(idx)
    out = np.empty(len(idx))
    for row, i in enumerate(idx):
        spec = dataset.crops[dataset.records[i].crop_id]
        block = dataset.mts[i, spec.window()].astype(np.float64)
        flat = block.reshape(-1, block.shape[-1])
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        ok = np.abs(mean) > eps
        if not ok.all():
            warnings.warn(f"sample {dataset.records[i].sample_id}: variables {np.flatnonzero(~ok).tolist()} "
                          "have near-zero mean and are excluded from the CV", RuntimeWarning, stacklevel=2)
        out[row] = float(np.mean(std[ok] / np.abs(mean[ok]))) if ok.any() else 0.0
    return out


def volatility_split(dataset: Dataset, quantile: float = 0.7, idx=None) -> tuple[list[str], list[str]]:
    """Bottom ``quantile`` of weather CV is the stable cohort, the rest volatile.

    Ties are broken by sample id; the stable cohort has floor(quantile * N) members.
    """
    if not 0 < quantile < 1:
        raise ValueError("quantile must lie in (0, 1)")
    idx = np.arange(len(dataset)) if idx is None else np.asarray(idx)
    cv = weather_cv(dataset, idx)
    ids = dataset.sample_ids(idx)
    order = sorted(range(len(idx)), key=lambda k: (cv[k], ids[k]))
    n_stable = int(math.floor(quantile * len(idx)))
    stable = [ids[k] for k in order[:n_stable]]
    volatile = [ids[k] for k in order[n_stable:]]
    return stable, volatile


def robustness_eval(model: PhenoYieldNet, dataset: Dataset, calendar, quantile: float = 0.7, idx=None,
                    latent: np.ndarray | None = None) -> dict:
    """Cohort metrics; cohorts are formed within each crop, then pooled.

    Ranking inside each crop keeps the cohorts' crop mix equal, since the CV
    depends strongly on where in the year a crop's season falls.  Pooled errors
    are also reported relative to the target (log-ratio RMSE) so crops with
    different yield scales are comparable.
    """
    idx = dataset.indices("test") if idx is None else np.asarray(idx)
    pred, _ = evaluate(model, dataset, idx, calendar, latent)
    by_id = dict(zip(dataset.sample_ids(idx), range(len(idx))))
    y = dataset.yields(idx)
    per_crop: dict[str, dict[str, MetricTriple]] = {}
    cohorts = {"stable": [], "volatile": []}
    crops = dataset.crop_ids(idx)
    for spec in dataset.crops:
        sel = idx[crops == spec.crop_id]
        if len(sel) < 4:
            continue
        stable, volatile = volatility_split(dataset, quantile, sel)
        cohorts["stable"] += stable
        cohorts["volatile"] += volatile
        per_crop[spec.name] = {
            name: compute_metrics(pred[[by_id[s] for s in members]], y[[by_id[s] for s in members]])
            for name, members in (("stable", stable), ("volatile", volatile))
        }
    if not cohorts["stable"] or not cohorts["volatile"]:
        raise ValueError("robustness evaluation needs at least 4 test samples of some crop")
    pooled = {}
    for name, members in cohorts.items():
        rows = [by_id[s] for s in members]
        logerr = np.log(pred[rows]) - np.log(y[rows])
        pooled[name] = {"metrics": compute_metrics(pred[rows], y[rows]),
                        "log_rmse": float(np.sqrt(np.mean(logerr**2))), "ids": members}
    return {"per_crop": per_crop, "pooled": pooled, "quantile": quantile}


# -- crop response probing ------------------------------------------------------------------------
def sensitivity_probe(model: PhenoYieldNet, dataset: Dataset, calendar, variable: int = TEMP,
                      delta: float = 1.0, idx=None, raw: bool = False) -> dict[str, float]:
    """Mean finite-difference response of predicted yield to a weather shift.

    Every daily record of ``variable`` is shifted by ``delta`` (for
    precipitation the shift is multiplicative, exp(delta), to keep it positive).
    Returns mean (yhat_shifted - yhat) / delta per crop, or the undivided mean
    change when ``raw`` is set.
    """
    if delta == 0:
        raise ValueError("delta must be nonzero")
    idx = dataset.indices("test") if idx is None else np.asarray(idx)
    sits, mts = dataset.sits[idx], dataset.mts[idx]
    shifted = mts.astype(np.float64).copy()
    if variable == PRECIP:
        shifted[..., variable] *= math.exp(delta)
    else:
        shifted[..., variable] += delta
    crops = dataset.crop_ids(idx)
    base = model.predict(sits, mts, crops, calendar)
    moved = model.predict(sits, shifted.astype(np.float32), crops, calendar)
    change = moved - base
    out = {}
    for spec in dataset.crops:
        sel = crops == spec.crop_id
        if sel.any():
            value = float(change[sel].mean())
            out[spec.name] = value if raw else value / delta
    return out


# -- reports -------------------------------------------------------------------------------------
def _triple_dict(m: MetricTriple | None) -> dict | None:
    return None if m is None else asdict(m)


def write_report(out_dir: str | Path, sections: dict) -> tuple[Path, Path]:
    """Write ``report.json`` (full structure) and ``report.csv``.

    CSV columns: section, crop, cohort, t, metric, value.  One row per
    crop x cohort x metric; real-time rows carry the prefix end ``t``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[tuple] = []
    blob: dict = {"report_version": REPORT_VERSION}

    if "test" in sections:
        blob["test"] = {c: _triple_dict(m) for c, m in sections["test"].items()}
        for crop, m in sections["test"].items():
            rows += [("test", crop, "all", "", k, v) for k, v in asdict(m).items()]
    if "oracle" in sections:
        blob["oracle"] = {c: _triple_dict(m) for c, m in sections["oracle"].items()}
        for crop, m in sections["oracle"].items():
            rows += [("ols_oracle", crop, "all", "", k, v) for k, v in asdict(m).items()]
    if "realtime" in sections:
        curve: RealtimeCurve = sections["realtime"]
        blob["realtime"] = {c: [{"t": t, **asdict(m)} for t, m in pts] for c, pts in curve.points.items()}
        for crop, pts in curve.points.items():
            for t, m in pts:
                rows += [("realtime", crop, "all", t, k, v) for k, v in asdict(m).items()]
    if "robustness" in sections:
        rob = sections["robustness"]
        blob["robustness"] = {
            "quantile": rob["quantile"],
            "per_crop": {c: {k: _triple_dict(m) for k, m in d.items()} for c, d in rob["per_crop"].items()},
            "pooled": {k: {"metrics": _triple_dict(v["metrics"]), "log_rmse": v["log_rmse"],
                           "ids": v["ids"]} for k, v in rob["pooled"].items()},
        }
        for crop, d in rob["per_crop"].items():
            for cohort, m in d.items():
                rows += [("robustness", crop, cohort, "", k, v) for k, v in asdict(m).items()]
        for cohort, v in rob["pooled"].items():
            rows += [("robustness", "pooled", cohort, "", k, val) for k, val in asdict(v["metrics"]).items()]
            rows.append(("robustness", "pooled", cohort, "", "log_rmse", v["log_rmse"]))
    if "sensitivity" in sections:
        blob["sensitivity"] = sections["sensitivity"]
        for crop, v in sections["sensitivity"].items():
            rows.append(("sensitivity", crop, "all", "", "dyield_dvar", v))
    for key in ("extra",):
        if key in sections:
            blob[key] = sections[key]

    json_path, csv_path = out / "report.json", out / "report.csv"
    json_path.write_text(json.dumps(blob, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["section", "crop", "cohort", "t", "metric", "value"])
        for r in rows:
            w.writerow([("" if x is None else (repr(x) if isinstance(x, float) else x)) for x in r])
    return json_path, csv_path
