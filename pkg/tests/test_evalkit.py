import csv
import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from phenoyield.datagen import TEMP
from phenoyield.evalkit import (MetricTriple, compute_metrics, evaluate, realtime_eval, robustness_eval,
                                sensitivity_probe, volatility_split, weather_cv, write_report)
from phenoyield.trainer import calendar_for, run_finetune, run_pretrain

from conftest import small_config

# a millesimal grid keeps squared errors clear of float underflow
values = st.integers(-10**6, 10**6).map(lambda v: v / 1000)


# -- metrics -----------------------------------------------------------------------------------------
def test_metric_reference_values():
    m = compute_metrics([2.0, 2.0], [0.0, 2.0])
    assert abs(m.rmse - math.sqrt(2)) < 1e-15
    assert abs(m.rmse - 1.41421) < 1e-5
    y = np.array([1.0, 4.0, 2.5, 7.0])
    assert compute_metrics(y, y) == MetricTriple(0.0, 1.0, 1.0, 4)
    assert abs(compute_metrics(np.full(4, y.mean()), y).r2) < 1e-15


def test_constant_targets_give_null_r2_and_corr():
    m = compute_metrics([1.0, 2.0, 3.0], [5.0, 5.0, 5.0])
    assert m.r2 is None and m.corr is None
    assert m.rmse == pytest.approx(math.sqrt((16 + 9 + 4) / 3))


def test_metric_argument_errors():
    with pytest.raises(ValueError):
        compute_metrics([1.0], [1.0])
    with pytest.raises(ValueError):
        compute_metrics([1.0, 2.0], [1.0, 2.0, 3.0])


@settings(max_examples=50)
@given(arrays(np.float64, 8, elements=values), arrays(np.float64, 8, elements=values), st.permutations(range(8)))
def test_metrics_permutation_invariant_and_bounded(p, y, perm):
    a = compute_metrics(p, y)
    b = compute_metrics(p[list(perm)], y[list(perm)])
    assert abs(a.rmse - b.rmse) < 1e-9 * max(1.0, a.rmse)
    assert (a.rmse == 0) == np.array_equal(p, y)
    if a.r2 is not None:
        assert a.r2 <= 1.0
        assert abs(a.r2 - b.r2) < 1e-9 * max(1.0, abs(a.r2))
    if a.corr is not None:
        assert a.corr**2 <= 1.0


# -- volatility cohorts ---------------------------------------------------------------------------
def test_ten_samples_split_seven_three(small_ds):
    idx = np.arange(10)
    stable, volatile = volatility_split(small_ds, 0.7, idx)
    assert (len(stable), len(volatile)) == (7, 3)
    assert set(stable) | set(volatile) == set(small_ds.sample_ids(idx))
    assert not set(stable) & set(volatile)


def test_identical_weather_ties_broken_by_id(small_ds):
    idx = small_ds.indices(crop_id=1)
    mts = small_ds.mts.copy()
    mts[idx] = mts[idx[0]]
    ds = dataclasses.replace(small_ds, mts=mts)
    stable, volatile = volatility_split(ds, 0.7, idx)
    ids = sorted(small_ds.sample_ids(idx))
    n = int(math.floor(0.7 * len(idx)))
    assert stable == ids[:n] and volatile == ids[n:]


def test_doubled_daily_noise_lands_volatile(small_ds):
    idx = small_ds.indices(crop_id=2)
    rng = np.random.default_rng(0)
    T, n_d, m = small_ds.mts.shape[1:]
    mts = small_ds.mts.copy()
    base = np.array([20.0, 3.0, 18.0])
    for row, i in enumerate(idx):
        scale = 2.0 if row == 5 else 1.0
        mts[i] = base + scale * rng.normal(0.0, [1.0, 0.3, 1.0], size=(T, n_d, m))
    ds = dataclasses.replace(small_ds, mts=mts)
    _, volatile = volatility_split(ds, 0.7, idx)
    assert small_ds.records[idx[5]].sample_id in volatile
    cv = weather_cv(ds, idx)
    assert int(np.argmax(cv)) == 5


def test_near_zero_mean_variable_warns(small_ds):
    mts = small_ds.mts.copy()
    mts[0, ..., 0] = 0.0
    ds = dataclasses.replace(small_ds, mts=mts)
    with pytest.warns(RuntimeWarning, match="near-zero mean"):
        cv = weather_cv(ds, [0])
    assert np.isfinite(cv).all()


@settings(max_examples=20, deadline=None)
@given(st.floats(0.05, 0.95))
def test_split_is_partition(small_ds, q):
    stable, volatile = volatility_split(small_ds, q)
    assert len(stable) == int(math.floor(q * len(small_ds)))
    assert sorted(stable + volatile) == sorted(small_ds.sample_ids())


def test_quantile_out_of_range(small_ds):
    for q in (0.0, 1.0):
        with pytest.raises(ValueError):
            volatility_split(small_ds, q)


# -- protocols on a trained model ----------------------------------------------------------------
@pytest.fixture(scope="module")
def trained(small_ds):
    cfg = small_config()
    pre = run_pretrain(cfg, small_ds)
    res = run_finetune(cfg, small_ds, pre.checkpoint)
    return cfg, res.model


def test_realtime_point_count_and_full_prefix(small_ds, trained):
    cfg, model = trained
    cal = calendar_for(cfg, small_ds)
    curve = realtime_eval(model, small_ds, cal)
    _, standard = evaluate(model, small_ds, small_ds.indices("test"), cal)
    for spec in small_ds.crops:
        sos, eos = cal[spec.crop_id]
        pts = curve.points[spec.name]
        assert [t for t, _ in pts] == list(range(sos, eos + 1))
        assert pts[-1][1] == standard[spec.name]
        assert curve.rmse_at(spec.name, eos) == standard[spec.name].rmse


def test_zero_head_has_zero_sensitivity(small_ds, trained):
    cfg, model = trained
    head = model.decoder.head.fc2
    saved = head.weight.data.copy()
    head.weight.data[:] = 0.0
    try:
        sens = sensitivity_probe(model, small_ds, calendar_for(cfg, small_ds), TEMP, 1.0)
    finally:
        head.weight.data = saved
    assert all(v == 0.0 for v in sens.values())


def test_sensitivity_first_order_symmetry(small_ds, trained):
    cfg, model = trained
    cal = calendar_for(cfg, small_ds)
    up = sensitivity_probe(model, small_ds, cal, TEMP, 0.01, raw=True)
    down = sensitivity_probe(model, small_ds, cal, TEMP, -0.01, raw=True)
    for crop in up:
        assert up[crop] * down[crop] < 0, crop
        assert abs(up[crop] + down[crop]) <= 0.1 * abs(up[crop]), crop
    # the divided form estimates the same derivative from both sides
    div_up = sensitivity_probe(model, small_ds, cal, TEMP, 0.01)
    assert div_up == pytest.approx({c: v / 0.01 for c, v in up.items()})


def test_sensitivity_rejects_zero_delta(small_ds, trained):
    cfg, model = trained
    with pytest.raises(ValueError):
        sensitivity_probe(model, small_ds, calendar_for(cfg, small_ds), TEMP, 0.0)


def test_robustness_report_has_both_cohorts(small_ds, trained):
    cfg, model = trained
    rob = robustness_eval(model, small_ds, calendar_for(cfg, small_ds), 0.7)
    stable, volatile = rob["pooled"]["stable"], rob["pooled"]["volatile"]
    assert isinstance(stable["metrics"], MetricTriple) and isinstance(volatile["metrics"], MetricTriple)
    assert not set(stable["ids"]) & set(volatile["ids"])
    assert sorted(stable["ids"] + volatile["ids"]) == sorted(small_ds.sample_ids(small_ds.indices("test")))


# -- reports --------------------------------------------------------------------------------------------
def test_report_files_deterministic_and_parseable(tmp_path, small_ds, trained):
    cfg, model = trained
    cal = calendar_for(cfg, small_ds)
    _, metrics = evaluate(model, small_ds, small_ds.indices("test"), cal)
    sections = {"test": metrics, "realtime": realtime_eval(model, small_ds, cal),
                "robustness": robustness_eval(model, small_ds, cal),
                "sensitivity": sensitivity_probe(model, small_ds, cal)}
    j1, c1 = write_report(tmp_path / "a", sections)
    j2, c2 = write_report(tmp_path / "b", sections)
    assert j1.read_bytes() == j2.read_bytes() and c1.read_bytes() == c2.read_bytes()
    blob = json.loads(j1.read_text())
    assert blob["report_version"] == 1
    assert set(blob["robustness"]["pooled"]) == {"stable", "volatile"}
    with open(c1, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["section", "crop", "cohort", "t", "metric", "value"]
    cohorts = {r["cohort"] for r in rows if r["section"] == "robustness"}
    assert {"stable", "volatile"} <= cohorts
