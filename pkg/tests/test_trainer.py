import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phenoyield.datagen import FormatError
from phenoyield.encoder import ConfigurationError
from phenoyield.numerics import Tensor
from phenoyield.trainer import (Checkpoint, NonFiniteGradientError, OptimState, adamw_step, build_model,
                                clip_grad_norm, cosine_warmup_lr, run_finetune, run_pretrain)

from conftest import small_config


# -- optimizer -------------------------------------------------------------------------------------
def test_zero_gradient_decays_by_exact_factor():
    w = np.array([1.0, -2.0, 0.5])
    p = {"w": Tensor(w.copy(), requires_grad=True)}
    adamw_step(p, {"w": np.zeros(3)}, OptimState(lr=0.1, weight_decay=0.05))
    np.testing.assert_allclose(p["w"].data, w * 0.995, rtol=0, atol=1e-15)


def test_first_step_is_sign_of_gradient():
    p = {"w": Tensor(np.zeros(4), requires_grad=True)}
    g = np.array([3.0, -0.2, 1e-3, -50.0])
    adamw_step(p, {"w": g}, OptimState(lr=0.01))
    np.testing.assert_allclose(p["w"].data, -0.01 * np.sign(g), rtol=1e-4)


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_zero_betas_is_sign_sgd(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=5)
    p = {"w": Tensor(w.copy(), requires_grad=True)}
    state = OptimState(lr=0.05, beta1=0.0, beta2=0.0, eps=0.0)
    for _ in range(3):
        g = rng.normal(size=5)
        before = p["w"].data.copy()
        adamw_step(p, {"w": g}, state)
        np.testing.assert_allclose(p["w"].data, before - 0.05 * np.sign(g), atol=1e-12)


def test_moments_and_counter():
    p = {"a": Tensor(np.ones((2, 3)), requires_grad=True), "b": Tensor(np.ones(4), requires_grad=True)}
    state = OptimState(lr=1e-3)
    for k in range(1, 4):
        adamw_step(p, {"a": np.ones((2, 3)), "b": np.ones(4)}, state)
        assert state.t == k
    assert state.m["a"].shape == (2, 3) and state.v["b"].shape == (4,)


def test_nonfinite_gradient_aborts_without_update():
    p = {"w": Tensor(np.ones(2), requires_grad=True)}
    state = OptimState(lr=0.1)
    with pytest.raises(NonFiniteGradientError, match="w"):
        adamw_step(p, {"w": np.array([1.0, np.nan])}, state)
    assert state.t == 0
    np.testing.assert_array_equal(p["w"].data, 1.0)


def test_identical_runs_identical_parameters():
    def run():
        rng = np.random.default_rng(0)
        p = {"w": Tensor(rng.normal(size=6), requires_grad=True)}
        state = OptimState(lr=0.01, weight_decay=0.05)
        for _ in range(5):
            adamw_step(p, {"w": rng.normal(size=6)}, state)
        return p["w"].data
    assert np.array_equal(run(), run())


def test_clip_grad_norm():
    g = {"a": np.array([3.0, 4.0])}
    clipped, norm = clip_grad_norm(g, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(clipped["a"], [0.6, 0.8])
    same, _ = clip_grad_norm(g, None)
    assert same is g


# -- schedule --------------------------------------------------------------------------------------
def test_schedule_reference_points():
    assert cosine_warmup_lr(0, 100, 10, 1e-3) == 0.0
    assert cosine_warmup_lr(5, 100, 10, 1e-3) == pytest.approx(5e-4)
    assert cosine_warmup_lr(10, 100, 10, 1e-3) == pytest.approx(1e-3, abs=1e-18)
    assert cosine_warmup_lr(55, 100, 10, 1e-3) == pytest.approx(5e-4, abs=1e-15)
    assert cosine_warmup_lr(100, 100, 10, 1e-3) == pytest.approx(0.0, abs=1e-18)


@given(st.integers(1, 500), st.data())
def test_schedule_bounded_and_monotone_after_warmup(total, data):
    warmup = data.draw(st.integers(0, total - 1))
    lrs = [cosine_warmup_lr(s, total, warmup, 1.0) for s in range(total + 1)]
    assert all(0.0 <= v <= 1.0 + 1e-12 for v in lrs)
    tail = lrs[warmup:]
    assert all(b <= a + 1e-12 for a, b in zip(tail, tail[1:]))


# -- checkpoints -----------------------------------------------------------------------------------
def _ckpt():
    rng = np.random.default_rng(0)
    params = {"encoder.w": rng.normal(size=(3, 2)).astype(np.float32), "decoder.b": np.zeros(4, np.float32)}
    return Checkpoint("pretrain", params, step=7, rng_state={"x": 1}, meta={"seed": 0})


def test_checkpoint_bytes_round_trip(tmp_path):
    blob = _ckpt().to_bytes()
    assert blob[:4] == b"PYCK"
    back = Checkpoint.from_bytes(blob)
    assert back.to_bytes() == blob
    assert back.stage == "pretrain" and back.step == 7
    path = tmp_path / "c.pyck"
    back.save(path)
    assert Checkpoint.load(path).to_bytes() == blob


def test_checkpoint_rejects_bad_magic_truncation_and_trailing_bytes():
    blob = _ckpt().to_bytes()
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(blob[:-3])
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(blob + b"\0")


def test_missing_checkpoint_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        Checkpoint.load(tmp_path / "nope.pyck")


def test_restore_rejects_foreign_tensor(small_ds):
    model = build_model(small_config(), small_ds)
    with pytest.raises(KeyError):
        _ckpt().restore_into(model)


# -- stages ----------------------------------------------------------------------------------------
@pytest.fixture(scope="module")
def pretrained(small_ds):
    return run_pretrain(small_config(), small_ds)


def test_pretrain_is_deterministic(small_ds, pretrained):
    again = run_pretrain(small_config(), small_ds)
    assert again.checkpoint.to_bytes() == pretrained.checkpoint.to_bytes()


def test_finetune_freezes_encoder(tmp_path, small_ds, pretrained):
    res = run_finetune(small_config(), small_ds, pretrained.checkpoint, tmp_path)
    for name, arr in pretrained.checkpoint.params.items():
        assert res.checkpoint.params[name].tobytes() == arr.tobytes(), name
    assert res.checkpoint.stage == "finetune"
    assert len((tmp_path / "train_log.jsonl").read_text().splitlines()) == len(res.history)


def test_finetune_is_deterministic(small_ds, pretrained):
    a = run_finetune(small_config(), small_ds, pretrained.checkpoint)
    b = run_finetune(small_config(), small_ds, pretrained.checkpoint)
    assert a.checkpoint.to_bytes() == b.checkpoint.to_bytes()


def test_early_stopping_keeps_best_validation(small_ds, pretrained):
    cfg = small_config(finetune={"epochs": 12, "warmup_epochs": 1}, patience=3)
    res = run_finetune(cfg, small_ds, pretrained.checkpoint)
    best = min(h["val_loss"] for h in res.history)
    assert res.metrics["best_epoch"] == int(np.argmin([h["val_loss"] for h in res.history]))
    # the returned weights are stored at float32; allow for that rounding only
    assert res.metrics["val_log_mse"] <= best * (1 + 1e-3) + 1e-9


def test_finetune_requires_pretrain_checkpoint(small_ds, pretrained):
    with pytest.raises(ConfigurationError):
        run_finetune(small_config(), small_ds, None)
    tuned = run_finetune(small_config(), small_ds, pretrained.checkpoint)
    with pytest.raises(ConfigurationError):
        run_finetune(small_config(), small_ds, tuned.checkpoint)


def test_single_crop_runs_without_bank(small_ds, pretrained):
    cfg = small_config(single_crop="soybean")
    model = build_model(cfg, small_ds)
    assert type(model.decoder.bank).__name__ == "SharedQuery"
    res = run_finetune(cfg, small_ds, pretrained.checkpoint)
    assert math.isfinite(res.metrics["val_log_mse"])


def test_from_scratch_encoder_stays_random(small_ds):
    res = run_finetune(small_config(), small_ds, None, from_scratch=True)
    assert res.checkpoint.stage == "finetune"


def test_desk_run_fits_training_signal(small_ds, pretrained):
    cfg = small_config(finetune={"epochs": 60, "warmup_epochs": 2, "lr": 3e-3}, patience=60)
    res = run_finetune(cfg, small_ds, pretrained.checkpoint)
    assert res.metrics["train_log_mse"] < 0.05
