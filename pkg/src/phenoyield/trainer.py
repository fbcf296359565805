"""Two-stage training: contrastive encoder pretraining, then decoder fine-tuning
with the encoder frozen.  AdamW, cosine schedule with warm-up and the ``PYCK``
checkpoint format live here as well.
"""
from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import RunConfig, StageConfig
from .datagen import Dataset
from .decoder import growing_season_mask, mse_log_loss
from .encoder import ConfigurationError, InputDims
from .model import PhenoYieldNet
from .pretrain import ContrastiveBatch, make_view_batch, pool_representation, sample_temporal_mask, tca_loss
from .tensorio import FormatError, read_tensor_from, write_tensor_to

log = logging.getLogger(__name__)

CKPT_MAGIC = b"PYCK"
CKPT_VERSION = 1


class NonFiniteGradientError(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: "Checkpoint | None" = None):
        super().__init__(message)
        self.last_good = last_good


# -- optimizer -----------------------------------------------------------------------
@dataclass
class OptimState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_stage(cls, stage: StageConfig) -> "OptimState":
        return cls(stage.lr, stage.beta1, stage.beta2, stage.weight_decay, stage.eps)


def adamw_step(params: dict[str, nx.Tensor], grads: dict[str, np.ndarray], state: OptimState) -> OptimState:
    """One AdamW update, in place on ``params``; weight decay is decoupled from the moments."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient for {name}; step aborted")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        decayed = p.data - state.lr * state.weight_decay * p.data
        p.data = decayed - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def cosine_warmup_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear ramp to ``base_lr`` over the warm-up, then half-cosine decay to 0."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    p = min(max((step - warmup_steps) / (total_steps - warmup_steps), 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * p))


# -- checkpoints -----------------------------------------------------------------------
@dataclass
class Checkpoint:
    stage: str
    params: "OrderedDict[str, np.ndarray]"
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = CKPT_VERSION

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(CKPT_MAGIC)
        buf.write(struct.pack("<I", self.version))
        for text in (self.stage, json.dumps(self.rng_state, sort_keys=True),
                     json.dumps(self.meta, sort_keys=True)):
            raw = text.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
        buf.write(struct.pack("<QI", self.step, len(self.params)))
        for name, arr in self.params.items():
            raw = name.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            write_tensor_to(buf, arr)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes, source: str = "<bytes>") -> "Checkpoint":
        fh = io.BytesIO(blob)

        def take(n: int) -> bytes:
            raw = fh.read(n)
            if len(raw) != n:
                raise FormatError(f"{source}: truncated checkpoint")
            return raw

        if take(4) != CKPT_MAGIC:
            raise FormatError(f"{source}: not a PYCK checkpoint")
        (version,) = struct.unpack("<I", take(4))
        if version != CKPT_VERSION:
            raise FormatError(f"{source}: unsupported checkpoint version {version}")
        texts = []
        for _ in range(3):
            (n,) = struct.unpack("<I", take(4))
            texts.append(take(n).decode("utf-8"))
        step, count = struct.unpack("<QI", take(12))
        params: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack("<I", take(4))
            name = take(n).decode("utf-8")
            params[name] = read_tensor_from(fh, f"{source}:{name}")
        if fh.read(1):
            raise FormatError(f"{source}: trailing bytes")
        return cls(texts[0], params, step, json.loads(texts[1]), json.loads(texts[2]), version)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint {path} not found")
        return cls.from_bytes(path.read_bytes(), str(path))

    def restore_into(self, model: PhenoYieldNet, prefix: str = "") -> None:
        tensors = model.named_tensors()
        for name, arr in self.params.items():
            if not name.startswith(prefix):
                continue
            if name not in tensors:
                raise KeyError(f"checkpoint tensor {name} has no counterpart in the model")
            if tensors[name].shape != arr.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model {tensors[name].shape}")
            tensors[name].data = arr.astype(np.float64)


def snapshot(model: PhenoYieldNet, stage: str, step: int, rng: np.random.Generator,
             prefix: str = "", meta: dict | None = None) -> Checkpoint:
    params = OrderedDict((k, v.data.astype(np.float32)) for k, v in model.named_tensors().items()
                         if k.startswith(prefix))
    return Checkpoint(stage, params, step, _rng_state(rng), meta or {})


def _rng_state(rng: np.random.Generator) -> dict:
    return json.loads(json.dumps(rng.bit_generator.state))


def round_trip(model: PhenoYieldNet) -> None:
    """Round every tensor to the float32 storage precision used by checkpoints."""
    for t in model.named_tensors().values():
        t.data = t.data.astype(np.float32).astype(np.float64)


# -- model construction ----------------------------------------------------------------
def crop_selection(cfg: RunConfig, dataset: Dataset) -> list[int]:
    names = [c.name for c in dataset.crops]
    wanted = [cfg.single_crop] if cfg.single_crop else (cfg.crops or names)
    unknown = [w for w in wanted if w not in names]
    if unknown:
        raise ConfigurationError(f"unknown crops {unknown}; dataset has {names}")
    return [names.index(w) for w in wanted]


def calendar_for(cfg: RunConfig, dataset: Dataset) -> dict[int, tuple[int, int]]:
    cal = dataset.calendar()
    if cfg.calendar:
        names = {c.name: c.crop_id for c in dataset.crops}
        for name, (sos, eos) in cfg.calendar.items():
            if name not in names:
                raise ConfigurationError(f"calendar names unknown crop {name!r}")
            cal[names[name]] = (sos, eos)
    return cal


def build_model(cfg: RunConfig, dataset: Dataset) -> PhenoYieldNet:
    model_cfg = cfg.model
    if cfg.single_crop and model_cfg.use_bank:
        model_cfg = dataclasses.replace(model_cfg, use_bank=False)
    return PhenoYieldNet(InputDims.from_manifest(dataset.manifest.dims), len(dataset.crops), model_cfg,
                         seed=cfg.seed, crop_names=[c.name for c in dataset.crops])


def _append_log(path: Path | None, entry: dict) -> None:
    if path is None:
        return
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _batches(order: np.ndarray, size: int, drop_last: bool):
    for s in range(0, len(order), size):
        chunk = order[s:s + size]
        if drop_last and len(chunk) < size:
            break
        yield chunk


def _grads(params: dict[str, nx.Tensor]) -> dict[str, np.ndarray]:
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


# -- stage I ----------------------------------------------------------------------------------
@dataclass
class StageResult:
    checkpoint: Checkpoint
    history: list[dict]
    model: PhenoYieldNet
    metrics: dict = field(default_factory=dict)


def run_pretrain(cfg: RunConfig, dataset: Dataset, out_dir: str | Path | None = None,
                 max_steps: int | None = None) -> StageResult:
    """Contrastive pretraining of encoder, adapter and fusion on the train split."""
    st = cfg.pretrain
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(20,)))
    model = build_model(cfg, dataset)
    crops = crop_selection(cfg, dataset)
    train_idx = np.array([i for i in dataset.indices("train") if dataset.records[i].crop_id in crops])
    model.encoder.fit_normalization(dataset.sits[train_idx], dataset.mts[train_idx])
    params = model.encoder_parameters()
    state = OptimState.from_stage(st)
    batch = min(st.batch_size, len(train_idx))
    if batch < 2:
        raise ConfigurationError("contrastive pretraining needs at least two training samples")
    steps_per_epoch = len(train_idx) // batch
    total = st.epochs * steps_per_epoch
    warmup = st.warmup_epochs * steps_per_epoch
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl" if out is not None else None
    if log_path is not None and log_path.exists():
        log_path.unlink()
    T = dataset.manifest.dims["T"]
    history: list[dict] = []
    step = 0
    last_good = snapshot(model, "pretrain", 0, rng, "encoder.")
    for epoch in range(st.epochs):
        order = rng.permutation(train_idx)
        losses = []
        for chunk in _batches(order, batch, drop_last=True):
            if max_steps is not None and step >= max_steps:
                break
            state.lr = cosine_warmup_lr(step, total, warmup, st.lr)
            masks_a = [sample_temporal_mask(T, cfg.mask_ratio, rng) for _ in chunk]
            masks_b = [sample_temporal_mask(T, cfg.mask_ratio, rng) for _ in chunk]
            model.zero_grad()
            za, zb = make_view_batch(dataset.sits[chunk], dataset.mts[chunk], masks_a, masks_b, model.encoder)
            loss = tca_loss(ContrastiveBatch(pool_representation(za), pool_representation(zb), cfg.tau))
            if not np.isfinite(loss.data):
                if out is not None:
                    last_good.save(out / "pretrain.pyck")
                raise TrainingDiverged(f"pretraining loss became non-finite at step {step}", last_good)
            loss.backward()
            grads, _ = clip_grad_norm(_grads(params), st.clip_norm)
            adamw_step(params, grads, state)
            losses.append(loss.item())
            step += 1
            history.append({"stage": "pretrain", "step": step, "loss": loss.item(), "lr": state.lr})
        if not losses:
            break
        entry = {"stage": "pretrain", "epoch": epoch, "loss": float(np.mean(losses)), "lr": state.lr}
        _append_log(log_path, entry)
        log.info("pretrain epoch %d loss %.4f", epoch, entry["loss"])
        last_good = snapshot(model, "pretrain", step, rng, "encoder.")
    ckpt = snapshot(model, "pretrain", step, rng, "encoder.", meta={"seed": cfg.seed})
    if out is not None:
        ckpt.save(out / "pretrain.pyck")
    return StageResult(ckpt, history, model)


# -- stage II -----------------------------------------------------------------------------------
def split_validation(dataset: Dataset, train_idx: np.ndarray, fraction: float, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(21,)))
    order = rng.permutation(train_idx)
    n_val = max(1, int(round(fraction * len(order))))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def run_finetune(cfg: RunConfig, dataset: Dataset, pretrain_ckpt: Checkpoint | None,
                 out_dir: str | Path | None = None, from_scratch: bool = False,
                 latent: np.ndarray | None = None) -> StageResult:
    """Supervised decoder training on cached encoder outputs.

    The encoder (with adapter, fusion and position embeddings) is frozen; its
    tensors are compared bit-for-bit before and after training.
    """
    if pretrain_ckpt is None and not from_scratch:
        raise ConfigurationError("finetune needs a pretrain checkpoint (or from_scratch=True)")
    if pretrain_ckpt is not None and pretrain_ckpt.stage != "pretrain":
        raise ConfigurationError(f"expected a 'pretrain' checkpoint, got stage {pretrain_ckpt.stage!r}")
    st = cfg.finetune
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(22,)))
    model = build_model(cfg, dataset)
    crops = crop_selection(cfg, dataset)
    calendar = calendar_for(cfg, dataset)
    train_all = np.array([i for i in dataset.indices("train") if dataset.records[i].crop_id in crops])
    if pretrain_ckpt is not None:
        pretrain_ckpt.restore_into(model, "encoder.")
    else:
        model.encoder.fit_normalization(dataset.sits[train_all], dataset.mts[train_all])
        for t in model.encoder.named_tensors().values():
            t.data = t.data.astype(np.float32).astype(np.float64)
    frozen_before = {k: v.data.copy() for k, v in model.encoder.named_tensors("encoder.").items()}

    Z = latent if latent is not None else model.encode(dataset.sits, dataset.mts)
    crop_ids = dataset.crop_ids()
    y = dataset.yields()
    T = Z.shape[1]
    mask = growing_season_mask(T, crop_ids, calendar)
    tr_idx, val_idx = split_validation(dataset, train_all, cfg.val_fraction, cfg.seed)

    params = model.decoder_parameters()
    log_y = np.log(y[tr_idx])
    offset = np.full(len(dataset.crops), log_y.mean())
    if cfg.model.use_bank:
        # without the crop bank the decoder gets no crop-specific state, so the level stays pooled
        for c in np.unique(crop_ids[tr_idx]):
            offset[c] = log_y[crop_ids[tr_idx] == c].mean()
    model.decoder.crop_offset.data[:] = offset
    model.decoder.head.fc2.bias.data[:] = 0.0
    state = OptimState.from_stage(st)
    batch = min(st.batch_size, len(tr_idx))
    steps_per_epoch = -(-len(tr_idx) // batch)
    total = st.epochs * steps_per_epoch
    warmup = st.warmup_epochs * steps_per_epoch
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl" if out is not None else None
    if log_path is not None and log_path.exists():
        log_path.unlink()

    def loss_on(idx) -> float:
        pred = model.predict_from_latent(Z[idx], crop_ids[idx], calendar, mask=mask[idx])
        return float(np.mean((np.log(pred) - np.log(y[idx])) ** 2))

    best_val = math.inf
    best_state = None
    best_epoch = -1
    bad_epochs = 0
    history: list[dict] = []
    step = 0
    for epoch in range(st.epochs):
        order = rng.permutation(tr_idx)
        losses = []
        for chunk in _batches(order, batch, drop_last=False):
            state.lr = cosine_warmup_lr(step, total, warmup, st.lr)
            model.zero_grad()
            log_pred = model.decode_log(nx.Tensor(Z[chunk]), crop_ids[chunk], mask[chunk])
            loss = mse_log_loss(nx.exp(log_pred), y[chunk])
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"fine-tuning loss became non-finite at step {step}")
            loss.backward()
            grads, _ = clip_grad_norm(_grads(params), st.clip_norm)
            adamw_step(params, grads, state)
            losses.append(loss.item())
            step += 1
        val = loss_on(val_idx)
        entry = {"stage": "finetune", "epoch": epoch, "loss": float(np.mean(losses)), "val_loss": val,
                 "lr": state.lr}
        history.append(entry)
        _append_log(log_path, entry)
        log.debug("finetune epoch %d loss %.4f val %.4f", epoch, entry["loss"], val)
        if val < best_val:
            best_val, best_epoch, bad_epochs = val, epoch, 0
            best_state = {k: v.data.copy() for k, v in params.items()}
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                log.info("early stop at epoch %d (best %d, val %.4f)", epoch, best_epoch, best_val)
                break
    if best_state is not None:
        for k, v in params.items():
            v.data = best_state[k]

    for name, before in frozen_before.items():
        after = model.named_tensors()[name].data
        if before.shape != after.shape or not np.array_equal(before.view(np.uint64), after.view(np.uint64)):
            raise AssertionError(f"frozen encoder tensor {name} changed during fine-tuning")

    ckpt = snapshot(model, "finetune", step, rng, meta={"seed": cfg.seed, "best_epoch": best_epoch,
                                                        "best_val_loss": best_val})
    round_trip(model)
    if out is not None:
        ckpt.save(out / "finetune.pyck")
    metrics = {"train_log_mse": loss_on(tr_idx), "val_log_mse": loss_on(val_idx), "best_epoch": best_epoch}
    return StageResult(ckpt, history, model, metrics)


def load_model(cfg: RunConfig, dataset: Dataset, ckpt: Checkpoint) -> PhenoYieldNet:
    model = build_model(cfg, dataset)
    ckpt.restore_into(model)
    return model
