"""Crop-aware temporal decoder.

A per-crop query from the phenology bank attends over the fused sequence Z.
The attention logits carry an additive phenology bias computed from a
multi-scale trend/variation decomposition of Z.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numerics as nx
from .nn import MLP, ConfigurationError, LayerNorm, Module, param
from .numerics import Tensor

WINDOWS = (3, 6, 12)


class LossDomainError(ValueError):
    pass


# -- trend / variation decomposition ----------------------------------------------
@lru_cache(maxsize=64)
def pooling_matrix(length: int, k: int) -> np.ndarray:
    """Linear operator A with (A @ Z)[t] = mean of the k-window around t.

    The sequence is padded by edge replication, floor((k-1)/2) rows in front and
    ceil((k-1)/2) behind, so the output keeps the input length.
    """
    if k < 1:
        raise ValueError("window must be >= 1")
    if k > 2 * length:
        raise ValueError(f"window {k} exceeds twice the sequence length {length}")
    front = (k - 1) // 2
    A = np.zeros((length, length))
    for t in range(length):
        for j in range(t - front, t - front + k):
            A[t, min(max(j, 0), length - 1)] += 1.0 / k
    A.setflags(write=False)
    return A


def moving_average(Z, k: int) -> Tensor:
    """Edge-padded moving average along the time axis (second to last) of ``Z``."""
    Z = nx.as_tensor(Z)
    return nx.matmul(pooling_matrix(Z.shape[-2], k), Z)


@dataclass
class DecompComponents:
    trend: Tensor
    variation: Tensor
    mixture: Tensor  # (..., T, K) simplex weights over windows


class Decomposition(Module):
    """Per-timestep softmax mixture of moving averages at several window sizes."""

    def __init__(self, d: int, rng: np.random.Generator, windows=WINDOWS):
        self.windows = tuple(windows)
        self.mix_weight = param(rng, (d, len(self.windows)), 0.1 / math.sqrt(d))
        self.mix_bias = nx.Tensor(np.zeros(len(self.windows)), requires_grad=True)

    def __call__(self, Z: Tensor) -> DecompComponents:
        Z = nx.as_tensor(Z)
        if 2 * Z.shape[-2] < max(self.windows):
            raise ConfigurationError(
                f"sequence length {Z.shape[-2]} too short for window {max(self.windows)}")
        logits = nx.matmul(Z, self.mix_weight) + self.mix_bias
        w = nx.softmax(logits, axis=-1)
        pooled = nx.stack([moving_average(Z, k) for k in self.windows], axis=-2)  # (..., T, K, d)
        trend = nx.tsum(w.reshape(*w.shape, 1) * pooled, axis=-2)
        return DecompComponents(trend, Z - trend, w)


def decompose(Z, params: Decomposition) -> DecompComponents:
    return params(Z)


# -- phenology bias -------------------------------------------------------------------
class PhenologyBias(Module):
    """Bias over the T positions from trend and variation self-attention logits.

    With ``mode="cls"`` each path prepends a learned cls token and keeps the cls
    row of (1/sqrt(d)) (mu~ Wq)(mu~ Wk)^T at the T sequence columns; ``"mean"``
    averages all query rows instead.
    """

    def __init__(self, d: int, rng: np.random.Generator, mode: str = "cls"):
        if mode not in ("cls", "mean"):
            raise ConfigurationError(f"unknown bias mode {mode!r}")
        self.mode = mode
        s = 1.0 / math.sqrt(d)
        self.wq_trend = param(rng, (d, d), s)
        self.wk_trend = param(rng, (d, d), s)
        self.wq_var = param(rng, (d, d), s)
        self.wk_var = param(rng, (d, d), s)
        self.cls_trend = param(rng, (d,), 1.0)
        self.cls_var = param(rng, (d,), 1.0)
        self.lam_trend = Tensor(np.array(0.5), requires_grad=True)
        self.lam_var = Tensor(np.array(0.5), requires_grad=True)

    def _path(self, x: Tensor, cls: Tensor, wq: Tensor, wk: Tensor) -> Tensor:
        d = x.shape[-1]
        keys = nx.matmul(x, wk)  # (..., T, d)
        if self.mode == "cls":
            query = nx.matmul(cls.reshape(1, d), wq)  # (1, d)
        else:
            lead = x.shape[:-2]
            cls_rows = cls.reshape(*([1] * len(lead)), 1, d) + nx.Tensor(np.zeros((*lead, 1, d)))
            full = nx.concat([cls_rows, x], axis=-2)
            query = nx.mean(nx.matmul(full, wq), axis=-2, keepdims=True)  # (..., 1, d)
        logits = nx.matmul(keys, query.swapaxes(-1, -2)) * (1.0 / math.sqrt(d))
        return logits.reshape(*logits.shape[:-1])

    def __call__(self, trend: Tensor, variation: Tensor) -> Tensor:
        row_t = self._path(trend, self.cls_trend, self.wq_trend, self.wk_trend)
        row_v = self._path(variation, self.cls_var, self.wq_var, self.wk_var)
        return self.lam_trend * row_t + self.lam_var * row_v


def phenology_bias(trend, variation, params: PhenologyBias) -> Tensor:
    return params(nx.as_tensor(trend), nx.as_tensor(variation))


# -- season masking ----------------------------------------------------------------------
def growing_season_mask(T: int, crop_ids, calendar: dict[int, tuple[int, int]]) -> np.ndarray:
    """Boolean (N, T) admissibility mask, True inside [sos, eos] of each sample's crop."""
    crop_ids = np.atleast_1d(np.asarray(crop_ids, dtype=int))
    mask = np.zeros((len(crop_ids), T), dtype=bool)
    for row, c in enumerate(crop_ids):
        if int(c) not in calendar:
            raise KeyError(f"crop id {c} missing from calendar")
        sos, eos = calendar[int(c)]
        if not 0 <= sos <= eos < T:
            raise ConfigurationError(f"empty or out-of-range season window [{sos}, {eos}] for crop {c}")
        mask[row, sos: eos + 1] = True
    return mask


# -- crop phenology attention --------------------------------------------------------------
class CPABlock(Module):
    """Query-over-sequence attention with the phenology bias, residual + LayerNorm + FFN."""

    def __init__(self, d: int, rng: np.random.Generator, use_cpa: bool = True, bias_mode: str = "cls",
                 windows=WINDOWS, ffn_hidden: int | None = None):
        s = 1.0 / math.sqrt(d)
        self.wq = param(rng, (d, d), s)
        self.wk = param(rng, (d, d), s)
        self.wv = param(rng, (d, d), s)
        self.decomp = Decomposition(d, rng, windows) if use_cpa else None
        self.bias = PhenologyBias(d, rng, bias_mode) if use_cpa else None
        self.ln1 = LayerNorm(d)
        self.ffn = MLP(d, ffn_hidden or 2 * d, d, rng)
        self.ln2 = LayerNorm(d)
        self.last_weights: np.ndarray | None = None
        self.last_mixture: np.ndarray | None = None

    def phenology_bias(self, Z: Tensor) -> Tensor | None:
        if self.decomp is None:
            return None
        comps = self.decomp(Z)
        self.last_mixture = comps.mixture.data
        return self.bias(comps.trend, comps.variation)

    def attend(self, query: Tensor, Z: Tensor, bias: Tensor | None, mask: np.ndarray | None) -> Tensor:
        """Single-head attention of ``query`` (N, d) over ``Z`` (N, T, d) -> (N, d)."""
        n, t, d = Z.shape
        q = nx.matmul(query, self.wq)
        k = nx.matmul(Z, self.wk)
        v = nx.matmul(Z, self.wv)
        logits = nx.matmul(k, q.reshape(n, d, 1)).reshape(n, t) * (1.0 / math.sqrt(d))
        if bias is not None:
            logits = logits + bias
        if mask is not None:
            logits = nx.masked_fill(logits, ~mask, -np.inf)
        w = nx.softmax(logits, axis=-1)
        self.last_weights = w.data
        return nx.matmul(w.reshape(n, 1, t), v).reshape(n, d)

    def __call__(self, query: Tensor, Z: Tensor, mask: np.ndarray | None) -> Tensor:
        out = self.attend(query, Z, self.phenology_bias(Z), mask)
        h = self.ln1(query + out)
        return self.ln2(h + self.ffn(h))


def cpa_forward(crop_id, Z, bank: "PhenologyBank", block: CPABlock,
                mask: np.ndarray | None = None) -> Tensor:
    """One CPA attention read-out h_c for a single (T, d) sequence."""
    Z = nx.as_tensor(Z)
    single = Z.ndim == 2
    Zb = Z.reshape(1, *Z.shape) if single else Z
    ids = np.atleast_1d(crop_id)
    if mask is not None:
        mask = np.atleast_2d(mask)
    out = block.attend(bank(ids), Zb, block.phenology_bias(Zb), mask)
    return out[0] if single else out


class PhenologyBank(Module):
    """C learnable query vectors, entries drawn from N(0, 1)."""

    def __init__(self, n_crops: int, d: int, rng: np.random.Generator, names: list[str] | None = None):
        self.queries = param(rng, (n_crops, d), 1.0)
        self.names = list(names) if names else [f"crop{i}" for i in range(n_crops)]

    def __call__(self, crop_ids) -> Tensor:
        crop_ids = np.asarray(crop_ids, dtype=int)
        c = self.queries.shape[0]
        if crop_ids.size and (crop_ids.min() < 0 or crop_ids.max() >= c):
            raise IndexError(f"crop id out of range [0, {c})")
        return self.queries[crop_ids]


class SharedQuery(Module):
    """One query for all crops (bank disabled)."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.query = param(rng, (1, d), 1.0)

    def __call__(self, crop_ids) -> Tensor:
        n = len(np.atleast_1d(crop_ids))
        return self.query[np.zeros(n, dtype=int)]


# -- head and loss ---------------------------------------------------------------------
class YieldHead(MLP):
    """d -> hidden -> 1 perceptron emitting log-yield."""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        super().__init__(d, hidden, 1, rng)

    def log_yield(self, h: Tensor) -> Tensor:
        out = self(h)
        return out.reshape(*out.shape[:-1])


def predict_yield(h, head: YieldHead) -> Tensor:
    return nx.exp(head.log_yield(nx.as_tensor(h)))


def mse_log_loss(predictions, targets) -> Tensor:
    """mean_i (log yhat_i - log y_i)^2; both arguments must be strictly positive."""
    predictions = nx.as_tensor(predictions)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape:
        raise ValueError(f"shape mismatch {predictions.shape} vs {targets.shape}")
    for name, arr in (("prediction", predictions.data), ("target", targets)):
        bad = np.flatnonzero(~(arr > 0))
        if bad.size:
            raise LossDomainError(f"{name} for sample {int(bad[0])} is not positive: {arr.flat[bad[0]]}")
    diff = nx.log(predictions) - np.log(targets)
    return nx.mean(diff * diff)


class Decoder(Module):
    def __init__(self, d: int, n_crops: int, rng: np.random.Generator, n_blocks: int = 2,
                 head_hidden: int = 64, use_bank: bool = True, use_cpa: bool = True,
                 bias_mode: str = "cls", windows=WINDOWS, crop_names: list[str] | None = None):
        self.bank = PhenologyBank(n_crops, d, rng, crop_names) if use_bank else SharedQuery(d, rng)
        self.blocks = [CPABlock(d, rng, use_cpa, bias_mode, windows) for _ in range(n_blocks)]
        self.head = YieldHead(d, head_hidden, rng)
        # per-crop log-yield level, fitted from training data and added to the head output
        self.crop_offset = Tensor(np.zeros(n_crops))

    def __call__(self, Z: Tensor, crop_ids, mask: np.ndarray | None = None) -> Tensor:
        """Log-yield per sample, shape (N,)."""
        Z = nx.as_tensor(Z)
        h = self.bank(crop_ids)
        for block in self.blocks:
            h = block(h, Z, mask)
        return self.head.log_yield(h) + self.crop_offset.data[np.asarray(crop_ids, dtype=int)]
