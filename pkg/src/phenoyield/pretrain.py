"""Temporal contrastive adaptation: masked views shared across modalities and InfoNCE."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass(frozen=True)
class TemporalMask:
    bits: np.ndarray  # (T,) of {0, 1}; 1 keeps the timestep

    def __post_init__(self) -> None:
        if self.bits.ndim != 1 or not np.isin(self.bits, (0, 1)).all():
            raise ValueError("mask bits must be a 1-d 0/1 vector")
        if self.bits.sum() < 1:
            raise ValueError("a temporal mask must keep at least one timestep")

    @property
    def keep_count(self) -> int:
        return int(self.bits.sum())

    def __len__(self) -> int:
        return len(self.bits)


def sample_temporal_mask(T: int, mask_ratio: float, rng: np.random.Generator) -> TemporalMask:
    """Mask exactly round(T * mask_ratio) timesteps chosen uniformly without replacement."""
    if not 0 <= mask_ratio < 1:
        raise ValueError(f"mask_ratio must lie in [0, 1), got {mask_ratio}")
    n_masked = int(math.floor(T * mask_ratio + 0.5))
    if T - n_masked < 1:
        raise ValueError(f"mask ratio {mask_ratio} leaves no timestep of {T}")
    bits = np.ones(T, dtype=np.int8)
    if n_masked:
        bits[rng.choice(T, size=n_masked, replace=False)] = 0
    return TemporalMask(bits)


def apply_mask(sits: np.ndarray, mts: np.ndarray, mask: TemporalMask) -> tuple[np.ndarray, np.ndarray]:
    """Zero the masked timesteps of both modalities with the same mask."""
    T = sits.shape[0]
    if len(mask) != T or mts.shape[0] != T:
        raise ValueError(f"mask length {len(mask)} does not match sample length {T}")
    keep = mask.bits.astype(bool)
    s, m = sits.copy(), mts.copy()
    s[~keep] = 0
    m[~keep] = 0
    return s, m


def make_views(sits, mts, mask_a: TemporalMask, mask_b: TemporalMask, encoder) -> tuple[Tensor, Tensor]:
    """Encode two masked views of one sample, (Z, Z_plus), each (T, d)."""
    sa, ma = apply_mask(sits, mts, mask_a)
    sb, mb = apply_mask(sits, mts, mask_b)
    z = encoder(np.stack([sa, sb]), np.stack([ma, mb]))
    return z[0], z[1]


def make_view_batch(sits: np.ndarray, mts: np.ndarray, masks_a, masks_b, encoder) -> tuple[Tensor, Tensor]:
    """Batched :func:`make_views`: returns two (N, T, d) tensors from one encoder pass."""
    views_s, views_m = [], []
    for masks in (masks_a, masks_b):
        for s, m, mask in zip(sits, mts, masks):
            vs, vm = apply_mask(s, m, mask)
            views_s.append(vs)
            views_m.append(vm)
    z = encoder(np.stack(views_s), np.stack(views_m))
    n = len(sits)
    return z[:n], z[n:]


def pool_representation(Z) -> Tensor:
    """Mean over the time axis: (..., T, d) -> (..., d)."""
    return nx.mean(nx.as_tensor(Z), axis=-2)


@dataclass
class ContrastiveBatch:
    anchors: Tensor  # (N, d)
    positives: Tensor  # (N, d)
    tau: float = 0.07
    # "both": both views of every other sample are negatives, 2(N-1) per anchor;
    # "positive": only the other samples' second views, N-1 per anchor
    negative_views: str = "both"

    def negatives_per_anchor(self) -> int:
        n = self.anchors.shape[0]
        return 2 * (n - 1) if self.negative_views == "both" else n - 1


def tca_loss(batch: ContrastiveBatch) -> Tensor:
    """InfoNCE over cosine similarities.

    For anchor i the candidates are its positive plus the negatives chosen by
    ``negative_views``; the loss is the mean of -log softmax at the positive.
    """
    if batch.tau <= 0:
        raise ValueError("temperature must be positive")
    if batch.negative_views not in ("both", "positive"):
        raise ValueError(f"negative_views must be 'both' or 'positive', got {batch.negative_views!r}")
    a, p = nx.as_tensor(batch.anchors), nx.as_tensor(batch.positives)
    n = a.shape[0]
    if n < 2:
        raise ValueError("need at least two samples so that negatives exist")
    if p.shape != a.shape:
        raise ValueError(f"anchor/positive shapes differ: {a.shape} vs {p.shape}")
    a, p = nx.l2_normalize(a), nx.l2_normalize(p)
    inv_tau = 1.0 / batch.tau
    sim_ap = nx.matmul(a, p.T) * inv_tau
    idx = np.arange(n)
    if batch.negative_views == "positive":
        return nx.mean(nx.logsumexp(sim_ap, axis=1) - sim_ap[idx, idx])
    sim_aa = nx.masked_fill(nx.matmul(a, a.T) * inv_tau, np.eye(n, dtype=bool), -np.inf)
    logits = nx.concat([sim_ap, sim_aa], axis=1)
    return nx.mean(nx.logsumexp(logits, axis=1) - sim_ap[idx, idx])
