"""Multimodal encoder: per-frame patch transformer, weather adapter, cross-attention fusion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .nn import MLP, ConfigurationError, LayerNorm, Linear, Module, MultiHeadAttention, TransformerBlock
from .numerics import Tensor


@dataclass(frozen=True)
class InputDims:
    T: int
    H: int
    W: int
    B: int
    N_d: int
    M: int

    @classmethod
    def from_manifest(cls, dims: dict) -> "InputDims":
        return cls(dims["T"], dims["H"], dims["W"], dims["B"], dims["N_d"], dims["M"])


@dataclass
class FusedSequence:
    values: np.ndarray  # (T, d)
    sample_id: str = ""

    def __post_init__(self) -> None:
        if not np.isfinite(self.values).all():
            raise ValueError(f"fused sequence {self.sample_id!r} has non-finite entries")


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """(..., H, W, B) -> (..., P, patch*patch*B), patches in row-major grid order."""
    *lead, H, W, B = frames.shape
    gh, gw = H // patch, W // patch
    x = frames.reshape(*lead, gh, patch, gw, patch, B)
    nl = len(lead)
    axes = list(range(nl)) + [nl, nl + 2, nl + 1, nl + 3, nl + 4]
    x = x.transpose(axes)
    return x.reshape(*lead, gh * gw, patch * patch * B)


def sinusoidal_table(length: int, d: int, scale: float = 0.5) -> np.ndarray:
    pos = np.arange(length)[:, None]
    freq = np.exp(-np.log(100.0) * (np.arange(0, d, 2) / d))
    table = np.zeros((length, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)[:, : d // 2]
    return scale * table


class Encoder(Module):
    """Maps (X_sits, X_mts) to a fused (T, d) latent sequence.

    Inputs are standardized per band / per weather variable with buffers fitted
    on training data (:meth:`fit_normalization`).  Temporal position embeddings
    are added after fusion.
    """

    def __init__(self, dims: InputDims, d: int = 64, patch_size: int = 8, img_layers: int = 1,
                 n_heads: int = 4, adapter_hidden: int = 64, mlp_hidden: int | None = None,
                 rng: np.random.Generator | None = None):
        if dims.H % patch_size or dims.W % patch_size:
            raise ConfigurationError(f"H={dims.H}, W={dims.W} not divisible by patch_size={patch_size}")
        if d % n_heads:
            raise ConfigurationError(f"d={d} not divisible by n_heads={n_heads}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dims = dims
        self.patch_size = patch_size
        n_patches = (dims.H // patch_size) * (dims.W // patch_size)
        self.sits_mean = Tensor(np.zeros(dims.B))
        self.sits_std = Tensor(np.ones(dims.B))
        self.mts_mean = Tensor(np.zeros(dims.M))
        self.mts_std = Tensor(np.ones(dims.M))
        self.patch_embed = Linear(patch_size * patch_size * dims.B, d, rng)
        self.patch_pos = Tensor(rng.normal(0, 0.02, (n_patches, d)), requires_grad=True)
        self.img_blocks = [TransformerBlock(d, n_heads, mlp_hidden or 2 * d, rng) for _ in range(img_layers)]
        self.img_norm = LayerNorm(d)
        self.adapter = MLP(dims.N_d * dims.M, adapter_hidden, d, rng)
        self.cross = MultiHeadAttention(d, n_heads, rng, out_proj=False)
        self.fuse_norm = LayerNorm(d)
        self.time_pos = Tensor(sinusoidal_table(dims.T, d), requires_grad=True)

    @property
    def d(self) -> int:
        return self.time_pos.shape[1]

    def fit_normalization(self, sits: np.ndarray, mts: np.ndarray) -> None:
        s = sits.reshape(-1, sits.shape[-1]).astype(np.float64)
        m = mts.reshape(-1, mts.shape[-1]).astype(np.float64)
        self.sits_mean.data, self.sits_std.data = s.mean(0), s.std(0) + 1e-8
        self.mts_mean.data, self.mts_std.data = m.mean(0), m.std(0) + 1e-8

    def _batch(self, x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == rank:
            return x[None], True
        if x.ndim != rank + 1:
            raise ValueError(f"expected rank {rank} or {rank + 1} input, got shape {x.shape}")
        return x, False

    def encode_sits(self, sits) -> Tensor:
        """(N, T, H, W, B) -> (N, T, d); each output row sees only its own frame."""
        x, single = self._batch(sits, 4)
        n, t = x.shape[:2]
        if x.shape[2:] != (self.dims.H, self.dims.W, self.dims.B):
            raise ValueError(f"sits frame shape {x.shape[2:]} does not match encoder dims")
        x = (x - self.sits_mean.data) / self.sits_std.data
        patches = patchify(x, self.patch_size)  # (N, T, P, pd)
        tok = self.patch_embed(Tensor(patches.reshape(n * t, *patches.shape[2:]))) + self.patch_pos
        for block in self.img_blocks:
            tok = block(tok)
        frame = nx.mean(self.img_norm(tok), axis=1).reshape(n, t, -1)
        return frame[0] if single else frame

    def encode_mts(self, mts) -> Tensor:
        """(N, T, N_d, M) -> (N, T, d) through the per-step adapter."""
        x, single = self._batch(mts, 3)
        n, t = x.shape[:2]
        if x.shape[2:] != (self.dims.N_d, self.dims.M):
            raise ValueError(f"mts block shape {x.shape[2:]} does not match encoder dims")
        x = (x - self.mts_mean.data) / self.mts_std.data
        out = self.adapter(Tensor(x.reshape(n, t, -1)))
        return out[0] if single else out

    def fuse(self, img: Tensor, met: Tensor) -> Tensor:
        """LayerNorm(img + CrossAttn(query=img, key=value=met)); no positions added."""
        if img.shape != met.shape:
            raise ValueError(f"fusion inputs differ in shape: {img.shape} vs {met.shape}")
        return self.fuse_norm(img + self.cross(img, met))

    @property
    def fusion_weights(self) -> np.ndarray | None:
        return self.cross.last_weights

    def __call__(self, sits, mts) -> Tensor:
        z = self.fuse(self.encode_sits(sits), self.encode_mts(mts))
        return z + self.time_pos
