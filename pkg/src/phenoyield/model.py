"""Encoder + decoder assembly."""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .decoder import Decoder, growing_season_mask
from .encoder import Encoder, InputDims
from .nn import Module


class PhenoYieldNet(Module):
    def __init__(self, dims: InputDims, n_crops: int, cfg: ModelConfig | None = None, seed: int = 0,
                 crop_names: list[str] | None = None):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.n_crops = n_crops
        # separate streams keep encoder init independent of decoder options
        enc_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(10,)))
        dec_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(11,)))
        self.encoder = Encoder(dims, cfg.d, cfg.patch_size, cfg.img_layers, cfg.heads, cfg.adapter_hidden,
                               rng=enc_rng)
        self.decoder = Decoder(cfg.d, n_crops, dec_rng, cfg.decoder_blocks, cfg.head_hidden, cfg.use_bank,
                               cfg.use_cpa, cfg.bias_mode, tuple(cfg.windows), crop_names)

    @property
    def dims(self) -> InputDims:
        return self.encoder.dims

    def encoder_parameters(self):
        return self.encoder.named_parameters("encoder.")

    def decoder_parameters(self):
        return self.decoder.named_parameters("decoder.")

    def encode(self, sits: np.ndarray, mts: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Gradient-free encoding of a batch of samples to (N, T, d)."""
        out = []
        with nx.no_grad():
            for start in range(0, len(sits), batch_size):
                out.append(self.encoder(sits[start:start + batch_size], mts[start:start + batch_size]).data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.dims.T, self.cfg.d))

    def decode_log(self, Z, crop_ids, mask: np.ndarray | None = None) -> nx.Tensor:
        return self.decoder(Z, crop_ids, mask)

    def predict_from_latent(self, Z: np.ndarray, crop_ids, calendar, batch_size: int = 64,
                            mask: np.ndarray | None = None) -> np.ndarray:
        crop_ids = np.asarray(crop_ids, dtype=int)
        if mask is None:
            mask = growing_season_mask(Z.shape[1], crop_ids, calendar)
        out = []
        with nx.no_grad():
            for s in range(0, len(Z), batch_size):
                sl = slice(s, s + batch_size)
                out.append(np.exp(self.decoder(nx.Tensor(Z[sl]), crop_ids[sl], mask[sl]).data))
        return np.concatenate(out) if out else np.zeros(0)

    def predict(self, sits, mts, crop_ids, calendar) -> np.ndarray:
        return self.predict_from_latent(self.encode(sits, mts), crop_ids, calendar)
