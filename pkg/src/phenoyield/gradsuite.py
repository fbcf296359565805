"""Finite-difference checks for every differentiable op and for both training objectives."""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .decoder import growing_season_mask, mse_log_loss
from .encoder import InputDims
from .model import PhenoYieldNet
from .numerics import GradReport, Tensor, grad_check
from .pretrain import ContrastiveBatch, pool_representation, tca_loss

SMALL_DIMS = InputDims(T=8, H=8, W=8, B=2, N_d=3, M=3)
SMALL_MODEL = ModelConfig(d=16, patch_size=4, img_layers=1, heads=2, adapter_hidden=16, decoder_blocks=2,
                          head_hidden=16)
SMALL_CALENDAR = {0: (1, 6), 1: (0, 7)}


def _weights(rng, shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def op_cases(rng: np.random.Generator) -> dict:
    """(loss_fn, params) pairs, one per op; each loss is a random projection of the op output."""
    projections: dict[tuple, np.ndarray] = {}

    def proj(out: Tensor) -> Tensor:
        # fixed per output shape so repeated evaluations see the same loss
        if out.shape not in projections:
            projections[out.shape] = rng.normal(size=out.shape)
        return nx.tsum(out * projections[out.shape])

    pos = lambda shape: Tensor(rng.uniform(0.5, 2.0, size=shape), requires_grad=True)  # noqa: E731
    cases = {
        "add": (lambda p: proj(p["a"] + p["b"]), {"a": _weights(rng, (3, 4)), "b": _weights(rng, (4,))}),
        "sub": (lambda p: proj(p["a"] - p["b"]), {"a": _weights(rng, (3, 4)), "b": _weights(rng, (3, 1))}),
        "mul": (lambda p: proj(p["a"] * p["b"]), {"a": _weights(rng, (3, 4)), "b": _weights(rng, (3, 4))}),
        "div": (lambda p: proj(p["a"] / p["b"]), {"a": _weights(rng, (3, 4)), "b": pos((3, 4))}),
        "power": (lambda p: proj(nx.power(p["a"], 1.5)), {"a": pos((5,))}),
        "sqrt": (lambda p: proj(nx.sqrt(p["a"])), {"a": pos((5,))}),
        "exp": (lambda p: proj(nx.exp(p["a"])), {"a": _weights(rng, (5,))}),
        "log": (lambda p: proj(nx.log(p["a"])), {"a": pos((5,))}),
        "tanh": (lambda p: proj(nx.tanh(p["a"])), {"a": _weights(rng, (5,))}),
        "gelu": (lambda p: proj(nx.gelu(p["a"])), {"a": _weights(rng, (6,))}),
        "sum": (lambda p: proj(nx.tsum(p["a"], axis=1)), {"a": _weights(rng, (3, 4))}),
        "mean": (lambda p: proj(nx.mean(p["a"], axis=0, keepdims=True)), {"a": _weights(rng, (3, 4))}),
        "variance": (lambda p: proj(nx.variance(p["a"])), {"a": _weights(rng, (3, 4))}),
        "reshape": (lambda p: proj(nx.reshape(p["a"], (4, 3))), {"a": _weights(rng, (3, 4))}),
        "transpose": (lambda p: proj(nx.transpose(p["a"], (1, 0, 2))), {"a": _weights(rng, (2, 3, 2))}),
        "getitem": (lambda p: proj(p["a"][np.array([0, 2, 2]), 1:]), {"a": _weights(rng, (3, 4))}),
        "concat": (lambda p: proj(nx.concat([p["a"], p["b"]], axis=1)),
                   {"a": _weights(rng, (2, 3)), "b": _weights(rng, (2, 2))}),
        "stack": (lambda p: proj(nx.stack([p["a"], p["b"]], axis=0)),
                  {"a": _weights(rng, (2, 3)), "b": _weights(rng, (2, 3))}),
        "masked_fill": (lambda p: proj(nx.masked_fill(p["a"], np.eye(3, dtype=bool), 0.0)),
                        {"a": _weights(rng, (3, 3))}),
        "matmul": (lambda p: proj(nx.matmul(p["a"], p["b"])),
                   {"a": _weights(rng, (2, 3, 4)), "b": _weights(rng, (4, 5))}),
        "softmax": (lambda p: proj(nx.softmax(p["a"], axis=-1)), {"a": _weights(rng, (3, 5))}),
        "logsumexp": (lambda p: proj(nx.logsumexp(p["a"], axis=-1)), {"a": _weights(rng, (3, 5))}),
        "layer_norm": (lambda p: proj(nx.layer_norm(p["x"], p["g"], p["b"])),
                       {"x": _weights(rng, (3, 6)), "g": _weights(rng, (6,)), "b": _weights(rng, (6,))}),
        "cosine_similarity": (lambda p: proj(nx.cosine_similarity(p["a"], p["b"])),
                              {"a": _weights(rng, (3, 4)), "b": _weights(rng, (3, 4))}),
        "l2_normalize": (lambda p: proj(nx.l2_normalize(p["a"])), {"a": _weights(rng, (3, 4))}),
    }
    return cases


def op_suite(seed: int = 0, tolerance: float = 1e-3, step: float = 1e-6) -> dict[str, GradReport]:
    rng = np.random.default_rng(seed)
    return {name: grad_check(fn, params, step=step, tolerance=tolerance)
            for name, (fn, params) in op_cases(rng).items()}


def small_instance(seed: int, n: int = 2, dims: InputDims = SMALL_DIMS, cfg: ModelConfig = SMALL_MODEL):
    """A tiny model with random inputs: (model, sits, mts, crop_ids, yields)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(99,)))
    model = PhenoYieldNet(dims, len(SMALL_CALENDAR), cfg, seed=seed)
    sits = rng.normal(size=(n, dims.T, dims.H, dims.W, dims.B))
    mts = rng.normal(size=(n, dims.T, dims.N_d, dims.M))
    crop_ids = np.arange(n) % len(SMALL_CALENDAR)
    yields = rng.uniform(0.5, 2.0, size=n)
    return model, sits, mts, crop_ids, yields


def _all_parameters(model: PhenoYieldNet) -> dict[str, Tensor]:
    return {**model.encoder_parameters(), **model.decoder_parameters()}


def yield_path_check(seed: int, tolerance: float = 1e-3, max_entries: int | None = 3,
                     step: float = 1e-5) -> GradReport:
    """Encoder -> decoder -> log-MSE loss, every encoder and decoder parameter."""
    model, sits, mts, crop_ids, yields = small_instance(seed)
    mask = growing_season_mask(SMALL_DIMS.T, crop_ids, SMALL_CALENDAR)

    def loss_fn(_):
        Z = model.encoder(sits, mts)
        return mse_log_loss(nx.exp(model.decoder(Z, crop_ids, mask)), yields)

    return grad_check(loss_fn, _all_parameters(model), step=step, tolerance=tolerance,
                      max_entries=max_entries, rng=np.random.default_rng(seed))


def contrastive_path_check(seed: int, tolerance: float = 1e-3, max_entries: int | None = 3,
                           step: float = 1e-5, tau: float = 0.5) -> GradReport:
    """Encoder -> temporal mean pooling -> InfoNCE on a two-sample batch of view pairs."""
    model, sits, mts, _, _ = small_instance(seed)
    rng = np.random.default_rng(seed)
    keep = rng.random(size=(2,) + sits.shape[:2]) > 0.3
    keep[..., 0] = True
    views_s = [sits * k[..., None, None, None] for k in keep]
    views_m = [mts * k[..., None, None] for k in keep]

    def loss_fn(_):
        za = pool_representation(model.encoder(views_s[0], views_m[0]))
        zb = pool_representation(model.encoder(views_s[1], views_m[1]))
        return tca_loss(ContrastiveBatch(za, zb, tau))

    return grad_check(loss_fn, model.encoder_parameters(), step=step, tolerance=tolerance,
                      max_entries=max_entries, rng=np.random.default_rng(seed + 1))


def full_suite(seed: int = 0, instances: int = 20, tolerance: float = 1e-3,
               max_entries: int | None = 3) -> dict[str, GradReport]:
    """Every op once plus ``instances`` random end-to-end checks of each objective."""
    reports = {f"op/{k}": v for k, v in op_suite(seed, tolerance).items()}
    for i in range(instances):
        reports[f"yield_path/{i}"] = yield_path_check(seed * 1000 + i, tolerance, max_entries)
        reports[f"contrastive_path/{i}"] = contrastive_path_check(seed * 1000 + i, tolerance, max_entries)
    return reports
