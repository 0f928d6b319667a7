"""Gradient-check battery over every layer type and the full score pipeline."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .model import EncoderConfig, ScoreHead, build_model
from .moae import MoAELayer
from .nn import AffineLayer, EmbeddingTable, FeedForward, LayerNorm, SelfAttention, TransformerBlock
from .seeding import derive_rng
from .tensor import Tensor, grad_check, parameters_grad_check

LAYER_TOL = 1e-4
# Per-coordinate denominator floor. Some true gradients are exactly zero (the
# attention key bias shifts every logit of a query equally), where central
# differences only return roundoff of order 1e-10.
FLOOR = 1e-5
PIPELINE_TOL = 1e-3


@dataclass
class BatteryResult:
    name: str
    max_rel_error: float
    tol: float
    trials: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _unfreeze(module):
    for p in module.parameters():
        p.requires_grad = True
    return module


def _layer_case(name: str, rng: np.random.Generator):
    """(module, input shape, output shape) with non-trivial weights."""
    if name == "affine":
        return AffineLayer(4, 3, rng, "ffn", std=0.5), (3, 4), (3, 3)
    if name == "layer_norm":
        ln = LayerNorm(4)
        ln.gain.tensor.data[...] = rng.uniform(0.5, 1.5, size=4)
        ln.shift.tensor.data[...] = rng.uniform(-0.5, 0.5, size=4)
        return ln, (3, 4), (3, 4)
    if name == "ffn":
        return FeedForward(4, 16, rng, std=0.5), (3, 4), (3, 4)
    if name == "attention":
        return SelfAttention(8, 2, rng, std=0.5), (1, 3, 8), (1, 3, 8)
    if name == "block":
        return TransformerBlock(8, 2, rng, std=0.5), (3, 8), (3, 8)
    if name == "moae":
        layer = MoAELayer(4, 3, rng, hidden=16)
        layer.router_W.tensor.data[...] = rng.normal(size=(3, 4))
        layer.sigma.tensor.data[...] = rng.uniform(0.2, 1.0)
        for expert in layer.adaptive:
            for p in expert.parameters():
                p.data += rng.normal(scale=0.3, size=p.shape)
        for p in layer.shared.parameters():
            p.data += rng.normal(scale=0.3, size=p.shape)
        return layer, (1, 3, 4), (1, 3, 4)
    if name == "score_head":
        head = ScoreHead(4, 0.5, rng)
        for p in head.parameters():
            p.data += rng.normal(scale=0.3, size=p.shape)
        return head, None, None
    raise KeyError(name)


LAYERS = ("affine", "layer_norm", "ffn", "attention", "block", "moae", "score_head", "embedding")


def check_layer(name: str, rng: np.random.Generator, eps: float = 1e-5) -> float:
    """Max relative error over input and parameter gradients for one random draw."""
    if name == "embedding":
        table = _unfreeze(EmbeddingTable(6, 4, rng, std=0.5))
        w = Tensor(rng.uniform(-1, 1, size=(4, 4)))
        ids = rng.integers(0, 6, size=4)
        return parameters_grad_check(
            lambda: T.sum_all(T.mul(table(ids), w)), table.parameters(), eps=eps, tol=LAYER_TOL, floor=FLOOR
        ).max_rel_error
    module, in_shape, out_shape = _layer_case(name, rng)
    _unfreeze(module)
    if name == "score_head":
        img = Tensor(rng.uniform(-2, 2, size=(2, 4)), requires_grad=True)
        txt = Tensor(rng.uniform(-2, 2, size=(2, 5, 4)), requires_grad=True)
        target = Tensor(rng.uniform(0, 1, size=2))
        params = module.parameters() + [img, txt]
        return parameters_grad_check(
            lambda: T.mse_loss(module(img, txt), target), params, eps=eps, tol=LAYER_TOL, floor=FLOOR
        ).max_rel_error
    w = Tensor(rng.uniform(-1, 1, size=out_shape))
    x = Tensor(rng.uniform(-2, 2, size=in_shape), requires_grad=True)
    params = [p for p in module.parameters() if p.requires_grad] + [x]
    return parameters_grad_check(lambda: T.sum_all(T.mul(module(x), w)), params, eps=eps, tol=LAYER_TOL, floor=FLOOR).max_rel_error


PIPELINE_CONFIG = EncoderConfig(L=2, K=2, d=8, heads=2, n_experts=2, patch_grid=2, init_std=0.3, embed_std=0.3)


def check_pipeline(rng: np.random.Generator, eps: float = 1e-5, max_coords: int = 4) -> float:
    """MSE(score, target) through both encoders, MoAE, adapter and head."""
    cfg = PIPELINE_CONFIG
    model = build_model(cfg, int(rng.integers(0, 2**31)))
    for _, _, layer in model.moae_layers():
        layer.sigma.tensor.data[...] = rng.uniform(0.2, 1.0)
        layer.router_W.tensor.data[...] = rng.normal(size=layer.router_W.tensor.shape)
    images = rng.uniform(-2, 2, size=(2, cfg.num_patches, cfg.channels))
    scenes = list(rng.choice(["natural-quality", "face-quality", "natural-aesthetics"], size=2))
    target = Tensor(rng.uniform(0, 1, size=2))
    params = [t for _, _, t in model.named_parameters() if t.requires_grad]

    def loss():
        return T.mse_loss(model.score_scenes(images, scenes, "sdp"), target)

    err = parameters_grad_check(loss, params, eps=eps, tol=PIPELINE_TOL, floor=FLOOR, max_coords=max_coords, rng=rng).max_rel_error
    # image-side gradient through the whole stack as well
    img_rep = grad_check(
        lambda x: T.mse_loss(model.score_scenes(x, scenes, "sdp"), target), images, eps=eps, tol=PIPELINE_TOL, floor=FLOOR
    )
    return max(err, img_rep.max_rel_error)


def run_battery(trials: int = 20, seed: int = 0, progress: Callable[[BatteryResult], None] | None = None) -> list[BatteryResult]:
    results = []
    for name in LAYERS:
        worst = max(check_layer(name, derive_rng(seed, "gradcheck", name, t)) for t in range(trials))
        results.append(BatteryResult(name, worst, LAYER_TOL, trials))
        if progress:
            progress(results[-1])
    worst = max(check_pipeline(derive_rng(seed, "gradcheck", "pipeline", t)) for t in range(trials))
    results.append(BatteryResult("score_pipeline", worst, PIPELINE_TOL, trials))
    if progress:
        progress(results[-1])
    return results
