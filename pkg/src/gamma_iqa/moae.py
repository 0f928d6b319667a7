"""Mixture of assessment experts: frozen shared FFN plus routed adaptive FFNs.

Output per token is ``shared(x) + sigma * sum_i g_i(x) * adaptive_i(x)`` with
``g(x) = softmax(W x)``. ``sigma`` starts at exactly zero, so a fresh layer is
indistinguishable from the plain feed-forward network it replaces.
"""
from __future__ import annotations

import contextlib
import copy
import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import ConfigurationError, FeedForward, Module, Param, init_weight
from .tensor import DimensionError, Tensor


@dataclass
class RouterOutput:
    weights: Tensor  # (..., n) mixture weights, rows sum to one


class MoAELayer(Module):
    def __init__(
        self,
        d: int,
        n: int,
        rng: np.random.Generator,
        hidden: int | None = None,
        shared: FeedForward | None = None,
        routing: str = "token",
    ):
        if n < 1:
            raise ConfigurationError("a MoAE layer needs at least one adaptive expert")
        if routing not in ("token", "pooled"):
            raise ConfigurationError(f"routing must be 'token' or 'pooled', got {routing!r}")
        self.d = d
        self.n = n
        self.routing = routing
        self.shared = shared if shared is not None else FeedForward(d, hidden or 4 * d, rng)
        self.shared.regroup("shared_expert")
        for p in self.shared.parameters():
            p.requires_grad = False
        self.adaptive = [copy.deepcopy(self.shared) for _ in range(n)]
        for expert in self.adaptive:
            expert.regroup("adaptive_experts")
            for p in expert.parameters():
                p.requires_grad = True
        self.router_W = Param.of(init_weight(rng, (n, d)), "router")
        self.sigma = Param.of(np.zeros(1), "sigma")
        self._forced: int | None = None
        self._capture: list | None = None
        self.init_adaptive_from_shared()

    def init_adaptive_from_shared(self) -> None:
        """Make every adaptive expert an independent copy of the shared one."""
        for expert in self.adaptive:
            for (_, _, dst), (_, _, src) in zip(expert.named_parameters(), self.shared.named_parameters()):
                dst.data = src.data.copy()

    # ------------------------------------------------------------ routing

    def route(self, x: Tensor) -> RouterOutput:
        if x.shape[-1] != self.d:
            raise DimensionError(f"route: input width {x.shape[-1]} but layer width {self.d}")
        lead = x.shape[:-1]
        if self._forced is not None:
            onehot = np.zeros(lead + (self.n,))
            onehot[..., self._forced] = 1.0
            return RouterOutput(Tensor(onehot))
        W = self.router_W.tensor
        if self.routing == "pooled" and x.data.ndim == 3:
            pooled = T.mean(x, axis=1)  # (B, d)
            g = T.softmax(T.matmul(pooled, T.transpose(W)), axis=-1)
            g = T.take(T.reshape(g, (lead[0], 1, self.n)), np.zeros(lead[1], dtype=np.int64), axis=1)
            return RouterOutput(g)
        flat = T.reshape(x, (-1, self.d))
        g = T.softmax(T.matmul(flat, T.transpose(W)), axis=-1)
        return RouterOutput(T.reshape(g, lead + (self.n,)))

    @contextlib.contextmanager
    def force_single_expert(self, index: int):
        """Route every token to expert ``index`` while the context is active."""
        if not 0 <= index < self.n:
            raise ConfigurationError(f"expert index {index} outside [0, {self.n})")
        prev = self._forced
        self._forced = index
        try:
            yield self
        finally:
            self._forced = prev

    @contextlib.contextmanager
    def capture_routing(self):
        """Collect every (tokens, n) router weight matrix computed in the context."""
        prev = self._capture
        self._capture = []
        try:
            yield self._capture
        finally:
            self._capture = prev

    # ------------------------------------------------------------ forward

    def adaptive_output(self, x: Tensor, weights: Tensor | None = None) -> Tensor:
        g = weights if weights is not None else self.route(x).weights
        if self._capture is not None:
            self._capture.append(g.data.reshape(-1, self.n).copy())
        return expert_mixture(x, g, self.adaptive)

    def adaptive_output_loop(self, x: Tensor, weights: Tensor | None = None) -> Tensor:
        """Unfused reference: explicit per-expert evaluation and mixing."""
        g = weights if weights is not None else self.route(x).weights
        return T.mix(g, [expert(x) for expert in self.adaptive])

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d:
            raise DimensionError(f"moae: input width {x.shape[-1]} but layer width {self.d}")
        y_shared = self.shared(x)
        return T.add(y_shared, T.mul(self.sigma.tensor, self.adaptive_output(x)))


def expert_mixture(x: Tensor, g: Tensor, experts: list[FeedForward]) -> Tensor:
    """``sum_i g[..., i] * experts[i](x)`` as a single tape node.

    The experts' first layers are evaluated as one stacked affine map and the
    router weights scale each expert's hidden block before the second layer.
    """
    n = len(experts)
    d = x.shape[-1]
    if g.shape != x.shape[:-1] + (n,):
        raise DimensionError(f"expert mixture: weights {g.shape} vs input {x.shape} and {n} experts")
    params = []
    for e in experts:
        params += [e.fc1.weight.tensor, e.fc1.bias.tensor, e.fc2.weight.tensor, e.fc2.bias.tensor]
    h = experts[0].fc1.weight.tensor.shape[0]
    X = x.data.reshape(-1, d)
    G = g.data.reshape(-1, n)
    W1 = np.concatenate([e.fc1.weight.tensor.data for e in experts], axis=0)  # (n*h, d)
    b1 = np.concatenate([e.fc1.bias.tensor.data for e in experts])
    W2 = np.concatenate([e.fc2.weight.tensor.data for e in experts], axis=1)  # (d, n*h)
    B2 = np.stack([e.fc2.bias.tensor.data for e in experts])  # (n, d)
    A = X @ W1.T + b1
    H = np.maximum(A, 0.0)
    Grep = np.repeat(G, h, axis=1)
    Hg = H * Grep
    out = (Hg @ W2.T + G @ B2).reshape(x.shape)

    def rule(grad):
        G_out = grad.reshape(-1, d)
        gW2 = G_out.T @ Hg
        gB2 = G.T @ G_out
        gHg = G_out @ W2
        gG = (gHg * H).reshape(-1, n, h).sum(axis=2) + G_out @ B2.T
        gA = gHg * Grep * (A > 0)
        gW1 = gA.T @ X
        gb1 = gA.sum(axis=0)
        gx = (gA @ W1).reshape(x.shape)
        grads = []
        for i in range(n):
            sl = slice(i * h, (i + 1) * h)
            grads += [gW1[sl], gb1[sl], gW2[:, sl], gB2[i]]
        return (gx, gG.reshape(g.shape), *grads)

    return T.record(out, (x, g, *params), rule, "expert_mixture")


def write_activation_csv(path, rows) -> None:
    """Rows of ``(dataset, layer, expert_index, mean_weight)``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["dataset", "layer", "expert_index", "mean_weight"])
        for dataset, layer, expert, weight in rows:
            writer.writerow([dataset, layer, expert, repr(float(weight))])
