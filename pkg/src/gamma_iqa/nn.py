"""Transformer building blocks with per-parameter trainability.

Every parameter belongs to a named group (``"adapter"``, ``"router"`` ...).
Freezing is expressed by group membership in a :class:`FreezePolicy`; a frozen
parameter has ``requires_grad=False`` and is skipped by the optimiser.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


class ConfigurationError(ValueError):
    """Invalid model, policy or run configuration."""


# Groups a model can contain. Plain encoder pieces are never trainable by
# default; the MoAE pieces and the score head are.
PARAM_GROUPS = (
    "patch_embed",
    "token_embed",
    "pos_embed",
    "attention",
    "norm",
    "ffn",
    "shared_expert",
    "adaptive_experts",
    "router",
    "sigma",
    "adapter",
    "C",
    "tau",
)

DEFAULT_TRAINABLE = frozenset({"adaptive_experts", "router", "sigma", "adapter", "C", "tau"})


def init_weight(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Module:
    """Owner of named parameters and child modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, str, Tensor]]:
        """Yield ``(path, group, tensor)`` in a stable order."""
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Param):
                yield path, value.group, value.tensor
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [t for _, _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())


@dataclass
class Param:
    tensor: Tensor
    group: str

    @classmethod
    def of(cls, data: np.ndarray, group: str) -> "Param":
        return cls(Tensor(data, requires_grad=group in DEFAULT_TRAINABLE), group)


class AffineLayer(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, group: str, std: float = 0.02):
        self.weight = Param.of(init_weight(rng, (d_out, d_in), std), group)
        self.bias = Param.of(np.zeros(d_out), group)

    @property
    def trainable(self) -> bool:
        return self.weight.tensor.requires_grad

    def __call__(self, x: Tensor) -> Tensor:
        return T.affine(x, self.weight.tensor, self.bias.tensor)


class LayerNorm(Module):
    def __init__(self, d: int, group: str = "norm"):
        self.gain = Param.of(np.ones(d), group)
        self.shift = Param.of(np.zeros(d), group)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain.tensor, self.shift.tensor)


class FeedForward(Module):
    """affine -> rectifier -> affine, width d -> hidden -> d."""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator, group: str = "ffn", std: float = 0.02):
        self.fc1 = AffineLayer(d, hidden, rng, group, std)
        self.fc2 = AffineLayer(hidden, d, rng, group, std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))

    def regroup(self, group: str) -> None:
        for layer in (self.fc1, self.fc2):
            for p in (layer.weight, layer.bias):
                p.group = group


class SelfAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator, std: float = 0.02):
        if d % heads:
            raise ConfigurationError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = AffineLayer(d, d, rng, "attention", std)
        self.k = AffineLayer(d, d, rng, "attention", std)
        self.v = AffineLayer(d, d, rng, "attention", std)
        self.out = AffineLayer(d, d, rng, "attention", std)

    def __call__(self, x: Tensor) -> Tensor:
        return attention(
            x,
            [self.q.weight.tensor, self.q.bias.tensor, self.k.weight.tensor, self.k.bias.tensor,
             self.v.weight.tensor, self.v.bias.tensor, self.out.weight.tensor, self.out.bias.tensor],
            self.heads,
        )

    def reference(self, x: Tensor) -> Tensor:
        """Same computation composed from primitive tensor ops."""
        b, t, d = x.shape
        h = self.heads
        dh = d // h

        def split(z: Tensor) -> Tensor:
            return T.transpose(T.reshape(z, (b, t, h, dh)), (0, 2, 1, 3))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(dh))
        ctx = T.matmul(T.softmax(scores, axis=-1), v)
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return self.out(merged)


def attention(x: Tensor, params: list[Tensor], heads: int) -> Tensor:
    """Fused multi-head self-attention over (B, t, d) with one tape node."""
    wq, bq, wk, bk, wv, bv, wo, bo = params
    b, t, d = x.shape
    if wq.shape != (d, d):
        raise DimensionError(f"attention: input width {d} but projections {wq.shape}")
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    X = x.data

    def heads_of(z):
        return z.reshape(b, t, heads, dh).transpose(0, 2, 1, 3)

    Q = heads_of(X @ wq.data.T + bq.data)
    K = heads_of(X @ wk.data.T + bk.data)
    V = heads_of(X @ wv.data.T + bv.data)
    S = (Q @ K.transpose(0, 1, 3, 2)) * scale
    S -= S.max(axis=-1, keepdims=True)
    P = np.exp(S)
    P /= P.sum(axis=-1, keepdims=True)
    merged = (P @ V).transpose(0, 2, 1, 3).reshape(b, t, d)
    out = merged @ wo.data.T + bo.data

    def rule(g):
        X2 = X.reshape(-1, d)
        g2 = g.reshape(-1, d)
        gwo = g2.T @ merged.reshape(-1, d)
        gbo = g2.sum(axis=0)
        gC = heads_of(g @ wo.data)
        gP = gC @ V.transpose(0, 1, 3, 2)
        gV = P.transpose(0, 1, 3, 2) @ gC
        gS = P * (gP - (gP * P).sum(axis=-1, keepdims=True)) * scale
        gQ = gS @ K
        gK = gS.transpose(0, 1, 3, 2) @ Q

        def merge(z):
            return z.transpose(0, 2, 1, 3).reshape(-1, d)

        gQ, gK, gV = merge(gQ), merge(gK), merge(gV)
        gx = (gQ @ wq.data + gK @ wk.data + gV @ wv.data).reshape(b, t, d)
        return (
            gx,
            gQ.T @ X2, gQ.sum(axis=0),
            gK.T @ X2, gK.sum(axis=0),
            gV.T @ X2, gV.sum(axis=0),
            gwo, gbo,
        )

    return T.record(out, (x, *params), rule, "attention")


class TransformerBlock(Module):
    """Pre-norm block: ``x + attn(norm1(x))`` then ``x + ffn(norm2(x))``.

    ``ffn`` is any callable module mapping width d to d, so a mixture-of-experts
    layer can stand in for the plain feed-forward network.
    """

    def __init__(
        self, d: int, heads: int, rng: np.random.Generator, ffn: Module | None = None, std: float = 0.02
    ):
        self.d = d
        self.norm1 = LayerNorm(d)
        self.attention = SelfAttention(d, heads, rng, std)
        self.norm2 = LayerNorm(d)
        self.ffn = ffn if ffn is not None else FeedForward(d, 4 * d, rng, std=std)

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim == 2:
            return T.reshape(self(T.reshape(x, (1,) + x.shape)), x.shape)
        if x.shape[-1] != self.d:
            raise DimensionError(f"block: input width {x.shape[-1]} but block width {self.d}")
        if x.shape[-2] < 1:
            raise DimensionError("block: need at least one token")
        x = T.add(x, self.attention(self.norm1(x)))
        return T.add(x, self.ffn(self.norm2(x)))


class EmbeddingTable(Module):
    def __init__(self, vocab: int, d: int, rng: np.random.Generator, group: str = "token_embed", std: float = 0.02):
        self.table = Param.of(init_weight(rng, (vocab, d), std), group)

    @property
    def trainable(self) -> bool:
        return self.table.tensor.requires_grad

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        vocab = self.table.tensor.shape[0]
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            raise IndexError(f"token id out of range for vocabulary of {vocab}")
        return T.take(self.table.tensor, ids.reshape(-1), axis=0) if ids.ndim == 1 else T.reshape(
            T.take(self.table.tensor, ids.reshape(-1), axis=0), ids.shape + (self.table.tensor.shape[1],)
        )


# ---------------------------------------------------------------- freezing

@dataclass(frozen=True)
class FreezePolicy:
    """Set of parameter groups that train; everything else is frozen."""

    trainable: frozenset = DEFAULT_TRAINABLE

    @classmethod
    def of(cls, groups=None) -> "FreezePolicy":
        if not groups:
            return cls()
        return cls(frozenset(groups))

    @classmethod
    def freeze_all(cls) -> "FreezePolicy":
        return cls(frozenset())


def set_trainable(module: Module, policy: FreezePolicy) -> None:
    requested = set(policy.trainable)
    unknown = requested - set(PARAM_GROUPS)
    if unknown:
        raise ConfigurationError(f"unknown parameter group(s): {sorted(unknown)}")
    for _, group, t in module.named_parameters():
        t.requires_grad = group in requested
        t.grad = None


def trainable_groups(module: Module) -> set[str]:
    return {g for _, g, t in module.named_parameters() if t.requires_grad}


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"GCKPT1\n"


def save_checkpoint(module: Module) -> bytes:
    """Serialise parameters as ordered ``(group/path, shape, float64 LE)`` records."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    records = list(module.named_parameters())
    buf.write(struct.pack("<I", len(records)))
    for path, group, t in records:
        name = f"{group}/{path}".encode("utf-8")
        buf.write(struct.pack("<I", len(name)))
        buf.write(name)
        buf.write(struct.pack("<I", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def read_checkpoint(blob: bytes) -> list[tuple[str, tuple[int, ...], np.ndarray]]:
    if not blob.startswith(_MAGIC):
        raise ValueError("not a checkpoint blob")
    pos = len(_MAGIC)

    def unpack(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, blob, pos)
        pos += struct.calcsize(fmt)
        return vals

    (count,) = unpack("<I")
    out = []
    for _ in range(count):
        (n,) = unpack("<I")
        name = blob[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = unpack("<I")
        shape = unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
        out.append((name, tuple(shape), data))
    return out


def load_checkpoint(module: Module, blob: bytes) -> None:
    records = read_checkpoint(blob)
    params = list(module.named_parameters())
    if len(records) != len(params):
        raise ValueError(f"checkpoint has {len(records)} records, model has {len(params)}")
    for (name, shape, data), (path, group, t) in zip(records, params):
        if name != f"{group}/{path}" or shape != t.shape:
            raise ValueError(f"checkpoint record {name} {shape} does not match {group}/{path} {t.shape}")
        t.data[...] = data
