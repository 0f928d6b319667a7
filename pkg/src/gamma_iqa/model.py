"""Dual-encoder assessor: image and text transformers whose last K blocks carry
MoAE layers, an adapter on the pooled image feature, and a five-anchor score
head ``q = sum_k C_k softmax(I'.T_k / tau)_k``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .moae import MoAELayer
from .nn import (
    AffineLayer,
    ConfigurationError,
    EmbeddingTable,
    FeedForward,
    FreezePolicy,
    Module,
    Param,
    TransformerBlock,
    init_weight,
    set_trainable,
)
from .prompts import PromptSet, Scene, Vocabulary, prompts_for, tokenize
from .seeding import derive_rng
from .tensor import DimensionError, Tensor

C_INIT = (0.2, 0.4, 0.6, 0.8, 1.0)
MAX_PROMPT_LEN = 16


@dataclass
class EncoderConfig:
    L: int = 6
    K: int = 6
    d: int = 32
    heads: int = 4
    n_experts: int = 3
    tau: float = 0.07
    patch_grid: int = 4
    channels: int = 8
    vocab: int = 0  # 0 = size of the prompt vocabulary
    pooling: str = "mean"  # mean | first
    routing: str = "token"  # token | pooled
    train_C: bool = True
    sigma_mode: str = "learned"  # learned | fixed  (fixed: sigma = 1, frozen)
    unfreeze_shared: bool = False
    init_std: float = 0.1  # encoder weights; router and adapter always use 0.02
    embed_std: float = 0.1
    text_init_std: float | None = 0.3  # None: same as the visual side
    text_embed_std: float | None = 0.3
    similarity: str = "cosine"  # cosine | dot

    def validate(self) -> None:
        if not 0 <= self.K <= self.L:
            raise ConfigurationError(f"need 0 <= K <= L, got K={self.K}, L={self.L}")
        if self.tau <= 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if self.n_experts < 0:
            raise ConfigurationError(f"n_experts must be >= 0, got {self.n_experts}")
        if self.d % self.heads:
            raise ConfigurationError(f"width {self.d} not divisible by {self.heads} heads")
        if self.pooling not in ("mean", "first"):
            raise ConfigurationError(f"pooling must be 'mean' or 'first', got {self.pooling!r}")
        if self.similarity not in ("cosine", "dot"):
            raise ConfigurationError(f"similarity must be 'cosine' or 'dot', got {self.similarity!r}")
        if self.sigma_mode not in ("learned", "fixed"):
            raise ConfigurationError(f"sigma_mode must be 'learned' or 'fixed', got {self.sigma_mode!r}")
        if self.patch_grid < 1 or self.channels < 1:
            raise ConfigurationError("patch_grid and channels must be positive")

    @property
    def moae_layers(self) -> int:
        return self.K if self.n_experts > 0 else 0

    @property
    def num_patches(self) -> int:
        return self.patch_grid**2

    def to_dict(self) -> dict:
        return asdict(self)


class Encoder(Module):
    """Stack of L pre-norm blocks, the last K with MoAE in place of the FFN."""

    def __init__(
        self,
        config: EncoderConfig,
        tokens: int,
        rng: np.random.Generator,
        router_rng: np.random.Generator,
        init_std: float,
        embed_std: float,
    ):
        d = config.d
        self.pos = Param.of(init_weight(rng, (tokens, d), embed_std), "pos_embed")
        self.blocks = []
        first_moae = config.L - config.moae_layers
        for i in range(config.L):
            block = TransformerBlock(d, config.heads, rng, std=init_std)
            if i >= first_moae:
                block.ffn = MoAELayer(d, config.n_experts, router_rng, shared=block.ffn, routing=config.routing)
            self.blocks.append(block)
        self.pooling = config.pooling

    def moae_layers(self) -> list[tuple[int, MoAELayer]]:
        return [(i, b.ffn) for i, b in enumerate(self.blocks) if isinstance(b.ffn, MoAELayer)]

    def run(self, x: Tensor, positions: np.ndarray) -> Tensor:
        """``x`` is (B, t, d) token embeddings; ``positions`` (B, t) or (t,) indices."""
        pos = self.pos.tensor
        if positions.ndim == 1:
            x = _add_rows(x, T.take(pos, positions))
        else:
            x = T.add(x, T.reshape(T.take(pos, positions.reshape(-1)), x.shape))
        for block in self.blocks:
            x = block(x)
        if self.pooling == "first":
            return T.reshape(T.take(x, [0], axis=1), (x.shape[0], x.shape[2]))
        return T.mean(x, axis=1)


def _add_rows(x: Tensor, rows: Tensor) -> Tensor:
    """Add the same (t, d) matrix to every batch element of (B, t, d)."""
    b = x.shape[0]
    tiled = T.take(T.reshape(rows, (1,) + rows.shape), np.zeros(b, dtype=np.int64), axis=0)
    return T.add(x, tiled)


class ScoreHead(Module):
    def __init__(self, d: int, tau: float, rng: np.random.Generator, similarity: str = "cosine"):
        self.similarity = similarity
        self.adapter_fc1 = AffineLayer(d, d, rng, "adapter")
        self.adapter_fc2 = AffineLayer(d, d, rng, "adapter")
        self.C = Param.of(np.array(C_INIT), "C")
        # temperature is stored as log(tau) so optimisation keeps it positive
        self.tau = Param.of(np.array([np.log(tau)]), "tau")

    def adapter(self, feature: Tensor) -> Tensor:
        return self.adapter_fc2(T.relu(self.adapter_fc1(feature)))

    @property
    def temperature(self) -> float:
        return float(np.exp(self.tau.tensor.data[0]))

    def score_from_similarities(self, sims: Tensor) -> Tensor:
        """(B, 5) similarities -> (B,) scores."""
        logits = T.div(sims, T.exp(self.tau.tensor))
        probs = T.softmax(logits, axis=-1)
        return T.reshape(T.matmul(probs, T.reshape(self.C.tensor, (5, 1))), (sims.shape[0],))

    def __call__(self, image_feature: Tensor, text_features: Tensor) -> Tensor:
        """image (B, d), text (B, 5, d) -> (B,) scores."""
        b, d = image_feature.shape
        if text_features.shape != (b, 5, d):
            raise DimensionError(f"score head: text features {text_features.shape}, expected {(b, 5, d)}")
        img = self.adapter(image_feature)
        if self.similarity == "cosine":
            img, text_features = T.l2_normalize(img), T.l2_normalize(text_features)
        img = T.reshape(img, (b, 1, d))
        sims = T.reshape(T.matmul(img, T.transpose(text_features)), (b, 5))
        return self.score_from_similarities(sims)


class GammaModel(Module):
    def __init__(self, config: EncoderConfig, seed: int):
        config.validate()
        self.config = config
        vocab = Vocabulary.build()
        self.vocab = vocab
        if config.vocab == 0:
            config.vocab = vocab.size
        if config.vocab < vocab.size:
            raise ConfigurationError(f"vocab {config.vocab} smaller than prompt lexicon {vocab.size}")
        self.seed = seed
        vis_rng = derive_rng(seed, "model", "visual")
        txt_rng = derive_rng(seed, "model", "text")
        self.patch_embed = AffineLayer(config.channels, config.d, vis_rng, "patch_embed", config.embed_std)
        self.visual = Encoder(config, config.num_patches, vis_rng, derive_rng(seed, "model", "visual-router"),
                              config.init_std, config.embed_std)
        text_init = config.init_std if config.text_init_std is None else config.text_init_std
        text_embed = config.embed_std if config.text_embed_std is None else config.text_embed_std
        self.token_embed = EmbeddingTable(config.vocab, config.d, txt_rng, std=text_embed)
        self.text = Encoder(config, MAX_PROMPT_LEN, txt_rng, derive_rng(seed, "model", "text-router"),
                            text_init, text_embed)
        self.head = ScoreHead(config.d, config.tau, derive_rng(seed, "model", "head"), config.similarity)

    # ------------------------------------------------------------ encoders

    def encode_images(self, images, positions=None) -> Tensor:
        """(B, P, channels) patches -> (B, d). ``positions`` selects grid slots."""
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.data.ndim == 2:
            x = T.reshape(x, (1,) + x.shape)
        b, p, c = x.shape
        if c != self.config.channels:
            raise DimensionError(f"image has {c} channels, model expects {self.config.channels}")
        if positions is None:
            if p != self.config.num_patches:
                raise DimensionError(f"image has {p} patches, model expects {self.config.num_patches}")
            positions = np.arange(p)
        positions = np.asarray(positions, dtype=np.int64)
        if positions.shape[-1] != p:
            raise DimensionError(f"{p} patches but {positions.shape[-1]} positions")
        return self.visual.run(self.patch_embed(x), positions)

    def encode_image(self, image, positions=None) -> Tensor:
        """Single (P, channels) image -> feature of width d."""
        return T.reshape(self.encode_images(image, positions), (self.config.d,))

    def encode_texts(self, token_lists: list[list[int]]) -> Tensor:
        """Encode several prompts; same-length prompts share one batched pass."""
        vocab = self.config.vocab
        for ids in token_lists:
            if not ids or len(ids) > MAX_PROMPT_LEN:
                raise ValueError(f"prompt length {len(ids)} outside [1, {MAX_PROMPT_LEN}]")
            if min(ids) < 0 or max(ids) >= vocab:
                raise ValueError(f"token id out of vocabulary (size {vocab}): {ids}")
        by_len: dict[int, list[int]] = {}
        for i, ids in enumerate(token_lists):
            by_len.setdefault(len(ids), []).append(i)
        parts, order = [], []
        for length, idxs in sorted(by_len.items()):
            ids = np.array([token_lists[i] for i in idxs])
            emb = self.token_embed(ids)  # (n, length, d)
            parts.append(self.text.run(emb, np.arange(length)))
            order.extend(idxs)
        if len(parts) == 1:
            stacked = parts[0]
        else:
            stacked = _concat_rows(parts)
        inverse = np.argsort(np.array(order))
        return T.take(stacked, inverse, axis=0)

    def encode_text(self, token_ids: list[int]) -> Tensor:
        return T.reshape(self.encode_texts([list(token_ids)]), (self.config.d,))

    def prompt_features(self, prompt_sets: list[PromptSet]) -> Tensor:
        """(S, 5, d) text features for S prompt sets."""
        token_lists = [tokenize(self.vocab, text) for ps in prompt_sets for text in ps.levels]
        feats = self.encode_texts(token_lists)
        return T.reshape(feats, (len(prompt_sets), 5, self.config.d))

    # ------------------------------------------------------------ scoring

    def score(self, images, prompt_sets: list[PromptSet], set_index, positions=None) -> Tensor:
        """Scores (B,) for images; sample b uses ``prompt_sets[set_index[b]]``."""
        for ps in prompt_sets:
            if len(ps.levels) != 5:
                raise ConfigurationError("prompt set must have exactly 5 levels")
        feats = self.encode_images(images, positions)
        text = self.prompt_features(prompt_sets)
        per_sample = T.take(text, np.asarray(set_index, dtype=np.int64), axis=0)
        return self.head(feats, per_sample)

    def score_scenes(self, images, scenes, strategy: str = "sdp", positions=None) -> Tensor:
        scenes = [Scene.parse(s) for s in scenes]
        sets: list[PromptSet] = []
        index = []
        for s in scenes:
            ps = prompts_for(strategy, s)
            if ps not in sets:
                sets.append(ps)
            index.append(sets.index(ps))
        return self.score(images, sets, index, positions)

    def predict_score(self, image, prompt_set) -> float:
        if isinstance(prompt_set, PromptSet):
            ps = prompt_set
        else:
            levels = tuple(prompt_set)
            if len(levels) != 5:
                raise ConfigurationError(f"predict_score needs exactly 5 prompts, got {len(levels)}")
            ps = PromptSet(levels)
        with T.no_grad():
            q = self.score(np.asarray(image.data if isinstance(image, Tensor) else image)[None], [ps], [0])
        return float(q.data[0])

    # ------------------------------------------------------------ structure

    def moae_layers(self) -> list[tuple[str, int, MoAELayer]]:
        return [("visual", i, m) for i, m in self.visual.moae_layers()] + [
            ("text", i, m) for i, m in self.text.moae_layers()
        ]

    def default_policy(self) -> FreezePolicy:
        groups = {"adaptive_experts", "router", "sigma", "adapter", "C", "tau"}
        if not self.config.train_C:
            groups.discard("C")
        if self.config.sigma_mode == "fixed":
            groups.discard("sigma")
        if self.config.unfreeze_shared:
            groups.add("shared_expert")
        return FreezePolicy.of(groups)


def _concat_rows(parts: list[Tensor]) -> Tensor:
    """Concatenate (n_i, d) tensors along axis 0 with gradient routing."""
    data = np.concatenate([p.data for p in parts], axis=0)
    sizes = np.cumsum([p.shape[0] for p in parts])[:-1]

    def rule(g):
        return tuple(np.split(g, sizes, axis=0))

    return T.record(data, tuple(parts), rule, "concat")


def build_model(config: EncoderConfig | None = None, seed: int = 0) -> GammaModel:
    config = EncoderConfig(**asdict(config)) if config is not None else EncoderConfig()
    model = GammaModel(config, seed)
    for _, _, layer in model.moae_layers():
        layer.init_adaptive_from_shared()
        if config.sigma_mode == "fixed":
            layer.sigma.tensor.data[...] = 1.0
    set_trainable(model, model.default_policy())
    return model


def count_parameters(config: EncoderConfig) -> int:
    """Closed-form parameter count, independent of construction."""
    d, L, n = config.d, config.L, config.n_experts
    vocab = config.vocab or Vocabulary.build().size
    h = 4 * d
    ffn = d * h + h + h * d + d
    block = 4 * (d * d + d) + 2 * 2 * d + ffn
    moae_extra = n * ffn + n * d + 1
    k = config.moae_layers
    per_encoder = L * block + k * moae_extra
    visual = config.channels * d + d + config.num_patches * d + per_encoder
    text = vocab * d + MAX_PROMPT_LEN * d + per_encoder
    head = 2 * (d * d + d) + 5 + 1
    return visual + text + head
