import numpy as np
import pytest

from gamma_iqa import tensor as T
from gamma_iqa.nn import (
    AffineLayer,
    ConfigurationError,
    EmbeddingTable,
    FeedForward,
    FreezePolicy,
    LayerNorm,
    SelfAttention,
    TransformerBlock,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    set_trainable,
    trainable_groups,
)
from gamma_iqa.tensor import DimensionError, Tensor, grad_check, parameters_grad_check
from gamma_iqa.training import AdamState


def rng(seed=0):
    return np.random.default_rng(seed)


def unfreeze(module):
    for p in module.parameters():
        p.requires_grad = True
    return module


def probe(shape, seed=99):
    """Fixed random weighting so that a tensor becomes a scalar loss."""
    return Tensor(np.random.default_rng(seed).uniform(-1, 1, size=shape))


# ---------------------------------------------------------------- affine

def test_affine_identity_and_bias_only():
    layer = AffineLayer(3, 3, rng(), "ffn")
    layer.weight.tensor.data[...] = np.eye(3)
    x = rng(1).normal(size=(4, 3))
    np.testing.assert_array_equal(layer(Tensor(x)).data, x)
    layer.weight.tensor.data[...] = 0
    layer.bias.tensor.data[...] = [1.0, -2.0, 0.5]
    np.testing.assert_array_equal(layer(Tensor(x)).data, np.tile([1.0, -2.0, 0.5], (4, 1)))


def test_affine_hand_case():
    layer = AffineLayer(2, 1, rng(), "ffn")
    layer.weight.tensor.data[...] = [[1.0, 1.0]]
    layer.bias.tensor.data[...] = [0.5]
    np.testing.assert_array_equal(layer(Tensor([[1.0, 2.0]])).data, [[3.5]])


def test_affine_width_mismatch():
    with pytest.raises(DimensionError):
        AffineLayer(3, 2, rng(), "ffn")(Tensor(np.ones((2, 4))))


# ---------------------------------------------------------------- ffn

def test_ffn_zero_layers_give_zero():
    ffn = FeedForward(4, 16, rng())
    for p in ffn.parameters():
        p.data[...] = 0
    assert np.all(ffn(Tensor(rng(1).normal(size=(3, 4)))).data == 0)


def test_ffn_dead_hidden_layer_returns_second_bias():
    ffn = FeedForward(2, 8, rng())
    ffn.fc1.weight.tensor.data[...] = 1.0
    ffn.fc1.bias.tensor.data[...] = -10.0
    ffn.fc2.bias.tensor.data[...] = [0.25, -0.75]
    out = ffn(Tensor([[1.0, 2.0], [0.5, -1.0]])).data
    np.testing.assert_array_equal(out, [[0.25, -0.75], [0.25, -0.75]])


def test_ffn_matches_explicit_chain():
    ffn = FeedForward(3, 12, rng(), std=0.5)
    x = rng(1).normal(size=(5, 3))
    h = np.maximum(x @ ffn.fc1.weight.tensor.data.T + ffn.fc1.bias.tensor.data, 0)
    want = h @ ffn.fc2.weight.tensor.data.T + ffn.fc2.bias.tensor.data
    np.testing.assert_allclose(ffn(Tensor(x)).data, want, rtol=0, atol=1e-14)


# ---------------------------------------------------------------- attention / block

def test_fused_attention_matches_primitives():
    attn = SelfAttention(8, 2, rng(), std=0.5)
    x = Tensor(rng(1).normal(size=(2, 5, 8)))
    np.testing.assert_allclose(attn(x).data, attn.reference(x).data, atol=1e-13)


def test_fused_attention_grads_match_primitives():
    attn = unfreeze(SelfAttention(8, 2, rng(), std=0.5))
    x = Tensor(rng(1).normal(size=(2, 5, 8)), requires_grad=True)
    w = probe((2, 5, 8))
    grads = []
    for f in (attn, attn.reference):
        for p in attn.parameters() + [x]:
            p.grad = None
        T.backward(T.sum_all(T.mul(f(x), w)))
        grads.append([p.grad.copy() for p in attn.parameters() + [x]])
    for a, b in zip(*grads):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_heads_must_divide_width():
    with pytest.raises(ConfigurationError):
        SelfAttention(10, 4, rng())


def test_block_residual_identity_single_token():
    block = TransformerBlock(8, 2, rng())
    for layer in (block.attention.out, block.ffn.fc2):
        layer.weight.tensor.data[...] = 0
        layer.bias.tensor.data[...] = 0
    x = rng(1).normal(size=(1, 8))
    np.testing.assert_array_equal(block(Tensor(x)).data, x)


def test_block_is_permutation_equivariant():
    block = TransformerBlock(8, 2, rng(), std=0.3)
    x = rng(1).normal(size=(6, 8))
    perm = rng(2).permutation(6)
    np.testing.assert_allclose(block(Tensor(x[perm])).data, block(Tensor(x)).data[perm], atol=1e-13)


@pytest.mark.parametrize("d", [8, 16, 32])
def test_block_preserves_shape(d):
    block = TransformerBlock(d, 4, rng())
    for tokens in range(1, 17):
        assert block(Tensor(np.ones((tokens, d)))).shape == (tokens, d)


def test_block_width_mismatch():
    with pytest.raises(DimensionError):
        TransformerBlock(8, 2, rng())(Tensor(np.ones((3, 6))))


def test_embedding_lookup_bounds():
    table = EmbeddingTable(5, 4, rng())
    assert table([0, 4, 4]).shape == (3, 4)
    with pytest.raises(IndexError):
        table([5])


# ---------------------------------------------------------------- gradient checks

LAYER_CASES = {
    "affine": lambda r: (AffineLayer(4, 3, r, "ffn", std=0.5), (3, 4), (3, 3)),
    "layer_norm": lambda r: (LayerNorm(4), (3, 4), (3, 4)),
    "ffn": lambda r: (FeedForward(4, 16, r, std=0.5), (3, 4), (3, 4)),
    "attention": lambda r: (SelfAttention(8, 2, r, std=0.5), (1, 3, 8), (1, 3, 8)),
    "block": lambda r: (TransformerBlock(8, 2, r, std=0.5), (3, 8), (3, 8)),
}


@pytest.mark.parametrize("name", sorted(LAYER_CASES))
def test_layer_input_gradients(name):
    layer, in_shape, out_shape = LAYER_CASES[name](rng(5))
    w = probe(out_shape)
    x = rng(6).uniform(-2, 2, size=in_shape)
    rep = grad_check(lambda t: T.sum_all(T.mul(layer(t), w)), x, eps=1e-5, tol=1e-4)
    assert rep.passed, rep.max_rel_error


@pytest.mark.parametrize("name", sorted(LAYER_CASES))
def test_layer_parameter_gradients(name):
    layer, in_shape, out_shape = LAYER_CASES[name](rng(7))
    unfreeze(layer)
    if name == "layer_norm":
        layer.gain.tensor.data[...] = rng(8).uniform(0.5, 1.5, size=4)
    w = probe(out_shape)
    x = Tensor(rng(9).uniform(-2, 2, size=in_shape))
    rep = parameters_grad_check(lambda: T.sum_all(T.mul(layer(x), w)), layer.parameters(), eps=1e-5, tol=1e-4)
    assert rep.passed, rep.max_rel_error


def test_embedding_gradients():
    table = unfreeze(EmbeddingTable(6, 4, rng(), std=0.5))
    w = probe((4, 4))
    rep = parameters_grad_check(lambda: T.sum_all(T.mul(table([1, 3, 1, 5]), w)), table.parameters(), tol=1e-4)
    assert rep.passed


# ---------------------------------------------------------------- freezing / checkpoints

def _two_groups():
    ffn = FeedForward(4, 8, rng(), std=0.5)
    adapter = AffineLayer(4, 4, rng(1), "adapter", std=0.5)

    class Pair:
        def named_parameters(self):
            yield from (("ffn." + p, g, t) for p, g, t in ffn.named_parameters())
            yield from (("adapter." + p, g, t) for p, g, t in adapter.named_parameters())

        def parameters(self):
            return [t for _, _, t in self.named_parameters()]

        def __call__(self, x):
            return adapter(ffn(x))

    return Pair()


def _one_step(module):
    named = [(f"{g}/{p}", t) for p, g, t in module.named_parameters()]
    state = AdamState(named)
    loss = T.sum_all(T.mul(module(Tensor(rng(2).normal(size=(3, 4)))), probe((3, 4))))
    T.backward(loss)
    state.step(1e-2)


def test_freeze_all_changes_nothing():
    m = _two_groups()
    set_trainable(m, FreezePolicy.freeze_all())
    before = [t.data.copy() for t in m.parameters()]
    _one_step(m)
    for a, t in zip(before, m.parameters()):
        assert a.tobytes() == t.data.tobytes()


def test_policy_changes_exactly_its_groups():
    m = _two_groups()
    set_trainable(m, FreezePolicy.of({"adapter"}))
    before = {p: t.data.copy() for p, _, t in m.named_parameters()}
    _one_step(m)
    for p, g, t in m.named_parameters():
        changed = before[p].tobytes() != t.data.tobytes()
        assert changed == (g == "adapter"), p
    assert trainable_groups(m) == {"adapter"}


def test_default_policy_is_moae_plus_head():
    assert FreezePolicy.of(None).trainable == {"adaptive_experts", "router", "sigma", "adapter", "C", "tau"}


def test_unknown_group_rejected():
    with pytest.raises(ConfigurationError, match="bogus"):
        set_trainable(_two_groups(), FreezePolicy.of({"bogus"}))


def test_checkpoint_round_trip_is_byte_exact():
    block = TransformerBlock(8, 2, rng(), std=0.3)
    blob = save_checkpoint(block)
    other = TransformerBlock(8, 2, rng(1), std=0.3)
    load_checkpoint(other, blob)
    assert save_checkpoint(other) == blob
    names = [name for name, _, _ in read_checkpoint(blob)]
    assert names[0].startswith("norm/")
    with pytest.raises(ValueError):
        read_checkpoint(b"garbage")
