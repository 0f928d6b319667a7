import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gamma_iqa import tensor as T
from gamma_iqa.tensor import ContractError, DimensionError, NumericDomainError, Tensor, backward, grad_check


def leaf(x):
    return Tensor(x, requires_grad=True)


# ---------------------------------------------------------------- forward fixtures

def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_rectifier():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_mean_over_rows():
    # hand arithmetic: column means of [[1,2],[3,4]]
    np.testing.assert_array_equal(T.mean(Tensor([[1.0, 2.0], [3.0, 4.0]]), axis=0).data, [2, 3])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_empty_tensor_is_rejected():
    with pytest.raises(NumericDomainError):
        Tensor(np.zeros((0, 3)))


def test_scalar_broadcast_only():
    out = T.mul(Tensor([1.0, 2.0, 3.0]), Tensor([2.0]))
    np.testing.assert_array_equal(out.data, [2, 4, 6])
    with pytest.raises(DimensionError):
        T.mul(Tensor(np.ones((2, 2))), Tensor(np.ones(2)))


# ---------------------------------------------------------------- softmax

def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_ln2():
    np.testing.assert_allclose(T.softmax(Tensor([np.log(2), 0.0, 0.0])).data, [0.5, 0.25, 0.25], atol=1e-15)


def test_softmax_stable_at_large_logits():
    p = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(p))
    assert p[0] == pytest.approx(1.0)
    assert p[1] < 1e-300 or p[1] == 0.0


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericDomainError):
        T.softmax(Tensor([np.nan, 0.0]))
    with pytest.raises(NumericDomainError):
        T.softmax(Tensor([np.inf, 0.0]))


def test_softmax_axis_out_of_range():
    with pytest.raises(DimensionError):
        T.softmax(Tensor([[1.0, 2.0]]), axis=2)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)), st.integers(0, 1))
def test_softmax_sums_to_one(x, axis):
    p = T.softmax(Tensor(x), axis=axis).data
    assert np.all(p >= 0)
    assert np.max(np.abs(p.sum(axis=axis) - 1.0)) < 1e-12


# ---------------------------------------------------------------- loss / backward

def test_mse_fixtures():
    assert T.mse_loss(Tensor([0.3, 0.7]), Tensor([0.3, 0.7])).item() == 0.0
    assert T.mse_loss(Tensor([1.0, 1.0]), Tensor([0.0, 2.0])).item() == 1.0
    assert T.mse_loss(Tensor([0.5]), Tensor([0.0])).item() == 0.25
    with pytest.raises(DimensionError):
        T.mse_loss(Tensor([1.0, 2.0]), Tensor([1.0]))


def test_backward_sum():
    w = leaf([1.0, 2.0, 3.0])
    backward(T.sum_all(w))
    np.testing.assert_array_equal(w.grad, [1, 1, 1])


def test_backward_mse_scalar():
    w = leaf([0.5])
    backward(T.mse_loss(w, Tensor([0.0])))
    assert w.grad[0] == pytest.approx(1.0, abs=1e-15)


def test_backward_accumulates_on_reuse():
    w = leaf([1.0, 2.0])
    backward(T.matmul(T.reshape(w, (1, 2)), T.reshape(w, (2, 1))))
    np.testing.assert_array_equal(w.grad, [2, 4])


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        backward(T.scale(leaf([1.0, 2.0]), 2.0))


def test_frozen_tensors_get_no_grad():
    w = leaf([1.0, 2.0])
    c = Tensor([3.0, 4.0])
    backward(T.sum_all(T.mul(w, c)))
    assert c.grad is None
    np.testing.assert_array_equal(w.grad, [3, 4])


def test_tape_is_topological():
    w = leaf(np.ones(3))
    y = T.sum_all(T.relu(T.scale(w, 2.0)))
    tape = T.Tape.from_output(y)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for parent in node._parents:
            if id(parent) in pos:
                assert pos[id(parent)] < pos[id(node)]
    assert len({id(n) for n in tape.nodes}) == len(tape.nodes)


def test_backward_is_deterministic():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 5))
    grads = []
    for _ in range(2):
        w = leaf(x)
        backward(T.sum_all(T.softmax(T.matmul(w, T.transpose(w)), axis=-1)))
        grads.append(w.grad.tobytes())
    assert grads[0] == grads[1]


def test_no_grad_records_nothing():
    w = leaf([1.0])
    with T.no_grad():
        y = T.scale(w, 3.0)
    assert not y.requires_grad


# ---------------------------------------------------------------- grad_check

def test_grad_check_sum_of_squares():
    rep = grad_check(lambda x: T.sum_all(T.mul(x, x)), np.array([1.0, 2.0, 3.0]), eps=1e-5, tol=1e-6)
    assert rep.passed
    np.testing.assert_allclose(rep.analytic, [2, 4, 6])


def test_grad_check_softmax_pick_first():
    x = np.random.default_rng(0).uniform(-2, 2, size=5)
    rep = grad_check(lambda t: T.sum_all(T.take(T.softmax(t), [0])), x, eps=1e-5, tol=1e-4)
    assert rep.passed


def test_grad_check_constant():
    rep = grad_check(lambda t: T.sum_all(T.scale(t, 0.0)), np.ones(3), eps=1e-5, tol=1e-6)
    assert rep.max_rel_error == 0.0
    np.testing.assert_array_equal(rep.analytic, 0.0)


def test_grad_check_contract():
    with pytest.raises(ContractError):
        grad_check(lambda t: T.sum_all(t), np.ones(2), eps=1e-2)
    with pytest.raises(NumericDomainError):
        grad_check(lambda t: T.sum_all(T.div(t, Tensor([0.0]))), np.ones(2), eps=1e-5)


def _families(rng):
    """(name, scalar function, input) for every op in the family."""
    a = rng.uniform(-2, 2, size=(3, 4))
    b = rng.uniform(-2, 2, size=(4, 2))
    c = Tensor(rng.uniform(-2, 2, size=(3, 4)))
    w = Tensor(rng.uniform(-2, 2, size=(3, 4)))
    s = Tensor(rng.uniform(0.5, 2.0, size=(1,)))
    g = Tensor(rng.uniform(0.5, 1.5, size=4))
    h = Tensor(rng.uniform(-1, 1, size=4))
    W = Tensor(rng.uniform(-1, 1, size=(5, 4)))
    bias = Tensor(rng.uniform(-1, 1, size=5))
    mixw = T.softmax(Tensor(rng.uniform(-1, 1, size=(3, 2))))
    other = Tensor(rng.uniform(-2, 2, size=(3, 4)))
    back = Tensor(rng.uniform(-1, 1, size=(2, 4)))

    def weighted(t):
        return T.sum_all(T.mul(t, w))

    return [
        ("matmul", lambda x: weighted(T.matmul(T.matmul(x, Tensor(b)), back)), a),
        ("add", lambda x: weighted(T.add(x, c)), a),
        ("sub", lambda x: weighted(T.sub(c, x)), a),
        ("scale", lambda x: weighted(T.scale(x, -1.7)), a),
        ("mul", lambda x: weighted(T.mul(x, x)), a),
        ("div", lambda x: weighted(T.div(x, s)), a),
        ("mean", lambda x: T.sum_all(T.mul(T.mean(x, axis=0), g)), a),
        ("relu", lambda x: weighted(T.relu(x)), a),
        ("softmax", lambda x: weighted(T.softmax(x, axis=-1)), a),
        ("exp", lambda x: weighted(T.exp(x)), a),
        ("layer_norm", lambda x: weighted(T.layer_norm(x, g, h)), a),
        ("affine", lambda x: T.sum_all(T.mul(T.affine(x, W, bias), Tensor(np.ones((3, 5))))), a),
        ("transpose", lambda x: T.sum_all(T.mul(T.transpose(x), Tensor(w.data.T))), a),
        ("mix", lambda x: weighted(T.mix(mixw, [x, T.mul(x, other)])), a),
        ("l2_normalize", lambda x: weighted(T.l2_normalize(x)), a),
        ("mse", lambda x: T.mse_loss(x, c), a),
    ]


@pytest.mark.parametrize("trial", range(3))
def test_every_op_matches_finite_differences(trial):
    rng = np.random.default_rng(100 + trial)
    for name, f, x in _families(rng):
        rep = grad_check(f, x, eps=1e-5, tol=1e-4)
        assert rep.passed, f"{name}: max relative error {rep.max_rel_error:.2e}"
