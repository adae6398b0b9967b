import math

import numpy as np
import pytest

from maskrouter.engine import tensor as T
from maskrouter.engine.tensor import Tape, Tensor
from maskrouter.utils.errors import ContractError, DimensionError, LabelIndexError


def test_matmul_hand_example():
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5], [6]]))
    np.testing.assert_array_equal(out.data, [[17], [39]])


def test_matmul_identity():
    a = Tensor([[1.5, -2.0], [0.25, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.eye(2))).data, a.data)


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, expected, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(T.softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])
    out = T.softmax(Tensor([math.log(1), math.log(2), math.log(3)])).data
    np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], atol=1e-9)


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(0).normal(scale=30, size=(5, 7))
    y = T.softmax(Tensor(x), axis=1).data
    assert (y > 0).all()
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_array_equal(T.layer_norm(Tensor([[3.0, 3.0]]), one, zero).data, [[0.0, 0.0]])
    np.testing.assert_allclose(T.layer_norm(Tensor([[1.0, 3.0]]), one, zero).data, [[-1.0, 1.0]], atol=1e-4)
    x = Tensor([[0.5, -2.0]])
    shifted = T.layer_norm(x, one, Tensor([0.7, 0.7])).data
    np.testing.assert_allclose(shifted, T.layer_norm(x, one, zero).data + 0.7, atol=1e-12)


def test_cross_entropy_uniform_logits():
    loss = T.cross_entropy(Tensor(np.zeros((2, 4))), [0, 3])
    assert loss.item() == pytest.approx(math.log(4))


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(LabelIndexError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_embedding_rejects_bad_index():
    with pytest.raises(LabelIndexError):
        T.embedding(Tensor(np.zeros((4, 2))), [[0, 4]])


def test_no_tape_records_nothing():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(T.sum_all(w))


def test_backward_rejects_non_scalar():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        out = T.scale(w, 2.0)
        with pytest.raises(ContractError):
            tape.backward(out)


def test_tape_orders_parents_first():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        b = T.relu(a)
        c = T.matmul(b, a)
        T.sum_all(c)
    produced = set()
    for node in tape.nodes:
        for p in node.parents:
            assert p is a or id(p) in produced
        produced.add(id(node.out))


def test_gradient_accumulates_over_reuse():
    a = Tensor([2.0], requires_grad=True)
    with Tape():
        loss = T.sum_all(T.add(a, a))
        T.backward(loss)
    np.testing.assert_array_equal(a.grad, [2.0])


def _composite_loss(params, ids, labels):
    table, w, b, gamma, beta, wc = params
    batch, seq = ids.shape
    d = w.shape[0]
    x = T.reshape(T.embedding(table, ids), (batch * seq, d))
    h = T.relu(T.add(T.matmul(T.layer_norm(x, gamma, beta), w), b))
    q = T.reshape(h, (batch, seq, d))
    att = T.softmax(T.scale(T.bmm(q, T.transpose(q, (0, 2, 1))), 0.5), axis=-1)
    ctx = T.mul(T.bmm(att, q), T.reshape(x, (batch, seq, d)))
    logits = T.matmul(T.mean(ctx, axis=1), wc)
    return T.add(T.cross_entropy(logits, labels), T.scale(T.sum_all(T.mul(w, w)), 0.01))


@pytest.mark.parametrize("seed", range(24))
def test_composite_graph_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    vocab, d, n_classes = 5, 4, 3
    batch, seq = 2, int(rng.integers(2, 5))
    params = [
        Tensor(rng.normal(size=(vocab, d)), requires_grad=True),
        Tensor(rng.normal(scale=0.5, size=(d, d)), requires_grad=True),
        Tensor(rng.normal(size=(d,)), requires_grad=True),
        Tensor(rng.uniform(0.5, 1.5, size=(d,)), requires_grad=True),
        Tensor(rng.normal(size=(d,)), requires_grad=True),
        Tensor(rng.normal(size=(d, n_classes)), requires_grad=True),
    ]
    ids = rng.integers(0, vocab, size=(batch, seq))
    labels = rng.integers(0, n_classes, size=batch)

    with Tape():
        T.backward(_composite_loss(params, ids, labels))

    h = 1e-5
    for p in params:
        numeric = np.zeros_like(p.data)
        for idx in np.ndindex(p.shape):
            orig = p.data[idx]
            p.data[idx] = orig + h
            up = _composite_loss(params, ids, labels).item()
            p.data[idx] = orig - h
            down = _composite_loss(params, ids, labels).item()
            p.data[idx] = orig
            numeric[idx] = (up - down) / (2 * h)
        err = np.linalg.norm(p.grad - numeric) / max(np.linalg.norm(p.grad) + np.linalg.norm(numeric), 1e-12)
        assert err < 1e-5
