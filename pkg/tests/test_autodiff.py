"""Tape correctness: hand-computed oracles for each op, then randomized
finite-difference sweeps over composite graphs."""

import math

import numpy as np
import pytest

from latefuse import autodiff as ad
from latefuse.autodiff import Tensor


def test_matmul_forward_and_grads_hand_case():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    b = Tensor([[0.0, 1.0], [1.0, 0.0]], requires_grad=True)
    y = ad.matmul(a, b)
    assert np.array_equal(y.data, [[2.0, 1.0], [4.0, 3.0]])
    grads = ad.backward(ad.sum_all(y), leaves=[a, b])
    # d(sum AB)/dA = 1 B^T, d/dB = A^T 1
    assert np.allclose(grads[a], np.ones((2, 2)) @ b.data.T)
    assert np.allclose(grads[b], a.data.T @ np.ones((2, 2)))


def test_softmax_hand_case_and_shift_invariance():
    v = Tensor([math.log(2.0), 0.0])
    p = ad.softmax(v)
    assert np.allclose(p.data, [2.0 / 3.0, 1.0 / 3.0], atol=1e-15)
    shifted = ad.softmax(Tensor([math.log(2.0) + 123.0, 123.0]))
    assert np.allclose(p.data, shifted.data, atol=1e-15)
    assert math.isclose(float(p.data.sum()), 1.0, abs_tol=1e-15)


def test_cross_entropy_hand_case():
    # logits [1, 0], target 0: loss = -log(e/(e+1))
    logits = Tensor([1.0, 0.0], requires_grad=True)
    loss = ad.cross_entropy(logits, 0)
    expected = -math.log(math.e / (math.e + 1.0))
    assert math.isclose(loss.item(), expected, rel_tol=1e-12)
    grads = ad.backward(loss, leaves=[logits])
    p = np.exp([1.0, 0.0]) / np.exp([1.0, 0.0]).sum()
    assert np.allclose(grads[logits], p - np.array([1.0, 0.0]))


def test_attention_single_position_oracle():
    # one query, one key: the softmax weight is 1 and out == v exactly
    q = Tensor([[0.3, -0.7]], requires_grad=True)
    k = Tensor([[1.0, 2.0]], requires_grad=True)
    v = Tensor([[5.0, -3.0]], requires_grad=True)
    out = ad.attention(q, k, v, np.ones((1, 1), dtype=bool), n_heads=1)
    assert np.array_equal(out.data, v.data)
    grads = ad.backward(ad.sum_all(out), leaves=[q, k, v])
    assert np.allclose(grads[v], np.ones((1, 2)))
    assert np.allclose(grads[q], 0.0)  # weight is constant 1
    assert np.allclose(grads[k], 0.0)


def test_attention_two_key_hand_weights():
    d = 1
    q = Tensor(np.array([[1.0]]), requires_grad=True)
    k = Tensor(np.array([[1.0], [0.0]]), requires_grad=True)
    v = Tensor(np.array([[2.0], [4.0]]), requires_grad=True)
    out = ad.attention(q, k, v, np.ones((1, 2), dtype=bool), n_heads=1)
    # scores are [1, 0] / sqrt(1); weights [e/(e+1), 1/(e+1)]
    w1 = math.e / (math.e + 1.0)
    assert math.isclose(float(out.data[0, 0]), w1 * 2.0 + (1 - w1) * 4.0, rel_tol=1e-12)


def test_masked_attention_ignores_hidden_keys():
    q = Tensor(np.random.default_rng(0).standard_normal((2, 4)))
    k = Tensor(np.random.default_rng(1).standard_normal((3, 4)))
    v = Tensor(np.random.default_rng(2).standard_normal((3, 4)))
    mask = np.array([[1, 0, 0], [1, 1, 0]], dtype=bool)
    out = ad.attention(q, k, v, mask, n_heads=2)
    # row 0 sees only key 0 -> exactly v[0]
    assert np.allclose(out.data[0], v.data[0], atol=1e-15)


def test_visits_once_accumulates_shared_subgraph():
    x = Tensor([3.0], requires_grad=True)
    y = ad.add(ad.mul(x, x), x)  # x^2 + x, dy/dx = 2x + 1
    grads = ad.backward(ad.sum_all(y), leaves=[x])
    assert np.allclose(grads[x], [7.0])


def test_backward_rejects_nonscalar():
    x = Tensor([[1.0, 2.0]], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.mul(x, 2.0))


def test_untouched_leaf_gets_zeros():
    x = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor([[5.0]], requires_grad=True)
    grads = ad.backward(ad.sum_all(ad.mul(x, x)), leaves=[x, unused])
    assert np.allclose(grads[x], [2.0, 4.0])
    assert grads[unused].shape == (1, 1)
    assert np.all(grads[unused] == 0.0)


def test_grad_map_keyed_by_tensor_object():
    x = Tensor([2.0], requires_grad=True)
    grads = ad.backward(ad.sum_all(ad.mul(x, x)), leaves=[x])
    assert x in grads and len(grads) == 1


def test_add_broadcast_unbroadcasts_bias():
    x = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.zeros(4), requires_grad=True)
    grads = ad.backward(ad.sum_all(ad.add(x, b)), leaves=[x, b])
    assert grads[x].shape == (3, 4)
    assert grads[b].shape == (4,)
    assert np.allclose(grads[b], 3.0)  # summed over the broadcast axis


def test_embedding_repeated_ids_accumulate():
    table = Tensor(np.arange(8.0).reshape(4, 2), requires_grad=True)
    y = ad.embedding(table, np.array([1, 1, 3]))
    grads = ad.backward(ad.sum_all(y), leaves=[table])
    expected = np.zeros((4, 2))
    expected[1] = 2.0
    expected[3] = 1.0
    assert np.allclose(grads[table], expected)


def test_l2_normalize_rows_unit_norm():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((5, 7)), requires_grad=True)
    y = ad.l2_normalize_rows(x)
    assert np.allclose(np.linalg.norm(y.data, axis=1), 1.0, atol=1e-12)
    ad.gradient_check(lambda: ad.sum_all(ad.mul(ad.l2_normalize_rows(x), 0.37)), [x])


def test_concat_slice_stack_round_trip():
    a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    b = Tensor(np.arange(3.0).reshape(1, 3), requires_grad=True)
    cat = ad.concat_rows([a, b])
    assert cat.shape == (3, 3)
    back = ad.slice_rows(cat, 0, 2)
    assert np.array_equal(back.data, a.data)
    grads = ad.backward(ad.sum_all(back), leaves=[a, b])
    assert np.allclose(grads[a], 1.0)
    assert np.allclose(grads[b], 0.0)  # sliced away
    rows = ad.stack_rows([Tensor(np.ones(3), requires_grad=True) for _ in range(2)])
    assert rows.shape == (2, 3)


def test_sequence_cross_entropy_weights():
    logits = Tensor(np.zeros((3, 4)), requires_grad=True)
    targets = np.array([0, 1, 2])
    unweighted = ad.sequence_cross_entropy(logits, targets)
    assert math.isclose(unweighted.item(), math.log(4.0), rel_tol=1e-12)
    weighted = ad.sequence_cross_entropy(logits, targets, weights=np.array([2.0, 1.0, 1.0]))
    # weighted mean of equal per-row losses is unchanged
    assert math.isclose(weighted.item(), math.log(4.0), rel_tol=1e-12)


def test_randomized_composite_gradients():
    """100 random small graphs mixing every differentiable op; tape vs
    central finite differences."""
    rng = np.random.default_rng(123)
    for trial in range(100):
        n = int(rng.integers(2, 5))
        d = 2 * int(rng.integers(1, 3))
        x = Tensor(rng.standard_normal((n, d)), requires_grad=True)
        w = Tensor(rng.standard_normal((d, d)), requires_grad=True)
        gain = Tensor(rng.standard_normal(d), requires_grad=True)
        bias = Tensor(rng.standard_normal(d), requires_grad=True)
        mask = np.tril(np.ones((n, n), dtype=bool))
        variant = trial % 5

        def fn():
            h = ad.matmul(x, w)
            if variant == 0:
                h = ad.gelu(h)
            elif variant == 1:
                h = ad.layer_norm(h, gain, bias)
            elif variant == 2:
                h = ad.attention(h, h, h, mask, n_heads=2)
            elif variant == 3:
                h = ad.add(ad.exp(ad.mul(h, 0.1)), bias)
            else:
                h = ad.l2_normalize_rows(ad.add(h, bias))
            return ad.mean_all(ad.mul(h, h))

        ad.gradient_check(fn, [x, w, gain, bias], rtol=1e-4)
