import math

import numpy as np
import pytest

from perspective_retrieval.mpr import MprHead, MprParams, aggregate, init_mpr, mpr_forward
from perspective_retrieval.numerics import Tensor, gradient_errors


def _gelu(x):
    return x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def test_aggregate_examples():
    row = np.array([[0.3, -1.2, 4.0]])
    assert np.array_equal(aggregate(Tensor(row)).data, row[0])
    v = np.array([1.5, -2.0])
    np.testing.assert_allclose(aggregate(Tensor(np.tile(v, (4, 1)))).data, v, atol=1e-15)
    np.testing.assert_array_equal(aggregate(Tensor([[1.0, 0.0], [0.0, 1.0]])).data, [0.5, 0.5])


def test_aggregate_rejects_empty():
    with pytest.raises(ValueError):
        aggregate(Tensor(np.zeros((0, 3))))


def test_zero_heads_give_zero_rows():
    p = init_mpr(3, 4)
    for t in p.tensors().values():
        t.data[...] = 0.0
    assert np.array_equal(mpr_forward(Tensor(np.ones(4)), p).data, np.zeros((3, 4)))


def test_identity_weight_reduction():
    e = np.array([0.7, -0.3, 1.2])
    I = np.eye(3)
    p = MprParams([MprHead(Tensor(I), Tensor(np.zeros(3)), Tensor(I), Tensor(np.zeros(3)))])
    g = np.array([_gelu(v) for v in e])
    np.testing.assert_allclose(mpr_forward(Tensor(e), p).data[0], g / (np.linalg.norm(g) + 1e-8), atol=1e-15)


def test_hand_seeded_two_heads():
    heads = [
        MprHead(Tensor([[0.5, -1.0], [2.0, 0.3]]), Tensor([0.1, -0.2]), Tensor([[1.0, 0.4], [-0.6, 0.9]]), Tensor([0.0, 0.05])),
        MprHead(Tensor([[-0.2, 0.8], [0.7, 0.1]]), Tensor([0.0, 0.3]), Tensor([[0.3, -1.1], [0.5, 0.2]]), Tensor([-0.1, 0.0])),
    ]
    e = [0.6, -0.4]
    out = mpr_forward(Tensor(e), MprParams(heads)).data
    for k, h in enumerate(heads):
        W1, b1, W2, b2 = h.W1.data, h.b1.data, h.W2.data, h.b2.data
        hid = [_gelu(e[0] * W1[0][j] + e[1] * W1[1][j] + b1[j]) for j in range(2)]
        v = [hid[0] * W2[0][j] + hid[1] * W2[1][j] + b2[j] for j in range(2)]
        n = math.sqrt(v[0] ** 2 + v[1] ** 2)
        np.testing.assert_allclose(out[k], [v[0] / (n + 1e-8), v[1] / (n + 1e-8)], atol=1e-15)
        assert 1 - 1e-6 <= np.linalg.norm(out[k]) <= 1.0


@pytest.mark.parametrize("seed", range(10))
def test_row_norms(seed):
    rng = np.random.default_rng(seed)
    p = init_mpr(4, 6, rng=rng)
    out = mpr_forward(Tensor(rng.normal(size=(5, 6))), p).data
    norms = np.linalg.norm(out, axis=-1)
    assert out.shape == (5, 4, 6)
    assert np.all(norms <= 1.0) and np.all(norms >= 1 - 1e-5)


def test_heads_do_not_interact():
    rng = np.random.default_rng(2)
    p = init_mpr(3, 5, rng=rng)
    e = Tensor(rng.normal(size=5))
    before = mpr_forward(e, p).data
    p.heads[1].W2.data += rng.normal(size=p.heads[1].W2.shape)
    after = mpr_forward(e, p).data
    assert np.array_equal(before[[0, 2]], after[[0, 2]])
    assert not np.array_equal(before[1], after[1])


def test_depends_on_perspectives_only_through_mean():
    rng = np.random.default_rng(3)
    p = init_mpr(2, 4, rng=rng)
    a = rng.normal(size=(3, 4))
    b = a[[2, 0, 1]]  # same rows, same mean up to summation order
    b = b - b.mean(axis=0) + a.mean(axis=0)
    np.testing.assert_allclose(mpr_forward(aggregate(Tensor(a)), p).data, mpr_forward(aggregate(Tensor(b)), p).data, atol=1e-14)


def test_gradient_through_aggregate_and_text_readout():
    rng = np.random.default_rng(4)
    p = init_mpr(3, 4, rng=rng)
    for t in p.tensors().values():
        t.data = rng.normal(0, 0.5, size=t.shape)
    G_l = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    text = rng.normal(size=4)
    leaves = list(p.tensors().values()) + [G_l]
    assert max(gradient_errors(lambda: (mpr_forward(aggregate(G_l), p) * text).sum(), leaves)) < 1e-4


def test_dropout_only_in_training():
    rng = np.random.default_rng(5)
    p = init_mpr(2, 8, rng=rng, dropout_rate=0.5)
    e = Tensor(rng.normal(size=8))
    assert np.array_equal(mpr_forward(e, p).data, mpr_forward(e, p, training=False).data)
    trained = mpr_forward(e, p, training=True, rng=np.random.default_rng(0)).data
    assert not np.array_equal(trained, mpr_forward(e, p).data)


def test_validation():
    with pytest.raises(ValueError):
        init_mpr(2, 3, eps=0.0)
    with pytest.raises(ValueError):
        init_mpr(2, 3, dropout_rate=0.6)
    with pytest.raises(ValueError):
        MprParams([])
    assert [k for k in init_mpr(2, 3).tensors()][:4] == ["h0.W1", "h0.b1", "h0.W2", "h0.b2"]
