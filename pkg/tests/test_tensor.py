"""Autodiff engine: forward oracles and finite-difference gradient checks."""

import numpy as np
import pytest

import r3d.tensor as T
from r3d.tensor import Tensor


def fd_grad(f, x, h=1e-6):
    """Central-difference gradient of scalar f at f64 array x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def test_matmul_forward_matches_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((5, 7))
    b = rng.standard_normal((7, 3))
    want = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(7):
                want[i, j] += a[i, k] * b[k, j]
    got = T.matmul(Tensor(a), Tensor(b)).data
    assert np.allclose(got, want, atol=1e-12)


def test_matmul_grad_matches_fd():
    rng = np.random.default_rng(1)
    a = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    b = Tensor(rng.standard_normal((6, 2)), requires_grad=True)
    w = rng.standard_normal((4, 2))
    loss = T.tsum(T.mul(T.matmul(a, b), Tensor(w)))
    loss.backward()
    fa = fd_grad(lambda: float((a.data @ b.data * w).sum()), a.data)
    fb = fd_grad(lambda: float((a.data @ b.data * w).sum()), b.data)
    assert np.allclose(a.grad, fa, atol=1e-7)
    assert np.allclose(b.grad, fb, atol=1e-7)


def test_batched_matmul_broadcast_grad():
    rng = np.random.default_rng(2)
    a = Tensor(rng.standard_normal((3, 4, 5)), requires_grad=True)
    b = Tensor(rng.standard_normal((5, 2)), requires_grad=True)  # broadcast over batch
    loss = T.tsum(T.matmul(a, b))
    loss.backward()
    fb = fd_grad(lambda: float((a.data @ b.data).sum()), b.data)
    assert a.grad.shape == a.data.shape and b.grad.shape == b.data.shape
    assert np.allclose(b.grad, fb, atol=1e-6)


def test_add_mul_broadcasting_unbroadcasts_grads():
    x = Tensor(np.ones((4, 3)), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    loss = T.tsum(T.mul(T.add(x, b), 2.0))
    loss.backward()
    assert np.allclose(x.grad, 2.0)
    assert np.allclose(b.grad, 8.0)  # summed over the broadcast rows


def test_grad_accumulates_across_uses_and_calls():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = T.add(T.mul(x, x), x)  # x^2 + x, dy/dx = 2x + 1 = 7
    y_sum = T.tsum(y)
    y_sum.backward()
    assert np.allclose(x.grad, 7.0)
    z = T.tsum(T.mul(x, 2.0))
    z.backward()
    assert np.allclose(x.grad, 9.0)  # additive across backward calls
    x.zero_grad()
    assert x.grad is None


def test_structural_ops_grads():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    y = x.reshape(6, 4).transpose(1, 0)[1:3]
    loss = T.tsum(y)
    loss.backward()
    want = np.zeros((6, 4))
    want[:, 1:3] = 1.0
    assert np.allclose(x.grad, want.reshape(2, 3, 4))


def test_concat_splits_grad():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((3, 2)), requires_grad=True)
    out = T.concat([a, b], axis=0)
    T.tsum(T.mul(out, Tensor(np.arange(10.0).reshape(5, 2)))).backward()
    assert np.allclose(a.grad, [[0, 1], [2, 3]])
    assert np.allclose(b.grad, [[4, 5], [6, 7], [8, 9]])


def test_take_scatter_adds_duplicate_rows():
    table = Tensor(np.zeros((4, 2)), requires_grad=True)
    out = T.take(table, np.array([1, 1, 3]))
    T.tsum(out).backward()
    assert np.allclose(table.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])


def test_max_routes_grad_to_first_argmax():
    x = Tensor(np.array([[1.0, 5.0, 5.0, 2.0]]), requires_grad=True)
    T.tsum(T.tmax(x, axis=1)).backward()
    assert np.allclose(x.grad, [[0, 1, 0, 0]])


def test_mean_and_sum_keepdims():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    m = T.tmean(x, axis=1, keepdims=True)
    assert m.shape == (2, 1)
    T.tsum(m).backward()
    assert np.allclose(x.grad, 1.0 / 3.0)


def test_gelu_values_and_grad():
    x64 = np.array([-3.0, -1.0, 0.0, 1.0, 3.0, 10.0])
    y = T.gelu(Tensor(x64)).data
    assert y[2] == 0.0
    assert abs(y[3] - 0.8411919906082768) < 1e-12  # tanh-approx value at 1
    assert abs(y[5] - 10.0) < 1e-6  # asymptote
    x = Tensor(x64, requires_grad=True)
    T.tsum(T.gelu(x)).backward()
    fd = fd_grad(lambda: float(T.gelu(Tensor(x.data)).data.sum()), x.data)
    assert np.allclose(x.grad, fd, atol=1e-8)


def test_layer_norm_matches_scalar_oracle():
    x = np.array([[1.0, 2.0, 3.0]])
    mu, var = 2.0, 2.0 / 3.0
    want = (x - mu) / np.sqrt(var + 1e-5) * 2.0 + 1.0
    got = T.layer_norm(Tensor(x), Tensor(np.full(3, 2.0)), Tensor(np.ones(3))).data
    assert np.allclose(got, want, atol=1e-12)


def test_layer_norm_constant_row_is_beta():
    x = np.full((2, 4), 5.0)
    out = T.layer_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.full(4, 0.25))).data
    assert np.allclose(out, 0.25)


def test_layer_norm_normalizes_last_axis():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((6, 16))
    out = T.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.allclose(out.mean(-1), 0.0, atol=1e-9)
    assert np.allclose(out.var(-1), 1.0, atol=1e-4)  # eps shrinks variance slightly


def test_softmax_matches_exp_oracle():
    x = np.array([[1.0, 2.0, 3.0]])
    e = np.exp(x)
    want = e / e.sum()
    assert np.allclose(T.softmax(Tensor(x)).data, want, atol=1e-12)


def test_softmax_masked_zeros_and_value_independence():
    x = np.array([[1.0, 2.0, 3.0, 4.0]])
    mask = np.array([True, False, True, False])
    p = T.softmax(Tensor(x), mask=mask).data
    assert p[0, 1] == 0.0 and p[0, 3] == 0.0
    assert abs(p.sum() - 1.0) < 1e-12
    x2 = x.copy()
    x2[0, 1] = 1e9  # masked scores must not leak, even through max-subtraction
    p2 = T.softmax(Tensor(x2), mask=mask).data
    assert np.array_equal(p, p2)


def test_softmax_all_masked_row_raises():
    with pytest.raises(ValueError):
        T.softmax(Tensor(np.zeros((2, 3))), mask=np.zeros(3, dtype=bool))


def test_softmax_grad_matches_fd():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    w = rng.standard_normal((3, 5))
    mask = np.array([True, True, False, True, False])

    def scalar():
        return float((T.softmax(Tensor(x.data), mask=mask).data * w).sum())

    T.tsum(T.mul(T.softmax(x, mask=mask), Tensor(w))).backward()
    assert np.allclose(x.grad, fd_grad(scalar, x.data), atol=1e-8)


def test_cross_entropy_uniform_and_grad():
    logits = Tensor(np.zeros((4, 7)), requires_grad=True)
    labels = np.array([0, 3, 6, 2])
    loss = T.cross_entropy(logits, labels)
    assert abs(loss.item() - np.log(7.0)) < 1e-12
    loss.backward()

    def scalar():
        return float(T.cross_entropy(Tensor(logits.data), labels).data)

    assert np.allclose(logits.grad, fd_grad(scalar, logits.data), atol=1e-8)


def test_mse_value():
    a = Tensor(np.array([1.0, 2.0]))
    b = Tensor(np.array([0.0, 0.0]))
    assert abs(T.mse(a, b).item() - 2.5) < 1e-12


def test_mixed_precision_raises():
    with pytest.raises(TypeError):
        T.add(Tensor(np.zeros(3, np.float32)), Tensor(np.zeros(3, np.float64)))


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert not y.requires_grad
    y2 = T.mul(x, 2.0)
    assert y2.requires_grad


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        T.mul(x, 1.0).backward()


def test_precision_tag_and_int_coercion():
    assert Tensor(np.zeros(2, np.float64)).precision == "f64"
    assert Tensor([1, 2, 3]).precision == "f32"
