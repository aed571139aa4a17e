import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drift.autodiff import (
    Linear, MultiHeadAttention, Parameter, Tensor, backward, current_tape, grad_check, no_grad,
)
from drift.autodiff import functional as F
from drift.autodiff import checkpoint


def P(a):
    return Parameter(np.asarray(a, dtype=np.float64))


def test_matmul_hand_cases():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(F.matmul(eye, m).data, m.data)
    np.testing.assert_array_equal(F.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])
    with pytest.raises(ValueError):
        F.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient():
    rng = np.random.default_rng(1)
    a, b = P(rng.normal(size=(3, 4))), P(rng.normal(size=(4, 2)))
    r = rng.normal(size=(3, 2))
    assert grad_check(lambda: F.sum(F.mul(F.matmul(a, b), r)), [a, b], n_samples=None) < 1e-6


def test_linear_cases():
    x = Tensor([[1.0, 1.0]])
    w, b = P([[2.0], [3.0]]), P([1.0])
    np.testing.assert_array_equal(F.linear(x, w, b).data, [[6.0]])
    xi = Tensor(np.arange(6.0).reshape(3, 2))
    np.testing.assert_array_equal(F.linear(xi, P(np.eye(2)), P(np.zeros(2))).data, xi.data)
    with pytest.raises(ValueError):
        F.linear(Tensor(np.ones((2, 3))), w, b)


def test_linear_gradient():
    rng = np.random.default_rng(2)
    x = P(rng.normal(size=(2, 3, 4)))
    lin = Linear(4, 5, rng, dtype=np.float64)
    r = rng.normal(size=(2, 3, 5))
    params = [x, lin.w, lin.b]
    assert grad_check(lambda: F.sum(F.mul(lin(x), r)), params, n_samples=None) < 1e-6


def test_layer_norm_cases():
    g, b = P(np.ones(3)), P(np.zeros(3))
    np.testing.assert_allclose(F.layer_norm(Tensor([5.0, 5.0, 5.0]), g, b).data, 0.0)
    g2, b2 = P(np.ones(2)), P(np.zeros(2))
    np.testing.assert_allclose(F.layer_norm(Tensor([1.0, 3.0]), g2, b2, eps=1e-15).data, [-1, 1], atol=1e-12)


def test_layer_norm_moments():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(3.0, 5.0, size=(10, 16)))
    out = F.layer_norm(x, P(np.ones(16)), P(np.zeros(16)), eps=0.0).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-9
    assert np.abs(out.var(axis=-1) - 1).max() < 1e-6


def test_gelu_values():
    assert F.gelu(Tensor([0.0])).data[0] == 0.0
    assert abs(F.gelu(Tensor([10.0])).data[0] - 10.0) < 1e-6
    th = P([0.5])
    assert grad_check(lambda: F.sum(F.gelu(th)), [th], eps=1e-5) < 1e-6


def test_softmax_cases():
    np.testing.assert_allclose(F.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)
    np.testing.assert_allclose(F.softmax(Tensor([1000.0, 0.0])).data, [1.0, 0.0], atol=1e-12)
    x = Tensor(np.random.default_rng(0).normal(size=(7, 5)) * 10)
    assert np.abs(F.softmax(x).data.sum(axis=-1) - 1).max() < 1e-9


def test_quadratic_grad_check():
    th = P([3.0])
    err = grad_check(lambda: F.sum(F.mul(th, th)), [th], eps=1e-4)
    assert err < 1e-9
    th.grad = None
    backward(F.sum(F.mul(th, th)))
    assert th.grad[0] == pytest.approx(6.0)


OPS = {
    "add": lambda a, b: F.add(a, b),
    "sub": lambda a, b: F.sub(a, b),
    "mul": lambda a, b: F.mul(a, b),
    "div": lambda a, b: F.div(a, F.add(F.mul(b, b), 1.0)),
    "exp": lambda a, b: F.exp(a),
    "log": lambda a, b: F.log(F.add(F.mul(a, a), 0.5)),
    "tanh": lambda a, b: F.tanh(a),
    "sigmoid": lambda a, b: F.sigmoid(a),
    "softplus": lambda a, b: F.softplus(a),
    "gelu": lambda a, b: F.gelu(a),
    "softmax": lambda a, b: F.softmax(a, axis=-1),
    "softmax0": lambda a, b: F.softmax(a, axis=0),
    "power": lambda a, b: F.power(F.add(F.mul(a, a), 1.0), 1.5),
    "mean": lambda a, b: F.mean(a, axis=1, keepdims=True),
    "max": lambda a, b: F.max(a, axis=1),
    "transpose": lambda a, b: F.transpose(a, (1, 0)),
    "reshape": lambda a, b: F.reshape(a, (-1,)),
    "slice": lambda a, b: F.getitem(a, (slice(1, 3), slice(None))),
    "concat": lambda a, b: F.concat([a, b], axis=1),
    "take": lambda a, b: F.take_rows(a, np.array([0, 2, 2, 1])),
    "scatter": lambda a, b: F.scatter_rows(a, np.array([1, 0, 1, 3]), 5),
    "segmax": lambda a, b: F.segment_max(a, np.array([0, 0, 2, 1]), 4)[0],
    "layernorm": lambda a, b: F.layer_norm(a, b[0], b[1]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_over_seeds(name):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        a = P(rng.normal(size=(4, 3)))
        b = P(rng.normal(size=(4, 3)))
        r = rng.normal(size=OPS[name](a, b).shape)
        current_tape().clear()
        worst = max(worst, grad_check(lambda: F.sum(F.mul(OPS[name](a, b), r)), [a, b],
                                      n_samples=None))
    assert worst < 1e-4


def test_dense_conv_gradients():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = P(rng.normal(size=(1, 5, 4, 2)))
        w = P(rng.normal(size=(18, 3)))
        b = P(rng.normal(size=3))
        stride = 1 + seed % 2
        out = F.conv2d(x, w, b, stride=stride)
        r = rng.normal(size=out.shape)
        assert grad_check(lambda: F.sum(F.mul(F.conv2d(x, w, b, stride=stride), r)), [x, w, b], n_samples=None) < 1e-4
        wt = P(rng.normal(size=(27, 2)))
        up = F.conv_transpose2d(x, wt, None)
        r2 = rng.normal(size=up.shape)
        assert grad_check(lambda: F.sum(F.mul(F.conv_transpose2d(x, wt), r2)), [x, wt], n_samples=None) < 1e-4
        r3 = rng.normal(size=(1, 9, 8, 2))
        assert grad_check(lambda: F.sum(F.mul(F.upsample2x(x, (9, 8)), r3)), [x], n_samples=None) < 1e-4


def test_fan_out_accumulates():
    w = P([2.0])
    backward(F.add(F.mul(w, 3.0), F.mul(w, 4.0)))
    assert w.grad[0] == pytest.approx(7.0)


def test_linear_loss_gradient_is_input():
    x = np.array([[1.0, 2.0, 3.0]])
    w = P(np.zeros((3, 2)))
    backward(F.sum(F.matmul(Tensor(x), w)))
    np.testing.assert_array_equal(w.grad, np.repeat(x.T, 2, axis=1))


def test_non_scalar_loss_rejected():
    w = P(np.ones(3))
    with pytest.raises(ValueError):
        backward(F.mul(w, 2.0))


def test_tape_cleared_and_no_grad():
    w = P(np.ones(3))
    y = F.sum(F.mul(w, 2.0))
    assert len(current_tape()) == 2
    backward(y)
    assert len(current_tape()) == 0
    with no_grad():
        F.sum(F.mul(w, 2.0))
    assert len(current_tape()) == 0


def test_backward_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(5)
        lin = Linear(6, 4, rng, dtype=np.float64)
        x = Tensor(rng.normal(size=(9, 6)))
        backward(F.sum(F.gelu(lin(x))))
        return lin.w.grad.copy()
    assert np.array_equal(run(), run())


def test_attention_single_key():
    rng = np.random.default_rng(0)
    mha = MultiHeadAttention(8, 2, rng, dtype=np.float64)
    q = Tensor(rng.normal(size=(4, 8)))
    kv = Tensor(rng.normal(size=(1, 8)))
    out = mha(q, kv).data
    expected = mha.wo(mha.wv(kv)).data
    np.testing.assert_allclose(out, np.repeat(expected, 4, axis=0), atol=1e-12)
    with pytest.raises(ValueError):
        MultiHeadAttention(8, 3, rng)


def test_attention_key_permutation_invariance():
    rng = np.random.default_rng(1)
    mha = MultiHeadAttention(8, 2, rng, dtype=np.float64)
    q = Tensor(rng.normal(size=(3, 8)))
    kv = rng.normal(size=(5, 8))
    perm = rng.permutation(5)
    np.testing.assert_allclose(mha(q, Tensor(kv)).data, mha(q, Tensor(kv[perm])).data, atol=1e-12)


def test_attention_gradient():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        mha = MultiHeadAttention(8, 2, rng, dtype=np.float64)
        q = P(rng.normal(size=(3, 8)))
        kv = P(rng.normal(size=(5, 8)))
        r = rng.normal(size=(3, 8))
        worst = max(worst, grad_check(lambda: F.sum(F.mul(mha(q, kv), r)), [q, kv] + mha.parameters(),
                                      rng=rng))
    assert worst < 1e-4


def test_batched_attention_matches_per_batch():
    rng = np.random.default_rng(2)
    mha = MultiHeadAttention(8, 2, rng, dtype=np.float64)
    q = rng.normal(size=(5, 8))
    kv = rng.normal(size=(6, 8))
    qb = np.array([0, 1, 0, 1, 1])
    kb = np.array([1, 0, 0, 1, 1, 0])
    out = mha(Tensor(q), Tensor(kv), qb, kb).data
    for b in (0, 1):
        ref = mha(Tensor(q[qb == b]), Tensor(kv[kb == b])).data
        np.testing.assert_allclose(out[qb == b], ref, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=0, max_size=4), st.integers(0, 2**31 - 1))
def test_checkpoint_roundtrip(shape, seed):
    rng = np.random.default_rng(seed)
    state = {"a.b": rng.normal(size=shape).astype(np.float32), "c": np.float32(rng.normal(size=(2,)))}
    back = checkpoint.loads(checkpoint.dumps(state))
    assert list(back) == list(state)
    for k in state:
        assert back[k].tobytes() == np.asarray(state[k], dtype="<f4").tobytes()
        assert back[k].shape == np.asarray(state[k]).shape
    assert checkpoint.dumps(back) == checkpoint.dumps(state)


def test_checkpoint_errors():
    buf = checkpoint.dumps({"w": np.ones((3, 3), np.float32)})
    with pytest.raises(checkpoint.CheckpointError, match="bad magic"):
        checkpoint.loads(b"XXXX" + buf[4:])
    with pytest.raises(checkpoint.CheckpointError, match="truncated"):
        checkpoint.loads(buf[:-5])
    with pytest.raises(checkpoint.CheckpointError, match="version"):
        checkpoint.loads(buf[:4] + (7).to_bytes(4, "little") + buf[8:])
