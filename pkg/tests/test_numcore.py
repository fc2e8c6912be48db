import math

import numpy as np
import pytest

from multiunit import numcore as nc
from multiunit.numcore import Tensor

from helpers import numeric_grad, rel_err

TRIALS = 20


def elementwise_rel_err(a, b):
    # entries far below the array's scale are judged against that scale
    floor = max(1e-8, 1e-5 * float(np.max(np.abs(b))))
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)))


def check_grads(build, arrays, tol=1e-4, seed=0):
    """``build(*tensors)`` returns any-shape output; contract it with a fixed random weight."""
    rng = np.random.default_rng(seed)
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    w = rng.normal(size=out.shape)
    loss = nc.tsum(nc.mul(out, w))
    loss.backward()
    for t in tensors:
        def f():
            with nc.no_grad():
                return float((build(*[Tensor(s.data) for s in tensors]).data * w).sum())
        num = numeric_grad(f, t.data)
        err = elementwise_rel_err(t.grad, num)
        assert err < tol, (err, t.shape)


# matmul ------------------------------------------------------------------------

def test_matmul_identity_cases():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(nc.matmul(Tensor(np.eye(2)), Tensor(a)).data, a)
    assert np.array_equal(nc.matmul(Tensor(a), Tensor(np.eye(2))).data, [[1, 2], [3, 4]])


def test_matmul_shape_error():
    with pytest.raises(nc.ShapeError):
        nc.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 2))))


def test_matmul_gradient_3x4_4x2():
    rng = np.random.default_rng(1)
    a, b = Tensor(rng.normal(size=(3, 4)), requires_grad=True), Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    nc.tsum(nc.matmul(a, b)).backward()
    fa = lambda: float((a.data @ b.data).sum())
    assert rel_err(a.grad, numeric_grad(fa, a.data)) < 1e-6
    assert rel_err(b.grad, numeric_grad(fa, b.data)) < 1e-6


def test_matmul_batched_gradients():
    rng = np.random.default_rng(2)
    for trial in range(TRIALS):
        check_grads(nc.matmul, [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))], seed=trial)
        check_grads(nc.matmul, [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))], seed=trial)


# elementwise and reductions --------------------------------------------------------

@pytest.mark.parametrize("op", [nc.add, nc.sub, nc.mul])
def test_binary_broadcast_gradients(op):
    rng = np.random.default_rng(3)
    for trial in range(TRIALS):
        check_grads(op, [rng.normal(size=(3, 4)), rng.normal(size=(1, 4))], seed=trial)
        check_grads(op, [rng.normal(size=(2, 3, 4)), rng.normal(size=(4,))], seed=trial)


def test_relu_gradient_and_zero_convention():
    rng = np.random.default_rng(4)
    for trial in range(TRIALS):
        x = rng.normal(size=(3, 5))
        x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
        check_grads(nc.relu, [x], seed=trial)
    x = Tensor(np.zeros(3), requires_grad=True)
    nc.tsum(nc.relu(x)).backward()
    assert np.array_equal(x.grad, np.zeros(3))


def test_reductions_and_reshapes():
    rng = np.random.default_rng(5)
    for trial in range(TRIALS):
        x = rng.normal(size=(2, 3, 4))
        check_grads(lambda t: nc.tsum(t, axis=1), [x], seed=trial)
        check_grads(lambda t: nc.mean(t, axis=-1), [x], seed=trial)
        check_grads(lambda t: nc.reshape(t, (6, 4)), [x], seed=trial)
        check_grads(lambda t: nc.transpose(t, (2, 0, 1)), [x], seed=trial)
        check_grads(nc.swap_last, [x], seed=trial)


# softmax family -----------------------------------------------------------------------

def test_log_softmax_examples():
    out = nc.log_softmax(Tensor(np.zeros(4))).data
    assert np.allclose(out, -math.log(4), rtol=0, atol=1e-15)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 5))
    assert np.allclose(nc.log_softmax(Tensor(x)).data, nc.log_softmax(Tensor(x + 7.5)).data, atol=1e-12)
    direct = np.exp(nc.log_softmax(Tensor(x)).data).sum(axis=1)
    assert np.all(np.abs(direct - 1) < 1e-12)


def test_log_softmax_properties_and_gradient():
    rng = np.random.default_rng(7)
    for trial in range(TRIALS):
        x = rng.normal(size=(3, 6)) * 5
        out = nc.log_softmax(Tensor(x)).data
        assert np.all(out <= 0)
        assert np.all(np.abs(np.exp(out).sum(axis=-1) - 1) < 1e-10)
        check_grads(nc.log_softmax, [x], seed=trial)
        check_grads(nc.softmax, [x], seed=trial)


def test_log_softmax_large_inputs_stay_finite():
    out = nc.log_softmax(Tensor(np.array([1000.0, 0.0, -1000.0]))).data
    assert np.all(np.isfinite(out))


# layer norm -------------------------------------------------------------------------------

def test_layer_norm_examples():
    ones, zeros = Tensor(np.ones(4)), Tensor(np.zeros(4))
    assert np.array_equal(nc.layer_norm(Tensor(np.full(4, 3.0)), ones, zeros).data, np.zeros(4))
    out = nc.layer_norm(Tensor(np.array([1.0, -1.0])), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0).data
    assert np.allclose(out, [1.0, -1.0], atol=1e-15)


def test_layer_norm_moments():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(4, 8)) * 10 + 1
    y = nc.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=1e-5).data
    assert np.all(np.abs(y.mean(axis=1)) < 1e-10)
    assert np.all(np.abs(y.var(axis=1) - 1) < 1e-6)
    # eps shrinks the variance to s2 / (s2 + eps) exactly
    s2 = x.var(axis=1)
    assert np.allclose(y.var(axis=1), s2 / (s2 + 1e-5), rtol=0, atol=1e-12)


def test_layer_norm_gradient():
    rng = np.random.default_rng(9)
    for trial in range(TRIALS):
        check_grads(lambda x, g, b: nc.layer_norm(x, g, b),
                    [rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)], seed=trial)


# convolution ---------------------------------------------------------------------------------

def test_conv_identity_and_length():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(7, 3))
    kernel = np.eye(3)[None]
    assert np.array_equal(nc.conv1d_time(Tensor(x), Tensor(kernel)).data, x)
    out = nc.conv1d_time(Tensor(np.ones((8, 2))), Tensor(np.ones((3, 2, 5))), stride=2)
    assert out.shape == (3, 5)


def test_conv_too_short():
    with pytest.raises(nc.InputTooShortError):
        nc.conv1d_time(Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2, 2))))


def test_conv_matches_direct_sum():
    rng = np.random.default_rng(11)
    x, k = rng.normal(size=(9, 3)), rng.normal(size=(3, 3, 2))
    out = nc.conv1d_time(Tensor(x), Tensor(k), stride=2).data
    direct = np.array([[sum(x[2 * t + j] @ k[j][:, o] for j in range(3)) for o in range(2)] for t in range(4)])
    assert np.allclose(out, direct, atol=1e-12)


def test_conv_gradient():
    rng = np.random.default_rng(12)
    for trial in range(TRIALS):
        stride = 1 + trial % 3
        check_grads(lambda x, k: nc.conv1d_time(x, k, stride=stride),
                    [rng.normal(size=(2, 9, 3)), rng.normal(size=(3, 3, 4))], tol=1e-5, seed=trial)


# attention ---------------------------------------------------------------------------------

def test_attention_single_key():
    rng = np.random.default_rng(13)
    q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    out = nc.attention(Tensor(q), Tensor(k), Tensor(v)).data
    assert np.allclose(out, np.repeat(v, 3, axis=0), atol=1e-15)


def test_attention_causal_first_position():
    rng = np.random.default_rng(14)
    q, k, v = (rng.normal(size=(3, 4)) for _ in range(3))
    out = nc.attention(Tensor(q), Tensor(k), Tensor(v), mask="causal").data
    assert np.allclose(out[0], v[0], atol=1e-15)


def test_attention_matches_direct_formula():
    rng = np.random.default_rng(15)
    q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    s = q @ k.T / 2.0
    p = np.exp(s) / np.exp(s).sum(axis=1, keepdims=True)
    assert np.allclose(nc.attention(Tensor(q), Tensor(k), Tensor(v)).data, p @ v, atol=1e-12)


def test_attention_gradient():
    rng = np.random.default_rng(16)
    for trial in range(TRIALS):
        mask = [None, "causal"][trial % 2]
        check_grads(lambda q, k, v: nc.attention(q, k, v, mask),
                    [rng.normal(size=(3, 4)) for _ in range(3)], tol=1e-5, seed=trial)
        key_mask = np.array([True, True, False, True])
        check_grads(lambda q, k, v: nc.attention(q, k, v, key_mask),
                    [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 4)), rng.normal(size=(2, 4, 4))],
                    tol=1e-5, seed=trial)


# lookups ---------------------------------------------------------------------------------------

def test_embed_and_pick_gradients():
    rng = np.random.default_rng(17)
    for trial in range(TRIALS):
        ids = rng.integers(0, 5, size=(2, 3))
        check_grads(lambda t: nc.embed(t, ids), [rng.normal(size=(5, 4))], seed=trial)
        idx = rng.integers(0, 6, size=(3,))
        check_grads(lambda t: nc.pick(t, idx), [rng.normal(size=(3, 6))], seed=trial)


# graph mechanics ------------------------------------------------------------------------------------

def test_shared_subexpression_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = nc.mul(x, x)
    nc.tsum(nc.add(y, y)).backward()
    assert np.allclose(x.grad, [8.0])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with nc.no_grad():
        y = nc.mul(x, 2.0)
    assert not y.requires_grad
    assert nc.mul(x, 2.0).requires_grad


def test_backward_needs_scalar_seed():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(nc.ShapeError):
        nc.mul(x, 2.0).backward()


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(18)
        w = nc.init_uniform(rng, (4, 3), 4)
        x = Tensor(rng.normal(size=(5, 4)))
        out = nc.tsum(nc.log_softmax(nc.matmul(x, w)))
        out.backward()
        return out.data.tobytes(), w.grad.tobytes()
    assert run() == run()


def test_init_uniform_bounds():
    w = nc.init_uniform(np.random.default_rng(0), (100, 50), fan_in=25)
    assert np.all(np.abs(w.data) <= 0.2) and w.requires_grad


# optimizer ------------------------------------------------------------------------------------------

def test_sgd_definition():
    w = Tensor(np.array([1.0]), requires_grad=True)
    w.grad = np.array([2.0])
    opt = nc.Optimizer("sgd-momentum", 0.1)
    nc.optimizer_step(opt, [w])
    assert np.allclose(w.data, [0.8]) and opt.step_count == 1
    assert np.array_equal(w.grad, [2.0])  # grads untouched


def test_sgd_zero_grad_leaves_params():
    w = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    w.grad = np.zeros(2)
    nc.optimizer_step(nc.Optimizer("sgd-momentum", 0.1, momentum=0.9), [w])
    assert np.array_equal(w.data, [1.5, -2.0])


def test_adam_zero_grad_first_step():
    w = Tensor(np.array([1.0]), requires_grad=True)
    w.grad = np.zeros(1)
    nc.optimizer_step(nc.Optimizer("adam", 0.1), [w])
    assert np.array_equal(w.data, [1.0])


def test_adam_quadratic_matches_scalar_recursion():
    # frozen from a scalar Adam recursion (lr 0.1, betas 0.9/0.999, eps 1e-8) on f(w) = w^2
    expected = 0.002936675681102579
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = nc.Optimizer("adam", 0.1)
    for _ in range(100):
        w.grad = 2 * w.data
        opt.step([w])
    assert abs(w.data[0]) < 1e-2
    assert w.data[0] == pytest.approx(expected, abs=1e-12)
    assert opt.step_count == 100


def test_optimizer_missing_grad():
    w = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(nc.OptimizerStateError):
        nc.Optimizer().step([w])


def test_optimizer_rejects_bad_settings():
    with pytest.raises(ValueError):
        nc.Optimizer("rmsprop")
    with pytest.raises(ValueError):
        nc.Optimizer("adam", 0.0)
