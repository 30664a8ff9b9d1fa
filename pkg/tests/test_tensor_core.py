import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from reprgap import tensor_core as tc

from .oracles import (central_difference, fd_activation_grad, naive_conv2d, naive_dense, naive_maxpool, random_model,
                      relative_error)


def one_layer(layer, in_shape, k):
    """Wrap a single layer (plus flatten/dense to k outputs when needed) into a model."""
    shape = tc.layer_output_shape(layer, in_shape)
    tail = [] if shape == (k,) else [tc.flatten(), tc.dense(np.ones((int(np.prod(shape)), k)))]
    return tc.ModelSpec([layer] + tail, in_shape, k)


def test_identity_1x1_conv():
    rng = np.random.default_rng(0)
    x = rng.random((3, 5, 4, 2)).astype(np.float32)
    m = one_layer(tc.conv2d(np.eye(2).reshape(1, 1, 2, 2)), (5, 4, 2), 2)
    _, trace = tc.forward(m, x, capture={1})
    np.testing.assert_array_equal(trace[1], x)


@pytest.mark.parametrize("padding", ["same", "valid"])
@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_direct_loops(padding, stride):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 4, 4, 2)).astype(np.float32)
    w = rng.standard_normal((3, 3, 2, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    m = one_layer(tc.conv2d(w, b, stride, padding), (4, 4, 2), 3)
    _, trace = tc.forward(m, x, capture={1})
    np.testing.assert_allclose(trace[1], naive_conv2d(x, w, b, stride, padding), atol=1e-5)


def test_maxpool_and_dense_match_loops():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 7, 6, 3)).astype(np.float32)
    m = one_layer(tc.maxpool(3, 2), (7, 6, 3), 2)
    _, trace = tc.forward(m, x, capture={1})
    np.testing.assert_array_equal(trace[1], naive_maxpool(x, 3, 2))

    v = rng.standard_normal((4, 5)).astype(np.float32)
    w = rng.standard_normal((5, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    dm = tc.ModelSpec([tc.dense(w, b)], (5,), 3)
    np.testing.assert_allclose(tc.forward(dm, v)[0], naive_dense(v, w, b), atol=1e-5)


def test_maxpool_ties_route_gradient_to_first_element():
    x = np.zeros((1, 2, 2, 1), dtype=np.float32)
    layer = tc.maxpool(2)
    _, cache = tc._maxpool_forward(layer, x)
    dx, _ = tc._maxpool_backward(layer, np.ones((1, 1, 1, 1)), cache)
    np.testing.assert_array_equal(dx[0, :, :, 0], [[1, 0], [0, 0]])


def test_softmax_rows_sum_to_one():
    z = np.random.default_rng(3).standard_normal((50, 7)) * 10
    np.testing.assert_allclose(tc.softmax(z).sum(axis=1), 1.0, atol=1e-6)


def test_softmax_layer_leaves_logits_pre_softmax():
    rng = np.random.default_rng(4)
    m = random_model(rng, softmax=True)
    x = rng.random((5, 6, 6, 2)).astype(np.float32)
    logits, trace = tc.forward(m, x, capture={len(m.layers)})
    assert not np.allclose(logits.sum(axis=1), 1.0)
    np.testing.assert_allclose(trace[len(m.layers)].sum(axis=1), 1.0, atol=1e-6)


def test_shape_mismatch_names_layer():
    m = tc.ModelSpec([tc.dense(np.ones((4, 2)))], (4,), 2)
    with pytest.raises(tc.ShapeMismatch) as err:
        tc.forward(m, np.ones((3, 5), dtype=np.float32))
    assert err.value.layer == 0 and err.value.expected == ("batch", 4)
    with pytest.raises(tc.ShapeMismatch) as err:
        tc.ModelSpec([tc.conv2d(np.ones((3, 3, 2, 4))), tc.flatten(), tc.dense(np.ones((10, 2)))], (5, 5, 2), 2)
    assert err.value.layer == 3


def test_eval_forward_is_pure_and_dropout_only_in_train():
    rng = np.random.default_rng(5)
    m = random_model(rng, dropout=0.5)
    x = rng.random((8, 6, 6, 2)).astype(np.float32)
    a, _ = tc.forward(m, x)
    b, _ = tc.forward(m, x.copy())
    assert a.tobytes() == b.tobytes()
    t1, _ = tc.forward(m, x, mode="train", rng=np.random.default_rng(1))
    t2, _ = tc.forward(m, x, mode="train", rng=np.random.default_rng(2))
    assert not np.array_equal(t1, t2)


def test_forward_from_splice_every_layer():
    rng = np.random.default_rng(6)
    for _ in range(5):
        m = random_model(rng)
        x = rng.random((4, 6, 6, 2)).astype(np.float32)
        logits, trace = tc.forward(m, x, capture=range(m.logit_index + 1))
        for k in range(m.logit_index + 1):
            assert tc.forward_from(m, k, trace[k]).tobytes() == logits.tobytes()


def test_forward_from_last_hidden_is_final_dense():
    rng = np.random.default_rng(7)
    m = random_model(rng)
    x = rng.random((4, 6, 6, 2)).astype(np.float32)
    k = m.logit_index - 1
    _, trace = tc.forward(m, x, capture={k})
    last = m.layers[k]
    direct = (trace[k].astype(np.float64) @ last.weight + last.bias).astype(np.float32)
    np.testing.assert_array_equal(tc.forward_from(m, k, trace[k]), direct)


def test_forward_from_rejects_bad_index():
    m = tc.ModelSpec([tc.dense(np.ones((4, 2)))], (4,), 2)
    with pytest.raises(IndexError):
        tc.forward_from(m, 5, np.ones((1, 2), np.float32))


def test_grad_linear_model_is_row_difference():
    w = np.random.default_rng(8).standard_normal((5, 3)).astype(np.float32)
    m = tc.ModelSpec([tc.dense(w, np.zeros(3))], (5,), 3)
    _, g = tc.grad_wrt_activation(m, 0, np.ones((2, 5), np.float32), 0, 2)
    np.testing.assert_array_equal(g, np.tile(w[:, 0].astype(np.float64) - w[:, 2], (2, 1)))


def test_grad_zero_through_dead_relu():
    w1 = -np.ones((3, 4), np.float32)
    m = tc.ModelSpec([tc.dense(w1, np.zeros(4)), tc.relu(), tc.dense(np.ones((4, 2)))], (3,), 2)
    # positive inputs -> every pre-activation is negative -> relu closes every path
    _, g = tc.grad_wrt_activation(m, 0, np.ones((2, 3), np.float32), 0, 1)
    np.testing.assert_array_equal(g, 0.0)


def test_grad_rejects_equal_head():
    m = tc.ModelSpec([tc.dense(np.ones((3, 2)))], (3,), 2)
    with pytest.raises(ValueError):
        tc.grad_wrt_activation(m, 0, np.ones((1, 3), np.float32), 1, 1)


def test_grad_nonfinite_reports_layer():
    m = tc.ModelSpec([tc.dense(np.full((3, 2), 3e38, np.float32))], (3,), 2)
    with pytest.raises(tc.NonFiniteError), np.errstate(over="ignore"):
        tc.grad_wrt_activation(m, 0, np.full((1, 3), 1e3, np.float32), 0, 1)


@pytest.mark.parametrize("seed", range(4))
def test_activation_grad_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    m = random_model(rng)
    x = rng.random((1, 6, 6, 2)).astype(np.float32)
    _, trace = tc.forward(m, x, capture=range(m.logit_index + 1))
    for k in (0, 2, m.logit_index - 2):
        a = trace[k]
        coords = rng.choice(a[0].size, min(8, a[0].size), replace=False)
        _, g = tc.grad_wrt_activation(m, k, a, 0, 1)
        fd, smooth = fd_activation_grad(m, k, a, 0, 1, coords)
        assert smooth.mean() >= 0.5
        assert relative_error(g.reshape(1, -1)[0, coords][smooth], fd[smooth]) < 1e-2


def test_weight_grad_closed_forms():
    k, d = 4, 3
    x = np.array([[0.5, -1.0, 2.0]], np.float32)
    m = tc.ModelSpec([tc.dense(np.zeros((d, k)), np.zeros(k))], (d,), k)
    loss, [(dw, db)] = tc.grad_wrt_weights(m, x, [2], mode="eval")
    onehot = np.eye(k)[2]
    np.testing.assert_allclose(db, 1 / k - onehot)
    np.testing.assert_allclose(dw, np.outer(x[0], 1 / k - onehot))
    assert loss == pytest.approx(np.log(k))


def test_weight_grad_rejects_bad_labels():
    m = tc.ModelSpec([tc.dense(np.zeros((3, 2)))], (3,), 2)
    with pytest.raises(ValueError):
        tc.grad_wrt_weights(m, np.ones((1, 3), np.float32), [2])


def _loss(m, x, y, seed):
    """Mean train-mode cross-entropy evaluated in float64 with a fixed dropout stream."""
    logits = tc._run(m, 0, x, m.logit_index, True, np.random.default_rng(seed), dtype=np.float64)[0]
    return float(tc.cross_entropy(logits, y).mean())


@pytest.mark.parametrize("seed", range(3))
def test_weight_grads_match_finite_differences(seed):
    rng = np.random.default_rng(200 + seed)
    m = random_model(rng, dropout=0.3)
    x = rng.random((6, 6, 6, 2)).astype(np.float32)
    y = rng.integers(0, 3, 6)
    _, grads = tc.grad_wrt_weights(m, x, y, rng=np.random.default_rng(9))
    for layer, (dw, db) in zip(m.param_layers(), grads):
        coords = rng.choice(layer.weight.size, min(5, layer.weight.size), replace=False)
        flat = layer.weight.reshape(-1)
        fd, smooth = [], []
        for c in coords:
            orig = flat[c]

            def f(delta):
                flat[c] = np.float32(orig + delta)
                out = _loss(m, x, y, 9)
                flat[c] = orig
                return out

            v, ok = central_difference(f, 1e-3)
            fd.append(v)
            smooth.append(ok)
        smooth = np.array(smooth)
        assert smooth.mean() >= 0.5
        assert relative_error(dw.reshape(-1)[coords][smooth], np.array(fd)[smooth]) < 1e-2


def test_spectral_norm_cases():
    assert tc.spectral_norm(np.eye(4)) == pytest.approx(1.0, rel=1e-6)
    assert tc.spectral_norm(np.diag([3.0, 1.0])) == pytest.approx(3.0, rel=1e-6)
    assert tc.spectral_norm(np.zeros((3, 3))) == 0.0
    w = np.random.default_rng(10).standard_normal((8, 5))
    oracle = float(np.sqrt(np.linalg.eigvalsh(w.T @ w).max()))
    assert tc.spectral_norm(w) == pytest.approx(oracle, rel=1e-4)


def test_spectral_norm_of_conv_kernel_uses_reshape():
    k = np.random.default_rng(11).standard_normal((3, 3, 2, 4))
    oracle = np.linalg.svd(k.reshape(18, 4), compute_uv=False)[0]
    assert tc.spectral_norm(k) == pytest.approx(oracle, rel=1e-4)


@settings(max_examples=50, deadline=None)
@given(arrays(np.int64, (6, 4), elements=st.integers(-40, 40)), st.integers(0, 3),
       st.sampled_from(["exp", "affine", "cube"]))
def test_zero_one_loss_invariant_under_monotone_row_transform(z, label, how):
    z = z / 4.0
    labels = np.full(len(z), label)
    f = {"exp": lambda v: np.exp(v / 10), "affine": lambda v: 3 * v + 7, "cube": lambda v: v ** 3}[how]
    np.testing.assert_array_equal(tc.zero_one_errors(z, labels), tc.zero_one_errors(f(z), labels))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, (2, 6, 5, 2), elements=st.floats(-10, 10, width=32)))
def test_maxpool_equals_window_max(x):
    m = one_layer(tc.maxpool(2, 1), (6, 5, 2), 2)
    _, trace = tc.forward(m, x, capture={1})
    np.testing.assert_array_equal(trace[1], naive_maxpool(x, 2, 1))
