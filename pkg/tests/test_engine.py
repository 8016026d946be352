import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from audiocnn import architectures as A
from audiocnn.engine import ops
from audiocnn.engine.optim import AdamState, NonFiniteGradient, adam_step
from audiocnn.engine.tensor import GraphError, Parameter, Tensor, backward
from audiocnn.network import EmbeddingError, Network

from gradcheck import LAYER_KINDS, check, random_case


@pytest.mark.parametrize("kind", LAYER_KINDS)
def test_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(zlib.crc32(kind.encode()))
    for _ in range(8):
        assert check(*random_case(kind, rng), rng) < 1e-4


def test_backward_twice_without_forward_fails():
    w = Parameter(np.ones((3, 2)), name="w")
    loss = ops.multilabel_bce(ops.sigmoid(ops.dense(Tensor(np.ones((2, 3))), w)), np.zeros((2, 2)))
    backward(loss, [w])
    with pytest.raises(GraphError, match="no recorded graph"):
        backward(loss, [w])


def test_unused_parameter_gets_zero_gradient():
    used = Parameter(np.ones((3, 1)), name="used")
    unused = Parameter(np.ones(4), name="unused")
    loss = ops.multilabel_bce(ops.sigmoid(ops.dense(Tensor(np.ones((2, 3))), used)), np.ones((2, 1)))
    backward(loss, [used, unused])
    assert np.array_equal(unused.grad, np.zeros(4))
    assert np.any(used.grad != 0)


def test_conv_same_padding_keeps_spatial_size_and_valid_shrinks():
    x = Tensor(np.zeros((1, 96, 64, 1), np.float32))
    k = Tensor(np.zeros((3, 3, 1, 4), np.float32))
    assert ops.conv2d(x, k, padding="same").shape == (1, 96, 64, 4)
    assert ops.conv2d(x, k, padding="valid").shape == (1, 94, 62, 4)
    assert ops.conv2d(x, k, stride=(2, 2), padding="same").shape == (1, 48, 32, 4)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 5, 6, 3))
    k = rng.standard_normal((3, 2, 3, 4))
    out = ops.conv2d(Tensor(x), Tensor(k), padding="valid").data
    ref = np.zeros((2, 3, 5, 4))
    for i in range(3):
        for j in range(5):
            ref[:, i, j] = np.einsum("nhwc,hwco->no", x[:, i : i + 3, j : j + 2], k)
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_kernel_larger_than_input_is_rejected():
    x = Tensor(np.zeros((1, 2, 2, 1)))
    with pytest.raises(ops.ShapeError, match="kernel exceeds input"):
        ops.conv2d(x, Tensor(np.zeros((3, 3, 1, 1))), padding="valid")


def test_dense_shape_mismatch():
    with pytest.raises(ops.ShapeError):
        ops.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_maxpool_and_avgpool_values():
    x = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
    assert ops.maxpool(Tensor(x), (2, 2)).data.reshape(-1).tolist() == [5, 7, 13, 15]
    assert ops.avgpool(Tensor(x), (2, 2)).data.reshape(-1).tolist() == [2.5, 4.5, 10.5, 12.5]


def test_avgpool_same_padding_excludes_padded_cells():
    x = np.ones((1, 3, 3, 1))
    out = ops.avgpool(Tensor(x), (2, 2), (2, 2), "same").data
    assert np.allclose(out, 1.0)


def test_batchnorm_training_normalizes():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((64, 4, 4, 3)) * 50 + 7
    layer = ops.BatchNormLayer(3, dtype=np.float64)
    y = ops.batchnorm_forward(Tensor(x), layer, training=True).data.reshape(-1, 3)
    assert np.allclose(y.mean(axis=0), 0, atol=1e-5)
    assert np.allclose(y.var(axis=0), 1, atol=1e-5)


def test_batchnorm_moving_statistics_and_inference():
    x = np.random.default_rng(0).standard_normal((8, 2, 2, 2)) + 3
    layer = ops.BatchNormLayer(2, dtype=np.float64)
    ops.batchnorm_forward(Tensor(x), layer, training=True)
    mean = x.reshape(-1, 2).mean(axis=0)
    np.testing.assert_allclose(layer.moving_mean, 0.01 * mean)
    # inference ignores the batch entirely
    single = ops.batchnorm_forward(Tensor(x[:1]), layer, training=False).data
    expected = (x[:1] - layer.moving_mean) / np.sqrt(layer.moving_variance + 1e-3)
    np.testing.assert_allclose(single, expected)


def test_batchnorm_degenerate_batch():
    layer = ops.BatchNormLayer(1)
    with pytest.raises(ValueError, match="degenerate batch"):
        ops.batchnorm_forward(Tensor(np.zeros((1, 2, 2, 1), np.float32)), layer, training=True)


def test_bce_rejects_invalid_targets_and_clamps():
    s = Tensor(np.array([[0.0, 1.0]]))
    with pytest.raises(ValueError, match="invalid target"):
        ops.multilabel_bce(s, np.array([[0.5, 1.0]]))
    loss = ops.multilabel_bce(s, np.array([[1.0, 0.0]]))
    assert np.isclose(float(loss.data), -2 * np.log(1e-7))


def test_adam_two_steps_by_hand():
    p = Parameter(np.array([1.0, -2.0]), name="p")
    state = AdamState(learning_rate=0.1)
    grads = [np.array([0.5, -1.0]), np.array([0.1, 0.2])]
    m = v = np.zeros(2)
    expected = p.data.copy()
    for t, g in enumerate(grads, start=1):
        p.grad = g.copy()
        adam_step([p], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        expected = expected - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p.data, expected, rtol=1e-12)
    assert state.step_count == 2


def test_adam_float32_close_to_float64():
    rng = np.random.default_rng(0)
    g = rng.standard_normal(100)
    p32 = Parameter(np.ones(100, np.float32), name="a")
    p64 = Parameter(np.ones(100), name="a")
    s32, s64 = AdamState(1e-2), AdamState(1e-2)
    for _ in range(5):
        p32.grad, p64.grad = g.astype(np.float32), g.copy()
        adam_step([p32], s32)
        adam_step([p64], s64)
    np.testing.assert_allclose(p32.data, p64.data, rtol=1e-5)


def test_adam_zero_learning_rate_leaves_parameters():
    p = Parameter(np.array([1.0, 2.0]), name="p")
    p.grad = np.array([3.0, -4.0])
    adam_step([p], AdamState(0.0))
    assert p.data.tolist() == [1.0, 2.0]


def test_adam_rejects_non_finite_gradient_before_updating():
    a = Parameter(np.array([1.0]), name="a")
    b = Parameter(np.array([1.0]), name="b")
    a.grad, b.grad = np.array([1.0]), np.array([np.nan])
    with pytest.raises(NonFiniteGradient):
        adam_step([a, b], AdamState(0.1))
    assert a.data[0] == 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 5), st.integers(1, 3))
def test_same_padding_output_size_is_ceil(size, kernel, stride):
    assert ops.output_size(size, kernel, stride, "same") == -(-size // stride)


def _tiny_spec():
    res = A.LayerSpec(
        "residual-block",
        "res",
        branches=(
            (A.conv("a", 4), A.LayerSpec("batchnorm", "a_bn"), A.LayerSpec("relu", "a_relu")),
            (A.conv("p", 4, kernel=(1, 1)),),
        ),
    )
    inc = A.LayerSpec("concat", "mix", branches=((A.conv("c1", 2, kernel=(1, 1)),), (A.conv("c3", 3),)))
    layers = (
        A.conv("stem", 3, stride=(2, 2)),
        res,
        inc,
        A.pool("maxpool", "pool", (2, 2), (2, 2), "valid"),
        A.LayerSpec("flatten", "flat"),
        A.dense("output", 2),
        A.LayerSpec("sigmoid", "output_sigmoid"),
    )
    return A.ArchitectureSpec("tiny", layers, 2, input_shape=(8, 6, 1))


def test_whole_network_gradient_float64():
    net = Network(_tiny_spec(), seed=3, dtype=np.float64)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 8, 6, 1))
    y = np.array([[1, 0], [0, 1], [1, 1]], dtype=np.float64)
    params = net.trainable_parameters()
    backward(ops.multilabel_bce(net.forward(x, training=True), y), params)
    for p in params:
        flat, grad = p.data.reshape(-1), p.grad.reshape(-1).copy()
        for i in rng.choice(flat.size, size=min(5, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + 1e-6
            up = float(ops.multilabel_bce(net.forward(x, training=True), y).data)
            flat[i] = old - 1e-6
            down = float(ops.multilabel_bce(net.forward(x, training=True), y).data)
            flat[i] = old
            num = (up - down) / 2e-6
            assert abs(num - grad[i]) <= 1e-5 * max(1.0, abs(num)), p.name


def test_network_is_reproducible_from_seed():
    a, b = Network(_tiny_spec(), seed=5), Network(_tiny_spec(), seed=5)
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.name == q.name and np.array_equal(p.data, q.data)


def test_embedding_layer_and_missing_head():
    net = Network(_tiny_spec(), seed=0)
    emb = net.embed(np.zeros((2, 8, 6), np.float32))
    assert emb.shape == (2, 2 * 1 * 5)  # 8x6 -> 4x3 -> pooled 2x1, 5 channels
    bneck = Network(A.with_bottleneck(_tiny_spec(), units=7), seed=0)
    assert bneck.embed(np.zeros((1, 8, 6), np.float32)).shape == (1, 7)
    spec = _tiny_spec()
    renamed = A.ArchitectureSpec(
        "noname",
        spec.layers[:-2] + (A.dense("logits", 2), A.LayerSpec("sigmoid", "s")),
        2,
        input_shape=(8, 6, 1),
    )
    with pytest.raises(EmbeddingError, match="no embedding layer"):
        Network(renamed).embed(np.zeros((1, 8, 6), np.float32))
