import io
import math

import numpy as np
import pytest

from parsestack.autodiff import (
    ComputationTape,
    Tensor,
    backward,
    concat_channels,
    conv2d,
    maxpool2d,
    precision,
    read_tensor,
    relu,
    sgd_step,
    softmax,
    softmax_cross_entropy,
    tape_scope,
    tensor_to_bytes,
    upsample_bilinear,
    write_tensor,
)
from gradcheck import check_gradients, spaced_values
from oracles import conv2d_loops, cross_entropy_loops, maxpool_loops, upsample_loops


@pytest.fixture(autouse=True)
def f64():
    with precision(64), tape_scope():
        yield


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# conv2d


def test_conv_constant_input():
    out = conv2d(T(np.ones((1, 1, 3, 3))), T(np.ones((1, 1, 2, 2))), T([0.0]))
    assert out.shape == (1, 1, 2, 2)
    assert np.all(out.data == 4.0)


def test_conv_zero_kernel_gives_bias():
    rng = np.random.default_rng(0)
    out = conv2d(T(rng.standard_normal((2, 3, 5, 4))), T(np.zeros((2, 3, 3, 3))), T([1.5, -2.0]), padding=1)
    assert np.all(out.data[:, 0] == 1.5) and np.all(out.data[:, 1] == -2.0)


def test_conv_delta_kernel_same_padding():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = conv2d(T(x), T(k), T([0.0]), stride=1, padding=1)
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_loops(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = conv2d(T(x), T(w), T(b), stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, conv2d_loops(x, w, b, stride, padding), rtol=0, atol=1e-12)


def test_conv_output_extent():
    out = conv2d(T(np.zeros((1, 1, 7, 6))), T(np.zeros((1, 1, 3, 2))), None, stride=2, padding=1)
    assert out.shape == (1, 1, (7 + 2 - 3) // 2 + 1, (6 + 2 - 2) // 2 + 1)


def test_conv_channel_mismatch_names_shapes():
    with pytest.raises(ValueError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
        conv2d(T(np.zeros((1, 2, 4, 4))), T(np.zeros((1, 3, 3, 3))))


def test_conv_kernel_too_large():
    with pytest.raises(ValueError):
        conv2d(T(np.zeros((1, 1, 2, 2))), T(np.zeros((1, 1, 3, 3))))


def test_conv_linearity():
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal((2, 2, 2, 6, 6))
    w = T(rng.standard_normal((4, 2, 3, 3)))
    a, b = 0.7, -1.3
    lhs = conv2d(T(a * x + b * y), w, padding=1).data
    rhs = a * conv2d(T(x), w, padding=1).data + b * conv2d(T(y), w, padding=1).data
    assert np.max(np.abs(lhs - rhs)) < 1e-10


# maxpool


def test_maxpool_basic():
    out = maxpool2d(T([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2)
    assert out.data.tolist() == [[[[4.0]]]]


def test_maxpool_ties_route_to_first():
    x = T(np.full((1, 1, 4, 4), 2.0), grad=True)
    out = maxpool2d(x, 2, 2)
    assert np.all(out.data == 2.0)
    backward(out.sum())
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1.0
    np.testing.assert_array_equal(x.grad[0, 0], expected)


@pytest.mark.parametrize("window,stride", [(2, 2), (3, 1), (2, 1), (3, 3)])
def test_maxpool_matches_scan(window, stride):
    rng = np.random.default_rng(window * 7 + stride)
    x = rng.standard_normal((1, 3, 6, 6))
    np.testing.assert_array_equal(maxpool2d(T(x), window, stride).data, maxpool_loops(x, window, stride))


def test_maxpool_window_too_large():
    with pytest.raises(ValueError):
        maxpool2d(T(np.zeros((1, 1, 2, 2))), 3, 1)


# relu


def test_relu_values_and_subgradient():
    x = T([-1.0, 0.0, 2.0], grad=True)
    y = relu(x)
    assert y.data.tolist() == [0.0, 0.0, 2.0]
    backward(y.sum())
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


def test_relu_positive_identity():
    x = np.array([0.5, 3.0, 1e-9])
    np.testing.assert_array_equal(relu(T(x)).data, x)


# upsample


def test_upsample_constant():
    out = upsample_bilinear(T(np.full((1, 2, 3, 2), 1.25)), 7, 5)
    np.testing.assert_allclose(out.data, 1.25, rtol=0, atol=1e-12)


def test_upsample_single_pixel():
    out = upsample_bilinear(T([[[[3.5]]]]), 6, 6)
    assert out.shape == (1, 1, 6, 6) and np.all(out.data == 3.5)


def test_upsample_2x2_to_4x4_against_formula():
    x = np.array([[[[0.0, 1.0], [2.0, 3.0]]]])
    out = upsample_bilinear(T(x), 4, 4).data
    np.testing.assert_allclose(out, upsample_loops(x, 4, 4), rtol=0, atol=1e-12)
    # align-corners keeps the corners and yields thirds in between
    assert out[0, 0, 0, 0] == 0.0 and out[0, 0, 3, 3] == 3.0
    assert abs(out[0, 0, 0, 1] - 1 / 3) < 1e-12 and abs(out[0, 0, 1, 0] - 2 / 3) < 1e-12


def test_upsample_same_size_is_identity():
    rng = np.random.default_rng(1)
    x = T(rng.standard_normal((2, 3, 4, 5)))
    assert upsample_bilinear(x, 4, 5).data is x.data


def test_upsample_rejects_zero_and_shrink():
    with pytest.raises(ValueError):
        upsample_bilinear(T(np.zeros((1, 1, 2, 2))), 0, 4)
    with pytest.raises(ValueError):
        upsample_bilinear(T(np.zeros((1, 1, 4, 4))), 2, 4)


# concat


def test_concat_shapes_and_grad():
    a = T(np.zeros((1, 2, 4, 4)), grad=True)
    b = T(np.ones((1, 3, 4, 4)), grad=True)
    out = concat_channels([a, b])
    assert out.shape == (1, 5, 4, 4)
    np.testing.assert_array_equal(out.data[:, 2:], 1.0)
    backward(out.sum())
    assert np.all(a.grad == 1.0) and np.all(b.grad == 1.0)


def test_concat_single_identity():
    a = T(np.arange(8.0).reshape(1, 2, 2, 2))
    assert concat_channels([a]) is a


def test_concat_spatial_mismatch():
    with pytest.raises(ValueError, match="upsample"):
        concat_channels([T(np.zeros((1, 1, 4, 4))), T(np.zeros((1, 1, 2, 2)))])


# cross-entropy


def test_ce_uniform_logits():
    out = softmax_cross_entropy(T(np.zeros((1, 4, 3, 3))), np.zeros((1, 3, 3), dtype=int))
    assert abs(out.item() - math.log(4)) < 1e-12


def test_ce_large_margin():
    logits = np.zeros((1, 3, 2, 2))
    logits[:, 1] = 50.0
    out = softmax_cross_entropy(T(logits), np.ones((1, 2, 2), dtype=int))
    assert out.item() < 1e-20


def test_ce_matches_pixel_loop():
    rng = np.random.default_rng(5)
    logits = rng.standard_normal((1, 3, 2, 2))
    labels = rng.integers(0, 3, (1, 2, 2))
    out = softmax_cross_entropy(T(logits), labels)
    assert abs(out.item() - cross_entropy_loops(logits, labels)) < 1e-12


def test_ce_ignore_index_and_gradient_mask():
    rng = np.random.default_rng(6)
    logits = T(rng.standard_normal((1, 3, 2, 2)), grad=True)
    labels = np.array([[[0, 255], [2, 1]]])
    out = softmax_cross_entropy(logits, labels, ignore_index=255)
    assert abs(out.item() - cross_entropy_loops(logits.data, labels, 255)) < 1e-12
    backward(out)
    assert np.all(logits.grad[0, :, 0, 1] == 0)
    p = np.exp(logits.data[0, :, 0, 0]) / np.exp(logits.data[0, :, 0, 0]).sum()
    np.testing.assert_allclose(logits.grad[0, :, 0, 0], (p - np.eye(3)[0]) / 3, atol=1e-14)


def test_ce_label_out_of_range():
    labels = np.zeros((1, 2, 2), dtype=int)
    labels[0, 1, 0] = 3
    with pytest.raises(ValueError, match=r"label 3 at position \(0, 1, 0\)"):
        softmax_cross_entropy(T(np.zeros((1, 3, 2, 2))), labels)


# backward and tape


def test_backward_sum_all_ones():
    x = T(np.arange(6.0).reshape(2, 3), grad=True)
    backward(x.sum())
    assert np.all(x.grad == 1.0)


def test_backward_square():
    x = T([1.0, 2.0], grad=True)
    backward((x * x).sum())
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_rejects_nonscalar():
    x = T([1.0, 2.0], grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(x * x)


def test_shared_input_gradients_sum():
    x = T([3.0], grad=True)
    backward((x + x + x * x).sum())
    assert x.grad.tolist() == [2.0 + 6.0]


def test_intermediates_get_grads():
    x = T(np.ones((1, 1, 2, 2)), grad=True)
    y = relu(x)
    backward(y.sum(), retain=True)
    assert y.grad is not None and y.grad.shape == y.shape


def test_clear_releases_nodes():
    tape = ComputationTape()
    with tape_scope(tape):
        x = T([1.0], grad=True)
        y = x * x
        assert len(tape) == 1
        tape.clear()
        assert len(tape) == 0 and y._node is None


def test_composite_graph_against_finite_differences():
    rng = np.random.default_rng(11)
    labels = rng.integers(0, 3, (1, 2, 2))
    x = spaced_values(rng, (1, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3)) * 0.5

    def fn(ts):
        h = relu(conv2d(ts[0], ts[1], padding=1))
        return softmax_cross_entropy(maxpool2d(h, 2, 2), labels)

    pre = conv2d(T(x), T(w), padding=1).data
    assert np.min(np.abs(pre)) > 1e-3
    assert check_gradients(fn, [x, w], rng) < 1e-4


# sgd


def test_sgd_plain_step():
    p = T([1.0], grad=True)
    p.grad = np.array([0.5])
    sgd_step([p], lr=0.1, momentum=0.0)
    assert abs(p.data[0] - 0.95) < 1e-15 and p.grad is None


def test_sgd_zero_grad_unchanged():
    p = T([2.0, -1.0], grad=True)
    p.grad = np.zeros(2)
    sgd_step([p], lr=0.1, momentum=0.9)
    assert p.data.tolist() == [2.0, -1.0]


def test_sgd_momentum_recurrence():
    # scalar simulation of v <- m v + g, p <- p - lr v
    v, q = 0.0, 0.0
    for _ in range(2):
        v = 0.9 * v + 1.0
        q -= 0.1 * v
    p = T([0.0], grad=True)
    for _ in range(2):
        p.grad = np.array([1.0])
        sgd_step([p], lr=0.1, momentum=0.9)
    assert abs(p.data[0] - q) < 1e-15
    assert abs(q - (-0.29)) < 1e-12


def test_sgd_missing_grad():
    with pytest.raises(ValueError, match="no gradient"):
        sgd_step([T([1.0], grad=True)], lr=0.1)


# softmax (used by the stacked-FCN ablation)


def test_softmax_gradient():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 4, 2, 3))
    assert check_gradients(lambda t: softmax(t[0]), [x], rng) < 1e-4


# snapshots


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_snapshot_round_trip(dtype):
    rng = np.random.default_rng(9)
    arr = rng.standard_normal((2, 3, 4)).astype(dtype)
    buf = io.BytesIO()
    write_tensor(buf, arr)
    raw = buf.getvalue()
    assert raw[:4] == b"PSTK"
    assert len(raw) == 4 + 4 + 4 + 8 * 3 + 1 + arr.nbytes
    buf.seek(0)
    back = read_tensor(buf)
    assert back.dtype == dtype
    assert back.data.tobytes() == arr.tobytes()


def test_snapshot_truncated():
    raw = tensor_to_bytes(np.zeros((3, 3)))
    with pytest.raises(ValueError, match="truncated"):
        read_tensor(io.BytesIO(raw[:-5]))


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(21)
        x = T(rng.standard_normal((2, 3, 8, 8)), grad=True)
        w = T(rng.standard_normal((4, 3, 3, 3)), grad=True)
        with tape_scope():
            y = upsample_bilinear(maxpool2d(relu(conv2d(x, w, padding=1)), 2, 2), 8, 8)
            loss = softmax_cross_entropy(y, np.zeros((2, 8, 8), dtype=int))
            backward(loss)
        return y.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_gradcheck_rejects_a_wrong_backward():
    from parsestack.autodiff import active_tape

    def scaled_wrong(x):
        out = Tensor(2.0 * x.data, dtype=x.dtype)
        return active_tape().record("wrong", out, (x,), lambda g: (2.02 * g,))

    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3))
    assert check_gradients(lambda t: scaled_wrong(t[0]), [x], rng) > 1e-3
    assert check_gradients(lambda t: t[0] * 2.0, [x], rng) < 1e-4
