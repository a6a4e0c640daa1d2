import numpy as np
import pytest

from sadrive import nn
from sadrive.nn import functional as F
from sadrive.nn import Tape, Tensor, grad_check


def naive_conv(x, w, b, stride, pad):
    """Quadruple-loop cross-correlation in float64."""
    x = np.pad(np.asarray(x, np.float64), ((0, 0), (pad, pad), (pad, pad)))
    cout, cin, k, _ = w.shape
    Ho = (x.shape[1] - k) // stride + 1
    Wo = (x.shape[2] - k) // stride + 1
    out = np.zeros((cout, Ho, Wo))
    for o in range(cout):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0
                for c in range(cin):
                    for dy in range(k):
                        for dx in range(k):
                            acc += w[o, c, dy, dx] * x[c, i * stride + dy, j * stride + dx]
                out[o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out


def relu_pattern(pre):
    """Kink pattern for graphs whose only nonsmooth op is a ReLU on ``pre(x)``."""
    return lambda x: pre(x) > 0


# ---------------------------------------------------------------- conv2d


def test_identity_kernel_returns_input():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((3, 5, 6)))
    w = np.zeros((3, 3, 1, 1), np.float32)
    w[np.arange(3), np.arange(3)] = 1
    y = F.conv2d(x, Tensor(w), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(y.data, x.data)


def test_zero_input_gives_bias():
    w = Tensor(np.random.default_rng(1).standard_normal((4, 2, 3, 3)))
    b = Tensor(np.array([0.5, -1.0, 2.0, 3.25]))
    y = F.conv2d(Tensor(np.zeros((2, 7, 7))), w, b, padding=1)
    for o in range(4):
        assert np.all(y.data[o] == b.data[o])


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_naive_loop(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((3, 9, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    y = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
    np.testing.assert_allclose(y.data, naive_conv(x, w, b, stride, pad), atol=1e-6 * 30, rtol=1e-6)
    y64 = F.conv2d(Tensor(x.astype(np.float64)), Tensor(w.astype(np.float64)), Tensor(b.astype(np.float64)),
                   stride=stride, padding=pad)
    np.testing.assert_allclose(y64.data, naive_conv(x, w, b, stride, pad), atol=1e-6)


def test_conv_shape_error_names_dims():
    with pytest.raises(nn.ShapeError, match="3 channels"):
        F.conv2d(Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros((2, 4, 3, 3))))


def test_conv_deconv_adjoint():
    rng = np.random.default_rng(3)
    for stride, pad, op in [(1, 1, 0), (2, 1, 1), (2, 0, 1), (1, 0, 0)]:
        w = rng.standard_normal((5, 3, 3, 3))
        x = rng.standard_normal((2, 3, 8, 8))
        y_shape = F.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).shape
        y = rng.standard_normal(y_shape)
        lhs = np.sum(F.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).data * y)
        back = F.deconv2d(Tensor(y), Tensor(w), stride=stride, padding=pad, output_padding=op).data
        assert back.shape == x.shape
        rhs = np.sum(x * back)
        assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs))


def test_circular_deconv_is_shift_equivariant():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 2, 6, 6))
    w = rng.standard_normal((2, 3, 3, 3))
    y = F.deconv2d(Tensor(x), Tensor(w), stride=2, padding=1, output_padding=1, pad_mode="circular").data
    ys = F.deconv2d(Tensor(np.roll(x, 1, axis=-1)), Tensor(w), stride=2, padding=1, output_padding=1,
                    pad_mode="circular").data
    np.testing.assert_allclose(np.roll(y, 2, axis=-1), ys, atol=1e-5)


# ---------------------------------------------------------------- backward


def test_grad_of_sum_is_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
    with Tape() as tape:
        loss = x.sum()
    (g,) = tape.backward(loss, [x])
    np.testing.assert_array_equal(g, np.ones((3, 4)))


def test_grad_of_half_square_is_x():
    x = Tensor(np.random.default_rng(0).standard_normal((5,)), requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum() * 0.5
    (g,) = tape.backward(loss, [x])
    np.testing.assert_allclose(g, x.data, rtol=1e-6)


def test_unreachable_parameter_gets_zero_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        loss = x.sum()
    gx, gy = tape.backward(loss, [x, y])
    np.testing.assert_array_equal(gy, np.zeros(2))


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(nn.ShapeError):
        tape.backward(y)


def test_backward_visits_each_node_once():
    x = Tensor(np.array([2.0]), requires_grad=True)
    calls = []
    with Tape() as tape:
        y = x * x
        z = y + y
        loss = z.sum()
    for node in tape.nodes:
        orig = node.backward
        node.backward = (lambda o: (lambda g: (calls.append(1), o(g))[1]))(orig)
    (g,) = tape.backward(loss, [x])
    assert len(calls) == len(tape.nodes)
    assert g[0] == pytest.approx(8.0)


def _composed(params):
    w1, w2, b2 = params

    def f(x):
        h = F.relu(F.conv2d(x, w1, None, stride=1, padding=1))
        h = F.max_pool2d(h, 2)
        h = F.upsample_bilinear(h, 2)
        s = F.sigmoid(F.conv2d(h, w2, b2, padding=1))
        return (F.smooth_l1(s * 3.0, np.full(s.shape, 1.0)) + F.log_sigmoid(s * 2.0 - 1.0)).sum()

    return f


@pytest.mark.parametrize("seed", range(20))
def test_composed_graph_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    w1 = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5)
    w2 = Tensor(rng.standard_normal((1, 3, 3, 3)) * 0.5)
    b2 = Tensor(rng.standard_normal(1))
    f = _composed((w1, w2, b2))
    x = rng.standard_normal((1, 2, 4, 4))

    def pattern(xv):
        pre = F.conv2d(Tensor(xv), w1, None, padding=1).data
        pooled = pre.reshape(1, 3, 2, 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(1, 3, 2, 2, 4)
        return np.concatenate([(pre > 0).ravel(), pooled.argmax(-1).ravel()])

    rep = grad_check(f, x, eps=1e-3, tol=1e-3, pattern=pattern)
    assert rep.passed, rep


@pytest.mark.parametrize("seed", range(20))
def test_deconv_and_pool_ops_grad(seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.standard_normal((2, 3, 3, 3)))
    wt = Tensor(rng.standard_normal((2, 3, 3, 3)))

    def f(x):
        y = F.deconv2d(x, w, None, stride=2, padding=1, output_padding=1)
        y = F.avg_pool2d(y, 2) + F.upsample_nearest(F.avg_pool2d(y, 2), 1)
        z = F.conv2d(y, wt, stride=2, padding=1)
        return (F.concat([z, z * z], axis=1) * 0.3).sum() + F.softmax(y, axis=1)[:, 0].sum()

    rep = grad_check(f, rng.standard_normal((1, 2, 3, 3)), tol=1e-3)
    assert rep.passed, rep


@pytest.mark.parametrize("seed", range(20))
def test_bce_and_bilinear_sample_grad(seed):
    rng = np.random.default_rng(seed)
    target = (rng.random((5, 5)) > 0.5).astype(np.float64)
    rows = rng.uniform(0.1, 3.9, (5, 2))
    cols = rng.uniform(0.1, 3.9, (5, 2))

    def f(x):
        p = F.sigmoid(x[0])
        ce = F.binary_cross_entropy(p, target).sum()
        samp = F.bilinear_sample(x, rows, cols)
        return ce + F.max(samp, axis=0).sum() + F.square_norm(x) * 0.01

    x = rng.standard_normal((2, 5, 5))
    rep = grad_check(f, x, tol=1e-3,
                     pattern=lambda xv: F.bilinear_sample(Tensor(xv), rows, cols).data.argmax(0))
    assert rep.passed, rep


def test_grad_check_on_sum_is_exact():
    rep = grad_check(lambda t: t.sum(), np.random.default_rng(0).standard_normal((3, 3)))
    assert rep.max_rel_error == 0.0 or rep.max_rel_error < 1e-9


def test_tape_replay_is_bit_identical():
    rng = np.random.default_rng(7)
    w = Tensor(rng.standard_normal((4, 2, 3, 3)).astype(np.float32), requires_grad=True)
    x = Tensor(rng.standard_normal((2, 2, 6, 6)).astype(np.float32))
    grads = []
    for _ in range(2):
        with Tape() as tape:
            loss = F.relu(F.conv2d(x, w, padding=1)).sum()
        grads.append(tape.backward(loss, [w])[0].copy())
    assert np.array_equal(grads[0], grads[1])


# ---------------------------------------------------------------- optimizer / checkpoint


def test_adam_step_matches_hand_update():
    p = np.array([1.0, -2.0])
    g = np.array([0.5, -0.25])
    m = np.zeros(2)
    v = np.zeros(2)
    nn.adam_step(p, g, m, v, step=1, lr=0.1)
    # first bias-corrected step moves each coordinate by lr * sign(g)
    np.testing.assert_allclose(p, [0.9, -1.9], atol=1e-7)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    state = {"a.weight": rng.standard_normal((3, 2)).astype(np.float32), "b": np.arange(4, dtype=np.float32)}
    nn.save_checkpoint(tmp_path / "m.ckpt", state, {"note": "x"})
    loaded, meta = nn.load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"note": "x"}
    for k in state:
        assert np.array_equal(loaded[k], state[k])
    assert (tmp_path / "m.ckpt").read_bytes().startswith(b"sadrive-ckpt v1\n")


def test_mac_counter_matches_naive_count():
    x = Tensor(np.zeros((2, 3, 8, 8)))
    w = Tensor(np.zeros((4, 3, 3, 3)))
    with nn.count_macs() as c:
        F.conv2d(x, w, padding=1, tag="l")
    naive = sum(1 for n in range(2) for o in range(4) for i in range(8) for j in range(8)
                for ci in range(3) for dy in range(3) for dx in range(3))
    assert c.by_tag["l"] == naive
