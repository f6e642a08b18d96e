import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from umtra import autodiff as ad
from umtra.autodiff import Tensor

from helpers import check_grads, numeric_grad, rel_err


def _rand(shape, seed=0):
    return np.random.default_rng(seed).uniform(-2, 2, size=shape)


def naive_conv(x, w):
    b, c, h, wd = x.shape
    f = w.shape[0]
    out = np.zeros((b, f, h, wd))
    for bi in range(b):
        for fi in range(f):
            for i in range(h):
                for j in range(wd):
                    s = 0.0
                    for ci in range(c):
                        for di in range(3):
                            for dj in range(3):
                                ii, jj = i + di - 1, j + dj - 1
                                if 0 <= ii < h and 0 <= jj < wd:
                                    s += x[bi, ci, ii, jj] * w[fi, ci, di, dj]
                    out[bi, fi, i, j] = s
    return out


def naive_pool(x):
    b, c, h, w = x.shape
    out = np.full((b, c, (h + 1) // 2, (w + 1) // 2), -np.inf)
    for bi in range(b):
        for ci in range(c):
            for i in range(h):
                for j in range(w):
                    out[bi, ci, i // 2, j // 2] = max(out[bi, ci, i // 2, j // 2], x[bi, ci, i, j])
    return out


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_add(self):
        np.testing.assert_array_equal(ad.elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4, 6])

    def test_scale_by_zero(self):
        np.testing.assert_array_equal(ad.elementwise("scale", Tensor([1.0, 2.0]), 0).data, [0, 0])

    def test_scalar_broadcast(self):
        np.testing.assert_array_equal((Tensor([1.0, 2.0]) * Tensor(3.0)).data, [3, 6])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2,\) vs \(3,\)"):
            ad.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ad.elementwise("div", Tensor(1.0), Tensor(1.0))

    def test_no_record_without_grad(self):
        out = ad.add(Tensor([1.0]), Tensor([2.0]))
        assert out.node is None and not out.requires_grad


class TestMatmul:
    def test_identity(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)

    def test_row_col(self):
        assert ad.matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [5.0]])).data.tolist() == [[0.0]]

    def test_triple_loop(self):
        a, b = _rand((3, 4), 1), _rand((4, 2), 2)
        ref = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    ref[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(ad.matmul(Tensor(a), Tensor(b)).data, ref, rtol=1e-14)

    def test_mismatch(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestConv:
    def test_delta_kernel(self):
        x = _rand((2, 1, 5, 6))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        np.testing.assert_array_equal(ad.conv2d(Tensor(x), Tensor(w)).data, x)

    def test_ones_kernel_padded_sum(self):
        out = ad.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3)))).data[0, 0]
        assert out[2, 2] == 9 and out[0, 0] == 4 and out[0, 2] == 6

    def test_matches_nested_loops(self):
        x, w = _rand((2, 3, 6, 5), 3), _rand((4, 3, 3, 3), 4)
        np.testing.assert_allclose(ad.conv2d(Tensor(x), Tensor(w)).data, naive_conv(x, w), atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channel mismatch"):
            ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


class TestMaxpool:
    def test_two_by_two(self):
        assert ad.maxpool2(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])).data.tolist() == [[[[4.0]]]]

    def test_constant_image(self):
        out = ad.maxpool2(Tensor(np.full((1, 2, 6, 6), 0.7))).data
        assert out.shape == (1, 2, 3, 3) and np.all(out == 0.7)

    def test_window_scan(self):
        x = _rand((2, 2, 4, 4), 5)
        np.testing.assert_array_equal(ad.maxpool2(Tensor(x)).data, naive_pool(x))

    def test_odd_extent(self):
        x = _rand((1, 1, 5, 3), 6)
        out = ad.maxpool2(Tensor(x)).data
        assert out.shape == (1, 1, 3, 2)
        np.testing.assert_array_equal(out, naive_pool(x))

    def test_tie_goes_to_first_row_major(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        (g,) = ad.grad(ad.maxpool2(x).sum(), [x])
        assert g.data[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]

    def test_graph_and_fast_paths_agree(self):
        x = _rand((3, 2, 7, 6), 7)
        fast = ad.maxpool2(Tensor(x)).data
        slow = ad.maxpool2(Tensor(x, requires_grad=True)).data
        np.testing.assert_array_equal(fast, slow)


class TestBatchNorm:
    def test_constant_channel_is_zero(self):
        out = ad.batch_stat_norm(Tensor(np.full((3, 2, 4, 4), 5.0)), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        assert np.all(out.data == 0.0)

    def test_zero_gamma_gives_beta(self):
        beta = np.array([0.3, -1.2])
        out = ad.batch_stat_norm(Tensor(_rand((3, 2, 4, 4))), Tensor(np.zeros(2)), Tensor(beta)).data
        np.testing.assert_array_equal(out, np.broadcast_to(beta.reshape(1, 2, 1, 1), out.shape))

    def test_normalized_statistics(self):
        x = _rand((4, 3, 5, 5), 8) * 3 + 1
        out = ad.batch_stat_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-9)


class TestSoftmaxXent:
    def test_uniform_logits(self):
        loss = ad.softmax_xent(Tensor(np.zeros((3, 5))), ad.one_hot([0, 2, 4], 5))
        assert loss.item() == pytest.approx(math.log(5), abs=1e-12)

    def test_confident_true_class(self):
        logits = np.zeros((1, 5))
        logits[0, 1] = 50.0
        assert ad.softmax_xent(Tensor(logits), ad.one_hot([1], 5)).item() < 1e-20

    def test_gradient_is_softmax_minus_label(self):
        logits = _rand((4, 5), 9)
        labels = ad.one_hot([0, 3, 1, 1], 5)
        x = Tensor(logits, requires_grad=True)
        (g,) = ad.grad(ad.softmax_xent(x, labels), [x])
        sm = np.exp(logits - logits.max(1, keepdims=True))
        sm /= sm.sum(1, keepdims=True)
        np.testing.assert_allclose(g.data, (sm - labels.data) / 4, rtol=1e-12)
        fd = numeric_grad(lambda z: ad.softmax_xent(Tensor(z), labels).item(), logits)
        assert rel_err(g.data, fd) < 1e-5

    def test_rejects_non_one_hot(self):
        with pytest.raises(ValueError, match="row 1 is not one-hot"):
            ad.softmax_xent(Tensor(np.zeros((2, 3))), Tensor([[1.0, 0, 0], [1.0, 1.0, 0]]))

    def test_large_logits_stable(self):
        logits = np.array([[1000.0, 0.0, -1000.0]])
        assert math.isfinite(ad.softmax_xent(Tensor(logits), ad.one_hot([2], 3)).item())


PRIMITIVES = {
    "add": (lambda a, b: ad.add(a, b), [(3, 4), (3, 4)]),
    "sub": (lambda a, b: ad.sub(a, b), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: ad.mul(a, b), [(3, 4), (3, 4)]),
    "scale": (lambda a: ad.scale(a, -1.7), [(3, 4)]),
    "add_const": (lambda a: ad.add_const(a, 0.3), [(5,)]),
    "relu": (lambda a: ad.relu(a), [(3, 4)]),
    "exp": (lambda a: ad.exp(a), [(3, 4)]),
    "power": (lambda a: ad.power(ad.add_const(ad.mul(a, a), 0.5), -0.5), [(6,)]),
    "matmul": (lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)]),
    "transpose": (lambda a: ad.transpose(a), [(3, 4)]),
    "reshape": (lambda a: ad.reshape(a, (2, 6)), [(3, 4)]),
    "broadcast_to": (lambda a: ad.broadcast_to(a, (2, 3, 4)), [(1, 3, 1)]),
    "sum_to": (lambda a: ad.sum_to(a, (1, 3, 1)), [(2, 3, 4)]),
    "log_softmax": (lambda a: ad.log_softmax(a), [(3, 5)]),
    "conv2d": (lambda x, w: ad.conv2d(x, w), [(2, 2, 5, 4), (3, 2, 3, 3)]),
    "conv2d_input_grad": (lambda g, w: ad.conv2d_input_grad(g, w), [(2, 3, 4, 5), (3, 2, 3, 3)]),
    "conv2d_weight_grad": (lambda x, g: ad.conv2d_weight_grad(x, g), [(2, 2, 4, 5), (2, 3, 4, 5)]),
    "maxpool2": (lambda x: ad.maxpool2(x), [(2, 2, 5, 4)]),
    "batch_stat_norm": (lambda x, g, b: ad.batch_stat_norm(x, g, b), [(3, 2, 3, 3), (2,), (2,)]),
    "softmax_xent": (lambda x: ad.softmax_xent(x, ad.one_hot([1, 0, 2], 3)), [(3, 3)]),
}


class TestFiniteDifferences:
    @pytest.mark.parametrize("name", sorted(PRIMITIVES))
    def test_first_order(self, name):
        fn, shapes = PRIMITIVES[name]
        arrays_ = [_rand(s, seed=10 + i) for i, s in enumerate(shapes)]
        assert check_grads(fn, arrays_) < 1e-5

    @pytest.mark.parametrize("name", ["mul", "exp", "power", "matmul", "log_softmax", "conv2d",
                                      "conv2d_input_grad", "conv2d_weight_grad", "maxpool2",
                                      "batch_stat_norm", "softmax_xent"])
    def test_second_order(self, name):
        """Gradient of <grad f, v> against finite differences of grad f."""
        fn, shapes = PRIMITIVES[name]
        arrays_ = [_rand(s, seed=20 + i) for i, s in enumerate(shapes)]
        out_w = np.random.default_rng(1).uniform(-1, 1, size=fn(*[Tensor(a) for a in arrays_]).shape)
        vs = [np.random.default_rng(2 + i).uniform(-1, 1, size=a.shape) for i, a in enumerate(arrays_)]

        def first(*arrs, graph=False):
            ts = [Tensor(a, requires_grad=True) for a in arrs]
            loss = ad.sum_to(ad.mul(fn(*ts), Tensor(out_w)), ())
            gs = ad.grad(loss, ts, create_graph=graph, allow_unused=True)
            return ts, gs

        def directional(*arrs):
            _, gs = first(*arrs)
            return sum(float(np.sum(g.data * v)) for g, v in zip(gs, vs))

        ts, gs = first(*arrays_, graph=True)
        inner = None
        for g, v in zip(gs, vs):
            term = ad.sum_to(ad.mul(g, Tensor(v)), ())
            inner = term if inner is None else ad.add(inner, term)
        hvp = ad.grad(inner, ts, allow_unused=True)
        for i, a in enumerate(arrays_):
            def f_i(x, i=i):
                args = list(arrays_)
                args[i] = x
                return directional(*args)

            fd = numeric_grad(f_i, a, h=1e-5)
            assert rel_err(hvp[i].data, fd) < 1e-4, name


class TestGrad:
    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        assert ad.grad(x * x, [x])[0].item() == 6.0

    def test_second_derivative_of_cube(self):
        x = Tensor(3.0, requires_grad=True)
        (g,) = ad.grad(x * x * x, [x], create_graph=True)
        assert ad.grad(g, [x])[0].item() == pytest.approx(18.0, abs=1e-12)

    def test_quadratic_meta_gradient(self):
        alpha, a, b = 0.1, 0.0, 2.0
        theta = Tensor(1.0, requires_grad=True)
        (g,) = ad.grad((theta - a) ** 2, [theta], create_graph=True)
        adapted = theta - g * alpha
        (meta,) = ad.grad((adapted - b) ** 2, [theta])
        assert meta.item() == pytest.approx(-1.92, abs=1e-12)

        def outer(t):
            tp = t - alpha * 2 * (t - a)
            return (tp - b) ** 2

        fd = (outer(1 + 1e-6) - outer(1 - 1e-6)) / 2e-6
        assert meta.item() == pytest.approx(fd, rel=1e-8)

    def test_unreachable_parameter_is_named(self):
        x = Tensor(1.0, requires_grad=True, name="x")
        y = Tensor(2.0, requires_grad=True, name="lonely")
        with pytest.raises(ValueError, match="'lonely' is unreachable"):
            ad.grad(x * x, {"x": x, "lonely": y})

    def test_mapping_in_mapping_out(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        out = ad.grad((x * x).sum(), {"x": x})
        assert list(out) == ["x"] and out["x"].data.tolist() == [2.0, 4.0]

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            ad.grad(x * x, [x])

    def test_no_grad_param_gets_no_gradient(self):
        x = Tensor(2.0, requires_grad=True)
        c = Tensor(5.0)
        with pytest.raises(ValueError):
            ad.grad(x * c, [c])

    def test_grad_without_create_graph_is_detached(self):
        x = Tensor(3.0, requires_grad=True)
        (g,) = ad.grad(x * x, [x])
        assert g.node is None

    def test_tape_is_topological(self):
        x = Tensor(_rand((2, 3)), requires_grad=True)
        loss = ad.sum_to(ad.exp(ad.relu(ad.mul(x, x))), ())
        tape = ad.Tape.from_outputs([loss])
        position = {id(n): i for i, n in enumerate(tape.nodes)}
        for n in tape.nodes:
            for t in n.inputs:
                if t.node is not None:
                    assert position[id(t.node)] < position[id(n)]

    def test_linearity(self):
        x = Tensor(_rand((3, 4), 30), requires_grad=True)
        w = Tensor(_rand((4, 2), 31))
        l1 = ad.sum_to(ad.relu(ad.matmul(x, w)), ())
        l2 = ad.sum_to(ad.exp(ad.scale(x, 0.3)), ())
        a, b = 1.7, -0.4
        (g1,) = ad.grad(l1, [x])
        (g2,) = ad.grad(l2, [x])
        (gc,) = ad.grad(ad.add(ad.scale(l1, a), ad.scale(l2, b)), [x])
        np.testing.assert_allclose(gc.data, a * g1.data + b * g2.data, atol=1e-12, rtol=0)

    def test_replay_bit_identical(self):
        def run():
            x = Tensor(_rand((2, 1, 6, 6), 40), requires_grad=True)
            w = Tensor(_rand((2, 1, 3, 3), 41), requires_grad=True)
            loss = ad.softmax_xent(ad.reshape(ad.maxpool2(ad.relu(ad.conv2d(x, w))), (2, 18)),
                                   ad.one_hot([3, 7], 18))
            return loss.data.tobytes() + b"".join(g.data.tobytes() for g in ad.grad(loss, [x, w]))

        assert run() == run()

    def test_grad_mode_is_thread_local(self):
        seen = []
        with ad.no_grad():
            t = threading.Thread(target=lambda: seen.append(ad.is_grad_enabled()))
            t.start()
            t.join()
            assert not ad.is_grad_enabled()
        assert seen == [True]


class TestSerialization:
    def test_round_trip(self):
        x = _rand((2, 3, 4), 50)
        buf = ad.tensor_to_bytes(Tensor(x))
        assert buf[:4] == b"UMT0"
        y, end = ad.tensor_from_bytes(buf)
        assert end == len(buf)
        assert y.data.tobytes() == x.tobytes()

    def test_layout(self):
        buf = ad.tensor_to_bytes(np.array([[1.0, 2.0]]))
        assert buf[4:8] == (2).to_bytes(4, "little")
        assert buf[8:16] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
        assert np.frombuffer(buf[16:], "<f8").tolist() == [1.0, 2.0]

    def test_scalar(self):
        y, _ = ad.tensor_from_bytes(ad.tensor_to_bytes(np.float64(2.5)))
        assert y.shape == () and y.item() == 2.5

    def test_truncated(self):
        with pytest.raises(ValueError, match="truncated"):
            ad.tensor_from_bytes(ad.tensor_to_bytes(np.ones(3))[:-1])

    def test_bad_magic(self):
        with pytest.raises(ValueError, match="magic"):
            ad.tensor_from_bytes(b"XXXX" + bytes(8))


finite = st.floats(-50, 50, allow_nan=False, width=64)


class TestProperties:
    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 8)), elements=finite))
    def test_softmax_rows_are_distributions(self, logits):
        p = ad.softmax(Tensor(logits)).data
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(
        arrays(np.float64, (3, 4), elements=st.floats(-2, 2, width=64)),
        st.floats(-3, 3, width=64),
        st.floats(-3, 3, width=64),
    )
    def test_gradient_linearity(self, x0, a, b):
        x = Tensor(x0, requires_grad=True)
        l1 = ad.sum_to(ad.mul(x, x), ())
        l2 = ad.sum_to(ad.log_softmax(x), ())
        (g1,) = ad.grad(l1, [x])
        (g2,) = ad.grad(l2, [x])
        (gc,) = ad.grad(ad.add(ad.scale(l1, a), ad.scale(l2, b)), [x])
        np.testing.assert_allclose(gc.data, a * g1.data + b * g2.data, atol=1e-12, rtol=0)
