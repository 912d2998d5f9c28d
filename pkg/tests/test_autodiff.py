"""Tensor substrate: forward oracles, gradient checks, blob round-trips."""

import numpy as np
import pytest

from warpvos import autodiff as ad
from warpvos import blobio
from warpvos.autodiff import ShapeError, Tensor, UsageError


def naive_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def naive_conv2d(x, w, stride, padding):
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((cout, oh, ow))
    for o in range(cout):
        for c in range(cin):
            for i in range(oh):
                for j in range(ow):
                    for di in range(kh):
                        for dj in range(kw):
                            out[o, i, j] += w[o, c, di, dj] * xp[c, i * stride + di, j * stride + dj]
    return out


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = ad.matmul(Tensor(np.eye(2, dtype=np.float32)), Tensor(a))
        assert np.array_equal(out.data, a)

    def test_closed_form(self):
        out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_random_vs_naive(self, rng, f64):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 5))
        out = ad.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, naive_matmul(a, b), rtol=1e-12)

    def test_shape_mismatch_message(self):
        with pytest.raises(ShapeError) as exc:
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
        assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)


class TestSoftmax:
    def test_symmetry(self):
        out = ad.softmax(Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_closed_form(self):
        out = ad.softmax(Tensor([0.0, float(np.log(3.0))]))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-7)

    def test_shift_invariance(self, rng):
        x = rng.standard_normal(7).astype(np.float32)
        a = ad.softmax(Tensor(x)).data
        b = ad.softmax(Tensor(x + 13.5)).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_sums_to_one(self, rng):
        for _ in range(10):
            x = rng.standard_normal((4, 9)) * rng.uniform(0.1, 50)
            s = ad.softmax(Tensor(x), axis=-1).data.sum(axis=-1)
            np.testing.assert_allclose(s, 1.0, atol=1e-6)

    def test_nan_input_rejected(self):
        with pytest.raises(UsageError):
            ad.softmax(Tensor([np.nan, 0.0]))


class TestLayerNorm:
    def test_constant_vector(self):
        out = ad.layer_norm(Tensor([3.0, 3.0, 3.0]), Tensor([1.0, 1.0, 1.0]), Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-5)

    def test_two_point_closed_form(self, f64):
        out = ad.layer_norm(Tensor([1.0, 3.0]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), eps=1e-12)
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-5)

    def test_standardizes(self, rng, f64):
        x = rng.standard_normal((6, 16)) * 4 + 2
        y = ad.normalize(Tensor(x), axes=-1, eps=1e-12).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-5)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-5)


class TestGroupNorm:
    def test_constant_input(self):
        x = np.full((4, 3, 3), 7.0, dtype=np.float32)
        out = ad.group_norm(Tensor(x), 2, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-4)

    def test_groups_equal_channels_is_instance_norm(self, rng, f64):
        x = rng.standard_normal((3, 5, 4))
        out = ad.group_norm(Tensor(x), 3, Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=1e-12).data
        for c in range(3):
            ref = (x[c] - x[c].mean()) / np.sqrt(x[c].var() + 1e-12)
            np.testing.assert_allclose(out[c], ref, atol=1e-9)

    def test_single_group_is_whole_map_norm(self, rng, f64):
        x = rng.standard_normal((4, 3, 2))
        out = ad.group_norm(Tensor(x), 1, Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=1e-12).data
        ref = (x - x.mean()) / np.sqrt(x.var() + 1e-12)
        np.testing.assert_allclose(out, ref, atol=1e-9)

    def test_divisibility_error(self):
        with pytest.raises(ShapeError):
            ad.group_norm(Tensor(np.zeros((5, 2, 2))), 2, Tensor(np.ones(5)), Tensor(np.zeros(5)))


class TestConv2d:
    def test_one_by_one_identity(self, rng):
        x = rng.standard_normal((1, 4, 5)).astype(np.float32)
        w = np.ones((1, 1, 1, 1), dtype=np.float32)
        out = ad.conv2d(Tensor(x), Tensor(w))
        np.testing.assert_allclose(out.data, x, atol=1e-7)

    def test_all_ones_closed_form(self):
        x = np.ones((1, 3, 3), dtype=np.float32)
        w = np.ones((1, 1, 2, 2), dtype=np.float32)
        out = ad.conv2d(Tensor(x), Tensor(w))
        assert out.shape == (1, 2, 2)
        np.testing.assert_allclose(out.data, 4.0)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (1, 2)])
    def test_random_vs_naive(self, rng, f64, stride, padding):
        x = rng.standard_normal((3, 6, 7))
        w = rng.standard_normal((4, 3, 3, 3))
        out = ad.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding)
        np.testing.assert_allclose(out.data, naive_conv2d(x, w, stride, padding), rtol=1e-10, atol=1e-12)

    def test_degenerate_extent_error(self):
        with pytest.raises(ShapeError):
            ad.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        ad.tsum(x).backward()
        np.testing.assert_allclose(x.grad, 1.0)

    def test_square_gives_2x(self, rng, f64):
        data = rng.standard_normal((5,))
        x = Tensor(data, requires_grad=True)
        ad.tsum(ad.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, 2 * data, rtol=1e-12)

    def test_repeated_backward_accumulates(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = ad.tsum(x)
        loss.backward()
        loss.backward()
        np.testing.assert_allclose(x.grad, 2.0)

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(UsageError):
            ad.mul(x, 2.0).backward()

    def test_shared_subgraph_gradients(self, f64):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = ad.mul(x, x)
        loss = ad.tsum(ad.add(y, y))
        loss.backward()
        np.testing.assert_allclose(x.grad, [8.0])


def _mul_by(rng, shape):
    return Tensor(rng.standard_normal(shape))


GRADCHECK_CASES = {
    "add": lambda rng, a, b: ad.add(a, b),
    "sub": lambda rng, a, b: ad.sub(a, b),
    "mul": lambda rng, a, b: ad.mul(a, b),
    "div": lambda rng, a, b: ad.div(a, ad.add(ad.mul(b, b), 1.0)),
    "gelu": lambda rng, a, b: ad.gelu(a),
    "relu": lambda rng, a, b: ad.relu(ad.add(a, 0.1)),
    "exp": lambda rng, a, b: ad.exp(a),
    "sqrt": lambda rng, a, b: ad.sqrt(ad.add(ad.mul(a, a), 0.5)),
    "softmax": lambda rng, a, b: ad.softmax(a, axis=-1),
    "log_softmax": lambda rng, a, b: ad.log_softmax(a, axis=-1),
}


class TestGradientChecks:
    @pytest.mark.parametrize("name", sorted(GRADCHECK_CASES))
    def test_elementwise_ops(self, name, f64):
        rng = np.random.default_rng(hash(name) % 2**32)
        for trial in range(5):
            shape = tuple(rng.integers(2, 5, size=rng.integers(1, 3)))
            a = Tensor(rng.standard_normal(shape), requires_grad=True)
            b = Tensor(rng.standard_normal(shape), requires_grad=True)
            m = _mul_by(rng, shape)
            fn = GRADCHECK_CASES[name]
            err = ad.gradient_check(lambda: ad.tsum(ad.mul(fn(rng, a, b), m)), [a, b])
            assert err < 1e-4, f"{name} trial {trial}: rel err {err:.2e}"

    def test_matmul_grad(self, f64):
        rng = np.random.default_rng(7)
        for _ in range(5):
            n, k, m = rng.integers(2, 5, size=3)
            a = Tensor(rng.standard_normal((n, k)), requires_grad=True)
            b = Tensor(rng.standard_normal((k, m)), requires_grad=True)
            w = _mul_by(rng, (n, m))
            err = ad.gradient_check(lambda: ad.tsum(ad.mul(ad.matmul(a, b), w)), [a, b])
            assert err < 1e-4

    def test_conv2d_grad(self, f64):
        rng = np.random.default_rng(8)
        for _ in range(5):
            cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3))
            x = Tensor(rng.standard_normal((cin, 6, 5)), requires_grad=True)
            w = Tensor(rng.standard_normal((cout, cin, 3, 3)), requires_grad=True)
            bias = Tensor(rng.standard_normal(cout), requires_grad=True)
            out_shape = ad.conv2d(x, w, bias, stride=2, padding=1).shape
            m = _mul_by(rng, out_shape)
            err = ad.gradient_check(
                lambda: ad.tsum(ad.mul(ad.conv2d(x, w, bias, stride=2, padding=1), m)), [x, w, bias]
            )
            assert err < 1e-4

    def test_norm_grads(self, f64):
        rng = np.random.default_rng(9)
        for _ in range(5):
            x = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
            g = Tensor(rng.standard_normal(8), requires_grad=True)
            b = Tensor(rng.standard_normal(8), requires_grad=True)
            m = _mul_by(rng, (4, 8))
            err = ad.gradient_check(lambda: ad.tsum(ad.mul(ad.layer_norm(x, g, b), m)), [x, g, b])
            assert err < 1e-4

    def test_gather_grads(self, f64):
        rng = np.random.default_rng(10)
        for _ in range(5):
            t = Tensor(rng.standard_normal((6, 4)), requires_grad=True)
            idx = rng.integers(0, 6, size=(3, 5))
            m = _mul_by(rng, (3, 5, 4))
            err = ad.gradient_check(lambda: ad.tsum(ad.mul(ad.take(t, idx), m)), [t])
            assert err < 1e-4


class TestDeterminism:
    def test_bit_identical_forward(self, rng):
        x = rng.standard_normal((8, 8)).astype(np.float32)
        w = rng.standard_normal((8, 8)).astype(np.float32)
        a = ad.softmax(ad.matmul(Tensor(x), Tensor(w)), axis=-1).data
        b = ad.softmax(ad.matmul(Tensor(x.copy()), Tensor(w.copy())), axis=-1).data
        assert np.array_equal(a, b)


class TestBlobIO:
    @pytest.mark.parametrize("shape", [(), (4,), (2, 3), (3, 1, 5)])
    def test_round_trip(self, tmp_path, rng, shape):
        arr = rng.standard_normal(shape).astype(np.float32)
        p = tmp_path / "t.bin"
        blobio.save_blob(p, arr)
        np.testing.assert_array_equal(blobio.load_blob(p), arr)

    def test_float64_payload(self, tmp_path, rng):
        arr = rng.standard_normal((3, 2))
        p = tmp_path / "t64.bin"
        blobio.save_blob(p, arr, dtype="float64")
        np.testing.assert_array_equal(blobio.load_blob(p, dtype="float64"), arr)

    def test_header_layout(self, tmp_path):
        p = tmp_path / "h.bin"
        blobio.save_blob(p, np.zeros((2, 3), dtype=np.float32))
        raw = p.read_bytes()
        assert int.from_bytes(raw[0:8], "little") == 2
        assert int.from_bytes(raw[8:16], "little") == 2
        assert int.from_bytes(raw[16:24], "little") == 3
        assert len(raw) == 24 + 6 * 4

    def test_truncation_detected(self, tmp_path):
        p = tmp_path / "bad.bin"
        blobio.save_blob(p, np.zeros(4, dtype=np.float32))
        p.write_bytes(p.read_bytes()[:-2])
        with pytest.raises(ValueError):
            blobio.load_blob(p)
