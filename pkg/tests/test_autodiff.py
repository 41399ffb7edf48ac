import numpy as np
import pytest

from roadforge import autodiff as ad


def check(fn, params, tol=1e-5, **kw):
    rep = ad.grad_check(fn, params, tol=tol, **kw)
    assert rep.passed, rep.failures[:3]
    return rep


class TestForwardValues:
    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(ad.Tensor(np.zeros(3))).data.tolist() == [0.5, 0.5, 0.5]

    def test_sigmoid_extremes_stable(self):
        y = ad.sigmoid(ad.Tensor(np.array([-800.0, 800.0]))).data
        assert y[0] == 0.0 and y[1] == 1.0

    def test_layernorm_constant_vector(self):
        # zero variance: output is the affine bias alone
        out = ad.layernorm(ad.Tensor(np.full((2, 5), 3.0)), ad.Tensor(np.ones(5)), ad.Tensor(np.zeros(5)))
        assert np.allclose(out.data, 0.0, atol=1e-6)

    def test_softmax_uniform(self):
        out = ad.softmax(ad.Tensor(np.array([1.0, 1.0, 1.0])))
        assert np.allclose(out.data, 1 / 3, atol=1e-15)

    def test_softmax_sums_to_one(self):
        rng = np.random.default_rng(0)
        out = ad.softmax(ad.Tensor(rng.normal(0, 10, (4, 9))))
        assert np.abs(out.data.sum(axis=-1) - 1.0).max() < 1e-12

    def test_tanh_range(self):
        y = ad.tanh(ad.Tensor(np.linspace(-50, 50, 101))).data
        assert (np.abs(y) <= 1.0).all()

    def test_mse_and_bce_values(self):
        pred = ad.Tensor(np.array([0.5, 0.5]))
        assert float(ad.bce(pred, np.array([1.0, 0.0])).data) == pytest.approx(np.log(2))
        assert float(ad.mse(ad.Tensor(np.array([1.0, 3.0])), np.array([0.0, 1.0])).data) == pytest.approx(2.5)

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeMismatch):
            ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((2, 3))))
        with pytest.raises(ad.ShapeMismatch):
            ad.bce_sum(ad.Tensor(np.zeros(3)), np.zeros(4))


class TestBackward:
    def test_square_derivative(self):
        x = ad.Parameter(np.array([3.0]))
        ad.backward(ad.mul(x, x))
        assert x.grad[0] == 6.0

    def test_mse_of_identical_is_zero_grad(self):
        x = ad.Parameter(np.array([1.0, -2.0]))
        ad.backward(ad.sse_sum(x, x.data.copy()))
        assert np.allclose(x.grad, 0.0)

    def test_not_scalar_loss(self):
        with pytest.raises(ad.NotScalarLoss):
            ad.backward(ad.Tensor(np.zeros(2)))

    def test_accumulation_until_cleared(self):
        w = ad.Parameter(np.ones(3))
        for _ in range(3):
            ad.backward(ad.sum_all(ad.mul(w, np.array([1.0, 2.0, 3.0]))))
        assert np.allclose(w.grad, [3.0, 6.0, 9.0])
        w.zero_grad()
        ad.backward(ad.sum_all(ad.mul(w, np.array([1.0, 2.0, 3.0]))))
        assert np.allclose(w.grad, [1.0, 2.0, 3.0])

    def test_diamond_graph_counts_both_paths(self):
        x = ad.Parameter(np.array([2.0]))
        y = ad.mul(x, x)  # x^2
        ad.backward(ad.add(y, y))  # 2 x^2 -> d/dx = 4x = 8
        assert x.grad[0] == 8.0

    def test_no_grad_skips_recording(self):
        w = ad.Parameter(np.ones(2))
        with ad.no_grad():
            out = ad.mul(w, w)
        assert out._backward_fn is None
        assert not out.requires_grad


class TestGradChecks:
    def test_two_layer_mlp_vs_finite_differences(self):
        rng = np.random.default_rng(42)
        W1 = ad.Parameter(rng.normal(0, 0.5, (5, 7)))
        b1 = ad.Parameter(rng.normal(0, 0.5, 7))
        W2 = ad.Parameter(rng.normal(0, 0.5, (7, 3)))
        x = rng.normal(0, 1, (4, 5))
        t = rng.uniform(0.1, 0.9, (4, 3))

        def fn():
            h = ad.leaky_relu(ad.matmul(ad.Tensor(x), W1) + b1, 0.1)
            return ad.bce_sum(ad.sigmoid(ad.matmul(h, W2)), t)

        rep = check(fn, {"W1": W1, "b1": b1, "W2": W2}, tol=1e-5)
        assert rep.max_rel_error < 1e-5

    def test_linear_layer_tight(self):
        rng = np.random.default_rng(1)
        W = ad.Parameter(rng.normal(0, 1, (4, 4)))
        x = rng.normal(0, 1, (3, 4))

        def fn():
            return ad.sse_sum(ad.matmul(ad.Tensor(x), W), np.ones((3, 4)))

        check(fn, {"W": W}, tol=1e-6)

    def test_relu_at_zero_excluded_not_failed(self):
        z = ad.Parameter(np.array([0.0, 1.0, -2.0]))

        def fn():
            return ad.sum_all(ad.relu(z))

        rep = ad.grad_check(fn, {"z": z})
        assert rep.passed
        assert ("z", 0) in rep.excluded

    def test_norm_layers(self):
        rng = np.random.default_rng(3)
        g1 = ad.Parameter(rng.normal(1, 0.1, 6))
        b1 = ad.Parameter(rng.normal(0, 0.1, 6))
        x = rng.normal(0, 2, (5, 6))

        def fn():
            return ad.sse_sum(ad.tanh(ad.layernorm(ad.Tensor(x), g1, b1)), np.zeros((5, 6)))

        check(fn, {"g": g1, "b": b1})

    def test_conv_pool_bn_stack(self):
        rng = np.random.default_rng(4)
        K = ad.Parameter(rng.normal(0, 0.3, (2, 1, 3, 3)))
        gm = ad.Parameter(rng.normal(1, 0.1, 2))
        bt = ad.Parameter(rng.normal(0, 0.1, 2))
        img = rng.normal(0, 1, (2, 1, 6, 6))

        def fn():
            h = ad.conv2d(ad.Tensor(img), K, None, padding=1)
            h = ad.batchnorm2d(h, gm, bt, np.zeros(2), np.ones(2), training=True)
            h = ad.maxpool2d(ad.leaky_relu(h), 2)
            return ad.sse_sum(h, np.zeros_like(h.data))

        check(fn, {"K": K, "gm": gm, "bt": bt})

    def test_sampled_coordinates(self):
        rng = np.random.default_rng(5)
        W = ad.Parameter(rng.normal(0, 0.2, (30, 30)))
        x = rng.normal(0, 1, (2, 30))

        def fn():
            return ad.sse_sum(ad.tanh(ad.matmul(ad.Tensor(x), W)), np.zeros((2, 30)))

        rep = check(fn, {"W": W}, max_coords_per_param=20)
        assert rep.n_checked <= 20


class TestMaskedAttention:
    def _scores(self, rng, T=6, d=4):
        q = ad.Parameter(rng.normal(0, 0.5, (T, d)))
        k = ad.Parameter(rng.normal(0, 0.5, (T, d)))
        v = ad.Parameter(rng.normal(0, 0.5, (T, d)))
        return q, k, v

    def test_causal_prefix_bit_identical(self):
        rng = np.random.default_rng(0)
        T, d = 6, 4
        allow = np.tril(np.ones((T, T), dtype=bool))
        x = rng.normal(0, 1, (T, d))

        def run(inputs):
            with ad.no_grad():
                s = ad.scale(ad.matmul(ad.Tensor(inputs), ad.swap_last2(ad.Tensor(inputs))), 0.5)
                w = ad.masked_softmax(s, allow)
                return ad.matmul(w, ad.Tensor(inputs)).data

        base = run(x)
        for t in range(T - 1):
            perturbed = x.copy()
            perturbed[t + 1 :] += rng.normal(0, 5, (T - t - 1, d))
            assert np.array_equal(run(perturbed)[: t + 1], base[: t + 1])

    def test_fully_masked_row_emits_zeros(self):
        scores = ad.Tensor(np.ones((3, 3)))
        allow = np.tril(np.ones((3, 3), dtype=bool), k=-1)  # row 0 has nothing
        w = ad.masked_softmax(scores, allow)
        assert np.array_equal(w.data[0], np.zeros(3))
        assert w.data[1:].sum(axis=-1) == pytest.approx(1.0)

    def test_masked_softmax_grads(self):
        rng = np.random.default_rng(2)
        s = ad.Parameter(rng.normal(0, 1, (4, 4)))
        allow = np.tril(np.ones((4, 4), dtype=bool))

        def fn():
            return ad.sse_sum(ad.masked_softmax(s, allow), np.zeros((4, 4)))

        check(fn, {"s": s})


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        params = {
            "layer.w": ad.Tensor(rng.normal(size=(3, 4))),
            "layer.b": ad.Tensor(rng.normal(size=4)),
            "scalarish": ad.Tensor(rng.normal(size=1)),
        }
        path = tmp_path / "model.ckpt"
        ad.save_checkpoint(params, path)
        loaded = ad.load_checkpoint(path)
        assert set(loaded) == set(params)
        for k in params:
            assert np.array_equal(loaded[k], params[k].data)

    def test_magic_and_determinism(self, tmp_path):
        params = {"a": ad.Tensor(np.ones((2, 2))), "b": ad.Tensor(np.zeros(3))}
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        ad.save_checkpoint(params, p1)
        ad.save_checkpoint(dict(reversed(params.items())), p2)
        raw = p1.read_bytes()
        assert raw.startswith(b"RFCK1\x00")
        assert raw == p2.read_bytes()  # insertion order must not matter

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + bytes(100))
        with pytest.raises(ValueError):
            ad.load_checkpoint(path)
