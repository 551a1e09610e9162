"""Finite-difference gradient checks for every op, three random shapes each."""

import numpy as np

from mmafnet import ops
from mmafnet.autodiff import Tensor, grad_check, mul, sum_all

TOL = 1e-4


def t(arr, name=""):
    return Tensor(np.asarray(arr, dtype=np.float64), name=name)


def separated(rng, shape, gap=0.05):
    """Distinct values with pairwise gaps >= gap and none within gap/4 of zero.

    Keeps finite differences away from max/relu kinks.
    """
    size = int(np.prod(shape))
    vals = (rng.permutation(size) - size / 2 + 0.25) * gap
    return vals.reshape(shape)


def check(f, wrt, rng, label):
    report = grad_check(f, wrt, rng=rng)
    assert report.max_rel_err <= TOL, f"{label}: {report}"


def scalarize(y, mixer):
    return sum_all(mul(y, mixer))


class TestConvLinearGrads:
    def test_conv2d_three_shapes(self):
        rng = np.random.default_rng(0)
        cases = [
            ((1, 2, 5, 5), (3, 2, 3, 3), 1, 1, True),
            ((2, 3, 6, 6), (2, 3, 3, 3), 2, 1, True),
            ((1, 4, 4, 4), (5, 4, 1, 1), 1, 0, False),
        ]
        for xs, ws, s, p, with_bias in cases:
            x = t(rng.normal(size=xs), "x")
            w = t(rng.normal(size=ws) * 0.5, "w")
            b = t(rng.normal(size=(1, ws[0], 1, 1)), "b") if with_bias else None
            out_shape = ops.conv2d(x, w, b, stride=s, padding=p).shape
            mixer = t(rng.normal(size=out_shape))
            wrt = {"x": x, "w": w} | ({"b": b} if b is not None else {})

            def f():
                return scalarize(ops.conv2d(x, w, b, stride=s, padding=p), mixer)

            check(f, wrt, rng, f"conv2d {xs} w={ws} s={s} p={p}")

    def test_linear_three_shapes(self):
        rng = np.random.default_rng(1)
        for ci, co, n in [(4, 3, 1), (8, 2, 2), (1, 5, 3)]:
            x = t(rng.normal(size=(n, ci, 1, 1)), "x")
            w = t(rng.normal(size=(co, ci, 1, 1)), "w")
            b = t(rng.normal(size=(1, co, 1, 1)), "b")
            mixer = t(rng.normal(size=(n, co, 1, 1)))

            def f():
                return scalarize(ops.linear(x, w, b), mixer)

            check(f, {"x": x, "w": w, "b": b}, rng, f"linear {ci}->{co}")


class TestPoolGrads:
    def test_pool2d_max_three_shapes(self):
        rng = np.random.default_rng(2)
        for shape, k, s, p in [((1, 2, 4, 4), 2, 2, 0), ((1, 1, 5, 5), 3, 1, 1), ((2, 2, 6, 6), 3, 2, 1)]:
            x = t(separated(rng, shape), "x")
            out_shape = ops.pool2d(x, "max", k, s, p).shape
            mixer = t(rng.normal(size=out_shape))

            def f():
                return scalarize(ops.pool2d(x, "max", k, s, p), mixer)

            check(f, {"x": x}, rng, f"pool2d max {shape} k={k}")

    def test_pool2d_avg_three_shapes(self):
        rng = np.random.default_rng(3)
        for shape, k, s, p in [((1, 2, 4, 4), 2, 2, 0), ((1, 1, 5, 5), 3, 1, 1), ((2, 2, 6, 6), 5, 1, 2)]:
            x = t(rng.normal(size=shape), "x")
            out_shape = ops.pool2d(x, "avg", k, s, p).shape
            mixer = t(rng.normal(size=out_shape))

            def f():
                return scalarize(ops.pool2d(x, "avg", k, s, p), mixer)

            check(f, {"x": x}, rng, f"pool2d avg {shape} k={k}")

    def test_global_pool_three_shapes(self):
        rng = np.random.default_rng(4)
        for kind in ("max", "avg"):
            for shape in [(1, 3, 4, 4), (2, 2, 5, 3), (3, 1, 2, 7)]:
                x = t(separated(rng, shape), "x")
                mixer = t(rng.normal(size=(shape[0], shape[1], 1, 1)))

                def f():
                    return scalarize(ops.global_pool(x, kind), mixer)

                check(f, {"x": x}, rng, f"global_pool {kind} {shape}")

    def test_channel_pool_three_shapes(self):
        rng = np.random.default_rng(5)
        for kind in ("max", "avg"):
            for shape in [(1, 3, 4, 4), (2, 6, 3, 3), (1, 1, 5, 5)]:
                x = t(separated(rng, shape), "x")
                mixer = t(rng.normal(size=(shape[0], 1, shape[2], shape[3])))

                def f():
                    return scalarize(ops.channel_pool(x, kind), mixer)

                check(f, {"x": x}, rng, f"channel_pool {kind} {shape}")


class TestNormActivationGrads:
    def test_batchnorm_train_three_shapes(self):
        rng = np.random.default_rng(6)
        for shape in [(2, 3, 4, 4), (4, 2, 3, 3), (2, 1, 6, 6)]:
            c = shape[1]
            x = t(rng.normal(size=shape), "x")
            gamma = t(rng.uniform(0.5, 1.5, size=(1, c, 1, 1)), "gamma")
            beta = t(rng.normal(size=(1, c, 1, 1)), "beta")
            rm = np.zeros((1, c, 1, 1))
            rv = np.ones((1, c, 1, 1))
            mixer = t(rng.normal(size=shape))

            def f():
                y = ops.batchnorm2d(x, gamma, beta, rm, rv, update_running=False)
                return scalarize(y, mixer)

            check(f, {"x": x, "gamma": gamma, "beta": beta}, rng, f"batchnorm train {shape}")

    def test_batchnorm_eval(self):
        rng = np.random.default_rng(7)
        shape = (2, 3, 4, 4)
        x = t(rng.normal(size=shape), "x")
        gamma = t(rng.uniform(0.5, 1.5, size=(1, 3, 1, 1)), "gamma")
        beta = t(rng.normal(size=(1, 3, 1, 1)), "beta")
        rm = rng.normal(size=(1, 3, 1, 1))
        rv = rng.uniform(0.5, 2.0, size=(1, 3, 1, 1))
        mixer = t(rng.normal(size=shape))

        def f():
            y = ops.batchnorm2d(x, gamma, beta, rm, rv, training=False)
            return scalarize(y, mixer)

        check(f, {"x": x, "gamma": gamma, "beta": beta}, rng, "batchnorm eval")

    def test_relu_three_shapes(self):
        rng = np.random.default_rng(8)
        for shape in [(1, 2, 3, 3), (2, 4, 2, 2), (1, 1, 7, 7)]:
            x = t(separated(rng, shape), "x")
            mixer = t(rng.normal(size=shape))

            def f():
                return scalarize(ops.relu(x), mixer)

            check(f, {"x": x}, rng, f"relu {shape}")

    def test_sigmoid_three_shapes(self):
        rng = np.random.default_rng(9)
        for shape in [(1, 2, 3, 3), (2, 4, 2, 2), (1, 1, 5, 5)]:
            x = t(rng.normal(size=shape) * 2.0, "x")
            mixer = t(rng.normal(size=shape))

            def f():
                return scalarize(ops.sigmoid(x), mixer)

            check(f, {"x": x}, rng, f"sigmoid {shape}")

    def test_sigmoid_gradient_closed_form(self):
        from mmafnet.autodiff import Tape

        rng = np.random.default_rng(10)
        x = t(rng.normal(size=(1, 2, 3, 3)), "x")
        with Tape() as tape:
            s = ops.sigmoid(x)
            tape.backward(sum_all(s))
        np.testing.assert_allclose(x.grad, s.data * (1.0 - s.data), rtol=1e-12)


class TestResampleSoftmaxGrads:
    def test_upsample_three_shapes(self):
        rng = np.random.default_rng(11)
        for h, w, th, tw in [(2, 2, 4, 4), (3, 5, 6, 10), (1, 4, 3, 8)]:
            x = t(rng.normal(size=(2, 2, h, w)), "x")
            mixer = t(rng.normal(size=(2, 2, th, tw)))

            def f():
                return scalarize(ops.upsample_bilinear(x, th, tw), mixer)

            check(f, {"x": x}, rng, f"upsample {h}x{w}->{th}x{tw}")

    def test_softmax_three_shapes(self):
        rng = np.random.default_rng(12)
        for shape in [(1, 3, 2, 2), (2, 5, 3, 3), (1, 2, 4, 4)]:
            x = t(rng.normal(size=shape) * 2.0, "x")
            mixer = t(rng.normal(size=shape))

            def f():
                return scalarize(ops.softmax_channels(x), mixer)

            check(f, {"x": x}, rng, f"softmax {shape}")

    def test_cross_entropy_three_shapes(self):
        rng = np.random.default_rng(13)
        for shape in [(1, 3, 4, 4), (2, 4, 3, 3), (1, 2, 5, 5)]:
            n, c, h, w = shape
            x = t(rng.normal(size=shape), "x")
            labels = rng.integers(0, c, size=(n, h, w))
            labels = np.where(rng.random(size=(n, h, w)) < 0.25, 255, labels).astype(np.int64)
            labels[0, 0, 0] = 0

            def f():
                return ops.cross_entropy_masked(x, labels)

            check(f, {"x": x}, rng, f"cross_entropy {shape}")
