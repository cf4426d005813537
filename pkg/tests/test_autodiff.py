import unittest

import numpy as np

from granorm import autodiff as ad
from granorm.autodiff import Tensor
from granorm.errors import NumericalError, ShapeError

STEP = 1e-5


def numeric_gradient(fn, array, step=STEP):
    """Central finite differences of the scalar ``fn()`` with respect to *array* (in place)."""

    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        index = it.multi_index
        original = array[index]
        array[index] = original + step
        plus = fn()
        array[index] = original - step
        minus = fn()
        array[index] = original
        grad[index] = (plus - minus) / (2 * step)
    return grad


def taped_grads(build, tensors):
    with ad.Tape() as tape:
        loss = build()
    return ad.gradients(tape, loss, tensors)


def away_from_zero(rng, shape, margin=0.05):
    values = rng.uniform(margin, 1.0, size=shape)
    return values * rng.choice([-1.0, 1.0], size=shape)


def conv_oracle(x, w, stride, padding):
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    batch, height, width, _ = xp.shape
    kh, kw, _, filters = w.shape
    out_h = (height - kh) // stride + 1
    out_w = (width - kw) // stride + 1
    out = np.zeros((batch, out_h, out_w, filters))
    for b in range(batch):
        for i in range(out_h):
            for j in range(out_w):
                for f in range(filters):
                    patch = xp[b, i * stride:i * stride + kh, j * stride:j * stride + kw, :]
                    out[b, i, j, f] = np.sum(patch * w[:, :, :, f])
    return out


class ForwardPrimitiveTests(unittest.TestCase):
    def test_matmul_by_hand(self):
        out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_relu_definition(self):
        out = ad.relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_matmul_shape_error_names_primitive_and_shapes(self):
        with self.assertRaises(ShapeError) as ctx:
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        message = str(ctx.exception)
        self.assertIn("matmul", message)
        self.assertIn("(2, 3)", message)

    def test_conv_impulse_returns_flipped_kernel(self):
        rng = np.random.default_rng(0)
        kernel = rng.normal(size=(3, 3))
        image = np.zeros((1, 7, 7, 1))
        image[0, 3, 3, 0] = 1.0
        out = ad.conv2d(Tensor(image), Tensor(kernel[:, :, None, None]), padding=1)
        # Cross-correlation: the impulse response is the kernel rotated by 180 degrees.
        np.testing.assert_allclose(out.data[0, 2:5, 2:5, 0], kernel[::-1, ::-1])
        self.assertEqual(np.count_nonzero(out.data), 9)

    def test_conv_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(1)
        for stride, padding in ((1, 0), (2, 1), (1, 2)):
            x = rng.normal(size=(2, 6, 5, 3))
            w = rng.normal(size=(3, 2, 3, 4))
            out = ad.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding)
            np.testing.assert_allclose(out.data, conv_oracle(x, w, stride, padding), rtol=1e-12, atol=1e-12)

    def test_maxpool_tie_routes_to_first_index(self):
        x = Tensor(np.ones((1, 2, 2, 1)), requires_grad=True)
        (grad,) = taped_grads(lambda: ad.sum_all(ad.maxpool2d(x, size=2)), [x])
        expected = np.zeros((1, 2, 2, 1))
        expected[0, 0, 0, 0] = 1.0
        np.testing.assert_array_equal(grad, expected)

    def test_softmax_sums_to_one(self):
        probs = ad.softmax(Tensor(np.random.default_rng(2).normal(size=(4, 7)) * 10))
        np.testing.assert_allclose(probs.data.sum(axis=1), np.ones(4), atol=1e-12)

    def test_non_finite_output_raises(self):
        with self.assertRaises(NumericalError) as ctx:
            ad.scale(Tensor([1.0]), float("inf"))
        self.assertIn("scale", str(ctx.exception))


class BackwardTests(unittest.TestCase):
    def test_sum_gradient_is_ones(self):
        w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        (grad,) = taped_grads(lambda: ad.sum_all(w), [w])
        np.testing.assert_array_equal(grad, np.ones((2, 3)))

    def test_zero_scaled_loss_has_zero_gradient(self):
        w = Tensor(np.ones(4), requires_grad=True)
        (grad,) = taped_grads(lambda: ad.sum_all(ad.scale(w, 0.0)), [w])
        np.testing.assert_array_equal(grad, np.zeros(4))

    def test_non_scalar_loss_rejected(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with ad.Tape() as tape:
            out = ad.scale(w, 2.0)
        with self.assertRaises(ad.AutodiffError):
            ad.backward(tape, out)

    def test_loss_not_on_tape_rejected(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with ad.Tape():
            pass
        other = ad.Tape()
        with ad.no_tape():
            loss = ad.sum_all(w)
        with self.assertRaises(ad.AutodiffError):
            ad.backward(other, loss)

    def test_each_entry_replayed_once_in_reverse(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with ad.Tape() as tape:
            a = ad.scale(w, 2.0)
            b = ad.add(a, a)
            loss = ad.sum_all(b)
        grads = ad.backward(tape, loss)
        self.assertEqual(tape.last_replay, [2, 1, 0])
        # w feeds `a`, which is consumed twice by `add`.
        np.testing.assert_array_equal(grads[id(w)], np.full(3, 4.0))

    def test_gradient_of_sum_is_sum_of_gradients(self):
        rng = np.random.default_rng(3)
        w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        x1 = Tensor(rng.normal(size=(4, 3)))
        x2 = Tensor(rng.normal(size=(4, 3)))

        def loss_for(x):
            return ad.softmax_cross_entropy(ad.matmul(x, w), [0, 1, 1, 0])

        (g1,) = taped_grads(lambda: loss_for(x1), [w])
        (g2,) = taped_grads(lambda: loss_for(x2), [w])
        (g12,) = taped_grads(lambda: ad.add(loss_for(x1), loss_for(x2)), [w])
        np.testing.assert_allclose(g12, g1 + g2, rtol=1e-12, atol=1e-14)

    def test_symmetric_logits_loss_and_adjoint(self):
        logits = Tensor([[0.3, 0.3]], requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.softmax_cross_entropy(logits, [0])
        self.assertAlmostEqual(loss.item(), np.log(2.0), places=12)
        (grad,) = ad.gradients(tape, loss, [logits])
        np.testing.assert_allclose(grad, [[-0.5, 0.5]], atol=1e-12)


class FiniteDifferenceTests(unittest.TestCase):
    def assert_matches(self, build, leaves):
        grads = taped_grads(build, leaves)
        for leaf, grad in zip(leaves, grads):

            def value():
                with ad.no_tape():
                    return build().item()

            numeric = numeric_gradient(value, leaf.data)
            np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-7)

    def test_matmul_add_bias(self):
        rng = np.random.default_rng(10)
        for _ in range(5):
            n, k, m = rng.integers(1, 5, size=3)
            x = Tensor(rng.normal(size=(n, k)), requires_grad=True)
            w = Tensor(rng.normal(size=(k, m)), requires_grad=True)
            b = Tensor(rng.normal(size=m), requires_grad=True)
            weights = rng.normal(size=(n, m))
            self.assert_matches(lambda: ad.weighted_sum(ad.add_bias(ad.matmul(x, w), b), weights), [x, w, b])

    def test_relu(self):
        rng = np.random.default_rng(11)
        x = Tensor(away_from_zero(rng, (3, 4)), requires_grad=True)
        weights = rng.normal(size=(3, 4))
        self.assert_matches(lambda: ad.weighted_sum(ad.relu(x), weights), [x])

    def test_softmax(self):
        rng = np.random.default_rng(12)
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        weights = rng.normal(size=(3, 5))
        self.assert_matches(lambda: ad.weighted_sum(ad.softmax(x), weights), [x])

    def test_conv2d(self):
        rng = np.random.default_rng(13)
        for stride, padding in ((1, 0), (2, 1)):
            x = Tensor(rng.normal(size=(2, 5, 5, 2)), requires_grad=True)
            w = Tensor(rng.normal(size=(3, 3, 2, 3)), requires_grad=True)
            out_shape = ad.conv2d(x, w, stride=stride, padding=padding).shape
            weights = rng.normal(size=out_shape)
            self.assert_matches(
                lambda: ad.weighted_sum(ad.conv2d(x, w, stride=stride, padding=padding), weights), [x, w]
            )

    def test_maxpool_and_flatten(self):
        rng = np.random.default_rng(14)
        x = Tensor(rng.permutation(48).reshape(1, 4, 4, 3) / 10.0, requires_grad=True)
        weights = rng.normal(size=(1, 12))
        self.assert_matches(lambda: ad.weighted_sum(ad.flatten(ad.maxpool2d(x, size=2)), weights), [x])

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(15)
        logits = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        self.assert_matches(lambda: ad.softmax_cross_entropy(logits, [0, 2, 1, 2]), [logits])

    def test_random_two_layer_mlps(self):
        rng = np.random.default_rng(16)
        for _ in range(100):
            d_in, hidden, classes = rng.integers(2, 6), rng.integers(2, 8), rng.integers(2, 4)
            x = Tensor(rng.normal(size=(3, d_in)))
            w1 = Tensor(rng.normal(size=(d_in, hidden)), requires_grad=True)
            b1 = Tensor(rng.normal(size=hidden) * 0.1, requires_grad=True)
            w2 = Tensor(rng.normal(size=(hidden, classes)), requires_grad=True)
            b2 = Tensor(rng.normal(size=classes) * 0.1, requires_grad=True)
            labels = rng.integers(0, classes, size=3)

            def build():
                h = ad.relu(ad.add_bias(ad.matmul(x, w1), b1))
                return ad.softmax_cross_entropy(ad.add_bias(ad.matmul(h, w2), b2), labels)

            with ad.no_tape():
                pre = ad.add_bias(ad.matmul(x, w1), b1).data
            if np.min(np.abs(pre)) < 1e-3:
                continue
            self.assert_matches(build, [w1, b1, w2, b2])


class TapeDeterminismTests(unittest.TestCase):
    def test_untaped_forward_is_bit_identical(self):
        rng = np.random.default_rng(20)
        x = Tensor(rng.normal(size=(2, 6, 6, 1)))
        w = Tensor(rng.normal(size=(3, 3, 1, 2)), requires_grad=True)

        def forward():
            return ad.softmax(ad.flatten(ad.maxpool2d(ad.relu(ad.conv2d(x, w)), size=2)))

        with ad.Tape() as tape:
            taped = forward()
        with ad.no_tape():
            plain = forward()
        self.assertGreater(len(tape), 0)
        np.testing.assert_array_equal(taped.data, plain.data)


if __name__ == "__main__":
    unittest.main()
