import numpy as np
from django.test import SimpleTestCase

from vit_quant.exceptions import ShapeError, UsageError
from vit_quant.tensor_ad import Tape, backward, gelu, layernorm, matmul, softmax


def numeric_gradient(fn, x, eps=1e-6):
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        step = np.zeros_like(x)
        step[index] = eps
        grad[index] = (fn(x + step) - fn(x - step)) / (2 * eps)
    return grad


class KernelTests(SimpleTestCase):
    def test_matmul_identity_and_hand_example(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(np.eye(2), a), a)
        np.testing.assert_array_equal(matmul(a, np.array([[1.0], [1.0]])), [[3.0], [7.0]])
        np.testing.assert_array_equal(matmul(a, np.zeros((2, 2))), np.zeros((2, 2)))

    def test_matmul_mismatch_names_both_shapes(self):
        with self.assertRaises(ShapeError) as ctx:
            matmul(np.ones((2, 3)), np.ones((2, 3)))
        self.assertIn("(2, 3)", str(ctx.exception))
        self.assertEqual(ctx.exception.code, "shape")

    def test_layernorm(self):
        np.testing.assert_allclose(layernorm([5.0, 5.0], [1.0, 1.0], [0.5, 0.5], eps=1e-5), [0.5, 0.5])
        np.testing.assert_allclose(layernorm([1.0, 3.0], [2.0, 2.0], [1.0, 1.0], eps=0.0), [-1.0, 3.0])

    def test_layernorm_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            layernorm(np.ones((2, 3)), np.ones(2), np.zeros(3))

    def test_softmax(self):
        np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5])
        np.testing.assert_allclose(softmax([0.0, np.log(3.0)]), [0.25, 0.75])
        np.testing.assert_array_equal(softmax([1000.0, 1000.0]), [0.5, 0.5])

    def test_gelu(self):
        self.assertEqual(gelu(0.0), 0.0)
        self.assertAlmostEqual(float(gelu(10.0)), 10.0, places=9)
        self.assertAlmostEqual(float(gelu(1.0)), 0.841345, delta=1e-6)


class TapeTests(SimpleTestCase):
    def test_square_gradient(self):
        tape = Tape()
        x = tape.input(3.0, name="x")
        y = tape.mul(x, x)
        grads = backward(tape, y, 1.0)
        self.assertEqual(float(y.value), 9.0)
        self.assertEqual(float(grads[x]), 6.0)

    def test_seed_on_non_terminal_node(self):
        tape = Tape()
        x = tape.input(2.0)
        y = tape.mul(x, x)
        tape.scale(y, 2.0)
        with self.assertRaises(UsageError):
            backward(tape, y)

    def test_values_are_read_only(self):
        tape = Tape()
        node = tape.input(np.ones(3))
        with self.assertRaises(ValueError):
            node.value[0] = 2.0

    def test_unreached_nodes_have_zero_gradient(self):
        tape = Tape()
        x = tape.input(np.ones(2))
        unused = tape.param(np.ones(4))
        y = tape.scale(x, 3.0)
        grads = tape.backward(y)
        np.testing.assert_array_equal(grads[unused], np.zeros(4))
        np.testing.assert_array_equal(grads[x], [3.0, 3.0])

    def test_replay_reproduces_forward(self):
        rng = np.random.default_rng(1)
        tape = Tape()
        x = tape.input(rng.normal(size=(2, 3, 4)))
        w = tape.param(rng.normal(size=(4, 5)))
        out = tape.softmax(tape.gelu(tape.matmul(x, w)), axis=-1)
        replayed = tape.replay()
        np.testing.assert_array_equal(replayed[out.index], out.value)

    def test_input_tracking(self):
        tape = Tape()
        x = tape.input(np.ones((1, 2)))
        w = tape.param(np.ones((2, 2)))
        b = tape.param(np.zeros(2))
        self.assertTrue(tape.matmul(x, w).tracks_input)
        self.assertFalse(tape.add(w, b).tracks_input)

    def test_layernorm_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        x0 = rng.normal(size=(3, 5))
        gamma0, beta0 = rng.normal(size=5), rng.normal(size=5)
        weights = rng.normal(size=(3, 5))

        tape = Tape()
        x, gamma, beta = tape.input(x0), tape.param(gamma0), tape.param(beta0)
        out = tape.layernorm(x, gamma, beta, eps=1e-6)
        grads = backward(tape, out, weights)

        loss = lambda value: float((layernorm(value, gamma0, beta0, 1e-6) * weights).sum())  # noqa: E731
        np.testing.assert_allclose(grads[x], numeric_gradient(loss, x0), atol=1e-6)
        gamma_loss = lambda value: float((layernorm(x0, value, beta0, 1e-6) * weights).sum())  # noqa: E731
        np.testing.assert_allclose(grads[gamma], numeric_gradient(gamma_loss, gamma0), atol=1e-6)
        np.testing.assert_allclose(grads[beta], weights.sum(axis=0), atol=1e-12)

    def test_softmax_gelu_matmul_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        x0 = rng.normal(size=(2, 4))
        w0 = rng.normal(size=(4, 3))
        weights = rng.normal(size=(2, 3))

        tape = Tape()
        x, w = tape.input(x0), tape.param(w0)
        out = tape.softmax(tape.gelu(tape.matmul(x, w)), axis=-1)
        grads = backward(tape, out, weights)

        def loss_x(value):
            return float((softmax(gelu(value @ w0)) * weights).sum())

        def loss_w(value):
            return float((softmax(gelu(x0 @ value)) * weights).sum())

        np.testing.assert_allclose(grads[x], numeric_gradient(loss_x, x0), atol=1e-6)
        np.testing.assert_allclose(grads[w], numeric_gradient(loss_w, w0), atol=1e-6)

    def test_structural_ops_route_gradients(self):
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=(2, 3, 4))
        tape = Tape()
        x = tape.input(x0)
        moved = tape.transpose(tape.reshape(x, (2, 12)), (1, 0))
        first = tape.take(tape.reshape(moved, (12, 2)), 1, 0)
        cls = tape.broadcast(tape.param(np.ones(12)), (2, 12))
        joined = tape.concat([tape.reshape(first, (1, 12)), cls], axis=0)
        grads = backward(tape, joined, np.ones((3, 12)))

        expected = np.zeros((12, 2))
        expected[:, 0] = 1.0
        np.testing.assert_array_equal(grads[x], expected.T.reshape(2, 3, 4))

    def test_cross_entropy_gradient(self):
        logits0 = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
        labels = np.array([1, 2])
        tape = Tape()
        logits = tape.input(logits0)
        loss = tape.cross_entropy(logits, labels)
        grads = backward(tape, loss)

        def loss_fn(value):
            shifted = value - value.max(axis=-1, keepdims=True)
            log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
            return float(-log_probs[np.arange(2), labels].mean())

        self.assertAlmostEqual(float(loss.value), loss_fn(logits0), places=12)
        np.testing.assert_allclose(grads[logits], numeric_gradient(loss_fn, logits0), atol=1e-6)

    def test_softmax_cross_entropy_gradient_is_p_minus_y(self):
        logits0 = np.array([[0.2, -1.0, 1.5], [2.0, 0.0, 0.3]])
        labels = np.array([2, 0])
        tape = Tape()
        logits = tape.input(logits0)
        grads = backward(tape, tape.cross_entropy(logits, labels))
        expected = softmax(logits0) - np.eye(3)[labels]
        np.testing.assert_allclose(grads[logits], expected / len(labels), atol=1e-15)

    def test_layernorm_rows_have_zero_mean(self):
        x = np.random.default_rng(5).normal(3.0, 2.0, size=(4, 7))
        out = layernorm(x, np.ones(7) * 1.7, np.zeros(7))
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
