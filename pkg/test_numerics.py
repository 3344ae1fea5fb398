#!/usr/bin/env python3
"""
Tests for the tensor type, reverse-mode differentiation and optimizer helpers.
"""

import math
import threading
import unittest

import numpy as np

from numerics import (
    AdamW,
    DegenerateRowError,
    Parameter,
    RankError,
    ShapeError,
    Tensor,
    apply_rotary,
    backward,
    clip_grad_norm,
    concat,
    cosine_lr,
    cross_entropy_with_logits,
    cumsum,
    einsum,
    grad_enabled,
    gradient_check,
    make_rng,
    matmul,
    no_grad,
    rms_norm,
    softmax_rows,
    swiglu,
    take,
    truncated_normal,
)


class TestMatmul(unittest.TestCase):
    """Matrix products and their gradients."""

    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_identity(self):
        """Identity times a matrix returns the matrix."""
        out = matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])

    def test_selector_row(self):
        """A one-hot row selects the matching entry."""
        out = matmul(Tensor([[1.0, 0.0]]), Tensor([[2.0], [5.0]]))
        np.testing.assert_array_equal(out.data, [[2.0]])

    def test_shape_mismatch_names_both_shapes(self):
        """Incompatible extents raise ShapeError naming both operands."""
        with self.assertRaises(ShapeError) as ctx:
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        self.assertIn('(2, 3)', str(ctx.exception))

    def test_gradient_matches_finite_differences(self):
        """Gradient of sum(A @ B) agrees with central differences."""
        a = Parameter(self.rng.normal(size=(3, 4)), name='a')
        b = Parameter(self.rng.normal(size=(4, 2)), name='b')
        err = gradient_check(lambda: matmul(a, b).sum(), [a, b])
        self.assertLess(err, 1e-5)

    def test_entrywise_error(self):
        """Every entry of a weighted matmul gradient is within 1e-4 relative."""
        a = Parameter(self.rng.normal(size=(3, 4)), name='a')
        b = Parameter(self.rng.normal(size=(4, 2)), name='b')
        w = self.rng.normal(size=(3, 2))
        err = gradient_check(lambda: (matmul(a, b) * w).sum(), [a, b], per_entry=True)
        self.assertLess(err, 1e-4)


class TestSoftmaxRows(unittest.TestCase):
    """Masked row softmax."""

    def test_symmetric_row(self):
        """Equal scores give equal weights."""
        np.testing.assert_allclose(softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_single_survivor(self):
        """One kept entry takes all the weight and the masked entry is exactly 0."""
        out = softmax_rows(Tensor([[3.0, 7.0]]), mask=np.array([[True, False]]))
        np.testing.assert_array_equal(out.data, [[1.0, 0.0]])

    def test_direct_evaluation(self):
        """Values for [1, 2, 3] match exp / sum(exp)."""
        out = softmax_rows(Tensor([[1.0, 2.0, 3.0]]))
        np.testing.assert_allclose(out.data, [[0.09003057, 0.24472847, 0.66524096]], atol=1e-8)

    def test_fully_masked_row(self):
        """A row with no kept entries is reported by index."""
        mask = np.array([[True, True], [False, False]])
        with self.assertRaises(DegenerateRowError) as ctx:
            softmax_rows(Tensor(np.zeros((2, 2))), mask=mask)
        self.assertIn('row 1', str(ctx.exception))

    def test_rows_sum_to_one(self):
        """Every row of a masked softmax sums to one."""
        rng = np.random.default_rng(1)
        mask = np.tril(np.ones((6, 6), dtype=bool))
        out = softmax_rows(Tensor(rng.normal(size=(6, 6))), mask=mask)
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(6), atol=1e-12)

    def test_masked_gradient(self):
        """Masked softmax gradients agree with central differences."""
        rng = np.random.default_rng(2)
        x = Parameter(rng.normal(size=(4, 5)), name='x')
        target = rng.normal(size=(4, 5))
        mask = rng.random((4, 5)) > 0.3
        mask[:, 0] = True
        err = gradient_check(lambda: (softmax_rows(x, mask=mask) * target).sum(), [x])
        self.assertLess(err, 1e-6)
        self.assertLess(gradient_check(lambda: (softmax_rows(x, mask=mask) * target).sum(), [x], per_entry=True), 1e-4)


class TestBackward(unittest.TestCase):
    """Reverse-mode accumulation."""

    def test_sum_gives_ones(self):
        """d sum(p) / dp is all ones."""
        p = Parameter(np.arange(6.0).reshape(2, 3), name='p')
        backward(p.sum())
        np.testing.assert_array_equal(p.grad, np.ones((2, 3)))

    def test_square_gives_twice(self):
        """d sum(p * p) / dp is 2p."""
        p = Parameter(np.array([1.0, -2.0, 3.5]), name='p')
        backward((p * p).sum())
        np.testing.assert_allclose(p.grad, 2 * p.data)

    def test_non_scalar_rejected(self):
        """Backward from a vector raises RankError."""
        p = Parameter(np.ones(3), name='p')
        with self.assertRaises(RankError):
            backward(p * 2.0)

    def test_repeated_backward_accumulates(self):
        """Two backward passes add their gradients."""
        p = Parameter(np.ones(2), name='p')
        backward((p * 3.0).sum())
        backward((p * 3.0).sum())
        np.testing.assert_array_equal(p.grad, [6.0, 6.0])

    def test_shared_subexpression(self):
        """A node used twice receives both contributions."""
        p = Parameter(np.array([2.0]), name='p')
        y = p * p
        backward((y + y).sum())
        np.testing.assert_allclose(p.grad, [8.0])

    def test_no_grad_records_nothing(self):
        """Inside no_grad results do not require gradients."""
        p = Parameter(np.ones(2), name='p')
        with no_grad():
            y = p * 2.0
        self.assertFalse(y.requires_grad)
        self.assertEqual(y._parents, ())

    def test_no_grad_is_local_to_its_thread(self):
        """A thread held inside no_grad does not stop recording elsewhere."""
        entered, release = threading.Event(), threading.Event()
        seen = {}

        def inference():
            with no_grad():
                seen['worker'] = grad_enabled()
                entered.set()
                release.wait(5.0)

        worker = threading.Thread(target=inference)
        worker.start()
        try:
            self.assertTrue(entered.wait(5.0))
            p = Parameter(np.array([1.0, 2.0]), name='p')
            y = (p * p).sum()
            self.assertTrue(grad_enabled())
            self.assertTrue(y.requires_grad)
            backward(y)
        finally:
            release.set()
            worker.join()
        self.assertFalse(seen['worker'])
        np.testing.assert_allclose(p.grad, [2.0, 4.0])


class TestOperatorGradients(unittest.TestCase):
    """Finite-difference checks for the composite operators."""

    def setUp(self):
        self.rng = np.random.default_rng(3)

    def test_take_scatter_adds(self):
        """Repeated indices in take accumulate their gradients."""
        p = Parameter(np.arange(4.0), name='p')
        backward(take(p, np.array([0, 0, 3]), axis=0).sum())
        np.testing.assert_array_equal(p.grad, [2.0, 0.0, 0.0, 1.0])

    def test_einsum_and_cumsum(self):
        """Gradients through einsum followed by cumsum."""
        a = Parameter(self.rng.normal(size=(5, 3)), name='a')
        b = Parameter(self.rng.normal(size=(5, 3)), name='b')
        w = self.rng.normal(size=(5, 3, 3))
        err = gradient_check(lambda: (cumsum(einsum('nf,nd->nfd', a, b), axis=0) * w).sum(), [a, b])
        self.assertLess(err, 1e-6)

    def test_einsum_rejects_internal_sum(self):
        """An index summed inside one operand is rejected."""
        with self.assertRaises(ShapeError):
            einsum('ij,jk->k', Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))

    def test_concat_gradient(self):
        """Concatenation splits the gradient back to its inputs."""
        a = Parameter(self.rng.normal(size=(2, 3)), name='a')
        b = Parameter(self.rng.normal(size=(1, 3)), name='b')
        w = self.rng.normal(size=(3, 3))
        err = gradient_check(lambda: (concat([a, b], axis=0) * w).sum(), [a, b])
        self.assertLess(err, 1e-6)

    def test_rms_norm_and_swiglu(self):
        """RMS norm feeding a SwiGLU block."""
        x = Parameter(self.rng.normal(size=(3, 4)), name='x')
        gain = Parameter(1.0 + 0.1 * self.rng.normal(size=4), name='gain')
        w_gate = Parameter(self.rng.normal(size=(4, 6)), name='w_gate')
        w_up = Parameter(self.rng.normal(size=(4, 6)), name='w_up')
        w_down = Parameter(self.rng.normal(size=(6, 4)), name='w_down')

        def loss():
            return (swiglu(rms_norm(x, gain), w_gate, w_up, w_down) ** 2).sum()

        self.assertLess(gradient_check(loss, [x, gain, w_gate, w_up, w_down]), 1e-5)

    def test_rotary_gradient(self):
        """Rotary positions are differentiated as a rotation."""
        x = Parameter(self.rng.normal(size=(2, 5, 4)), name='x')
        w = self.rng.normal(size=(2, 5, 4))
        err = gradient_check(lambda: (apply_rotary(x, np.arange(5)) * w).sum(), [x])
        self.assertLess(err, 1e-7)

    def test_rotary_preserves_norm(self):
        """Rotation keeps every row's length."""
        x = self.rng.normal(size=(5, 8))
        out = apply_rotary(Tensor(x), np.arange(5)).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=-1), np.linalg.norm(x, axis=-1))

    def test_cross_entropy(self):
        """Cross entropy of uniform logits is ln(V) and its gradient checks out."""
        logits = Tensor(np.zeros((3, 256)))
        loss = cross_entropy_with_logits(logits, np.array([0, 5, 255]))
        self.assertAlmostEqual(loss.item(), math.log(256.0), places=12)

        p = Parameter(self.rng.normal(size=(4, 7)), name='p')
        targets = np.array([1, 0, 6, 3])
        self.assertLess(gradient_check(lambda: cross_entropy_with_logits(p, targets), [p]), 1e-6)


class TestOptimization(unittest.TestCase):
    """Initialization, schedule, clipping and AdamW."""

    def test_named_streams_are_reproducible(self):
        """The same seed and stream give the same draws; other streams differ."""
        a = make_rng(7, 'embed').standard_normal(4)
        b = make_rng(7, 'embed').standard_normal(4)
        c = make_rng(7, 'lm_head').standard_normal(4)
        np.testing.assert_array_equal(a, b)
        self.assertFalse(np.array_equal(a, c))

    def test_truncated_normal_bounds(self):
        """Draws stay within two standard deviations."""
        values = truncated_normal(make_rng(0, 'w'), (1000,), std=0.02)
        self.assertLessEqual(np.abs(values).max(), 0.04 + 1e-12)

    def test_cosine_schedule(self):
        """Linear warmup, peak after warmup, floor at the end."""
        self.assertAlmostEqual(cosine_lr(0, 1.0, 0.1, 10, 100), 0.1)
        self.assertAlmostEqual(cosine_lr(9, 1.0, 0.1, 10, 100), 1.0)
        self.assertAlmostEqual(cosine_lr(10, 1.0, 0.1, 10, 100), 1.0)
        self.assertAlmostEqual(cosine_lr(100, 1.0, 0.1, 10, 100), 0.1)
        self.assertGreater(cosine_lr(50, 1.0, 0.1, 10, 100), 0.1)

    def test_clip_grad_norm(self):
        """Gradients above the limit are rescaled to it."""
        p = Parameter(np.zeros(2), name='p')
        p.grad = np.array([3.0, 4.0])
        total = clip_grad_norm([p], 1.0)
        self.assertAlmostEqual(total, 5.0)
        self.assertAlmostEqual(float(np.linalg.norm(p.grad)), 1.0)

    def test_adamw_decays_matrices_only(self):
        """A zero gradient leaves vectors untouched but shrinks matrices."""
        matrix = Parameter(np.ones((2, 2)), name='matrix')
        vector = Parameter(np.ones(2), name='vector')
        opt = AdamW([matrix, vector], lr=0.1, weight_decay=0.5)
        matrix.grad = np.zeros((2, 2))
        vector.grad = np.zeros(2)
        opt.step()
        np.testing.assert_allclose(matrix.data, 0.95 * np.ones((2, 2)))
        np.testing.assert_array_equal(vector.data, np.ones(2))

    def test_adamw_minimizes_quadratic(self):
        """AdamW drives a quadratic towards its minimum."""
        p = Parameter(np.array([3.0, -2.0]), name='p')
        opt = AdamW([p], lr=0.1, weight_decay=0.0)
        for _ in range(300):
            opt.zero_grad()
            backward((p * p).sum())
            opt.step()
        self.assertLess(float(np.abs(p.data).max()), 0.25)

    def test_adamw_state_roundtrip(self):
        """Loading a state dict restores step count and moments."""
        p = Parameter(np.ones(3), name='p')
        opt = AdamW([p])
        p.grad = np.array([0.1, 0.2, 0.3])
        opt.step()
        fresh = AdamW([Parameter(np.ones(3), name='p')])
        fresh.load_state_dict(opt.state_dict())
        self.assertEqual(fresh.t, 1)
        np.testing.assert_array_equal(fresh.exp_avg['p'], opt.exp_avg['p'])


if __name__ == "__main__":
    unittest.main(verbosity=2)
