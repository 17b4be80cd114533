"""Tests for the numerics module: tensor helpers, gradients, finite differences, Rng."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from core.errors import NonFiniteValue, NotScalar, ShapeMismatch, ZeroNormRow
from core.losses import info_nce_loss
from core.numerics import (DTYPE, Rng, add, backward, finite_diff_grad, l2_normalize, layer_norm, matmul,
                           relative_error, relu, scale, softmax_rows, stop_grad, tensor)


class TestTensorHelpers:
    def test_tensor_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            tensor([1.0, 2.0, 3.0], shape=(2, 2))

    def test_tensor_rejects_nan(self):
        with pytest.raises(NonFiniteValue):
            tensor([1.0, float("nan")])

    def test_tensor_is_float64(self):
        assert tensor([[1, 2], [3, 4]]).dtype == DTYPE

    def test_l2_normalize_examples(self):
        assert torch.allclose(l2_normalize(tensor([3.0, 4.0])), tensor([0.6, 0.8]), atol=1e-15)
        assert torch.equal(l2_normalize(tensor([1.0, 0.0, 0.0])), tensor([1.0, 0.0, 0.0]))

    def test_l2_normalize_zero_row(self):
        with pytest.raises(ZeroNormRow):
            l2_normalize(tensor([0.0, 0.0]))
        with pytest.raises(ZeroNormRow):
            l2_normalize(tensor([[1.0, 0.0], [0.0, 0.0]]))

    def test_softmax_relu_matmul(self):
        assert torch.equal(softmax_rows(tensor([0.0, 0.0])), tensor([0.5, 0.5]))
        assert torch.equal(relu(tensor([-1.0, 2.0])), tensor([0.0, 2.0]))
        x = tensor([[1.5, -2.0], [0.25, 3.0]])
        assert torch.equal(matmul(torch.eye(2, dtype=DTYPE), x), x)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            matmul(torch.ones(2, 3, dtype=DTYPE), torch.ones(2, 3, dtype=DTYPE))

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), c=st.floats(1e-3, 1e3))
    def test_l2_normalize_unit_rows_and_scale_invariance(self, seed, c):
        x = torch.from_numpy(Rng(seed).normal(size=(5, 7)))
        out = l2_normalize(x)
        assert torch.allclose(out.norm(dim=1), torch.ones(5, dtype=DTYPE), atol=1e-9)
        assert torch.allclose(l2_normalize(c * x), out, atol=1e-12)


class TestBackward:
    def test_sum_gradient(self):
        x = tensor([1.0, -2.0, 3.0], requires_grad=True)
        backward(x.sum())
        assert torch.equal(x.grad, torch.ones(3, dtype=DTYPE))

    def test_quadratic_gradient(self):
        x = tensor([0.5, -1.0, 2.0], requires_grad=True)
        backward(0.5 * (x * x).sum())
        assert torch.allclose(x.grad, x.detach())

    def test_not_scalar(self):
        x = tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(NotScalar):
            backward(x * 2)

    def test_non_finite_loss(self):
        x = tensor([1.0], requires_grad=True)
        with pytest.raises(NonFiniteValue):
            backward((x / 0.0).sum())

    def test_stop_grad_blocks_backward(self):
        x = tensor([1.0, 2.0], requires_grad=True)
        y = stop_grad(x * 3)
        assert not y.requires_grad
        backward((x + y).sum())
        assert torch.equal(x.grad, torch.ones(2, dtype=DTYPE))

    def test_normalized_dot_with_stopped_target_matches_finite_differences(self):
        rng = Rng(3)
        x = torch.from_numpy(rng.normal(size=8)).requires_grad_(True)
        y = torch.from_numpy(rng.child("y").normal(size=8))

        def f(v):
            return (l2_normalize(v) * stop_grad(y)).sum()

        backward(f(x))
        numeric = finite_diff_grad(f, x)
        assert relative_error(x.grad, numeric) < 1e-6


class TestFiniteDifferences:
    def test_sum_is_all_ones(self):
        x = tensor([0.3, -1.2, 4.0])
        assert torch.allclose(finite_diff_grad(lambda v: v.sum(), x), torch.ones(3, dtype=DTYPE), atol=1e-9)

    def test_square(self):
        grad = finite_diff_grad(lambda v: (v * v).sum(), tensor([3.0]), h=1e-5)
        assert abs(float(grad[0]) - 6.0) < 1e-8

    def test_rejects_non_positive_step(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda v: v.sum(), tensor([1.0]), h=0.0)

    def test_info_nce_gradient(self):
        rng = Rng(11)
        u = torch.from_numpy(rng.child("u").normal(size=(4, 8))).requires_grad_(True)
        v = torch.from_numpy(rng.child("v").normal(size=(4, 8)))

        def f(x):
            a, b = info_nce_loss(x, v, 0.5)
            return a + b

        backward(f(u))
        assert relative_error(u.grad, finite_diff_grad(f, u)) < 1e-4

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), d=st.integers(2, 32))
    def test_ops_agree_with_finite_differences(self, seed, d):
        rng = Rng(seed)
        x = torch.from_numpy(rng.child("x").normal(size=(3, d))).requires_grad_(True)
        w = torch.from_numpy(rng.child("w").normal(size=(d, 4)))
        y = torch.from_numpy(rng.child("y").normal(size=(3, 4)))

        def f(v):
            h = softmax_rows(matmul(l2_normalize(v), w))
            return (h * y).sum() + 0.1 * (v * v).sum()

        backward(f(x))
        assert relative_error(x.grad, finite_diff_grad(f, x)) < 1e-4

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), d=st.integers(2, 32), c=st.floats(-2.0, 2.0))
    def test_layer_ops_agree_with_finite_differences(self, seed, d, c):
        rng = Rng(seed)
        raw = rng.child("x").normal(size=(3, d))
        # keep every entry at least 0.1 away from the relu kink
        x = torch.from_numpy(np.sign(raw) * (np.abs(raw) + 0.1)).requires_grad_(True)
        weight = torch.from_numpy(rng.child("w").normal(size=d))
        bias = torch.from_numpy(rng.child("b").normal(size=d))
        row = torch.from_numpy(rng.child("r").normal(size=d))
        y = torch.from_numpy(rng.child("y").normal(size=(3, d)))

        def f(v):
            h = add(add(relu(v), scale(v, c)), row)
            return (layer_norm(h, weight, bias) * y).sum()

        backward(f(x))
        assert relative_error(x.grad, finite_diff_grad(f, x)) < 1e-4

    def test_relative_error_floor(self):
        zeros = torch.zeros(3, dtype=DTYPE)
        assert relative_error(zeros, zeros) == 0.0
        assert math.isclose(relative_error(tensor([1.0, 2.0]), tensor([1.0, 1.0])), 0.5)


class TestRng:
    def test_same_seed_same_stream(self):
        a, b = Rng(42), Rng(42)
        assert np.array_equal(a.random(16), b.random(16))
        assert np.array_equal(a.normal(size=(3, 3)), b.normal(size=(3, 3)))

    def test_children_are_independent(self):
        base = Rng(5)
        untouched = Rng(5).child("augment").random(8)
        base.child("data").random(1000)
        assert np.array_equal(base.child("augment").random(8), untouched)

    def test_child_labels_differ(self):
        base = Rng(5)
        assert not np.array_equal(base.child("data").random(8), base.child("augment").random(8))
        assert not np.array_equal(base.child(0).random(8), base.child(1).random(8))

    def test_known_stream_is_stable(self):
        first = Rng(2024).child("data").random(4)
        again = Rng(2024).child("data").random(4)
        assert first.tobytes() == again.tobytes()
