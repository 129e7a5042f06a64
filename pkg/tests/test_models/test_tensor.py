"""
Tests for the differentiation core.
"""
import pytest
import numpy as np
import sys
import os

# Add the project root to the path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(__file__))))

from seqcomm_dfl.models.tensor import (
    Tensor, concat, dot, flatten, grad, hvp, is_grad_enabled, logsumexp, no_grad,
    parameter, softmax, stack, unflatten,
)
from seqcomm_dfl.utils.errors import NumericalError, UsageError
from seqcomm_dfl.utils.gradcheck import finite_diff_check, hvp_check


class TestTensorBasics:
    """Test cases for construction and recording."""

    def test_float64_storage(self):
        """Test that integer input is stored as float64."""
        t = Tensor([1, 2, 3])
        assert t.data.dtype == np.float64
        assert t.shape == (3,)

    def test_non_finite_rejected(self):
        """Test that NaN entries raise a numerical error."""
        with pytest.raises(NumericalError):
            Tensor([1.0, np.nan])

    def test_non_finite_result_rejected(self):
        """Test that an overflowing operation raises instead of propagating inf."""
        x = parameter([1000.0])
        with pytest.raises(NumericalError):
            x.exp()

    def test_no_grad_disables_recording(self):
        """Test that no operation is recorded inside no_grad."""
        x = parameter([1.0, 2.0])
        with no_grad():
            assert is_grad_enabled() is False
            y = (x * 2.0).sum()
        assert is_grad_enabled() is True
        assert y.requires_grad is False

    def test_numpy_left_operand_defers_to_tensor(self):
        """Test that ndarray * Tensor and ndarray @ Tensor produce tensors."""
        x = parameter(np.ones((2, 2)))
        product = np.full((2, 2), 3.0) * x
        matmul = np.eye(2) @ x
        assert isinstance(product, Tensor)
        assert isinstance(matmul, Tensor)
        assert np.allclose(grad(product.sum(), [x])[0].data, 3.0)


class TestGradients:
    """Test cases for reverse-mode gradients."""

    def test_broadcast_add_and_mul(self):
        """Test gradients through broadcasting."""
        a = parameter(np.arange(6.0).reshape(2, 3))
        b = parameter(np.array([1.0, 2.0, 3.0]))
        ga, gb = grad(((a + b) * b).sum(), [a, b])
        assert np.allclose(ga.data, np.broadcast_to(b.data, (2, 3)))
        assert np.allclose(gb.data, (a.data + 2.0 * b.data).sum(axis=0))

    def test_matmul_against_finite_differences(self):
        """Test matmul, leaky_relu and logsumexp against central differences."""
        rng = np.random.default_rng(0)
        x = parameter(rng.normal(size=(3, 4)))
        y = parameter(rng.normal(size=(4, 2)))
        error = finite_diff_check(lambda: logsumexp((x @ y).leaky_relu(), axis=1).sum(), [x, y])
        assert error < 1e-6

    def test_non_scalar_output_rejected(self):
        """Test that grad refuses non-scalar outputs."""
        x = parameter([1.0, 2.0])
        with pytest.raises(UsageError):
            grad(x * 2.0, [x])

    def test_unused_parameter_gets_zeros(self):
        """Test that parameters not on the path receive zero gradients."""
        x = parameter([1.0])
        unused = parameter([[1.0, 2.0]])
        gx, gu = grad((x * 3.0).sum(), [x, unused])
        assert gx.data[0] == 3.0
        assert np.array_equal(gu.data, np.zeros((1, 2)))

    def test_max_gradient_goes_to_first_winner(self):
        """Test that ties send the gradient to the first maximizing entry."""
        x = parameter([[1.0, 3.0, 3.0]])
        g = grad(x.max(axis=1).sum(), [x])[0]
        assert np.array_equal(g.data, [[0.0, 1.0, 0.0]])

    def test_concat_and_stack(self):
        """Test that concat and stack route gradients back to their inputs."""
        a = parameter([1.0, 2.0])
        b = parameter([3.0])
        ga, gb = grad((concat([a, b]) * np.array([1.0, 2.0, 3.0])).sum(), [a, b])
        assert np.array_equal(ga.data, [1.0, 2.0])
        assert np.array_equal(gb.data, [3.0])
        s = stack([a, a * 2.0], axis=1)
        assert s.shape == (2, 2)
        assert np.allclose(grad(s.sum(), [a])[0].data, [3.0, 3.0])

    def test_logsumexp_is_stable(self):
        """Test that large inputs do not overflow."""
        x = Tensor([1000.0, 1000.0])
        assert logsumexp(x).item() == pytest.approx(1000.0 + np.log(2.0))

    def test_softmax_sums_to_one(self):
        """Test softmax normalization along the requested axis."""
        x = Tensor(np.random.default_rng(1).normal(size=(3, 4)))
        assert np.allclose(softmax(x, axis=1).data.sum(axis=1), 1.0)


class TestSecondOrder:
    """Test cases for create_graph and Hessian-vector products."""

    def test_second_derivative_of_cube(self):
        """Test d²/dx² x³ = 6x via a recorded backward pass."""
        x = parameter([2.0])
        first = grad((x ** 3).sum(), [x], create_graph=True)[0]
        second = grad(first.sum(), [x])[0]
        assert second.data[0] == pytest.approx(12.0)

    def test_hvp_of_quadratic(self):
        """Test hvp(xᵀAx) = (A + Aᵀ) v."""
        rng = np.random.default_rng(2)
        A = rng.normal(size=(4, 4))
        x = parameter(rng.normal(size=(4, 1)))
        v = rng.normal(size=(4, 1))
        result = hvp(lambda: (x.T @ (Tensor(A) @ x)).sum(), [x], [v])[0]
        assert np.allclose(result.data, (A + A.T) @ v)

    def test_hvp_shape_mismatch(self):
        """Test that a mismatched direction raises a usage error."""
        x = parameter(np.ones(3))
        with pytest.raises(UsageError):
            hvp(lambda: (x ** 2).sum(), [x], [np.ones(2)])

    def test_hvp_matches_gradient_differences(self):
        """Test hvp against central differences of the gradient."""
        rng = np.random.default_rng(3)
        x = parameter(rng.normal(size=(3, 2)))
        v = [rng.normal(size=(3, 2))]
        error = hvp_check(lambda: ((x.exp() * x) ** 2).sum() + logsumexp(x, axis=0).sum(), [x], v)
        assert error < 1e-6

    def test_gradient_through_nonleaf_parameters(self):
        """Test differentiating with respect to intermediate tensors."""
        x = parameter([1.0, 2.0])
        y = x * 3.0
        gy = grad((y ** 2).sum(), [y])[0]
        assert np.allclose(gy.data, 2.0 * y.data)


class TestFlatVectors:
    """Test cases for the flatten/unflatten helpers."""

    def test_unflatten_shapes(self):
        """Test that a flat vector is split back into parameter shapes."""
        like = [parameter(np.zeros((2, 3))), parameter(np.zeros(4))]
        pieces = unflatten(np.arange(10.0), like)
        assert pieces[0].shape == (2, 3)
        assert np.array_equal(pieces[1], [6.0, 7.0, 8.0, 9.0])
        assert np.array_equal(flatten(pieces), np.arange(10.0))

    def test_unflatten_length_mismatch(self):
        """Test that a wrong-length vector is rejected."""
        with pytest.raises(UsageError):
            unflatten(np.zeros(5), [parameter(np.zeros(4))])

    def test_dot_of_parameter_lists(self):
        """Test the inner product across parameter lists."""
        a = [Tensor([1.0, 2.0]), Tensor([[3.0]])]
        b = [np.array([4.0, 5.0]), np.array([[6.0]])]
        assert dot(a, b).item() == pytest.approx(32.0)
