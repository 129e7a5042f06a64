"""
Tests for the finite-difference oracles.
"""
import pytest
import numpy as np
import sys
import os

# Add the project root to the path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(__file__))))

from seqcomm_dfl.models.tensor import Tensor, parameter
from seqcomm_dfl.utils.errors import UsageError
from seqcomm_dfl.utils.gradcheck import finite_diff_check, hvp_check


class TestFiniteDifferences:
    """Test cases for finite_diff_check and hvp_check."""

    def test_exact_gradient_passes(self):
        """Test a correct gradient on a smooth function."""
        x = parameter(np.array([0.3, -1.2, 2.0]))
        assert finite_diff_check(lambda: (x.exp() * x).sum(), [x]) < 1e-6

    def test_wrong_gradient_is_detected(self):
        """Test that a function whose recorded graph disagrees with its value fails."""
        x = parameter(np.array([1.0, 2.0]))

        def f():
            # The value depends on x.data directly, outside the recorded graph
            return (x * 1.0).sum() + Tensor(x.data ** 2).sum()
        assert finite_diff_check(f, [x]) > 0.1

    def test_parameters_restored(self):
        """Test that perturbed coordinates are put back."""
        x = parameter(np.array([1.0, 2.0, 3.0]))
        finite_diff_check(lambda: (x ** 2).sum(), [x], max_coords=2, rng=np.random.default_rng(0))
        hvp_check(lambda: (x ** 3).sum(), [x], [np.ones(3)])
        assert np.array_equal(x.data, [1.0, 2.0, 3.0])

    def test_invalid_step(self):
        """Test the step-size guard."""
        x = parameter(np.ones(2))
        with pytest.raises(UsageError):
            finite_diff_check(lambda: x.sum(), [x], eps=0.0)

    def test_hvp_check_on_cubic(self):
        """Test the Hessian-vector oracle on a separable cubic."""
        x = parameter(np.array([0.5, -1.0]))
        assert hvp_check(lambda: (x ** 3).sum(), [x], [np.array([1.0, 2.0])]) < 1e-7
