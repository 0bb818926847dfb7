import numpy as np
import pytest
from smore.models.numerics import RngState
from smore.services.numerics import (
    activate,
    activate_grad,
    finite_diff_grad,
    relative_error,
    require_finite,
    seeded_init,
    seeded_vector,
    softmax,
    softmax_backward,
    softplus,
)


class TestRngState:
    """Test suite for RngState"""

    def test_same_seed_replays(self) -> None:
        """Should produce identical draws for identical seeds and paths"""
        a = RngState(11).substream(3).standard_normal(5)
        b = RngState(11).substream(3).standard_normal(5)
        np.testing.assert_array_equal(a, b)

    def test_substreams_are_independent(self) -> None:
        """Should give different draws on sibling substreams"""
        rng = RngState(11)
        assert not np.array_equal(
            rng.substream(0).standard_normal(5), rng.substream(1).standard_normal(5)
        )

    def test_reject_negative_seed(self) -> None:
        """Should require an unsigned 64-bit seed"""
        with pytest.raises(ValueError, match="64-bit unsigned"):
            RngState(-1)

    def test_permutation(self) -> None:
        """Should return a permutation of range(n)"""
        assert sorted(RngState(0).permutation(7)) == list(range(7))


class TestSeededInit:
    """Test suite for seeded_init"""

    def test_zeros(self) -> None:
        """Should allocate zeros"""
        np.testing.assert_array_equal(seeded_init(2, 3, "zeros", RngState(0)), np.zeros((2, 3)))

    def test_uniform_bounds(self) -> None:
        """Should stay within 1/sqrt(fan-in)"""
        m = seeded_init(50, 16, "uniform-scaled", RngState(0))
        assert np.all(np.abs(m) <= 0.25)

    def test_normal_is_clipped(self) -> None:
        """Should truncate normal draws at two standard deviations"""
        m = seeded_init(100, 4, "normal-scaled", RngState(0))
        assert np.all(np.abs(m) <= 2.0 * 0.5)

    def test_reproducible(self) -> None:
        """Should replay draws for the same stream"""
        a = seeded_init(3, 3, "uniform-scaled", RngState(4))
        b = seeded_init(3, 3, "uniform-scaled", RngState(4))
        np.testing.assert_array_equal(a, b)

    def test_empty_shape(self) -> None:
        """Should reject zero-sized matrices"""
        with pytest.raises(ValueError, match="empty shape"):
            seeded_init(0, 3, "zeros", RngState(0))

    def test_empty_vector(self) -> None:
        """Should return a zero-length vector for size 0"""
        assert seeded_vector(0, "uniform-scaled", RngState(0)).shape == (0,)


class TestSoftmax:
    """Test suite for softmax"""

    def test_sums_to_one(self) -> None:
        """Should normalize"""
        p = softmax(np.array([1.0, 2.0, 3.0]))
        assert p.sum() == pytest.approx(1.0)
        assert np.all(np.diff(p) > 0)

    def test_large_inputs_are_stable(self) -> None:
        """Should subtract the max before exponentiating"""
        p = softmax(np.array([1000.0, 1000.0]))
        np.testing.assert_allclose(p, [0.5, 0.5])

    def test_reject_non_finite(self) -> None:
        """Should refuse NaN or infinite scores"""
        with pytest.raises(ValueError, match="must be finite"):
            softmax(np.array([0.0, np.inf]))

    def test_reject_empty(self) -> None:
        """Should refuse an empty vector"""
        with pytest.raises(ValueError, match="empty vector"):
            softmax(np.zeros(0))

    def test_backward_matches_finite_differences(self) -> None:
        """Should give the vector-Jacobian product"""
        z = np.array([0.2, -0.4, 1.1])
        g = np.array([1.0, 0.5, -2.0])
        analytic = softmax_backward(softmax(z), g)
        numeric = finite_diff_grad(lambda v: float(g @ softmax(v)), z, h=1e-6)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-9)


class TestActivations:
    """Test suite for elementwise activations"""

    def test_relu(self) -> None:
        """Should clamp negatives and take the right derivative at zero"""
        z = np.array([-1.0, 0.0, 2.0])
        np.testing.assert_array_equal(activate("relu", z), [0.0, 0.0, 2.0])
        np.testing.assert_array_equal(activate_grad("relu", z), [0.0, 1.0, 1.0])

    def test_identity_copies(self) -> None:
        """Should return a copy, not the input"""
        z = np.array([1.0, -2.0])
        out = activate("identity", z)
        out[0] = 9.0
        assert z[0] == 1.0
        np.testing.assert_array_equal(activate_grad("identity", z), [1.0, 1.0])

    def test_tanh_grad(self) -> None:
        """Should match 1 - tanh^2"""
        z = np.array([0.3])
        np.testing.assert_allclose(activate_grad("tanh", z), 1.0 - np.tanh(z) ** 2)

    def test_softplus_is_stable(self) -> None:
        """Should not overflow for large inputs"""
        np.testing.assert_allclose(softplus(np.array([1000.0, 0.0])), [1000.0, np.log(2.0)])


class TestFiniteDifferences:
    """Test suite for the finite-difference oracle"""

    def test_quadratic(self) -> None:
        """Should recover the gradient of a quadratic"""
        theta = np.array([1.0, -2.0, 0.5])
        grad = finite_diff_grad(lambda v: float(v @ v), theta)
        np.testing.assert_allclose(grad, 2.0 * theta, rtol=1e-8)

    def test_does_not_mutate_theta(self) -> None:
        """Should leave the caller's vector untouched"""
        theta = np.array([1.0, 2.0])
        finite_diff_grad(lambda v: float(v.sum()), theta)
        np.testing.assert_array_equal(theta, [1.0, 2.0])

    def test_reject_non_positive_step(self) -> None:
        """Should require h > 0"""
        with pytest.raises(ValueError, match="step size must be positive"):
            finite_diff_grad(lambda v: 0.0, np.zeros(1), h=0.0)

    def test_reject_non_finite_objective(self) -> None:
        """Should report the coordinate where the objective blew up"""
        with pytest.raises(ValueError, match="not finite at coordinate 0"):
            finite_diff_grad(lambda v: float("nan"), np.zeros(2))

    def test_relative_error_floor(self) -> None:
        """Should divide by the floor when both values are tiny"""
        err = relative_error(np.array([0.0, 2.0]), np.array([1e-6, 2.2]))
        np.testing.assert_allclose(err, [1e-2, 0.2 / 2.2])

    def test_require_finite(self) -> None:
        """Should name the offending array"""
        with pytest.raises(ValueError, match="grad contains non-finite"):
            require_finite("grad", np.array([np.nan]))
