import numpy as np
import pytest
from smore.models.bank import BaselineParams, ExpertBank, Perceptron
from smore.models.config import ArchitectureSpec
from smore.models.numerics import RngState
from smore.services.experts import init_bank


@pytest.fixture
def bank() -> ExpertBank:
    spec = ArchitectureSpec.uniform(2, 3, 2, 2, d_model=6, bias=True)
    return init_bank(spec, RngState(7))


class TestPerceptron:
    """Test suite for Perceptron"""

    def test_forward_shapes(self) -> None:
        """Should map in_dim to out_dim through the hidden layer"""
        p = Perceptron(
            w1=np.ones((3, 2)), b1=np.zeros(3), w2=np.ones((4, 3)), b2=np.zeros(4)
        )
        out, pre = p.forward(np.array([0.5, -0.5]))
        assert out.shape == (4,)
        np.testing.assert_allclose(pre, np.zeros(3))
        np.testing.assert_allclose(out, np.zeros(4))
        assert (p.in_dim, p.hidden, p.out_dim) == (2, 3, 4)
        assert p.param_count == 6 + 3 + 12 + 4

    def test_backward_matches_finite_differences(self) -> None:
        """Should return the input gradient of <g, out>"""
        rng = np.random.default_rng(0)
        p = Perceptron(
            w1=rng.normal(size=(3, 2)),
            b1=rng.normal(size=3),
            w2=rng.normal(size=(2, 3)),
            b2=rng.normal(size=2),
        )
        grads = Perceptron(
            w1=np.zeros((3, 2)), b1=np.zeros(3), w2=np.zeros((2, 3)), b2=np.zeros(2)
        )
        u = np.array([0.3, -0.2])
        g = np.array([1.0, -2.0])
        _, pre = p.forward(u)
        grad_u = p.backward(u, pre, g, grads)
        h = 1e-6
        numeric = np.zeros(2)
        for i in range(2):
            step = np.zeros(2)
            step[i] = h
            numeric[i] = (g @ p.forward(u + step)[0] - g @ p.forward(u - step)[0]) / (2 * h)
        np.testing.assert_allclose(grad_u, numeric, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(grads.b2, g)


class TestExpertBank:
    """Test suite for ExpertBank"""

    def test_named_tensor_order(self, bank: ExpertBank) -> None:
        """Should list experts first, then mixers, biases, proj and the router"""
        names = [name for name, _ in bank.named_tensors()]
        assert names[:2] == ["A[0][0]", "B[0][0]"]
        assert names.index("W[0]") > names.index("B[1][2]")
        assert names.index("b[0][0]") > names.index("W[1]")
        assert names.index("proj") < names.index("router.down")

    def test_size_without_router(self, bank: ExpertBank) -> None:
        """Should exclude router tensors when asked"""
        assert bank.size(include_router=False) < bank.size()

    def test_zeros_like_and_copy(self, bank: ExpertBank) -> None:
        """Should allocate independent tensors of the same shapes"""
        zeros = bank.zeros_like()
        assert zeros.squared_norm() == 0.0
        copy = bank.copy()
        copy.down[0][0][0, 0] += 1.0
        assert copy.down[0][0][0, 0] != bank.down[0][0][0, 0]

    def test_add_merges_elementwise(self, bank: ExpertBank) -> None:
        """Should add another bank in place"""
        total = bank.zeros_like()
        total.add_(bank)
        total.add_(bank)
        np.testing.assert_allclose(total.proj, 2.0 * bank.proj)

    def test_scale(self, bank: ExpertBank) -> None:
        """Should multiply every tensor"""
        copy = bank.copy()
        copy.scale_(0.5)
        assert copy.squared_norm() == pytest.approx(0.25 * bank.squared_norm())

    def test_apply_update_bumps_version(self, bank: ExpertBank) -> None:
        """Should step against the gradient and advance the version"""
        before = bank.proj.copy()
        grads = bank.zeros_like()
        grads.proj += 1.0
        bank.apply_update(grads, 0.1)
        assert bank.version == 1
        np.testing.assert_allclose(bank.proj, before - 0.1)

    def test_pool_of_shared(self) -> None:
        """Should route every layer of the shared variant to pool 0"""
        spec = ArchitectureSpec.uniform(3, 2, 2, 1, variant="smore-shared")
        shared = init_bank(spec, RngState(0))
        assert [shared.pool_of(level) for level in range(3)] == [0, 0, 0]
        assert len(shared.down) == 1
        assert shared.down_proj(2, 1) is shared.down[0][1]


class TestBaselineParams:
    """Test suite for BaselineParams"""

    def test_reject_multi_order_molre(self) -> None:
        """Should require exactly one order for MoLRE"""
        a = [np.zeros((1, 2))]
        with pytest.raises(ValueError, match="exactly one order"):
            BaselineParams(kind="molre", down=[a, a], up=[a, a])

    def test_rank_mismatch(self) -> None:
        """Should reject orders whose experts have different ranks"""
        base = BaselineParams(
            kind="momor",
            down=[[np.zeros((1, 3)), np.zeros((2, 3))]],
            up=[[np.zeros((3, 1)), np.zeros((3, 2))]],
        )
        with pytest.raises(ValueError, match="rank mismatch"):
            base.ranks()

    def test_shape_properties(self) -> None:
        """Should read d, d_out and expert counts from the tensors"""
        base = BaselineParams(
            kind="momor",
            down=[[np.zeros((2, 5))] * 3, [np.zeros((1, 5))]],
            up=[[np.zeros((4, 2))] * 3, [np.zeros((4, 1))]],
        )
        assert base.orders == 2
        assert base.d_model == 5
        assert base.d_out == 4
        assert base.expert_counts() == [3, 1]
        assert base.ranks() == [2, 1]
