import numpy as np
import pytest
from smore.models.config import ArchitectureSpec, SpecError
from smore.models.numerics import RngState
from smore.services.experts import construct_distinctness_params, init_bank
from smore.services.flexibility import (
    canonicalize,
    check_cap,
    count_coefficient_vectors,
    count_distinct,
    count_momor_outputs,
    count_momor_selections,
    count_nonisomorphic,
    count_star_classes,
    distinctness_report,
    enumerate_trees,
    reference_spec,
    reference_trees,
    flexibility_table,
    gamma_momor_bound,
    gamma_smore,
    gamma_smore_shared,
    gamma_smore_star,
    momor_selection,
    star_signature,
)
from smore.services.propagate import forward_smore, path_coefficients
from smore.services.verification import randomize_bank


def _spec(depth: int, s: int, f: int) -> ArchitectureSpec:
    return ArchitectureSpec.uniform(depth, s, 1, f, gate="switch")


class TestClosedForms:
    """Test suite for the flexibility formulas"""

    def test_reference_pair(self) -> None:
        """Should give 216, 66 and 126 for two layers of four experts, fanout two"""
        spec = _spec(2, 4, 2)
        assert gamma_smore(spec) == 216
        assert gamma_momor_bound(spec) == 66
        assert gamma_smore_star(spec) == 126
        assert gamma_smore_shared(spec) == 216

    def test_single_child_chain(self) -> None:
        """Should give s ** L when every parent picks one child"""
        assert gamma_smore(_spec(3, 3, 1)) == 27

    def test_star_recursion(self) -> None:
        """Should follow G_l = C(s, f) * C(G_{l-1} + f - 1, f)"""
        assert gamma_smore_star(_spec(3, 3, 2)) == 513

    def test_full_fanout_is_rigid(self) -> None:
        """Should allow one tree when every parent takes every expert"""
        spec = _spec(3, 3, 3)
        assert gamma_smore(spec) == 1
        assert gamma_momor_bound(spec) == 1
        assert gamma_smore_star(spec) == 1

    def test_exact_big_integers(self) -> None:
        """Should stay exact past 64 bits"""
        value = gamma_smore(_spec(6, 8, 4))
        assert value > 2**64
        assert value % 70 == 0

    def test_shared_requires_uniform_layers(self) -> None:
        """Should refuse mixed expert counts"""
        spec = ArchitectureSpec(
            depth=2, experts=[3, 4], ranks=[1, 1], fanouts=[1, 1], d_model=4
        )
        with pytest.raises(ValueError, match="shared bank needs uniform experts"):
            gamma_smore_shared(spec)

    def test_dense_gate_uses_full_fanout(self) -> None:
        """Should count a dense router as selecting every expert"""
        spec = ArchitectureSpec.uniform(2, 4, 1, 1, gate="dense")
        assert gamma_smore(spec) == 1


class TestFlexibilityTable:
    """Test suite for flexibility_table"""

    def test_rows_per_depth(self) -> None:
        """Should emit one row per depth with every variant's count"""
        rows = flexibility_table(4, 2, 4)
        assert [row.depth for row in rows] == [1, 2, 3, 4]
        assert (rows[1].gamma_smore, rows[1].gamma_momor_bound, rows[1].gamma_star) == (
            216,
            66,
            126,
        )

    def test_single_layer_coincides(self) -> None:
        """Should give the same count for every variant at depth 1"""
        row = flexibility_table(4, 2, 1)[0]
        assert row.gamma_smore == row.gamma_momor_bound == row.gamma_star == 6

    def test_advantage_grows_with_depth(self) -> None:
        """Should widen the gap over the MoMOR bound as layers are added"""
        ratios = [row.advantage for row in flexibility_table(4, 2, 5)[1:]]
        assert all(a < b for a, b in zip(ratios, ratios[1:]))

    def test_fanout_above_experts(self) -> None:
        """Should raise SpecError when f > s"""
        with pytest.raises(SpecError, match="fanout exceeds expert count"):
            flexibility_table(2, 3, 2)

    def test_equal_fanout_column_is_one(self) -> None:
        """Should give a column of ones for f = s"""
        assert {row.gamma_smore for row in flexibility_table(3, 3, 4)} == {1}


class TestEnumeration:
    """Test suite for the exhaustive oracles"""

    def test_tree_count(self) -> None:
        """Should yield every labeled tree once"""
        spec = _spec(2, 3, 2)
        trees = list(enumerate_trees(spec))
        assert len(trees) == 27
        assert len({canonicalize(tree) for tree in trees}) == 27

    def test_oracles_match_formulas(self) -> None:
        """Should agree with the closed forms on small grids"""
        for depth, s, f in ((2, 3, 2), (2, 2, 1), (3, 2, 1), (2, 4, 2)):
            spec = _spec(depth, s, f)
            assert count_nonisomorphic(spec) == gamma_smore(spec)
            assert count_star_classes(spec) == gamma_smore_star(spec)

    def test_momor_selections_attain_bound(self) -> None:
        """Should reach every per-pool activation pattern the bound counts"""
        assert count_momor_selections(_spec(2, 3, 2)) == 12
        assert count_momor_selections(reference_spec()) == 66

    def test_cap_exceeded(self) -> None:
        """Should refuse to enumerate past the cap"""
        spec = _spec(2, 3, 2)
        assert check_cap(spec, 27) == 27
        with pytest.raises(ValueError, match="enumeration cap exceeded"):
            next(enumerate_trees(spec, cap=10))

    def test_trees_have_unit_weights(self) -> None:
        """Should mark every enumerated node with weight 1"""
        tree = next(enumerate_trees(_spec(2, 3, 2)))
        assert all(node.weight == 1.0 for node in tree.nodes.values())
        assert len(tree.leaves()) == 4


class TestReferenceTrees:
    """Test suite for the three reference trees"""

    def test_same_activation_sets(self) -> None:
        """Should activate identical experts per pool in all three trees"""
        trees = reference_trees()
        selections = {momor_selection(tree) for tree in trees.values()}
        assert len(selections) == 1

    def test_smore_separates_every_tree(self) -> None:
        """Should give three distinct canonical forms"""
        trees = reference_trees()
        assert len({canonicalize(tree) for tree in trees.values()}) == 3

    def test_star_merges_swapped_sets(self) -> None:
        """Should give (b) and (c) one star class and (a) another"""
        trees = reference_trees()
        assert star_signature(trees["b"]) == star_signature(trees["c"])
        assert star_signature(trees["a"]) != star_signature(trees["b"])

    def test_identity_collapses_all_three(self) -> None:
        """Should give one output and one coefficient vector under the identity activation"""
        spec = reference_spec(activation="identity")
        bank = randomize_bank(init_bank(spec, RngState(0)), RngState(1))
        x = RngState(2).standard_normal(spec.d_model)
        trees = reference_trees().values()
        outputs = [forward_smore(x, tree, bank, spec, theory=True)[0] for tree in trees]
        assert count_distinct(outputs) == 1
        vectors = {tuple(sorted(path_coefficients(t, theory=True).items())) for t in trees}
        assert len(vectors) == 1


class TestDistinctness:
    """Test suite for output-level distinctness"""

    def test_count_distinct_tolerance(self) -> None:
        """Should merge outputs within the tolerance"""
        a = np.array([1.0, 2.0])
        outputs = [a, a + 1e-12, a + 1e-3]
        assert count_distinct(outputs) == 2
        assert count_distinct(outputs, tol=1e-2) == 1
        assert count_distinct([]) == 0

    def test_momor_outputs_within_bound(self) -> None:
        """Should never exceed the MoMOR bound"""
        spec = reference_spec()
        assert count_momor_outputs(spec, RngState(3)) <= gamma_momor_bound(spec)

    def test_classes_come_from_enumeration(self) -> None:
        """Should group enumerated trees by canonical form and agree with the formula"""
        spec = ArchitectureSpec.uniform(2, 3, 1, 2, gate="switch", d_model=4)
        bank = randomize_bank(init_bank(spec, RngState(0)), RngState(1))
        report = distinctness_report(spec, bank, RngState(2))
        assert report.trees == 27
        assert report.classes == count_nonisomorphic(spec) == gamma_smore(spec) == 27

    def test_identity_outputs_follow_coefficients(self) -> None:
        """Should separate exactly the trees whose expert node counts differ"""
        spec = reference_spec(activation="identity")
        bank = randomize_bank(init_bank(spec, RngState(0)), RngState(1))
        report = distinctness_report(spec, bank, RngState(2))
        assert report.distinct_outputs == count_coefficient_vectors(spec) == 114
        assert report.distinct_outputs > gamma_momor_bound(spec)

    @pytest.mark.slow
    def test_smore_outputs_identify_trees(self) -> None:
        """Should give one distinct output per routing tree"""
        spec = reference_spec(activation="mlp", bias=True)
        bank = construct_distinctness_params(spec, RngState(0))
        report = distinctness_report(spec, bank, RngState(1))
        assert report.trees == 216
        assert report.distinct_outputs == report.classes == 216
        assert report.max_intra_class < 1e-9
