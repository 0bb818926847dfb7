import json
from pathlib import Path
import pytest
from pydantic import ValidationError
from smore.models.config import (
    ArchitectureSpec,
    DimensionSchedule,
    SpecError,
    dimension_schedule,
    load_spec,
    total_fanout,
    validate,
)


class TestArchitectureSpec:
    """Test suite for ArchitectureSpec"""

    def test_uniform_fills_every_layer(self) -> None:
        """Should repeat expert count, rank and fanout on every layer"""
        spec = ArchitectureSpec.uniform(3, 4, 8, 2, d_model=64)
        assert spec.experts == [4, 4, 4]
        assert spec.ranks == [8, 8, 8]
        assert spec.fanouts == [2, 2, 2]
        assert spec.d_model == 64

    def test_defaults(self) -> None:
        """Should default to smore, relu, noisy-topk and top-down routing"""
        spec = ArchitectureSpec.uniform(2, 4, 2, 2)
        assert spec.variant == "smore"
        assert spec.activation == "relu"
        assert spec.gate == "noisy-topk"
        assert spec.routing == "top-down"
        assert spec.balance_coef == 0.01
        assert spec.bias is False

    def test_output_dim_defaults_to_d_model(self) -> None:
        """Should use d_model when d_out is omitted"""
        assert ArchitectureSpec.uniform(1, 2, 1, 1, d_model=12).output_dim == 12
        assert ArchitectureSpec.uniform(1, 2, 1, 1, d_model=12, d_out=5).output_dim == 5

    def test_dense_gate_forces_full_fanout(self) -> None:
        """Should route every expert under the dense gate"""
        spec = ArchitectureSpec(
            depth=2, experts=[3, 5], ranks=[1, 1], fanouts=[1, 1], d_model=4, gate="dense"
        )
        assert spec.effective_fanouts == [3, 5]

    def test_reject_unknown_field(self) -> None:
        """Should reject keys outside the schema"""
        with pytest.raises(ValidationError):
            ArchitectureSpec.model_validate(
                {
                    "depth": 1,
                    "experts": [2],
                    "ranks": [1],
                    "fanouts": [1],
                    "d_model": 4,
                    "temperature": 1.0,
                }
            )

    def test_reject_non_positive_entries(self) -> None:
        """Should reject zero expert counts at construction"""
        with pytest.raises(ValidationError, match="entry 0 must be >= 1"):
            ArchitectureSpec(depth=1, experts=[0], ranks=[1], fanouts=[1], d_model=4)

    def test_reject_zero_depth(self) -> None:
        """Should reject depth 0"""
        with pytest.raises(ValidationError):
            ArchitectureSpec(depth=0, experts=[1], ranks=[1], fanouts=[1], d_model=4)

    def test_spec_is_frozen(self) -> None:
        """Should refuse mutation after construction"""
        spec = ArchitectureSpec.uniform(1, 2, 1, 1)
        with pytest.raises(ValidationError):
            spec.depth = 3  # type: ignore[misc]

    def test_checked_returns_self_when_valid(self) -> None:
        """Should return the same spec when every invariant holds"""
        spec = ArchitectureSpec.uniform(2, 4, 2, 2)
        assert spec.checked() is spec

    def test_config_hash_is_stable(self) -> None:
        """Should hash equal specs to the same SHA-256 digest"""
        a = ArchitectureSpec.uniform(2, 4, 2, 2)
        b = ArchitectureSpec.uniform(2, 4, 2, 2)
        c = ArchitectureSpec.uniform(2, 4, 2, 1)
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != c.config_hash()
        assert len(a.config_hash()) == 64


class TestValidate:
    """Test suite for cross-field validation"""

    def test_fanout_exceeds_expert_count(self) -> None:
        """Should name the offending layer when f > s"""
        spec = ArchitectureSpec(depth=1, experts=[4], ranks=[1], fanouts=[5], d_model=4)
        assert validate(spec) == ["fanouts[0]: fanout exceeds expert count (5 > 4)"]
        with pytest.raises(SpecError, match="fanout exceeds expert count"):
            spec.checked()

    def test_length_mismatch(self) -> None:
        """Should require one entry per layer"""
        spec = ArchitectureSpec(depth=2, experts=[4], ranks=[1, 1], fanouts=[1, 1], d_model=4)
        errors = validate(spec)
        assert any(e.startswith("experts: expected 2 entries") for e in errors)

    def test_collects_every_error(self) -> None:
        """Should report all violations at once"""
        spec = ArchitectureSpec(
            depth=2,
            experts=[2, 2],
            ranks=[1, 2],
            fanouts=[3, 3],
            d_model=4,
            variant="smore-shared",
        )
        with pytest.raises(SpecError) as exc_info:
            spec.checked()
        errors = exc_info.value.errors
        assert len(errors) == 3
        assert "ranks: shared variant requires uniform ranks" in errors

    def test_molre_needs_depth_one(self) -> None:
        """Should reject a multi-order MoLRE"""
        spec = ArchitectureSpec.uniform(2, 2, 1, 1, variant="molre")
        with pytest.raises(SpecError, match="molre variant requires depth 1"):
            spec.checked()

    def test_mlp_hidden_without_mlp(self) -> None:
        """Should reject mlp_hidden when the activation is not mlp"""
        spec = ArchitectureSpec.uniform(1, 2, 1, 1, mlp_hidden=4)
        assert validate(spec) == ["mlp_hidden: only meaningful with activation 'mlp'"]

    def test_bottom_up_with_dense_gate(self) -> None:
        """Should reject bottom-up routing with the dense gate"""
        spec = ArchitectureSpec.uniform(2, 2, 1, 1, gate="dense", routing="bottom-up")
        with pytest.raises(SpecError, match="bottom-up routing is unsupported"):
            spec.checked()


class TestDimensionSchedule:
    """Test suite for the dimension schedule"""

    def test_table_shapes(self) -> None:
        """Should grow by s * r per layer"""
        spec = ArchitectureSpec.uniform(2, 4, 8, 2, d_model=4096)
        assert dimension_schedule(spec).dims == [0, 32, 64]
        spec = ArchitectureSpec.uniform(3, 4, 16, 2, d_model=4096)
        assert dimension_schedule(spec).dims == [0, 64, 128, 192]

    def test_single_layer(self) -> None:
        """Should reduce to [0, s * r] for one layer"""
        spec = ArchitectureSpec.uniform(1, 3, 5, 1)
        schedule = dimension_schedule(spec)
        assert schedule.dims == [0, 15]
        assert schedule.final == 15
        assert schedule.depth == 1

    def test_shared_variant_is_constant(self) -> None:
        """Should keep every level at s * r for the shared bank"""
        spec = ArchitectureSpec.uniform(3, 4, 2, 2, variant="smore-shared")
        assert dimension_schedule(spec).dims == [0, 8, 8, 8]

    def test_reject_nonzero_start(self) -> None:
        """Should require d_0 = 0"""
        with pytest.raises(ValidationError, match="d_0 must be 0"):
            DimensionSchedule(dims=[1, 2])

    def test_reject_decreasing(self) -> None:
        """Should require non-decreasing widths"""
        with pytest.raises(ValidationError, match="non-decreasing"):
            DimensionSchedule(dims=[0, 4, 2])


class TestTotalFanout:
    """Test suite for total_fanout"""

    def test_products_of_fanouts(self) -> None:
        """Should multiply the fanouts of every pool at or above the level"""
        spec = ArchitectureSpec(
            depth=3, experts=[4, 4, 4], ranks=[1, 1, 1], fanouts=[2, 3, 2], d_model=4
        )
        assert total_fanout(spec, 3) == 1
        assert total_fanout(spec, 2) == 2
        assert total_fanout(spec, 1) == 6
        assert total_fanout(spec, 0) == 12


class TestLoadSpec:
    """Test suite for load_spec"""

    def test_load_from_file(self, tmp_path: Path) -> None:
        """Should parse a JSON file into a checked spec"""
        path = tmp_path / "spec.json"
        path.write_text(
            json.dumps(
                {"depth": 1, "experts": [3], "ranks": [2], "fanouts": [2], "d_model": 6}
            )
        )
        spec = load_spec(path)
        assert spec.experts == [3]
        assert spec.d_model == 6

    def test_load_from_string(self) -> None:
        """Should parse a JSON string"""
        spec = load_spec(
            '{"depth": 1, "experts": [2], "ranks": [1], "fanouts": [1], "d_model": 3}'
        )
        assert spec.depth == 1

    def test_load_rejects_cross_field_errors(self) -> None:
        """Should raise SpecError for f > s"""
        with pytest.raises(SpecError, match="fanout exceeds expert count"):
            load_spec(
                '{"depth": 1, "experts": [2], "ranks": [1], "fanouts": [3], "d_model": 3}'
            )

    def test_load_rejects_strings_for_ints(self) -> None:
        """Should refuse coercion in strict mode"""
        with pytest.raises(ValidationError):
            load_spec(
                '{"depth": "1", "experts": [2], "ranks": [1], "fanouts": [1], "d_model": 3}'
            )
