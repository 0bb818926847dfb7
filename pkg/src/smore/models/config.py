import hashlib
from pathlib import Path
from typing import Annotated, Any, Literal
from pydantic import BaseModel, Field, field_validator

Variant = Literal["smore", "smore-star", "smore-shared", "molre", "momor"]
Activation = Literal["identity", "relu", "mlp"]
GateKind = Literal["dense", "noisy-topk", "switch"]
RoutingDirection = Literal["top-down", "bottom-up"]
Mode = Literal["train", "eval"]

STRUCTURAL_VARIANTS: tuple[str, ...] = ("smore", "smore-star", "smore-shared")
BASELINE_VARIANTS: tuple[str, ...] = ("molre", "momor")


class SpecError(ValueError):
    """Raised when an architecture spec violates one or more invariants"""

    def __init__(self, errors: list[str]) -> None:
        self.errors = list(errors)
        super().__init__("invalid architecture spec: " + "; ".join(self.errors))


class ArchitectureSpec(BaseModel):
    """
    Model: Full hyperparameters of one adapter
    Field-level ranges are enforced on construction; cross-field invariants
    are reported by validate() and enforced by checked()
    """

    model_config = {"strict": True, "extra": "forbid", "frozen": True}

    depth: Annotated[int, Field(ge=1, description="Number of stacked layers L")]
    experts: Annotated[
        list[int], Field(min_length=1, description="Expert count s_l per layer")
    ]
    ranks: Annotated[list[int], Field(min_length=1, description="Rank r_l per layer")]
    fanouts: Annotated[
        list[int],
        Field(
            min_length=1,
            description="Children f_l selected per parent (forced to s_l by the dense gate)",
        ),
    ]
    d_model: Annotated[int, Field(ge=1, description="Token embedding dimension d")]
    d_out: Annotated[
        int | None, Field(None, ge=1, description="Output dimension, defaults to d")
    ] = None
    variant: Annotated[Variant, Field(description="Adapter family member")] = "smore"
    activation: Annotated[
        Activation, Field(description="Layer activation sigma")
    ] = "relu"
    mlp_hidden: Annotated[
        int | None,
        Field(None, ge=1, description="Hidden width of the mlp activation"),
    ] = None
    gate: Annotated[GateKind, Field(description="Gate type")] = "noisy-topk"
    d_down: Annotated[
        int, Field(ge=0, description="Router token down-projection width")
    ] = 16
    key_dim: Annotated[int, Field(ge=0, description="Router key/query width m")] = 16
    balance_coef: Annotated[
        float, Field(ge=0.0, description="Load-balance coefficient gamma")
    ] = 0.01
    bias: Annotated[bool, Field(description="Per-expert bias terms")] = False
    routing: Annotated[
        RoutingDirection, Field(description="Router construction order")
    ] = "top-down"
    switch_jitter: Annotated[
        float,
        Field(ge=0.0, lt=1.0, description="Multiplicative jitter of the switch gate"),
    ] = 0.01

    @field_validator("experts", "ranks", "fanouts")
    @classmethod
    def validate_positive_entries(cls, v: list[int]) -> list[int]:
        for i, value in enumerate(v):
            if value < 1:
                raise ValueError(f"entry {i} must be >= 1, got {value}")
        return v

    @classmethod
    def uniform(
        cls, depth: int, experts: int, rank: int, fanout: int, **overrides: Any
    ) -> "ArchitectureSpec":
        """Spec with identical expert count, rank and fanout on every layer"""
        fields: dict[str, Any] = {
            "depth": depth,
            "experts": [experts] * depth,
            "ranks": [rank] * depth,
            "fanouts": [fanout] * depth,
            "d_model": overrides.pop("d_model", 16),
        }
        fields.update(overrides)
        return cls(**fields)

    @property
    def output_dim(self) -> int:
        """d_out, defaulting to the model dimension"""
        return self.d_out if self.d_out is not None else self.d_model

    @property
    def effective_fanouts(self) -> list[int]:
        """Fanouts actually used for routing"""
        if self.gate == "dense":
            return list(self.experts)
        return list(self.fanouts)

    @property
    def is_structural(self) -> bool:
        return self.variant in STRUCTURAL_VARIANTS

    @property
    def is_shared(self) -> bool:
        return self.variant == "smore-shared"

    def checked(self) -> "ArchitectureSpec":
        """
        Return self if every cross-field invariant holds

        Raises:
            SpecError: Listing every violated invariant
        """
        errors = validate(self)
        if errors:
            raise SpecError(errors)
        return self

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON dump, used as provenance"""
        return hashlib.sha256(self.model_dump_json().encode("utf-8")).hexdigest()


class DimensionSchedule(BaseModel):
    """
    Model: Embedding widths d_0 ... d_L of the layer stack
    """

    model_config = {"strict": True, "frozen": True}

    dims: Annotated[list[int], Field(min_length=2, description="d_0 ... d_L")]

    @field_validator("dims")
    @classmethod
    def validate_dims(cls, v: list[int]) -> list[int]:
        if v[0] != 0:
            raise ValueError(f"d_0 must be 0, got {v[0]}")
        for lower, upper in zip(v, v[1:]):
            if upper < lower or upper < 1:
                raise ValueError(f"dimension schedule must be non-decreasing, got {v}")
        return v

    @property
    def depth(self) -> int:
        return len(self.dims) - 1

    @property
    def final(self) -> int:
        """d_L, the width fed to the final projection"""
        return self.dims[-1]

    def __getitem__(self, level: int) -> int:
        return self.dims[level]


def validate(spec: ArchitectureSpec) -> list[str]:
    """
    Collect every violated cross-field invariant of a spec

    Args:
        spec: Spec to check

    Returns:
        Messages naming the offending field; empty when the spec is well formed
    """
    errors: list[str] = []
    per_layer = {"experts": spec.experts, "ranks": spec.ranks, "fanouts": spec.fanouts}
    for name, values in per_layer.items():
        if len(values) != spec.depth:
            errors.append(
                f"{name}: expected {spec.depth} entries (one per layer), got {len(values)}"
            )
    for level, (s, f) in enumerate(zip(spec.experts, spec.fanouts)):
        if f > s:
            errors.append(f"fanouts[{level}]: fanout exceeds expert count ({f} > {s})")

    if spec.variant == "smore-shared":
        if len(set(spec.experts)) > 1:
            errors.append("experts: shared variant requires uniform expert counts")
        if len(set(spec.ranks)) > 1:
            errors.append("ranks: shared variant requires uniform ranks")
    if spec.variant == "molre" and spec.depth != 1:
        errors.append(f"depth: molre variant requires depth 1, got {spec.depth}")
    if spec.mlp_hidden is not None and spec.activation != "mlp":
        errors.append("mlp_hidden: only meaningful with activation 'mlp'")
    if spec.routing == "bottom-up":
        if spec.gate == "dense":
            errors.append("routing: bottom-up routing is unsupported with the dense gate")
        if not spec.is_structural:
            errors.append(
                f"routing: bottom-up routing needs a structural variant, got {spec.variant}"
            )
    return errors


def load_spec(source: str | Path) -> ArchitectureSpec:
    """
    Parse and check a spec from a JSON string or a path to a JSON file

    Raises:
        ValidationError: On unknown keys or field-level violations
        SpecError: On cross-field violations
    """
    text = source.read_text(encoding="utf-8") if isinstance(source, Path) else source
    return ArchitectureSpec.model_validate_json(text).checked()


def dimension_schedule(spec: ArchitectureSpec) -> DimensionSchedule:
    """
    Widths d_0 ... d_L with d_0 = 0 and d_{l+1} = d_l + s_l * r_l

    The shared variant keeps every level at s * r.
    """
    if spec.is_shared:
        width = spec.experts[0] * spec.ranks[0]
        return DimensionSchedule(dims=[0] + [width] * spec.depth)
    dims = [0]
    for s, r in zip(spec.experts, spec.ranks):
        dims.append(dims[-1] + s * r)
    return DimensionSchedule(dims=dims)


def total_fanout(spec: ArchitectureSpec, level: int) -> int:
    """
    F_l, the number of nodes drawn from pool l in every routing tree

    Args:
        spec: Architecture spec
        level: Pool index in [0, L]; F_L is 1 (the virtual root)

    Raises:
        ValueError: If level is out of range
    """
    if not 0 <= level <= spec.depth:
        raise ValueError(f"layer index {level} out of range [0, {spec.depth}]")
    count = 1
    for fanout in spec.effective_fanouts[level:]:
        count *= fanout
    return count
