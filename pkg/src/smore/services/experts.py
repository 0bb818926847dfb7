"""
Parameter allocation, proof-style constructions and bank serialization
"""

import itertools
import json
from collections.abc import Iterator
from pathlib import Path
from typing import Literal
import numpy as np
from ..models.bank import (
    BaselineParams,
    BottomUpRouterParams,
    ExpertBank,
    Perceptron,
    RouterParams,
)
from ..models.config import (
    ArchitectureSpec,
    DimensionSchedule,
    dimension_schedule,
    total_fanout,
)
from ..models.numerics import InitScheme, Matrix, RngState, Vector
from .numerics import seeded_init, seeded_vector

_MANIFEST = "bank.json"
_PAYLOAD = "bank.bin"
_LITTLE_ENDIAN_F64 = "<f8"


def _streams(rng: RngState) -> Iterator[RngState]:
    """Fresh substream per tensor so shapes never shift later draws"""
    return (rng.substream(i) for i in itertools.count())


def _matrix(
    rows: int,
    cols: int,
    scheme: InitScheme,
    rng: RngState,
    scale: float | None = None,
) -> Matrix:
    """seeded_init that tolerates zero-width router and activation shapes"""
    if rows == 0 or cols == 0:
        return np.zeros((rows, cols), dtype=np.float64)
    return seeded_init(rows, cols, scheme, rng, scale=scale)


def make_perceptron(
    in_dim: int,
    hidden: int,
    out_dim: int,
    rng: RngState,
    random_bias: bool = False,
    scale: float | None = None,
) -> Perceptron:
    """
    Two-level tanh perceptron with uniform-scaled weights

    Args:
        in_dim: Input width (may be 0)
        hidden: Hidden width (may be 0)
        out_dim: Output width (may be 0)
        rng: Stream for the draws
        random_bias: Draw biases too; trained banks keep them at zero so a
            zero input maps to zero
        scale: Uniform bound of the first level, defaults to 1/sqrt(in_dim)
    """
    bias_scheme: InitScheme = "uniform-scaled" if random_bias else "zeros"
    return Perceptron(
        w1=_matrix(hidden, in_dim, "uniform-scaled", rng.substream(0), scale=scale),
        b1=seeded_vector(hidden, bias_scheme, rng.substream(1), scale=1.0),
        w2=_matrix(out_dim, hidden, "uniform-scaled", rng.substream(2)),
        b2=seeded_vector(out_dim, bias_scheme, rng.substream(3), scale=1.0),
    )


def sigma_shape(
    spec: ArchitectureSpec, schedule: DimensionSchedule, level: int
) -> tuple[int, int]:
    """(width, hidden) of the mlp activation of one layer"""
    width = schedule[level] if spec.variant == "smore-star" else schedule[level + 1]
    hidden = spec.mlp_hidden if spec.mlp_hidden is not None else width
    return width, hidden


def expert_pools(spec: ArchitectureSpec) -> list[int]:
    """Layers that own a distinct expert pool"""
    return [0] if spec.is_shared else list(range(spec.depth))


def _topdown_router(
    spec: ArchitectureSpec, streams: Iterator[RngState]
) -> RouterParams:
    depth, m, d_down = spec.depth, spec.key_dim, spec.d_down
    down = _matrix(d_down, spec.d_model, "uniform-scaled", next(streams))
    keys = [
        _matrix(spec.experts[level], m, "normal-scaled", next(streams))
        for level in range(depth)
    ]
    queries = [
        make_perceptron(d_down + (depth - level - 1) * m, m, m, next(streams))
        for level in range(depth)
    ]
    noise_keys = None
    if spec.gate == "noisy-topk":
        noise_keys = [np.zeros((s, m), dtype=np.float64) for s in spec.experts]
    return RouterParams(down=down, keys=keys, queries=queries, noise_keys=noise_keys)


def _bottomup_router(
    spec: ArchitectureSpec,
    schedule: DimensionSchedule,
    streams: Iterator[RngState],
) -> BottomUpRouterParams:
    d_down, m = spec.d_down, spec.key_dim
    noisy = spec.gate == "noisy-topk"
    parents = total_fanout(spec, 1)
    leaf_shape = (parents, spec.experts[0], d_down)
    leaf_keys = _matrix(
        parents * spec.experts[0], d_down, "normal-scaled", next(streams)
    ).reshape(leaf_shape)
    position_keys: list[Matrix] = []
    scorers: list[Perceptron] = []
    for level in range(1, spec.depth):
        positions = total_fanout(spec, level)
        position_keys.append(_matrix(positions, d_down, "normal-scaled", next(streams)))
        out_dim = spec.experts[level] * (2 if noisy else 1)
        scorers.append(
            make_perceptron(schedule[level] + d_down, m, out_dim, next(streams))
        )
    return BottomUpRouterParams(
        down=_matrix(d_down, spec.d_model, "uniform-scaled", next(streams)),
        leaf_keys=leaf_keys,
        position_keys=position_keys,
        scorers=scorers,
        leaf_noise_keys=np.zeros(leaf_shape, dtype=np.float64) if noisy else None,
    )


def init_bank(
    spec: ArchitectureSpec, rng: RngState, up_init: InitScheme = "zeros"
) -> ExpertBank:
    """
    Allocate every tensor of a structural adapter at its schedule shape

    A, W, projection and router weights are uniform-scaled, keys normal-scaled,
    biases zero. B follows up_init, zero by default so the adapter starts as
    an exact no-op.

    Raises:
        SpecError: If the spec is invalid
        ValueError: If the variant is a single-layer baseline
    """
    spec = spec.checked()
    if not spec.is_structural:
        raise ValueError(
            f"init_bank builds structural variants, got {spec.variant!r}; use init_baseline"
        )
    schedule = dimension_schedule(spec)
    streams = _streams(rng)
    pools = expert_pools(spec)

    down = [
        [
            seeded_init(spec.ranks[p], spec.d_model, "uniform-scaled", next(streams))
            for _ in range(spec.experts[p])
        ]
        for p in pools
    ]
    up = [
        [
            seeded_init(schedule[p + 1], spec.ranks[p], up_init, next(streams))
            for _ in range(spec.experts[p])
        ]
        for p in pools
    ]
    mixers = [np.zeros((schedule[1], 0), dtype=np.float64)]
    for level in range(1, spec.depth):
        mixers.append(
            seeded_init(
                schedule[level + 1], schedule[level], "uniform-scaled", next(streams)
            )
        )
    proj = seeded_init(spec.output_dim, schedule.final, "uniform-scaled", next(streams))

    biases = None
    if spec.bias:
        biases = [
            [np.zeros(schedule[level + 1], dtype=np.float64) for _ in range(s)]
            for level, s in enumerate(spec.experts)
        ]
    sigma = None
    if spec.activation == "mlp":
        sigma = []
        for level in range(spec.depth):
            width, hidden = sigma_shape(spec, schedule, level)
            sigma.append(make_perceptron(width, hidden, width, next(streams)))

    router: RouterParams | BottomUpRouterParams
    if spec.routing == "bottom-up":
        router = _bottomup_router(spec, schedule, streams)
    else:
        router = _topdown_router(spec, streams)

    return ExpertBank(
        spec=spec,
        schedule=schedule,
        down=down,
        up=up,
        mixers=mixers,
        proj=proj,
        router=router,
        biases=biases,
        sigma=sigma,
    )


def init_baseline(
    spec: ArchitectureSpec, rng: RngState, up_init: InitScheme = "zeros"
) -> BaselineParams:
    """
    Allocate MoLRE / MoMOR parameters with one linear gate per order

    Raises:
        ValueError: If the spec describes a structural variant
    """
    spec = spec.checked()
    kind: Literal["molre", "momor"]
    if spec.variant == "molre":
        kind = "molre"
    elif spec.variant == "momor":
        kind = "momor"
    else:
        raise ValueError(f"init_baseline needs molre or momor, got {spec.variant!r}")
    streams = _streams(rng)
    d, d_out = spec.d_model, spec.output_dim
    down = [
        [seeded_init(r, d, "uniform-scaled", next(streams)) for _ in range(s)]
        for s, r in zip(spec.experts, spec.ranks)
    ]
    up = [
        [seeded_init(d_out, r, up_init, next(streams)) for _ in range(s)]
        for s, r in zip(spec.experts, spec.ranks)
    ]
    gates = [seeded_init(s, d, "normal-scaled", next(streams)) for s in spec.experts]
    return BaselineParams(kind=kind, down=down, up=up, gates=gates)


def projection_matrix(rows: int, cols: int) -> Matrix:
    """
    Binary projection [0; I] of shape rows x cols

    Copies a cols-wide embedding into the bottom of a rows-wide one, so
    P(a, b) @ P(b, c) == P(a, c).
    """
    if cols > rows:
        raise ValueError(f"projection needs rows >= cols, got {rows}x{cols}")
    return np.vstack(
        [np.zeros((rows - cols, cols), dtype=np.float64), np.eye(cols, dtype=np.float64)]
    )


def _block_identity(rows: int, rank: int, index: int) -> Matrix:
    """Up-projection writing a rank-r code into block `index` of the new rows"""
    up = np.zeros((rows, rank), dtype=np.float64)
    up[index * rank : (index + 1) * rank] = np.eye(rank, dtype=np.float64)
    return up


def _check_baseline_dimensions(base: BaselineParams) -> None:
    d, d_out = base.d_model, base.d_out
    for order, (downs, ups) in enumerate(zip(base.down, base.up)):
        for expert, (a, b) in enumerate(zip(downs, ups)):
            if a.shape[1] != d or b.shape != (d_out, a.shape[0]):
                raise ValueError(
                    f"dimension schedule mismatch at order {order} expert {expert}: "
                    f"A {a.shape}, B {b.shape}, expected A r x {d} and B {d_out} x r"
                )


def construct_equivalent_molre(base: BaselineParams, rng: RngState) -> ExpertBank:
    """
    One-layer identity-activation bank reproducing a MoLRE

    Each B is a block identity and the projection concatenates the baseline's
    up-projections, so sum_i a_i P E_i A_i x == sum_i a_i B_i A_i x.

    Raises:
        ValueError: If the baseline is not a MoLRE or its ranks differ
    """
    if base.kind != "molre":
        raise ValueError(f"expected a molre baseline, got {base.kind!r}")
    base.ranks()
    return construct_equivalent_momor(base, rng)


def construct_equivalent_momor(base: BaselineParams, rng: RngState) -> ExpertBank:
    """
    Identity-activation SMoRE bank reproducing a MoMOR (or MoLRE at one order)

    Layer l writes expert codes into the top s_l * r_l rows of d_{l+1}; the
    mixers are binary projections that shift earlier content down, so order l
    ends at column offset d_L - d_{l+1} of the final projection, which holds
    the baseline's up-projections.

    Raises:
        ValueError: On rank or dimension mismatches
    """
    ranks = base.ranks()
    _check_baseline_dimensions(base)
    counts = base.expert_counts()
    spec = ArchitectureSpec(
        depth=base.orders,
        experts=counts,
        ranks=ranks,
        fanouts=counts,
        d_model=base.d_model,
        d_out=base.d_out,
        variant="smore",
        activation="identity",
        gate="dense",
    )
    bank = init_bank(spec, rng)
    schedule = bank.schedule
    proj = np.zeros((base.d_out, schedule.final), dtype=np.float64)
    for level, (s, r) in enumerate(zip(counts, ranks)):
        offset = schedule.final - schedule[level + 1]
        for i in range(s):
            bank.down[level][i] = base.down[level][i].copy()
            bank.up[level][i] = _block_identity(schedule[level + 1], r, i)
            proj[:, offset + i * r : offset + (i + 1) * r] = base.up[level][i]
        if level > 0:
            bank.mixers[level] = projection_matrix(schedule[level + 1], schedule[level])
    bank.proj = proj
    return bank


def _require_distinctness_spec(spec: ArchitectureSpec, variant: str) -> ArchitectureSpec:
    spec = spec.checked()
    if spec.activation != "mlp":
        raise ValueError(
            "distinctness construction requires nonlinear σ "
            f"(activation 'mlp'), got {spec.activation!r}"
        )
    if not spec.bias:
        raise ValueError("distinctness construction requires bias terms (bias=true)")
    if spec.variant != variant:
        raise ValueError(f"expected variant {variant!r}, got {spec.variant!r}")
    return spec


def _encoding_bank(
    spec: ArchitectureSpec,
    rng: RngState,
    code: list[list[float]],
    scale: float | None,
) -> ExpertBank:
    """Zero experts, binary-projection mixers and a coded first bias coordinate"""
    streams = _streams(rng)
    bank = init_bank(spec, next(streams))
    schedule = bank.schedule
    for pool in bank.down:
        for expert, down in enumerate(pool):
            pool[expert] = np.zeros_like(down)
    for level in range(1, spec.depth):
        bank.mixers[level] = projection_matrix(schedule[level + 1], schedule[level])
    assert bank.biases is not None
    for level, layer_code in enumerate(code):
        for expert, value in enumerate(layer_code):
            bias = np.zeros(schedule[level + 1], dtype=np.float64)
            bias[0] = value
            bank.biases[level][expert] = bias
    sigma: list[Perceptron] = []
    for level in range(spec.depth):
        width, hidden = sigma_shape(spec, schedule, level)
        sigma.append(
            make_perceptron(
                width, hidden, width, next(streams), random_bias=True, scale=scale
            )
        )
    bank.sigma = sigma
    if spec.output_dim >= schedule.final:
        bank.proj = projection_matrix(spec.output_dim, schedule.final)
    return bank


def construct_distinctness_params(spec: ArchitectureSpec, rng: RngState) -> ExpertBank:
    """
    Parameters under which the output identifies the routing tree's class

    A = B = 0, the first bias coordinate stores the 1-based expert index,
    W_l = P and sigma is a fixed random perceptron; the sum over children of
    a generic perceptron is injective on the small sets enumerated in tests.

    Raises:
        ValueError: Unless activation is 'mlp', biases are on and the variant is smore
    """
    spec = _require_distinctness_spec(spec, "smore")
    code = [[float(i + 1) for i in range(s)] for s in spec.experts]
    return _encoding_bank(spec, rng, code, scale=None)


def construct_star_distinctness_params(
    spec: ArchitectureSpec, rng: RngState
) -> ExpertBank:
    """
    Superincreasing variant for smore-star: expert i carries 2^i

    A sum of distinct powers of two identifies the selected set, so the only
    information lost is what the star layer itself discards.
    """
    spec = _require_distinctness_spec(spec, "smore-star")
    code = [[2.0**i for i in range(s)] for s in spec.experts]
    return _encoding_bank(spec, rng, code, scale=2.0 ** -max(spec.experts))


def flatten_params(bank: ExpertBank, include_router: bool = True) -> Vector:
    """
    Concatenate every tensor in ExpertBank.named_tensors order (row-major)
    """
    parts = [t.ravel() for _, t in bank.named_tensors(include_router)]
    if not parts:
        return np.zeros(0, dtype=np.float64)
    return np.concatenate(parts)


def unflatten_params(
    theta: Vector, template: ExpertBank, include_router: bool = True
) -> ExpertBank:
    """
    New bank shaped like template holding the values of theta

    Tensors left out of the flattening (the router when include_router is
    False) are copied from template.

    Raises:
        ValueError: If theta's length differs from the template's size
    """
    expected = template.size(include_router)
    if theta.shape != (expected,):
        raise ValueError(
            f"parameter vector length mismatch: expected {expected}, got {theta.size}"
        )
    bank = template.copy()
    offset = 0
    for _, tensor in bank.named_tensors(include_router):
        tensor[...] = theta[offset : offset + tensor.size].reshape(tensor.shape)
        offset += tensor.size
    return bank


def save_bank(bank: ExpertBank, directory: Path) -> None:
    """
    Write bank.bin (little-endian float64) and bank.json (spec and shapes)
    """
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "spec": bank.spec.model_dump(mode="json"),
        "version": bank.version,
        "tensors": [
            {"name": name, "shape": list(tensor.shape)}
            for name, tensor in bank.named_tensors()
        ],
    }
    (directory / _MANIFEST).write_text(
        json.dumps(manifest, indent=2) + "\n", encoding="utf-8"
    )
    flatten_params(bank).astype(_LITTLE_ENDIAN_F64).tofile(directory / _PAYLOAD)


def load_bank(directory: Path) -> ExpertBank:
    """
    Read a bank written by save_bank; values round-trip bit-exactly

    Raises:
        ValueError: If the manifest does not match the spec's shapes
    """
    manifest = json.loads((directory / _MANIFEST).read_text(encoding="utf-8"))
    spec = ArchitectureSpec.model_validate(manifest["spec"], strict=False)
    template = init_bank(spec, RngState(0))
    expected = [
        {"name": name, "shape": list(tensor.shape)}
        for name, tensor in template.named_tensors()
    ]
    if manifest["tensors"] != expected:
        raise ValueError(f"bank manifest in {directory} does not match its spec")
    theta = np.fromfile(directory / _PAYLOAD, dtype=_LITTLE_ENDIAN_F64)
    bank = unflatten_params(theta.astype(np.float64), template)
    bank.version = int(manifest["version"])
    return bank
