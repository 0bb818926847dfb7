"""
Closed-form parameter and FLOP counts

A p x q matrix-vector product costs p * q multiply-accumulates; additions
and activations are not counted.
"""

from collections.abc import Iterable
from ..models.config import ArchitectureSpec, dimension_schedule, total_fanout
from ..models.reports import CostReport, CostRow, RouterCostRow
from .experts import expert_pools, sigma_shape

# Shape of the overhead tables: d = 4096, four experts, two children per parent
TABLE_D_MODEL = 4096
TABLE_EXPERTS = 4
TABLE_FANOUT = 2
TABLE_ROWS: tuple[tuple[int, int], ...] = tuple(
    (r, depth) for r in (8, 16) for depth in (2, 3, 4)
)

# Router grid: d = 2048, d_down = 24, m = 16
ROUTER_D_MODEL = 2048
ROUTER_D_DOWN = 24
ROUTER_KEY_DIM = 16
ROUTER_RANKS: tuple[int, ...] = (8, 16, 32, 64)
ROUTER_DEPTHS: tuple[int, ...] = (2, 3)


def _perceptron_size(in_dim: int, hidden: int, out_dim: int) -> int:
    return in_dim * hidden + hidden + hidden * out_dim + out_dim


def _main_term(spec: ArchitectureSpec) -> int:
    final = dimension_schedule(spec).final
    return spec.d_model * final + spec.output_dim * final


def _expert_tensor_size(spec: ArchitectureSpec) -> int:
    """A, B, mixers and projection of a structural bank"""
    schedule = dimension_schedule(spec)
    total = 0
    for pool in expert_pools(spec):
        s, r = spec.experts[pool], spec.ranks[pool]
        total += s * r * spec.d_model + s * schedule[pool + 1] * r
    for level in range(spec.depth):
        total += schedule[level + 1] * schedule[level]
    return total + spec.output_dim * schedule.final


def _bias_params(spec: ArchitectureSpec) -> int:
    if not spec.bias or not spec.is_structural:
        return 0
    schedule = dimension_schedule(spec)
    return sum(s * schedule[level + 1] for level, s in enumerate(spec.experts))


def _sigma_params(spec: ArchitectureSpec) -> int:
    if spec.activation != "mlp" or not spec.is_structural:
        return 0
    schedule = dimension_schedule(spec)
    total = 0
    for level in range(spec.depth):
        width, hidden = sigma_shape(spec, schedule, level)
        total += _perceptron_size(width, hidden, width)
    return total


def _query_input(spec: ArchitectureSpec, level: int) -> int:
    return spec.d_down + (spec.depth - level - 1) * spec.key_dim


def router_params(spec: ArchitectureSpec) -> int:
    """Stored router weights for either routing direction, or baseline gates"""
    d_down, m = spec.d_down, spec.key_dim
    noisy = spec.gate == "noisy-topk"
    if not spec.is_structural:
        return sum(s * spec.d_model for s in spec.experts)
    total = d_down * spec.d_model
    if spec.routing == "bottom-up":
        schedule = dimension_schedule(spec)
        leaf = total_fanout(spec, 1) * spec.experts[0] * d_down
        total += leaf * (2 if noisy else 1)
        for level in range(1, spec.depth):
            out_dim = spec.experts[level] * (2 if noisy else 1)
            total += total_fanout(spec, level) * d_down
            total += _perceptron_size(schedule[level] + d_down, m, out_dim)
        return total
    for level, s in enumerate(spec.experts):
        total += _perceptron_size(_query_input(spec, level), m, m)
        total += s * m * (2 if noisy else 1)
    return total


def router_flops(spec: ArchitectureSpec) -> int:
    """
    Eval-mode router work per token

    Top-down: the token projection plus, for every parent routed at pool l,
    one query evaluation and s_l key dot products.
    """
    d_down, m = spec.d_down, spec.key_dim
    if not spec.is_structural:
        return sum(s * spec.d_model for s in spec.experts)
    total = d_down * spec.d_model
    if spec.routing == "bottom-up":
        schedule = dimension_schedule(spec)
        total += total_fanout(spec, 1) * spec.experts[0] * d_down
        for level in range(1, spec.depth):
            per_position = (schedule[level] + d_down) * m + m * spec.experts[level]
            total += total_fanout(spec, level) * per_position
        return total
    for level, s in enumerate(spec.experts):
        per_parent = _query_input(spec, level) * m + m * m + s * m
        total += total_fanout(spec, level + 1) * per_parent
    return total


def expert_flops(spec: ArchitectureSpec) -> int:
    """
    Exact per-token propagation FLOPs of this implementation

    A x and B A x are computed once per distinct (pool, expert), at most
    min(s_l, F_l) per layer; each node pays its own mixer product.
    """
    if not spec.is_structural:
        return sum(
            f * r * (spec.d_model + spec.output_dim)
            for f, r in zip(spec.effective_fanouts, spec.ranks)
        )
    schedule = dimension_schedule(spec)
    total = 0
    for level in range(spec.depth):
        nodes = total_fanout(spec, level)
        distinct = min(spec.experts[level], nodes)
        r = spec.ranks[level]
        total += distinct * r * (spec.d_model + schedule[level + 1])
        total += nodes * schedule[level] * schedule[level + 1]
    return total + spec.output_dim * schedule.final


def param_count(spec: ArchitectureSpec) -> CostReport:
    """
    Trainable parameters split into the table terms

    main = d d_L + d_out d_L (2 d d_L when d_out = d). delta is every other
    expert-tensor weight, sum over layers of d_l^2 for SMoRE and 0 for the
    single-layer baselines. Biases and mlp activations are counted apart.
    """
    spec = spec.checked()
    main = _main_term(spec)
    delta = _expert_tensor_size(spec) - main if spec.is_structural else 0
    return CostReport(
        main=main,
        delta=delta,
        router=router_params(spec),
        bias=_bias_params(spec),
        sigma=_sigma_params(spec),
    )


def flop_count(spec: ArchitectureSpec) -> CostReport:
    """
    Per-token FLOPs: main = 2 d d_L and the overhead bound
    sum_l F_l d_{l+1} (d_l + r_l)
    """
    spec = spec.checked()
    delta = 0
    if spec.is_structural:
        schedule = dimension_schedule(spec)
        for level in range(spec.depth):
            delta += (
                total_fanout(spec, level)
                * schedule[level + 1]
                * (schedule[level] + spec.ranks[level])
            )
    return CostReport(
        main=_main_term(spec),
        delta=delta,
        router=router_flops(spec),
        experts=expert_flops(spec),
    )


def router_cost_ratio(spec: ArchitectureSpec) -> float:
    """Router FLOPs per token over expert-propagation FLOPs per token"""
    report = flop_count(spec)
    return report.router / report.experts if report.experts else 0.0


def table_spec(
    rank: int,
    depth: int,
    d_model: int = TABLE_D_MODEL,
    experts: int = TABLE_EXPERTS,
    fanout: int = TABLE_FANOUT,
) -> ArchitectureSpec:
    return ArchitectureSpec.uniform(
        depth, experts, rank, fanout, d_model=d_model, gate="switch"
    ).checked()


def cost_table(
    rows: Iterable[tuple[int, int]],
    kind: str = "params",
    d_model: int = TABLE_D_MODEL,
    experts: int = TABLE_EXPERTS,
    fanout: int = TABLE_FANOUT,
) -> list[CostRow]:
    """
    Overhead table rows for (rank, depth) pairs

    Args:
        rows: (r, L) pairs in output order
        kind: "params" for parameter overhead, "flops" for the FLOP bound
        d_model: Token width d
        experts: Experts per layer
        fanout: Children per parent

    Raises:
        ValueError: On an unknown kind
    """
    if kind not in ("params", "flops"):
        raise ValueError(f"cost table kind must be 'params' or 'flops', got {kind!r}")
    count = param_count if kind == "params" else flop_count
    table: list[CostRow] = []
    for rank, depth in rows:
        spec = table_spec(rank, depth, d_model, experts, fanout)
        report = count(spec)
        table.append(
            CostRow(
                rank=rank,
                depth=depth,
                d_final=dimension_schedule(spec).final,
                main=report.main,
                delta=report.delta,
            )
        )
    return table


def router_cost_grid(
    ranks: Iterable[int] = ROUTER_RANKS,
    depths: Iterable[int] = ROUTER_DEPTHS,
    d_model: int = ROUTER_D_MODEL,
    d_down: int = ROUTER_D_DOWN,
    key_dim: int = ROUTER_KEY_DIM,
    experts: int = TABLE_EXPERTS,
    fanout: int = TABLE_FANOUT,
) -> list[RouterCostRow]:
    grid: list[RouterCostRow] = []
    for depth in depths:
        for rank in ranks:
            spec = ArchitectureSpec.uniform(
                depth,
                experts,
                rank,
                fanout,
                d_model=d_model,
                d_down=d_down,
                key_dim=key_dim,
                gate="switch",
            ).checked()
            grid.append(
                RouterCostRow(
                    rank=rank,
                    depth=depth,
                    router_flops=router_flops(spec),
                    expert_flops=expert_flops(spec),
                )
            )
    return grid


def format_millions(value: int) -> str:
    """0.5M style, as printed for the main term"""
    return f"{value / 1e6:.1f}M"


def format_overhead(value: int) -> str:
    """0.005M style, as printed for the overhead term"""
    return f"{value / 1e6:.3f}M"


def format_ratio(ratio: float) -> str:
    return f"{100 * ratio:.1f}%"
